use std::process::ExitCode;

fn main() -> ExitCode {
    let out = biper_cli::execute(std::env::args_os());
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    ExitCode::from(out.code)
}
