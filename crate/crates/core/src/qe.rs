//! Quantization-error analytics for `w_hat = sin(omega0 * w)` with
//! Laplace-distributed latent weights `w ~ La(0, b)`.
//!
//! Every closed form here depends on `omega0` and `b` only through the
//! product `x = omega0 * b`. The ratio `(e^{pi/x} + 1) / (e^{pi/x} - 1)` that
//! appears in the scale and the error is evaluated as `coth(pi / (2x))`,
//! which saturates to 1 instead of overflowing for small `x`.
//!
//! The Monte Carlo and quadrature routines at the bottom of the module are
//! independent oracles for the closed forms.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quantization::{mean_abs, sign};

/// Zero-mean Laplace distribution `La(0, b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceModel {
    b: f64,
}

impl LaplaceModel {
    pub fn new(b: f64) -> Result<Self> {
        if b > 0.0 && b.is_finite() {
            Ok(Self { b })
        } else {
            Err(invalid(format!("Laplace scale b must be positive and finite, got {}", b)))
        }
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn density(&self, w: f64) -> f64 {
        (-w.abs() / self.b).exp() / (2.0 * self.b)
    }

    /// Draws `n` samples as `b * Exp(1)` with a random sign.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }

    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e: f64 = Exp1.sample(rng);
        if rng.gen::<bool>() {
            self.b * e
        } else {
            -self.b * e
        }
    }
}

/// One point of a QE curve, optionally with a sampled density of `w_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QeReport {
    pub omega0: f64,
    pub b: f64,
    pub gamma: f64,
    pub qe: f64,
    pub pdf_grid: Vec<(f64, f64)>,
}

/// Maximum-likelihood `b` of a zero-mean Laplace: the mean absolute value.
pub fn fit_laplace(w: &[f64]) -> Result<LaplaceModel> {
    if w.is_empty() {
        return Err(invalid("cannot fit a Laplace model to an empty tensor"));
    }
    let b = mean_abs(w);
    if b == 0.0 {
        return Err(invalid("cannot fit a Laplace model to all-zero weights"));
    }
    LaplaceModel::new(b)
}

fn check_omega(omega0: f64) -> Result<()> {
    if omega0 > 0.0 && omega0.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("omega0 must be positive, got {}", omega0)))
    }
}

fn check_unit(w_hat: f64) -> Result<()> {
    if w_hat.abs() < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("density of w_hat is only defined on (-1, 1), got {}", w_hat)))
    }
}

/// `coth(pi / (2x)) = (e^{pi/x} + 1) / (e^{pi/x} - 1)`
#[inline]
fn exp_ratio(x: f64) -> f64 {
    1.0 / (FRAC_PI_2 / x).tanh()
}

/// `cosh(t/x) / (e^{pi/x} - 1)` for `|t| <= pi/2`, without overflow.
#[inline]
fn cosh_tail(t: f64, x: f64) -> f64 {
    // cosh(t/x) / (e^{pi/x} - 1) = (e^{(t-pi)/x} + e^{(-t-pi)/x}) / (2 (1 - e^{-pi/x}))
    let denom = -(-PI / x).exp_m1();
    (((t - PI) / x).exp() + ((-t - PI) / x).exp()) / (2.0 * denom)
}

/// Optimal scale `E|sin(omega0 w)|` as a function of `x = omega0 * b`.
pub fn gamma_of_product(x: f64) -> f64 {
    x * exp_ratio(x) / (x * x + 1.0)
}

/// Quantization error at scale `gamma` as a function of `x = omega0 * b`.
pub fn qe_of_product(x: f64, gamma: f64) -> f64 {
    2.0 * x * x / (4.0 * x * x + 1.0) - 2.0 * gamma * gamma_of_product(x) + gamma * gamma
}

/// Quantization error at the optimal scale, as a function of `x = omega0 * b`.
pub fn qe_optimal_of_product(x: f64) -> f64 {
    let g = gamma_of_product(x);
    2.0 * x * x / (4.0 * x * x + 1.0) - g * g
}

pub fn gamma_optimal(omega0: f64, model: LaplaceModel) -> Result<f64> {
    check_omega(omega0)?;
    Ok(gamma_of_product(omega0 * model.b()))
}

pub fn qe_closed_form(omega0: f64, model: LaplaceModel, gamma: f64) -> Result<f64> {
    check_omega(omega0)?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be non-negative, got {}", gamma)));
    }
    Ok(qe_of_product(omega0 * model.b(), gamma))
}

/// Closed-form density of `w_hat = sin(omega0 w)` on `(-1, 1)`.
///
/// `f(w_hat) = 1/(2x sqrt(1 - w_hat^2)) * [exp(-|asin w_hat| / x) + 2 cosh(asin(w_hat) / x) / (e^{pi/x} - 1)]`
/// with `x = omega0 * b`. The first term is the principal branch `k = 0`,
/// the second collects the branches `k != 0` pairwise.
pub fn pdf_transformed(w_hat: f64, omega0: f64, model: LaplaceModel) -> Result<f64> {
    check_omega(omega0)?;
    check_unit(w_hat)?;
    let x = omega0 * model.b();
    let t = w_hat.asin();
    Ok(pdf_theta(t, x) / (1.0 - w_hat * w_hat).sqrt())
}

/// `f(sin t) * cos t`, the density in the angle variable; smooth on `[-pi/2, pi/2]`.
fn pdf_theta(t: f64, x: f64) -> f64 {
    ((-t.abs() / x).exp() + 2.0 * cosh_tail(t, x)) / (2.0 * x)
}

/// Truncated branch sum over `k in [-K, K]` of `f_W(w_k) / |omega0 cos(omega0 w_k)|`
/// with `omega0 w_k = (-1)^k asin(w_hat) + pi k`.
pub fn pdf_partial_sum(w_hat: f64, omega0: f64, model: LaplaceModel, k_max: usize) -> Result<f64> {
    check_omega(omega0)?;
    check_unit(w_hat)?;
    let t = w_hat.asin();
    let jac = omega0 * (1.0 - w_hat * w_hat).sqrt();
    let term = |k: i64| {
        let s = if k % 2 == 0 { t } else { -t };
        let w_k = (s + PI * k as f64) / omega0;
        model.density(w_k) / jac
    };
    let mut total = term(0);
    for k in 1..=k_max as i64 {
        total += term(k) + term(-k);
    }
    Ok(total)
}

/// Density samples on a grid uniform in `asin(w_hat)`, so that points
/// concentrate where the density diverges.
pub fn pdf_grid(omega0: f64, model: LaplaceModel, points: usize) -> Result<Vec<(f64, f64)>> {
    check_omega(omega0)?;
    let h = PI / points as f64;
    (0..points)
        .map(|i| {
            let w_hat = (-FRAC_PI_2 + (i as f64 + 0.5) * h).sin();
            Ok((w_hat, pdf_transformed(w_hat, omega0, model)?))
        })
        .collect()
}

pub fn qe_report(omega0: f64, model: LaplaceModel, pdf_points: usize) -> Result<QeReport> {
    let gamma = gamma_optimal(omega0, model)?;
    let qe = qe_closed_form(omega0, model, gamma)?;
    let pdf_grid = if pdf_points > 0 {
        pdf_grid(omega0, model, pdf_points)?
    } else {
        Vec::new()
    };
    Ok(QeReport {
        omega0,
        b: model.b(),
        gamma,
        qe,
        pdf_grid,
    })
}

/// QE at the optimal scale for each frequency of the grid.
pub fn qe_curve(model: LaplaceModel, omega_grid: &[f64]) -> Result<Vec<QeReport>> {
    omega_grid.iter().map(|&w| qe_report(w, model, 0)).collect()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) || n == 0 {
        return Err(invalid(format!("invalid log grid [{}, {}] with {} points", lo, hi, n)));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// Golden-section search for the maximizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Location `x* = omega0 * b` and value of the maximum QE at optimal scale.
pub fn qe_peak() -> (f64, f64) {
    let x = golden_section_max(qe_optimal_of_product, 0.1, 10.0, 1e-10);
    (x, qe_optimal_of_product(x))
}

pub fn write_curve_csv<W: Write>(out: W, reports: &[QeReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["omega0", "b", "gamma", "qe"])?;
    for r in reports {
        w.write_record(&[
            format!("{:.10e}", r.omega0),
            format!("{:.10e}", r.b),
            format!("{:.12e}", r.gamma),
            format!("{:.12e}", r.qe),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `(w_hat, density, mass)` rows where `mass` is the density times the
/// width of the cell around each grid point (cells meet halfway between
/// points in `asin(w_hat)`; the outer cells extend to +-1).
pub fn write_pdf_csv<W: Write>(out: W, grid: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["w_hat", "density", "mass"])?;
    for (i, &(x, d)) in grid.iter().enumerate() {
        let edge = |a: f64, b: f64| (0.5 * (a.asin() + b.asin())).sin();
        let left = if i == 0 { -1.0 } else { edge(grid[i - 1].0, x) };
        let right = if i + 1 == grid.len() { 1.0 } else { edge(x, grid[i + 1].0) };
        w.write_record(&[
            format!("{:.10e}", x),
            format!("{:.12e}", d),
            format!("{:.12e}", d * (right - left)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Empirical analogue of the QE integral for one layer of latent weights.
///
/// `w_hat` holds the pre-binarization values laid out `[rows, row_len]`;
/// each row is scaled by its own mean absolute value.
pub fn empirical_qe(w_hat: &[f64], row_len: usize) -> Result<f64> {
    if w_hat.is_empty() || row_len == 0 || w_hat.len() % row_len != 0 {
        return Err(invalid("empirical QE needs a non-empty [rows, row_len] tensor"));
    }
    let mut total = 0.0;
    for row in w_hat.chunks(row_len) {
        let gamma = mean_abs(row);
        total += row.iter().map(|&v| (v - gamma * sign(v)).powi(2)).sum::<f64>();
    }
    Ok(total / w_hat.len() as f64)
}

// ---------------------------------------------------------------------------
// Independent oracles: adaptive quadrature and Monte Carlo.

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_KRONROD: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GK_GAUSS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point Gauss rule.
fn gauss_kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_KRONROD[7] * fc;
    let mut gauss = GK_GAUSS[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        kronrod += GK_KRONROD[i] * s;
        if i % 2 == 1 {
            gauss += GK_GAUSS[i / 2] * s;
        }
    }
    (kronrod * h, (kronrod - gauss).abs() * h)
}

/// Adaptive Gauss-Kronrod integration of a smooth integrand to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, whole: f64, err: f64, depth: u32) -> f64 {
        if err <= tol || depth == 0 {
            return whole;
        }
        let m = 0.5 * (a + b);
        let (l, el) = gauss_kronrod(f, a, m);
        let (r, er) = gauss_kronrod(f, m, b);
        rec(f, a, m, 0.5 * tol, l, el, depth - 1) + rec(f, m, b, 0.5 * tol, r, er, depth - 1)
    }
    let (whole, err) = gauss_kronrod(&f, a, b);
    rec(&f, a, b, tol, whole, err, 40)
}

/// `integral of f_W_hat over (-1, 1)` via the substitution `w_hat = sin(theta)`,
/// which removes the endpoint singularities.
pub fn pdf_integral(omega0: f64, model: LaplaceModel, tol: f64) -> Result<f64> {
    check_omega(omega0)?;
    let f = |t: f64| pdf_transformed(t.sin(), omega0, model).map(|d| d * t.cos()).unwrap_or(0.0);
    // the |asin| kink sits at zero
    Ok(integrate(f, -FRAC_PI_2, 0.0, tol / 2.0) + integrate(f, 0.0, FRAC_PI_2, tol / 2.0))
}

/// `E[g(sin(omega0 w))]` for an even `g`, by quadrature of the one-sided
/// Laplace density over half-periods of the sine.
pub fn laplace_expectation(omega0: f64, model: LaplaceModel, g: impl Fn(f64) -> f64, tol: f64) -> Result<f64> {
    check_omega(omega0)?;
    let x = omega0 * model.b();
    // u = omega0 * w; density (1/x) e^{-u/x} on u >= 0
    let f = |u: f64| (-u / x).exp() / x * g(u.sin());
    let u_max = 40.0 * x + PI;
    let pieces = (u_max / PI).ceil() as usize;
    let per = tol / pieces as f64;
    Ok((0..pieces)
        .map(|k| integrate(&f, k as f64 * PI, (k + 1) as f64 * PI, per))
        .sum())
}

/// Monte Carlo estimates of `(E|sin(omega0 w)|, E[(sin(omega0 w) - gamma Sign(sin(omega0 w)))^2])`.
pub fn monte_carlo_qe<R: Rng + ?Sized>(
    rng: &mut R,
    omega0: f64,
    model: LaplaceModel,
    gamma: f64,
    samples: usize,
) -> (f64, f64) {
    let mut abs_sum = 0.0;
    let mut qe_sum = 0.0;
    for _ in 0..samples {
        let s = (model.draw(rng) * omega0).sin();
        abs_sum += s.abs();
        qe_sum += (s - gamma * sign(s)).powi(2);
    }
    (abs_sum / samples as f64, qe_sum / samples as f64)
}
