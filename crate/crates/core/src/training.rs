//! Two-stage training: SGD with momentum, cosine schedule, augmentation,
//! evaluation, run records, and the frequency ablation harness.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{permutation, Dataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::layers::{ForwardOutput, Mode, Model, ModelSpec, PackedWeights, Stage};
use crate::qe::{empirical_qe, fit_laplace};
use crate::quantization::{Method, QuantSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    #[serde(default)]
    pub crop: bool,
    #[serde(default)]
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub augment: Augment,
}

impl TrainConfig {
    /// lr 0.1, weight decay 5e-4.
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Stage1,
            epochs: 10,
            batch_size: 64,
            lr0: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            scheduler: Scheduler::Cosine,
            seed: 0,
            augment: Augment::default(),
        }
    }

    /// lr 0.01, weight decay 5e-5.
    pub fn stage2() -> Self {
        Self {
            stage: Stage::Stage2,
            lr0: 0.01,
            weight_decay: 5e-5,
            ..Self::stage1()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Stage1 => Self::stage1(),
            Stage::Stage2 => Self::stage2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match self.scheduler {
            Scheduler::Cosine => cosine_lr(epoch, self.epochs, self.lr0),
            Scheduler::Constant => Ok(self.lr0),
        }
    }
}

/// `v <- momentum * v + (grad + wd * param); param <- param - lr * v`
pub fn sgd_momentum_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(shape_err(
            "sgd_momentum_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(invalid(format!("epoch {} outside 0..{}", epoch, total_epochs)));
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub fn flip_horizontal(img: &mut [f64], width: usize) {
    for row in img.chunks_mut(width) {
        row.reverse();
    }
}

/// Random crop from the image zero-padded by `pad` on every side.
pub fn crop_shifted(img: &mut [f64], channels: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) {
    let src = img.to_vec();
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = ((y + dy) as isize - pad as isize, (x + dx) as isize - pad as isize);
                img[(c * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[(c * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

pub const CROP_PAD: usize = 4;

/// Random 4-pad crop and p = 0.5 horizontal flip, per sample, for `[N, C, H, W]` batches.
pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor, flags: Augment, rng: &mut R) -> Result<()> {
    if !flags.crop && !flags.flip {
        return Ok(());
    }
    let &[n, c, h, w] = batch.shape() else {
        return Err(shape_err("augment", format!("expected [N, C, H, W], got {:?}", batch.shape())));
    };
    let per = c * h * w;
    for i in 0..n {
        let img = &mut batch.data_mut()[i * per..(i + 1) * per];
        if flags.crop {
            let dy = rng.gen_range(0..=2 * CROP_PAD);
            let dx = rng.gen_range(0..=2 * CROP_PAD);
            crop_shifted(img, c, h, w, CROP_PAD, dy, dx);
        }
        if flags.flip && rng.gen_bool(0.5) {
            flip_horizontal(img, w);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: Option<f64>,
}

pub const EVAL_BATCH: usize = 256;

/// Top-1 (and top-5 when there are at least 10 classes) accuracy in eval mode.
pub fn evaluate(model: &mut Model, data: &Dataset, stage: Stage, packed: Option<&PackedWeights>) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty split"));
    }
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.gather(chunk);
        let logits = model.predict(&x, stage, packed)?;
        let k = logits.row_len();
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let above = row.iter().filter(|&&v| v > row[label]).count();
            hit1 += usize::from(above == 0);
            hit5 += usize::from(above < 5);
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: hit1 as f64 / n,
        top5: (data.classes >= 10).then(|| hit5 as f64 / n),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQe {
    pub name: String,
    /// Empirical QE of binarizing `w_hat` with per-channel mean-abs scales.
    pub qe: f64,
    /// Laplace scale fitted to the latent weights.
    pub b_hat: f64,
}

/// Latent-weight gradient bound of the periodic surrogate, tracked every step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradBound {
    pub checks: usize,
    pub violations: usize,
    /// Largest observed `|dL/dw|_inf / bound`.
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub method: Method,
    pub omega0: f64,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Per-layer QE and b_hat of the weights the run started from.
    pub initial_layers: Vec<LayerQe>,
    pub final_layers: Vec<LayerQe>,
    /// Validation accuracy of the stored (storage-rounded) parameters.
    pub final_accuracy: Accuracy,
    pub grad_bound: GradBound,
}

impl RunRecord {
    pub fn initial_qe(&self) -> f64 {
        mean_qe(&self.initial_layers)
    }

    pub fn final_qe(&self) -> f64 {
        mean_qe(&self.final_layers)
    }

    pub fn final_b_hat(&self) -> f64 {
        let n = self.final_layers.len().max(1) as f64;
        self.final_layers.iter().map(|l| l.b_hat).sum::<f64>() / n
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{}.csv", stem)))?)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(format!("{}.json", stem)), json)?;
        Ok(())
    }
}

fn mean_qe(layers: &[LayerQe]) -> f64 {
    let n = layers.len().max(1) as f64;
    layers.iter().map(|l| l.qe).sum::<f64>() / n
}

/// QE and fitted Laplace scale of every binary layer.
pub fn layer_report(model: &Model) -> Result<Vec<LayerQe>> {
    model
        .binary_params()
        .into_iter()
        .map(|i| {
            let p = &model.store.params[i];
            let w_hat = p.value.map(|v| model.quant.pre_binarization(v));
            Ok(LayerQe {
                name: p.name.clone(),
                qe: empirical_qe(w_hat.data(), p.value.row_len())?,
                b_hat: fit_laplace(p.value.data())?.b(),
            })
        })
        .collect()
}

/// Bound on `|dL/dw|_inf` implied by the surrogate: `omega0` times the
/// largest upstream gradient, plus the scale path when it is differentiable.
fn surrogate_bound(tape: &Tape, out: &ForwardOutput, model: &Model, probe: usize) -> Option<f64> {
    let p = &out.probes[probe];
    let gq = tape.grad(p.weights)?;
    let row_len = model.store.params[p.param].value.row_len();
    let rows = gq.len() / row_len;
    let gamma_grad = p.gamma.and_then(|g| tape.grad(g));
    let mut bound: f64 = 0.0;
    for r in 0..rows {
        let up = gq[r * row_len..(r + 1) * row_len]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let via_gamma = match gamma_grad {
            Some(gg) if gg.len() == rows => gg[r].abs() / row_len as f64,
            Some(gg) => gg[0].abs() / gq.len() as f64,
            None => 0.0,
        };
        bound = bound.max(up + via_gamma);
    }
    Some(model.quant.omega0 * bound)
}

fn diverged(stage: Stage, epoch: usize, step: usize, what: impl std::fmt::Display) -> Error {
    Error::Diverged(format!(
        "stage {} epoch {} step {}: {} (try a smaller lr0)",
        stage.number(),
        epoch,
        step,
        what
    ))
}

/// Trains `model` for `cfg.stage`, in place. The parameters are rounded to
/// checkpoint precision before the final evaluation so a saved checkpoint
/// reproduces `final_accuracy` exactly.
pub fn train(model: &mut Model, cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training split"));
    }
    let stage = cfg.stage;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stage.number() as u64);
    let mut velocity: Vec<Vec<f64>> = model.store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    let track_bound = model.quant.method == Method::BiPer;
    let mut record = RunRecord {
        stage,
        method: model.quant.method,
        omega0: model.quant.omega0,
        seed: cfg.seed,
        epochs: Vec::new(),
        initial_layers: layer_report(model)?,
        final_layers: Vec::new(),
        final_accuracy: Accuracy { top1: 0.0, top5: None },
        grad_bound: GradBound::default(),
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let order = permutation(train.len(), &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = train.gather(batch);
            augment(&mut x, cfg.augment, &mut rng)?;
            let mut tape = Tape::new();
            let input = tape.constant(&x)?;
            let out = model
                .forward(&mut tape, input, stage, Mode::Train, None)
                .map_err(|e| diverged(stage, epoch, step, e))?;
            if track_bound {
                for p in &out.probes {
                    tape.retain_grad(p.weights);
                    if let Some(g) = p.gamma {
                        tape.retain_grad(g);
                    }
                }
            }
            let loss = tape.softmax_cross_entropy(out.logits, &y)?;
            let lv = tape.value(loss)[0];
            if !lv.is_finite() {
                return Err(diverged(stage, epoch, step, format!("loss {}", lv)));
            }
            let logits = tape.value(out.logits);
            let k = logits.len() / y.len();
            for (row, &label) in logits.chunks(k).zip(&y) {
                correct += usize::from(row.iter().all(|&v| v <= row[label]));
            }
            loss_sum += lv * y.len() as f64;
            tape.backward(loss).map_err(|e| diverged(stage, epoch, step, e))?;
            model.collect_grads(&tape, &out)?;
            if track_bound {
                for (i, p) in out.probes.iter().enumerate() {
                    let Some(bound) = surrogate_bound(&tape, &out, model, i) else { continue };
                    let g = model.store.params[p.param].value.grad().unwrap_or(&[]);
                    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let gb = &mut record.grad_bound;
                    gb.checks += 1;
                    if gmax > bound * (1.0 + 1e-12) {
                        gb.violations += 1;
                    }
                    if bound > 0.0 {
                        gb.max_ratio = gb.max_ratio.max(gmax / bound);
                    }
                }
            }
            for (p, v) in model.store.params.iter_mut().zip(velocity.iter_mut()) {
                let wd = if p.decays() { cfg.weight_decay } else { 0.0 };
                let g = p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
                sgd_momentum_step(p.value.data_mut(), &g, v, lr, cfg.momentum, wd)?;
                p.value.zero_grad();
            }
        }
        let val_accuracy = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(model, val, stage, None)?.top1
        };
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        });
    }
    model.round_to_storage();
    record.final_layers = layer_report(model)?;
    let eval_split = if val.is_empty() { train } else { val };
    record.final_accuracy = evaluate(model, eval_split, stage, None)?;
    Ok(record)
}

/// Builds a model from `spec` (initialized from `cfg.seed`) and runs stage 1.
pub fn train_stage1(
    spec: ModelSpec,
    quant: QuantSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(Model, RunRecord)> {
    if cfg.stage != Stage::Stage1 {
        return Err(invalid("train_stage1 needs a stage-1 config"));
    }
    let mut model = Model::build(spec, quant, cfg.seed)?;
    let record = train(&mut model, cfg, train_set, val)?;
    Ok((model, record))
}

/// Warm-starts from a stage-1 model and trains with binarized weights.
pub fn train_stage2(
    warm: &Model,
    warm_stage: Stage,
    spec: &ModelSpec,
    quant: &QuantSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(Model, RunRecord)> {
    if cfg.stage != Stage::Stage2 {
        return Err(invalid("train_stage2 needs a stage-2 config"));
    }
    if warm_stage != Stage::Stage1 {
        return Err(invalid("stage 2 must warm-start from a stage-1 checkpoint"));
    }
    if &warm.spec != spec {
        return Err(invalid(format!(
            "architecture mismatch: warm start is {:?}, config asks for {:?}",
            warm.spec.architecture, spec.architecture
        )));
    }
    if warm.quant.method != quant.method || warm.quant.omega0 != quant.omega0 {
        return Err(invalid(format!(
            "quantizer mismatch: warm start uses {:?} with omega0 {}, config asks for {:?} with omega0 {}",
            warm.quant.method, warm.quant.omega0, quant.method, quant.omega0
        )));
    }
    let mut model = warm.clone().with_quant(quant.clone())?;
    let record = train(&mut model, cfg, train_set, val)?;
    Ok((model, record))
}

/// Stage-2 warm start from a checkpoint on disk.
pub fn train_stage2_from_checkpoint(
    warm: &Checkpoint,
    spec: &ModelSpec,
    quant: &QuantSpec,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(Model, RunRecord)> {
    let (model, stage) = Model::from_checkpoint(warm)?;
    train_stage2(&model, stage, spec, quant, cfg, train_set, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub omega0: f64,
    pub seed: u64,
    pub precision: f64,
    pub qe: f64,
    pub b_hat: f64,
}

/// Medians over seeds at one frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub omega0: f64,
    pub precision: f64,
    pub qe: f64,
    pub b_hat: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stage-1 BiPer runs for every `(omega0, seed)` pair, with per-frequency medians.
pub fn ablate_omega(
    spec: &ModelSpec,
    base: &QuantSpec,
    cfg: &TrainConfig,
    omegas: &[f64],
    seeds: &[u64],
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(Vec<AblationRun>, Vec<AblationPoint>)> {
    if omegas.is_empty() || seeds.is_empty() {
        return Err(invalid("ablation needs at least one frequency and one seed"));
    }
    let mut runs = Vec::new();
    let mut points = Vec::new();
    for &omega0 in omegas {
        let quant = QuantSpec {
            method: Method::BiPer,
            omega0,
            ..base.clone()
        };
        let mut at = Vec::new();
        for &seed in seeds {
            let c = TrainConfig {
                seed,
                stage: Stage::Stage1,
                ..cfg.clone()
            };
            let (_, rec) = train_stage1(spec.clone(), quant.clone(), &c, train_set, val)?;
            at.push(AblationRun {
                omega0,
                seed,
                precision: rec.final_accuracy.top1,
                qe: rec.final_qe(),
                b_hat: rec.final_b_hat(),
            });
        }
        let col = |f: fn(&AblationRun) -> f64| median(&at.iter().map(f).collect::<Vec<_>>());
        points.push(AblationPoint {
            omega0,
            precision: col(|r| r.precision),
            qe: col(|r| r.qe),
            b_hat: col(|r| r.b_hat),
        });
        runs.extend(at);
    }
    Ok((runs, points))
}

/// Writes `ablation.csv` (one median row per frequency), the three per-panel
/// files `ablation_{precision,qe,b_hat}.csv`, and every run to `ablation_runs.csv`.
pub fn write_ablation(dir: &Path, runs: &[AblationRun], points: &[AblationPoint]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    let panels: [(&str, fn(&AblationPoint) -> f64); 3] =
        [("precision", |p| p.precision), ("qe", |p| p.qe), ("b_hat", |p| p.b_hat)];
    for (name, f) in panels {
        let mut w = csv::Writer::from_path(dir.join(format!("ablation_{}.csv", name)))?;
        w.write_record(["omega0", name])?;
        for p in points {
            w.write_record([p.omega0.to_string(), f(p).to_string()])?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(dir.join("ablation_runs.csv"))?;
    for r in runs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_two_moons_like;
    use crate::layers::Architecture;

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn two_momentum_steps_total_update() {
        let (lr, m, g) = (0.1, 0.9, 0.5);
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[g], &mut v, lr, m, 0.0).unwrap();
        sgd_momentum_step(&mut p, &[g], &mut v, lr, m, 0.0).unwrap();
        assert!((p[0] - (-lr * g * (2.0 + m))).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(p) = 0.5 * sum a_i (p_i - c_i)^2
        let a = [1.0, 3.0, 0.5];
        let c = [2.0, -1.0, 0.25];
        let mut p = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        for _ in 0..500 {
            let g: Vec<f64> = (0..3).map(|i| a[i] * (p[i] - c[i])).collect();
            sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - c[i]).abs() < 1e-6, "{:?}", p);
        }
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        assert!(sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
        let last = cosine_lr(9, 10, 0.1).unwrap();
        assert!(last > 0.0 && last < 0.01);
        assert!(cosine_lr(10, 10, 0.1).is_err());
    }

    fn images(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 2, 6, 5], (0..180).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn augment_flags_off_is_identity() {
        let mut x = images(1);
        let before = x.clone();
        augment(&mut x, Augment::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = images(2);
        let mut y = x.clone();
        flip_horizontal(y.data_mut(), 5);
        assert_ne!(x, y);
        flip_horizontal(y.data_mut(), 5);
        assert_eq!(x, y);
    }

    #[test]
    fn crop_preserves_shape_and_centre_crop_is_identity() {
        let mut x = images(3);
        let flags = Augment { crop: true, flip: true };
        augment(&mut x, flags, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(x.shape(), &[3, 2, 6, 5]);
        let orig = images(3);
        let mut c = orig.data()[..60].to_vec();
        crop_shifted(&mut c, 2, 6, 5, CROP_PAD, CROP_PAD, CROP_PAD);
        assert_eq!(&c[..], &orig.data()[..60]);
        assert!(augment(&mut Tensor::zeros([4, 4]), flags, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn two_moons() -> (Dataset, Dataset) {
        let d = synth_two_moons_like(400, 0.0, 11).unwrap();
        (d.clone(), d)
    }

    fn mlp_spec() -> ModelSpec {
        ModelSpec::new(Architecture::Mlp { dims: vec![2, 32, 32, 2] })
    }

    #[test]
    fn separable_task_reaches_99_percent() {
        let (train_set, val) = two_moons();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 32,
            seed: 3,
            ..TrainConfig::stage1()
        };
        let (_, rec) = train_stage1(mlp_spec(), QuantSpec::biper(20.0), &cfg, &train_set, &val).unwrap();
        let best = rec.epochs.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
        assert!(best >= 0.99, "train accuracy {}", best);
        assert_eq!(rec.final_layers.len(), 1);
        assert!(rec.final_layers[0].qe > 0.0 && rec.final_layers[0].b_hat > 0.0);
    }

    #[test]
    fn same_seed_same_record() {
        let (train_set, val) = two_moons();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 9,
            ..TrainConfig::stage1()
        };
        let a = train_stage1(mlp_spec(), QuantSpec::biper(20.0), &cfg, &train_set, &val).unwrap();
        let b = train_stage1(mlp_spec(), QuantSpec::biper(20.0), &cfg, &train_set, &val).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn stage2_gradients_obey_surrogate_bound() {
        let (train_set, val) = two_moons();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 1,
            ..TrainConfig::stage1()
        };
        let (warm, rec1) = train_stage1(mlp_spec(), QuantSpec::biper(20.0), &cfg, &train_set, &val).unwrap();
        assert!(rec1.grad_bound.checks > 0);
        assert_eq!(rec1.grad_bound.violations, 0);
        let c2 = TrainConfig {
            epochs: 3,
            seed: 1,
            ..TrainConfig::stage2()
        };
        let (_, rec2) =
            train_stage2(&warm, Stage::Stage1, &mlp_spec(), &QuantSpec::biper(20.0), &c2, &train_set, &val).unwrap();
        assert!(rec2.grad_bound.checks > 0);
        assert_eq!(rec2.grad_bound.violations, 0, "{:?}", rec2.grad_bound);
        assert!(rec2.grad_bound.max_ratio > 0.0);
        assert_eq!(rec2.initial_layers, rec1.final_layers);
    }

    #[test]
    fn stage2_rejects_mismatched_warm_start() {
        let (train_set, val) = two_moons();
        let warm = Model::build(mlp_spec(), QuantSpec::biper(20.0), 0).unwrap();
        let c2 = TrainConfig::stage2();
        let other = ModelSpec::new(Architecture::Mlp { dims: vec![2, 16, 16, 2] });
        let err = train_stage2(&warm, Stage::Stage1, &other, &QuantSpec::biper(20.0), &c2, &train_set, &val);
        assert!(err.unwrap_err().to_string().contains("architecture mismatch"));
        let err = train_stage2(&warm, Stage::Stage1, &mlp_spec(), &QuantSpec::biper(10.0), &c2, &train_set, &val);
        assert!(err.is_err());
        let err = train_stage2(&warm, Stage::Stage2, &mlp_spec(), &QuantSpec::biper(20.0), &c2, &train_set, &val);
        assert!(err.is_err());
    }

    #[test]
    fn diverging_run_reports_diagnostic() {
        let (train_set, val) = two_moons();
        let cfg = TrainConfig {
            epochs: 5,
            lr0: 1e200,
            seed: 0,
            ..TrainConfig::stage1()
        };
        let err = train_stage1(mlp_spec(), QuantSpec::biper(20.0), &cfg, &train_set, &val).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{}", err);
    }

    #[test]
    fn random_init_is_near_chance_and_top5_contains_top1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let images = Tensor::new(vec![n, 1, 8, 8], (0..n * 64).map(|_| rng.gen()).collect()).unwrap();
        let labels = (0..n).map(|i| i % 10).collect();
        let data = Dataset::new(images, labels, 10).unwrap();
        let arch = Architecture::Minicnn {
            in_channels: 1,
            height: 8,
            width: 8,
            classes: 10,
            channels: 4,
        };
        let mut m = Model::build(ModelSpec::new(arch), QuantSpec::biper(20.0), 2).unwrap();
        let acc = evaluate(&mut m, &data, Stage::Stage2, None).unwrap();
        assert!((acc.top1 - 0.1).abs() <= 0.02, "{:?}", acc);
        assert!(acc.top5.unwrap() >= acc.top1);
        let again = evaluate(&mut m, &data, Stage::Stage2, None).unwrap();
        assert_eq!(acc, again);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn run_record_csv_has_epoch_rows() {
        let (train_set, val) = two_moons();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::stage1()
        };
        let (_, rec) = train_stage1(mlp_spec(), QuantSpec::biper(20.0), &cfg, &train_set, &val).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,lr,train_loss,train_accuracy,val_accuracy");
        assert_eq!(text.lines().count(), 3);
    }
}
