//! Binary-aware layers and the small reference architectures.
//!
//! A [`Model`] is a list of [`Layer`]s interpreted on a [`Tape`]. Binary
//! convolution and dense layers hold latent full-precision weights; what
//! reaches the convolution depends on the training stage:
//!
//! * stage 1: the real values `w_hat` (`sin(omega0 * w)` for BiPer, `w` for
//!   the sign quantizers);
//! * stage 2: `gamma_c * q(w)` with `q(w) in {-1, +1}` from the quantizer's
//!   custom-gradient node, and `gamma_c` the scale the [`QuantSpec`] asks for.
//!   The product is evaluated as `gamma_c * (q(w) conv a)` so the integer
//!   core of the convolution is exact and matches the packed kernels.
//!
//! The first and last layers, batch norm, and residual shortcuts are always
//! full precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOpId, Tape, Var};
use crate::bitkernel::{binary_conv2d, binary_linear, PackedBitTensor};
use crate::checkpoint::{round_to_storage, Checkpoint};
use crate::error::{invalid, shape_err, Error, Result};
use crate::quantization::{activation_node, binarize, Method, QuantSpec, Scaling};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            _ => Err(invalid(format!("stage must be 1 or 2, got {}", n))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum Architecture {
    /// Dense layers with the given widths, input first.
    Mlp { dims: Vec<usize> },
    /// Full-precision stem, two binary 3x3 convolutions with stride 2, dense head.
    Minicnn {
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        channels: usize,
    },
    /// Stem plus three stages of binary residual units with full-precision
    /// shortcuts, global pooling and a dense head.
    #[serde(rename = "resnet20-ish")]
    ResNet20ish {
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        channels: usize,
        blocks_per_stage: usize,
    },
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::Minicnn { .. } => "minicnn",
            Architecture::ResNet20ish { .. } => "resnet20-ish",
        }
    }

    /// Resolves an architecture id against the input geometry.
    pub fn from_id(id: &str, input: &[usize], classes: usize, hidden: &[usize], channels: usize) -> Result<Self> {
        match id {
            "mlp" => {
                let mut dims = vec![input.iter().product()];
                dims.extend_from_slice(hidden);
                dims.push(classes);
                Ok(Architecture::Mlp { dims })
            }
            "minicnn" | "resnet20-ish" => {
                let [c, h, w] = <[usize; 3]>::try_from(input)
                    .map_err(|_| invalid(format!("{} needs [C, H, W] inputs, got {:?}", id, input)))?;
                Ok(if id == "minicnn" {
                    Architecture::Minicnn {
                        in_channels: c,
                        height: h,
                        width: w,
                        classes,
                        channels,
                    }
                } else {
                    Architecture::ResNet20ish {
                        in_channels: c,
                        height: h,
                        width: w,
                        classes,
                        channels,
                        blocks_per_stage: 3,
                    }
                })
            }
            other => Err(invalid(format!("unknown architecture id {:?}", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Binarize the inputs of binary layers with `Sign`.
    #[serde(default = "yes")]
    pub binarize_activations: bool,
    #[serde(default = "yes")]
    pub first_full_precision: bool,
    #[serde(default = "yes")]
    pub last_full_precision: bool,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            binarize_activations: true,
            first_full_precision: true,
            last_full_precision: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.first_full_precision || !self.last_full_precision {
            return Err(invalid("the first and last layers must stay full precision"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    BinaryWeight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

impl Param {
    /// Weight decay applies to convolution and dense weights only.
    pub fn decays(&self) -> bool {
        matches!(self.kind, ParamKind::Weight | ParamKind::BinaryWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: usize,
        stride: usize,
        pad: usize,
        binary: bool,
    },
    Dense {
        weight: usize,
        bias: Option<usize>,
        binary: bool,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        state: usize,
    },
    /// `Sign` with the piecewise-polynomial surrogate.
    SignActivation,
    Relu,
    Flatten,
    GlobalAvgPool,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub bn: Vec<BnState>,
}

/// Packed `+-1` weights (with their scales) for every binary layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeights {
    pub by_param: Vec<Option<PackedBitTensor>>,
}

/// Handles recorded for one binary layer during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct QuantProbe {
    pub param: usize,
    /// The `+-1` weights (stage 2) or `w_hat` (stage 1).
    pub weights: Var,
    pub gamma: Option<Var>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub param_vars: Vec<Option<Var>>,
    pub probes: Vec<QuantProbe>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub quant: QuantSpec,
    pub layers: Vec<Layer>,
    pub store: ParamStore,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
    binarize_activations: bool,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: Vec<usize>, binary: bool) -> usize {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.push(name, Tensor::new(shape, data).expect("weight shape"), if binary {
            ParamKind::BinaryWeight
        } else {
            ParamKind::Weight
        })
    }

    fn push(&mut self, name: String, value: Tensor, kind: ParamKind) -> usize {
        self.store.params.push(Param { name, value, kind });
        self.store.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, binary: bool) -> Layer {
        let weight = self.weight(format!("{}.weight", name), vec![cout, cin, k, k], binary);
        Layer::Conv {
            weight,
            stride,
            pad,
            binary,
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize, binary: bool, bias: bool) -> Layer {
        let weight = self.weight(format!("{}.weight", name), vec![fout, fin], binary);
        let bias = bias.then(|| self.push(format!("{}.bias", name), Tensor::zeros([fout]), ParamKind::Bias));
        Layer::Dense { weight, bias, binary }
    }

    fn bn(&mut self, name: &str, channels: usize) -> Layer {
        let gamma = self.push(format!("{}.gamma", name), Tensor::full([channels], 1.0), ParamKind::BnScale);
        let beta = self.push(format!("{}.beta", name), Tensor::zeros([channels]), ParamKind::BnShift);
        self.store.bn.push(BnState {
            name: name.to_string(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        Layer::BatchNorm {
            gamma,
            beta,
            state: self.store.bn.len() - 1,
        }
    }

    /// Nonlinearity in front of a binary layer.
    fn binary_input(&self) -> Layer {
        if self.binarize_activations {
            Layer::SignActivation
        } else {
            Layer::Relu
        }
    }
}

impl Model {
    /// Builds and initializes a model; latent weights use Kaiming fan-in normal init.
    ///
    /// Initialization depends only on the architecture and `seed`, never on
    /// the quantizer, so runs that differ only in `quant` start identically.
    pub fn build(spec: ModelSpec, quant: QuantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        quant.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::default(),
            rng: &mut rng,
            binarize_activations: spec.binarize_activations,
        };
        let layers = match &spec.architecture {
            Architecture::Mlp { dims } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return Err(invalid(format!("mlp needs at least two positive widths, got {:?}", dims)));
                }
                let last = dims.len() - 2;
                let mut layers = vec![Layer::Flatten];
                for i in 0..=last {
                    let binary = i != 0 && i != last;
                    layers.push(b.dense(&format!("fc{}", i), dims[i], dims[i + 1], binary, i == last));
                    if i < last {
                        layers.push(b.bn(&format!("bn{}", i), dims[i + 1]));
                        let next_binary = i + 1 != last;
                        layers.push(if next_binary { b.binary_input() } else { Layer::Relu });
                    }
                }
                layers
            }
            &Architecture::Minicnn {
                in_channels,
                height,
                width,
                classes,
                channels,
            } => {
                let c = channels;
                let h = (height.div_ceil(2)).div_ceil(2);
                let w = (width.div_ceil(2)).div_ceil(2);
                vec![
                    b.conv("conv0", in_channels, c, 3, 1, 1, false),
                    b.bn("bn0", c),
                    b.binary_input(),
                    b.conv("conv1", c, 2 * c, 3, 2, 1, true),
                    b.bn("bn1", 2 * c),
                    b.binary_input(),
                    b.conv("conv2", 2 * c, 2 * c, 3, 2, 1, true),
                    b.bn("bn2", 2 * c),
                    Layer::Relu,
                    Layer::Flatten,
                    b.dense("fc", 2 * c * h * w, classes, false, true),
                ]
            }
            &Architecture::ResNet20ish {
                in_channels,
                classes,
                channels,
                blocks_per_stage,
                ..
            } => {
                let mut layers = vec![b.conv("stem", in_channels, channels, 3, 1, 1, false), b.bn("stem_bn", channels)];
                let mut cin = channels;
                for stage in 0..3 {
                    let cout = channels << stage;
                    for block in 0..blocks_per_stage {
                        for unit in 0..2 {
                            let stride = if stage > 0 && block == 0 && unit == 0 { 2 } else { 1 };
                            let name = format!("s{}.b{}.u{}", stage, block, unit);
                            let body = vec![
                                b.binary_input(),
                                b.conv(&format!("{}.conv", name), cin, cout, 3, stride, 1, true),
                                b.bn(&format!("{}.bn", name), cout),
                            ];
                            let shortcut = if stride != 1 || cin != cout {
                                vec![
                                    b.conv(&format!("{}.down", name), cin, cout, 1, stride, 0, false),
                                    b.bn(&format!("{}.down_bn", name), cout),
                                ]
                            } else {
                                Vec::new()
                            };
                            layers.push(Layer::Residual { body, shortcut });
                            cin = cout;
                        }
                    }
                }
                layers.push(Layer::GlobalAvgPool);
                layers.push(b.dense("fc", cin, classes, false, true));
                layers
            }
        };
        let store = b.store;
        Ok(Self {
            spec,
            quant,
            layers,
            store,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.params.iter().map(|p| p.value.len()).sum()
    }

    /// Indices of the latent weights of binary layers.
    pub fn binary_params(&self) -> Vec<usize> {
        self.store
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::BinaryWeight)
            .map(|(i, _)| i)
            .collect()
    }

    /// Swaps the quantizer, keeping parameters untouched.
    pub fn with_quant(mut self, quant: QuantSpec) -> Result<Self> {
        quant.validate()?;
        self.quant = quant;
        Ok(self)
    }

    /// Records a forward pass of `input` on `tape`. In `Mode::Train`, batch
    /// norm uses batch statistics and updates its running averages.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: Var,
        stage: Stage,
        mode: Mode,
        packed: Option<&PackedWeights>,
    ) -> Result<ForwardOutput> {
        if packed.is_some() && stage != Stage::Stage2 {
            return Err(invalid("packed weights only exist for stage-2 models"));
        }
        let weight_op = tape.register_custom_grad(self.quant.weight_node());
        let act_op = tape.register_custom_grad(activation_node());
        let n_params = self.store.params.len();
        let mut ctx = Ctx {
            tape,
            store: &mut self.store,
            quant: &self.quant,
            stage,
            mode,
            packed,
            leaves: vec![None; n_params],
            probes: Vec::new(),
            weight_op,
            act_op,
        };
        let logits = run(&self.layers, &mut ctx, input)?;
        Ok(ForwardOutput {
            logits,
            param_vars: ctx.leaves,
            probes: ctx.probes,
        })
    }

    /// Logits for a batch in evaluation mode.
    pub fn predict(&mut self, x: &Tensor, stage: Stage, packed: Option<&PackedWeights>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x)?;
        let out = self.forward(&mut tape, input, stage, Mode::Eval, packed)?;
        Ok(tape.tensor(out.logits))
    }

    /// Copies gradients from `tape` into each parameter's gradient slot (zeros if unused).
    pub fn collect_grads(&mut self, tape: &Tape, out: &ForwardOutput) -> Result<()> {
        for (p, var) in self.store.params.iter_mut().zip(&out.param_vars) {
            let g = var
                .and_then(|v| tape.grad(v).map(<[f64]>::to_vec))
                .unwrap_or_else(|| vec![0.0; p.value.len()]);
            p.value.set_grad(g)?;
        }
        Ok(())
    }

    /// Packs the stage-2 weights of every binary layer.
    pub fn pack(&self) -> Result<PackedWeights> {
        let by_param = self
            .store
            .params
            .iter()
            .map(|p| {
                if p.kind != ParamKind::BinaryWeight {
                    return Ok(None);
                }
                let b = binarize(&p.value, &self.quant)?;
                PackedBitTensor::pack(&b).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        if by_param.iter().all(Option::is_none) {
            return Err(invalid("model has no binarizable layers"));
        }
        Ok(PackedWeights { by_param })
    }

    /// Rounds parameters and statistics to the precision kept in checkpoints.
    pub fn round_to_storage(&mut self) {
        for p in &mut self.store.params {
            round_to_storage(&mut p.value);
        }
        for s in &mut self.store.bn {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn to_checkpoint(&self, stage: Stage, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> =
            self.store.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for s in &self.store.bn {
            tensors.push((format!("{}.running_mean", s.name), Tensor::from_vec(s.mean.clone())));
            tensors.push((format!("{}.running_var", s.name), Tensor::from_vec(s.var.clone())));
        }
        let metadata = serde_json::json!({
            "model": self.spec,
            "quant": self.quant,
            "stage": stage.number(),
            "extra": extra,
        });
        Ok(Checkpoint { metadata, tensors })
    }

    /// Rebuilds the model described by a checkpoint and loads its tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Stage)> {
        let spec: ModelSpec = serde_json::from_value(ck.metadata["model"].clone())?;
        let quant: QuantSpec = serde_json::from_value(ck.metadata["quant"].clone())?;
        let stage = Stage::from_number(
            ck.metadata["stage"]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint("missing stage".into()))? as u8,
        )?;
        let mut model = Self::build(spec, quant, 0)?;
        model.load_tensors(ck)?;
        Ok((model, stage))
    }

    pub fn load_tensors(&mut self, ck: &Checkpoint) -> Result<()> {
        for p in &mut self.store.params {
            let t = ck
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for s in &mut self.store.bn {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let name = format!("{}.{}", s.name, suffix);
                let t = ck
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))?;
                if t.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("tensor {} has the wrong length", name)));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    store: &'a mut ParamStore,
    quant: &'a QuantSpec,
    stage: Stage,
    mode: Mode,
    packed: Option<&'a PackedWeights>,
    leaves: Vec<Option<Var>>,
    probes: Vec<QuantProbe>,
    weight_op: CustomOpId,
    act_op: CustomOpId,
}

impl Ctx<'_> {
    fn leaf(&mut self, idx: usize) -> Result<Var> {
        if let Some(v) = self.leaves[idx] {
            return Ok(v);
        }
        let t = &self.store.params[idx].value;
        let v = self
            .tape
            .input(t.shape().to_vec(), t.data().to_vec(), self.mode == Mode::Train)?;
        self.leaves[idx] = Some(v);
        Ok(v)
    }

    /// `w_hat` on the tape: `sin(omega0 * w)` for BiPer, `w` otherwise.
    fn pre_binarization(&mut self, w: Var) -> Result<Var> {
        match self.quant.method {
            Method::BiPer => {
                let s = self.tape.scale(w, self.quant.omega0)?;
                self.tape.sin(s)
            }
            Method::SignSte | Method::SignClippedSte => Ok(w),
        }
    }

    /// Weight tensor entering a binary layer, plus its per-channel scale.
    fn binary_weight(&mut self, idx: usize) -> Result<(Var, Option<Var>)> {
        let w = self.leaf(idx)?;
        match self.stage {
            Stage::Stage1 => Ok((self.pre_binarization(w)?, None)),
            Stage::Stage2 => {
                let q = self.tape.custom(self.weight_op, w)?;
                let gamma = match self.quant.scaling {
                    Scaling::None => None,
                    Scaling::PerChannelMeanAbs => {
                        let w_hat = self.pre_binarization(w)?;
                        Some(self.tape.mean_abs_rows(w_hat)?)
                    }
                    Scaling::PerLayerMeanAbs => {
                        let w_hat = self.pre_binarization(w)?;
                        Some(self.tape.mean_abs(w_hat)?)
                    }
                    Scaling::AnalyticLaplace => {
                        let g = self.quant.analytic_gamma()?;
                        Some(self.tape.input(vec![1], vec![g], false)?)
                    }
                };
                Ok((q, gamma))
            }
        }
    }

    fn packed_input(&self, x: Var) -> Result<PackedBitTensor> {
        let t = self.tape.tensor(x);
        PackedBitTensor::from_values(&t, vec![1.0]).map_err(|_| {
            invalid("packed inference needs binarized activations at every binary layer input")
        })
    }
}

fn run(layers: &[Layer], ctx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
    for layer in layers {
        x = run_layer(layer, ctx, x)?;
    }
    Ok(x)
}

fn run_layer(layer: &Layer, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    match layer {
        &Layer::Conv {
            weight,
            stride,
            pad,
            binary,
        } => {
            if !binary {
                let w = ctx.leaf(weight)?;
                return ctx.tape.conv2d(x, w, stride, pad);
            }
            if let Some(packed) = ctx.packed {
                let pw = packed.by_param[weight]
                    .as_ref()
                    .ok_or_else(|| invalid("missing packed weights for a binary layer"))?;
                let pa = ctx.packed_input(x)?;
                let y = binary_conv2d(&pa, pw, pw.scale(), stride, pad)?;
                return ctx.tape.constant(&y);
            }
            let (w, gamma) = ctx.binary_weight(weight)?;
            ctx.probes.push(QuantProbe {
                param: weight,
                weights: w,
                gamma,
            });
            let y = ctx.tape.conv2d(x, w, stride, pad)?;
            match gamma {
                Some(g) => ctx.tape.scale_channels(y, g),
                None => Ok(y),
            }
        }
        &Layer::Dense { weight, bias, binary } => {
            let y = if !binary {
                let w = ctx.leaf(weight)?;
                ctx.tape.matmul_nt(x, w)?
            } else if let Some(packed) = ctx.packed {
                let pw = packed.by_param[weight]
                    .as_ref()
                    .ok_or_else(|| invalid("missing packed weights for a binary layer"))?;
                let pa = ctx.packed_input(x)?;
                let y = binary_linear(&pa, pw, pw.scale())?;
                ctx.tape.constant(&y)?
            } else {
                let (w, gamma) = ctx.binary_weight(weight)?;
                ctx.probes.push(QuantProbe {
                    param: weight,
                    weights: w,
                    gamma,
                });
                let y = ctx.tape.matmul_nt(x, w)?;
                match gamma {
                    Some(g) => ctx.tape.scale_channels(y, g)?,
                    None => y,
                }
            };
            match bias {
                Some(b) => {
                    let b = ctx.leaf(b)?;
                    ctx.tape.add_bias(y, b)
                }
                None => Ok(y),
            }
        }
        &Layer::BatchNorm { gamma, beta, state } => {
            let g = ctx.leaf(gamma)?;
            let b = ctx.leaf(beta)?;
            match ctx.mode {
                Mode::Train => {
                    let (y, stats) = ctx.tape.batch_norm(x, g, b, BN_EPS)?;
                    let s = &mut ctx.store.bn[state];
                    let count = (ctx.tape.value(x).len() / stats.mean.len()) as f64;
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    for c in 0..stats.mean.len() {
                        s.mean[c] = (1.0 - BN_MOMENTUM) * s.mean[c] + BN_MOMENTUM * stats.mean[c];
                        s.var[c] = (1.0 - BN_MOMENTUM) * s.var[c] + BN_MOMENTUM * stats.var[c] * unbias;
                    }
                    Ok(y)
                }
                Mode::Eval => {
                    let s = &ctx.store.bn[state];
                    let (mean, var) = (s.mean.clone(), s.var.clone());
                    ctx.tape.batch_norm_fixed(x, g, b, &mean, &var, BN_EPS)
                }
            }
        }
        Layer::SignActivation => ctx.tape.custom(ctx.act_op, x),
        Layer::Relu => ctx.tape.relu(x),
        Layer::Flatten => {
            let shape = ctx.tape.shape(x).to_vec();
            if shape.is_empty() {
                return Err(shape_err("flatten", "scalar input"));
            }
            let rest = shape[1..].iter().product::<usize>();
            ctx.tape.reshape(x, vec![shape[0], rest])
        }
        Layer::GlobalAvgPool => ctx.tape.global_avg_pool(x),
        Layer::Residual { body, shortcut } => {
            let main = run(body, ctx, x)?;
            let skip = run(shortcut, ctx, x)?;
            ctx.tape.add(main, skip)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mnist_like() -> Architecture {
        Architecture::Minicnn {
            in_channels: 1,
            height: 12,
            width: 12,
            classes: 10,
            channels: 4,
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mlp_parameter_count() {
        let m = Model::build(
            ModelSpec::new(Architecture::Mlp { dims: vec![784, 256, 10] }),
            QuantSpec::biper(20.0),
            0,
        )
        .unwrap();
        assert_eq!(m.num_parameters(), 784 * 256 + 256 * 10 + 2 * 256 + 10);
        assert!(m.binary_params().is_empty());
    }

    #[test]
    fn minicnn_on_cifar_shape_gives_ten_logits() {
        let arch = Architecture::from_id("minicnn", &[3, 32, 32], 10, &[], 4).unwrap();
        let mut m = Model::build(ModelSpec::new(arch), QuantSpec::biper(20.0), 0).unwrap();
        let x = random_input(&[2, 3, 32, 32], 1);
        for stage in [Stage::Stage1, Stage::Stage2] {
            let y = m.predict(&x, stage, None).unwrap();
            assert_eq!(y.shape(), &[2, 10]);
        }
    }

    #[test]
    fn unknown_architecture_rejected() {
        assert!(Architecture::from_id("vgg", &[3, 32, 32], 10, &[], 4).is_err());
        assert!(Architecture::from_id("minicnn", &[784], 10, &[], 4).is_err());
    }

    #[test]
    fn first_and_last_layers_must_stay_full_precision() {
        let mut spec = ModelSpec::new(mnist_like());
        spec.first_full_precision = false;
        assert!(Model::build(spec, QuantSpec::biper(20.0), 0).is_err());
    }

    fn audit(layers: &[Layer], store: &ParamStore, in_shortcut: bool, binary_seen: &mut usize) {
        for l in layers {
            match l {
                Layer::Conv { weight, binary, .. } | Layer::Dense { weight, binary, .. } => {
                    assert_eq!(*binary, store.params[*weight].kind == ParamKind::BinaryWeight);
                    if in_shortcut {
                        assert!(!binary, "shortcut path must be full precision");
                    }
                    if *binary {
                        *binary_seen += 1;
                    }
                }
                Layer::Residual { body, shortcut } => {
                    audit(body, store, in_shortcut, binary_seen);
                    audit(shortcut, store, true, binary_seen);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn resnet_shortcuts_are_full_precision() {
        let arch = Architecture::from_id("resnet20-ish", &[3, 16, 16], 10, &[], 4).unwrap();
        let m = Model::build(ModelSpec::new(arch), QuantSpec::biper(20.0), 0).unwrap();
        let mut binary = 0;
        audit(&m.layers, &m.store, false, &mut binary);
        assert_eq!(binary, 18);
        // stem first, dense head last, both full precision
        assert!(matches!(m.layers.first(), Some(Layer::Conv { binary: false, .. })));
        assert!(matches!(m.layers.last(), Some(Layer::Dense { binary: false, .. })));
        let downs = m.store.params.iter().filter(|p| p.name.ends_with(".down.weight")).count();
        assert_eq!(downs, 2);
        let mut mm = m.clone();
        let y = mm.predict(&random_input(&[2, 3, 16, 16], 3), Stage::Stage2, None).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn quantizer_swap_keeps_parameters() {
        let a = Model::build(ModelSpec::new(mnist_like()), QuantSpec::biper(20.0), 7).unwrap();
        let b = Model::build(ModelSpec::new(mnist_like()), QuantSpec::sign_clipped_ste(), 7).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.layers, b.layers);
    }

    #[test]
    fn stage2_weights_are_pm_gamma() {
        let mut m = Model::build(ModelSpec::new(mnist_like()), QuantSpec::biper(20.0), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&random_input(&[2, 1, 12, 12], 2)).unwrap();
        let out = m.forward(&mut tape, x, Stage::Stage2, Mode::Train, None).unwrap();
        assert_eq!(out.probes.len(), 2);
        for p in &out.probes {
            assert!(tape.value(p.weights).iter().all(|&v| v == 1.0 || v == -1.0));
            let gamma = tape.value(p.gamma.unwrap());
            let w = &m.store.params[p.param].value;
            assert_eq!(gamma.len(), w.rows());
            for (r, g) in w.data().chunks(w.row_len()).zip(gamma) {
                let want = r.iter().map(|v| (v * 20.0).sin().abs()).sum::<f64>() / r.len() as f64;
                assert_eq!(*g, want);
            }
        }
    }

    #[test]
    fn stage2_with_quarter_period_weights_is_gamma_times_sum() {
        // every latent weight at pi/(2 omega0): w_q = +1, gamma = 1
        let omega = 10.0;
        let mut m = Model::build(ModelSpec::new(mnist_like()), QuantSpec::biper(omega), 0).unwrap();
        let idx = m.binary_params()[0];
        m.store.params[idx].value.data_mut().fill(std::f64::consts::FRAC_PI_2 / omega);
        let a = random_input(&[1, 4, 6, 6], 4).map(crate::quantization::sign);
        let mut tape = Tape::new();
        let av = tape.constant(&a).unwrap();
        let mut ctx = Ctx {
            weight_op: tape.register_custom_grad(m.quant.weight_node()),
            act_op: tape.register_custom_grad(activation_node()),
            tape: &mut tape,
            store: &mut m.store,
            quant: &m.quant,
            stage: Stage::Stage2,
            mode: Mode::Eval,
            packed: None,
            leaves: vec![None; 64],
            probes: Vec::new(),
        };
        let layer = Layer::Conv {
            weight: idx,
            stride: 2,
            pad: 1,
            binary: true,
        };
        let y = run_layer(&layer, &mut ctx, av).unwrap();
        let gamma = ctx.tape.value(ctx.probes[0].gamma.unwrap()).to_vec();
        assert!(gamma.iter().all(|g| (g - 1.0).abs() < 1e-15));
        let ones = Tensor::full([8, 4, 3, 3], 1.0);
        let mut ref_tape = Tape::new();
        let ra = ref_tape.constant(&a).unwrap();
        let rw = ref_tape.constant(&ones).unwrap();
        let r = ref_tape.conv2d(ra, rw, 2, 1).unwrap();
        let yv = ctx.tape.value(y);
        for (i, (got, want)) in yv.iter().zip(ref_tape.value(r)).enumerate() {
            assert_eq!(*got, want * gamma[(i / 9) % 8]);
        }
    }

    #[test]
    fn stage1_small_omega_is_scaled_float_conv() {
        let omega = 1e-4;
        let mut m = Model::build(ModelSpec::new(mnist_like()), QuantSpec::biper(omega), 5).unwrap();
        let idx = m.binary_params()[0];
        let w = m.store.params[idx].value.clone();
        let a = random_input(&[1, 4, 6, 6], 6);
        let mut tape = Tape::new();
        let av = tape.constant(&a).unwrap();
        let mut ctx = Ctx {
            weight_op: tape.register_custom_grad(m.quant.weight_node()),
            act_op: tape.register_custom_grad(activation_node()),
            tape: &mut tape,
            store: &mut m.store,
            quant: &m.quant,
            stage: Stage::Stage1,
            mode: Mode::Eval,
            packed: None,
            leaves: vec![None; 64],
            probes: Vec::new(),
        };
        let layer = Layer::Conv {
            weight: idx,
            stride: 1,
            pad: 1,
            binary: true,
        };
        let y = run_layer(&layer, &mut ctx, av).unwrap();
        let got = ctx.tape.value(y).to_vec();
        let mut rt = Tape::new();
        let ra = rt.constant(&a).unwrap();
        let rw = rt.constant(&w).unwrap();
        let r = rt.conv2d(ra, rw, 1, 1).unwrap();
        for (g, f) in got.iter().zip(rt.value(r)) {
            assert!((g - omega * f).abs() <= 1e-9 * omega * f.abs().max(1.0));
        }
    }

    #[test]
    fn packed_eval_matches_float_eval_exactly() {
        let mut m = Model::build(ModelSpec::new(mnist_like()), QuantSpec::biper(20.0), 3).unwrap();
        // settle running statistics
        let mut tape = Tape::new();
        let x = tape.constant(&random_input(&[8, 1, 12, 12], 8)).unwrap();
        m.forward(&mut tape, x, Stage::Stage2, Mode::Train, None).unwrap();
        let packed = m.pack().unwrap();
        let x = random_input(&[5, 1, 12, 12], 9);
        let float = m.predict(&x, Stage::Stage2, None).unwrap();
        let bits = m.predict(&x, Stage::Stage2, Some(&packed)).unwrap();
        assert_eq!(float, bits);
        assert!(m.predict(&x, Stage::Stage1, Some(&packed)).is_err());
    }

    #[test]
    fn packing_without_binary_layers_fails() {
        let m = Model::build(
            ModelSpec::new(Architecture::Mlp { dims: vec![4, 3, 2] }),
            QuantSpec::biper(20.0),
            0,
        )
        .unwrap();
        assert!(m.pack().is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let mut m = Model::build(ModelSpec::new(mnist_like()), QuantSpec::biper(20.0), 3).unwrap();
        m.round_to_storage();
        let ck = m.to_checkpoint(Stage::Stage2, serde_json::json!({"note": 1})).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ck.save(&dir.path().join("m")).unwrap();
        let loaded = Checkpoint::load(&dir.path().join("m")).unwrap();
        let (mut back, stage) = Model::from_checkpoint(&loaded).unwrap();
        assert_eq!(stage, Stage::Stage2);
        let x = random_input(&[3, 1, 12, 12], 10);
        assert_eq!(
            m.predict(&x, Stage::Stage2, None).unwrap(),
            back.predict(&x, Stage::Stage2, None).unwrap()
        );
    }
}
