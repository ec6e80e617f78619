//! Jasper/QuartzNet-style convolutional acoustic models.
//!
//! A model is a prologue convolution, `B` residual blocks of `R`
//! sub-blocks each (conv, batch norm, ReLU, dropout), a small epilogue,
//! and a width-1 projection onto `|V| + 1` outputs. The two
//! architectures differ only in the convolution flavor inside blocks:
//! plain 1D convolutions (jasper) or time-channel separable ones
//! (quartznet), which is what cuts the parameter count.
//!
//! `forward_*`/`backward` are driven by a flat execution plan derived
//! from the config, so parameter naming, counting, initialization, and
//! both passes can never disagree about the topology.

mod checkpoint;
mod layers;
mod store;

use std::fmt;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1, ArrayView3, Ix1, Ix3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use layers::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv1d_backward,
    conv1d_forward, depthwise_conv1d_backward, depthwise_conv1d_forward, dropout_backward,
    dropout_forward, relu_backward, relu_forward, separable_conv1d_backward,
    separable_conv1d_forward, BatchNormCache,
};
pub use store::{GradientStore, ParameterStore, Tensor, TensorStore};

/// Per-frame pre-softmax scores, `T_out x (|V| + 1)`, blank last.
pub type LogitMatrix = Array2<f64>;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("dropout rate {0} is outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("batch norm {0:?} used in eval mode before any training batch")]
    EvalBeforeTrain(String),
    #[error("forward cache does not match this call: {0}")]
    BadCache(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a CKPT1 checkpoint ({reason})")]
    BadCheckpoint { path: PathBuf, reason: String },
}

/// Which convolution flavor the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Jasper,
    Quartznet,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Jasper => "jasper",
            Arch::Quartznet => "quartznet",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "jasper" => Ok(Arch::Jasper),
            "quartznet" => Ok(Arch::Quartznet),
            other => Err(ModelError::BadConfig(format!(
                "unknown arch {other:?}, expected \"jasper\" or \"quartznet\""
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One convolution stage: output channels plus geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub dropout: f64,
}

impl ConvSpec {
    pub fn new(channels: usize, kernel: usize) -> Self {
        Self {
            channels,
            kernel,
            stride: 1,
            dilation: 1,
            dropout: 0.0,
        }
    }
}

/// Full topology of an acoustic model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Input channels (mel bands).
    pub n_mels: usize,
    /// Output dimension, `|V| + 1` including the blank.
    pub n_outputs: usize,
    pub prologue: ConvSpec,
    /// One spec per block (`B` entries). A block's stride applies to its
    /// first sub-block; the rest run at stride 1.
    pub blocks: Vec<ConvSpec>,
    /// Sub-blocks per block (`R`).
    pub sub_blocks: usize,
    /// Convolution stages between the blocks and the final projection.
    pub epilogue: Vec<ConvSpec>,
}

/// Block kernel widths cycled through by [`ModelConfig::desk`].
pub const DESK_BLOCK_KERNELS: [usize; 4] = [11, 13, 15, 17];

impl ModelConfig {
    /// The miniature configuration used throughout: prologue conv
    /// (kernel 11, stride 2), `n_blocks` blocks of one sub-block with
    /// kernels cycling 11/13/15/17, and an epilogue of a dilated
    /// kernel-29 conv plus a width-1 conv, both at 64 channels.
    pub fn desk(
        arch: Arch,
        n_mels: usize,
        n_outputs: usize,
        n_blocks: usize,
        channels: usize,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|b| ConvSpec::new(channels, DESK_BLOCK_KERNELS[b % DESK_BLOCK_KERNELS.len()]))
            .collect();
        Self {
            arch,
            n_mels,
            n_outputs,
            prologue: ConvSpec {
                stride: 2,
                ..ConvSpec::new(channels, 11)
            },
            blocks,
            sub_blocks: 1,
            epilogue: vec![
                ConvSpec {
                    dilation: 2,
                    ..ConvSpec::new(64, 29)
                },
                ConvSpec::new(64, 1),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::BadConfig(msg));
        if self.n_mels == 0 {
            return err("n_mels must be >= 1".into());
        }
        if self.n_outputs < 2 {
            return err(format!(
                "n_outputs must be >= 2 (one token plus blank), got {}",
                self.n_outputs
            ));
        }
        if self.blocks.is_empty() {
            return err("need at least one block".into());
        }
        if self.sub_blocks == 0 {
            return err("need at least one sub-block per block".into());
        }
        for (what, spec) in self.conv_specs() {
            if spec.channels == 0 {
                return err(format!("{what}: channels must be >= 1"));
            }
            if spec.kernel == 0 || spec.kernel % 2 == 0 {
                return err(format!("{what}: kernel width must be odd, got {}", spec.kernel));
            }
            if spec.stride == 0 || spec.dilation == 0 {
                return err(format!("{what}: stride and dilation must be >= 1"));
            }
            if !(0.0..1.0).contains(&spec.dropout) {
                return err(format!("{what}: dropout {} outside [0, 1)", spec.dropout));
            }
        }
        Ok(())
    }

    fn conv_specs(&self) -> Vec<(String, &ConvSpec)> {
        let mut out = vec![("prologue".to_string(), &self.prologue)];
        for (b, spec) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}"), spec));
        }
        for (e, spec) in self.epilogue.iter().enumerate() {
            out.push((format!("epilogue{e}"), spec));
        }
        out
    }

    /// Output frames for a clip of `t_in` feature frames: the input
    /// length divided (ceiling) by every stride on the main path.
    pub fn output_frames(&self, t_in: usize) -> usize {
        plan(self)
            .iter()
            .filter_map(|step| match step {
                Step::Conv(p) => Some(p.stride),
                _ => None,
            })
            .fold(t_in, |t, stride| t.div_ceil(stride))
    }
}

/// One stage of the execution plan.
#[derive(Debug, Clone)]
enum Step {
    Conv(ConvPlan),
    BatchNorm { name: String, channels: usize },
    Relu,
    Dropout { rate: f64 },
    SaveResidual,
    /// Pops the saved block input, optionally projects it, and adds it
    /// to the running activations.
    AddResidual { projection: Option<ConvPlan> },
}

#[derive(Debug, Clone)]
struct ConvPlan {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    separable: bool,
}

fn plan(config: &ModelConfig) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut channels = config.n_mels;

    let push_stage = |steps: &mut Vec<Step>,
                          name: String,
                          in_ch: usize,
                          spec: &ConvSpec,
                          stride: usize,
                          separable: bool| {
        steps.push(Step::Conv(ConvPlan {
            name: format!("{name}.conv"),
            in_channels: in_ch,
            out_channels: spec.channels,
            kernel: spec.kernel,
            stride,
            dilation: spec.dilation,
            separable,
        }));
        steps.push(Step::BatchNorm {
            name: format!("{name}.bn"),
            channels: spec.channels,
        });
    };

    push_stage(
        &mut steps,
        "prologue".into(),
        channels,
        &config.prologue,
        config.prologue.stride,
        false,
    );
    steps.push(Step::Relu);
    steps.push(Step::Dropout {
        rate: config.prologue.dropout,
    });
    channels = config.prologue.channels;

    let separable = config.arch == Arch::Quartznet;
    for (b, spec) in config.blocks.iter().enumerate() {
        let block_in = channels;
        steps.push(Step::SaveResidual);
        for r in 0..config.sub_blocks {
            let in_ch = if r == 0 { block_in } else { spec.channels };
            let stride = if r == 0 { spec.stride } else { 1 };
            push_stage(&mut steps, format!("block{b}.sub{r}"), in_ch, spec, stride, separable);
            if r + 1 < config.sub_blocks {
                steps.push(Step::Relu);
                steps.push(Step::Dropout { rate: spec.dropout });
            }
        }
        let projection = (block_in != spec.channels || spec.stride > 1).then(|| ConvPlan {
            name: format!("block{b}.res"),
            in_channels: block_in,
            out_channels: spec.channels,
            kernel: 1,
            stride: spec.stride,
            dilation: 1,
            separable: false,
        });
        steps.push(Step::AddResidual { projection });
        steps.push(Step::Relu);
        steps.push(Step::Dropout { rate: spec.dropout });
        channels = spec.channels;
    }

    for (e, spec) in config.epilogue.iter().enumerate() {
        push_stage(&mut steps, format!("epilogue{e}"), channels, spec, spec.stride, false);
        steps.push(Step::Relu);
        steps.push(Step::Dropout { rate: spec.dropout });
        channels = spec.channels;
    }

    steps.push(Step::Conv(ConvPlan {
        name: "out".into(),
        in_channels: channels,
        out_channels: config.n_outputs,
        kernel: 1,
        stride: 1,
        dilation: 1,
        separable: false,
    }));
    steps
}

/// Learnable tensors of one conv stage as (suffixed name, shape).
fn conv_tensor_shapes(p: &ConvPlan) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    if p.separable {
        out.push((
            format!("{}.depthwise", p.name),
            vec![p.in_channels, 1, p.kernel],
        ));
        out.push((
            format!("{}.pointwise", p.name),
            vec![p.out_channels, p.in_channels, 1],
        ));
    } else {
        out.push((
            format!("{}.weight", p.name),
            vec![p.out_channels, p.in_channels, p.kernel],
        ));
    }
    out.push((format!("{}.bias", p.name), vec![p.out_channels]));
    out
}

/// Every tensor the config expects, buffers included.
fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for step in plan(config) {
        match step {
            Step::Conv(p) => out.extend(conv_tensor_shapes(&p)),
            Step::AddResidual {
                projection: Some(p),
            } => out.extend(conv_tensor_shapes(&p)),
            Step::BatchNorm { name, channels } => {
                out.push((format!("{name}.gain"), vec![channels]));
                out.push((format!("{name}.shift"), vec![channels]));
                out.push((format!("{name}.running_mean"), vec![channels]));
                out.push((format!("{name}.running_var"), vec![channels]));
                out.push((format!("{name}.num_batches"), vec![1]));
            }
            _ => {}
        }
    }
    out
}

/// Exact number of learnable scalars: conv weights and biases plus
/// batch-norm gains and shifts. Running statistics are buffers and do
/// not count.
pub fn param_count(config: &ModelConfig) -> usize {
    tensor_shapes(config)
        .iter()
        .filter(|(name, _)| !TensorStore::is_buffer(name))
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// Initializes parameters: He-style normal weights scaled by fan-in,
/// zero biases, identity batch norm. Deterministic for a given seed.
pub fn init_params<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<ParameterStore, ModelError> {
    config.validate()?;
    let mut store = ParameterStore::new();
    for (name, shape) in tensor_shapes(config) {
        let tensor = if name.ends_with(".weight")
            || name.ends_with(".depthwise")
            || name.ends_with(".pointwise")
        {
            // fan-in: receptive scalars feeding one output value.
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .expect("fan-in is positive");
            Tensor::from_shape_simple_fn(shape.as_slice(), || normal.sample(rng))
        } else if name.ends_with(".gain") || name.ends_with(".running_var") {
            Tensor::ones(shape.as_slice())
        } else {
            Tensor::zeros(shape.as_slice())
        };
        store.insert(name, tensor);
    }
    Ok(store)
}

/// Checks that `params` holds exactly the tensors `config` expects.
pub fn validate_params(config: &ModelConfig, params: &ParameterStore) -> Result<(), ModelError> {
    config.validate()?;
    let mut expected = ParameterStore::new();
    for (name, shape) in tensor_shapes(config) {
        expected.insert(name, Tensor::zeros(shape.as_slice()));
    }
    expected.same_layout(params)
}

fn view3<'a>(params: &'a ParameterStore, name: &str) -> Result<ArrayView3<'a, f64>, ModelError> {
    let t = params.get(name)?;
    t.view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| ModelError::ShapeMismatch {
            context: name.to_string(),
            expected: vec![0, 0, 0],
            got: t.shape().to_vec(),
        })
}

fn view1<'a>(params: &'a ParameterStore, name: &str) -> Result<ArrayView1<'a, f64>, ModelError> {
    let t = params.get(name)?;
    t.view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| ModelError::ShapeMismatch {
            context: name.to_string(),
            expected: vec![0],
            got: t.shape().to_vec(),
        })
}

/// Applies one conv stage to every batch item; returns the depthwise
/// intermediates when separable.
fn conv_stage(
    p: &ConvPlan,
    params: &ParameterStore,
    xs: &[Array2<f64>],
) -> Result<(Vec<Array2<f64>>, Option<Vec<Array2<f64>>>), ModelError> {
    let bias = view1(params, &format!("{}.bias", p.name))?;
    if p.separable {
        let depthwise3 = view3(params, &format!("{}.depthwise", p.name))?;
        let pointwise3 = view3(params, &format!("{}.pointwise", p.name))?;
        let dw = depthwise3
            .into_shape_with_order((p.in_channels, p.kernel))
            .expect("depthwise is ch x 1 x k");
        let pw = pointwise3
            .into_shape_with_order((p.out_channels, p.in_channels))
            .expect("pointwise is out x in x 1");
        let mut ys = Vec::with_capacity(xs.len());
        let mut zs = Vec::with_capacity(xs.len());
        for x in xs {
            let (y, z) = separable_conv1d_forward(x, dw, pw, bias, p.stride, p.dilation)?;
            ys.push(y);
            zs.push(z);
        }
        Ok((ys, Some(zs)))
    } else {
        let weight = view3(params, &format!("{}.weight", p.name))?;
        let ys = xs
            .iter()
            .map(|x| conv1d_forward(x, weight, bias, p.stride, p.dilation))
            .collect::<Result<_, _>>()?;
        Ok((ys, None))
    }
}

/// Saved intermediates of one training forward pass, consumed by
/// [`model_backward`].
pub struct ForwardCache {
    stages: Vec<StageCache>,
    batch_len: usize,
}

enum StageCache {
    Conv {
        x: Vec<Array2<f64>>,
        z: Option<Vec<Array2<f64>>>,
    },
    BatchNorm(BatchNormCache),
    Relu {
        y: Vec<Array2<f64>>,
    },
    Dropout {
        mask: Option<Vec<Array2<f64>>>,
    },
    SaveResidual,
    AddResidual {
        saved_x: Vec<Array2<f64>>,
    },
}

/// Blended running statistics produced by one training forward pass.
struct BnUpdate {
    name: String,
    running_mean: Tensor,
    running_var: Tensor,
}

/// Training-mode forward pass over a batch of feature matrices
/// (`n_mels x T_i` each). Updates batch-norm running statistics and
/// consumes randomness only for dropout. Returns per-item logit
/// matrices (`T_out x n_outputs`) plus the cache for the backward pass.
pub fn forward_train<R: Rng>(
    config: &ModelConfig,
    params: &mut ParameterStore,
    batch: &[Array2<f64>],
    rng: &mut R,
) -> Result<(Vec<LogitMatrix>, ForwardCache), ModelError> {
    let (logits, cache, updates) = run_forward(config, params, batch, Some(rng))?;
    for update in updates {
        *params.get_mut(&format!("{}.running_mean", update.name))? = update.running_mean;
        *params.get_mut(&format!("{}.running_var", update.name))? = update.running_var;
        params.get_mut(&format!("{}.num_batches", update.name))?[0] += 1.0;
    }
    Ok((logits, cache))
}

/// Inference-mode forward pass: batch-norm uses running statistics
/// (an error if the model has never seen a training batch) and dropout
/// is the identity. Deterministic; consumes no randomness.
pub fn forward_eval(
    config: &ModelConfig,
    params: &ParameterStore,
    batch: &[Array2<f64>],
) -> Result<Vec<LogitMatrix>, ModelError> {
    run_forward::<rand_chacha::ChaCha8Rng>(config, params, batch, None)
        .map(|(logits, _, _)| logits)
}

fn run_forward<R: Rng>(
    config: &ModelConfig,
    params: &ParameterStore,
    batch: &[Array2<f64>],
    mut rng: Option<&mut R>,
) -> Result<(Vec<LogitMatrix>, ForwardCache, Vec<BnUpdate>), ModelError> {
    validate_params(config, params)?;
    for (i, x) in batch.iter().enumerate() {
        if x.nrows() != config.n_mels {
            return Err(ModelError::ShapeMismatch {
                context: format!("batch item {i}"),
                expected: vec![config.n_mels, x.ncols()],
                got: vec![x.nrows(), x.ncols()],
            });
        }
    }
    let train = rng.is_some();

    let mut acts: Vec<Array2<f64>> = batch.to_vec();
    let mut residual_stack: Vec<Vec<Array2<f64>>> = Vec::new();
    let mut stages = Vec::new();
    let mut bn_updates = Vec::new();
    for step in plan(config) {
        match &step {
            Step::Conv(p) => {
                let (ys, zs) = conv_stage(p, params, &acts)?;
                let x = std::mem::replace(&mut acts, ys);
                if train {
                    stages.push(StageCache::Conv { x, z: zs });
                }
            }
            Step::BatchNorm { name, channels } => {
                let gain = view1(params, &format!("{name}.gain"))?;
                let shift = view1(params, &format!("{name}.shift"))?;
                debug_assert_eq!(*channels, gain.len());
                if train {
                    let mut mean = params.get(&format!("{name}.running_mean"))?.clone();
                    let mut var = params.get(&format!("{name}.running_var"))?.clone();
                    let (ys, cache) = batchnorm_forward_train(
                        &acts,
                        gain,
                        shift,
                        mean.as_slice_mut().expect("contiguous"),
                        var.as_slice_mut().expect("contiguous"),
                        BATCHNORM_MOMENTUM,
                        BATCHNORM_EPS,
                    );
                    bn_updates.push(BnUpdate {
                        name: name.clone(),
                        running_mean: mean,
                        running_var: var,
                    });
                    acts = ys;
                    stages.push(StageCache::BatchNorm(cache));
                } else {
                    if params.get(&format!("{name}.num_batches"))?[0] == 0.0 {
                        return Err(ModelError::EvalBeforeTrain(name.clone()));
                    }
                    let mean = view1(params, &format!("{name}.running_mean"))?;
                    let var = view1(params, &format!("{name}.running_var"))?;
                    acts = batchnorm_forward_eval(&acts, gain, shift, mean, var, BATCHNORM_EPS);
                }
            }
            Step::Relu => {
                acts = acts.iter().map(relu_forward).collect();
                if train {
                    stages.push(StageCache::Relu { y: acts.clone() });
                }
            }
            Step::Dropout { rate } => {
                if let Some(rng) = rng.as_deref_mut() {
                    let mut masks = Vec::with_capacity(acts.len());
                    let mut ys = Vec::with_capacity(acts.len());
                    let mut any_mask = false;
                    for x in &acts {
                        let (y, mask) = dropout_forward(x, *rate, rng, true)?;
                        any_mask |= mask.is_some();
                        ys.push(y);
                        masks.push(mask);
                    }
                    acts = ys;
                    let mask = any_mask.then(|| {
                        masks
                            .into_iter()
                            .map(|m| m.expect("rate > 0 masks every item"))
                            .collect()
                    });
                    stages.push(StageCache::Dropout { mask });
                }
                // eval: identity
            }
            Step::SaveResidual => {
                residual_stack.push(acts.clone());
                if train {
                    stages.push(StageCache::SaveResidual);
                }
            }
            Step::AddResidual { projection } => {
                let saved = residual_stack.pop().expect("plan saves before adding");
                let residual = match projection {
                    Some(p) => conv_stage(p, params, &saved)?.0,
                    None => saved.clone(),
                };
                for (a, r) in acts.iter_mut().zip(&residual) {
                    if a.dim() != r.dim() {
                        return Err(ModelError::ShapeMismatch {
                            context: "residual add".into(),
                            expected: vec![a.nrows(), a.ncols()],
                            got: vec![r.nrows(), r.ncols()],
                        });
                    }
                    *a += r;
                }
                if train {
                    stages.push(StageCache::AddResidual { saved_x: saved });
                }
            }
        }
    }

    let logits = acts.iter().map(|a| a.t().to_owned()).collect();
    Ok((
        logits,
        ForwardCache {
            stages,
            batch_len: batch.len(),
        },
        bn_updates,
    ))
}

/// Reverse-mode pass: given the loss gradient with respect to each
/// item's logits, accumulates gradients for every parameter. Buffer
/// entries (running statistics) come back as zeros, preserving the
/// key/shape bijection with the parameter store.
pub fn model_backward(
    config: &ModelConfig,
    params: &ParameterStore,
    cache: &ForwardCache,
    d_logits: &[LogitMatrix],
) -> Result<GradientStore, ModelError> {
    if d_logits.len() != cache.batch_len {
        return Err(ModelError::BadCache(format!(
            "cache holds {} items, gradients hold {}",
            cache.batch_len,
            d_logits.len()
        )));
    }
    let mut grads = params.zeros_like();
    let mut d_acts: Vec<Array2<f64>> = d_logits.iter().map(|d| d.t().to_owned()).collect();
    let mut d_residual_stack: Vec<Vec<Array2<f64>>> = Vec::new();

    let steps = plan(config);
    if steps.len() != cache.stages.len() {
        return Err(ModelError::BadCache(format!(
            "cache holds {} stages, plan has {}",
            cache.stages.len(),
            steps.len()
        )));
    }

    let conv_backward_stage = |p: &ConvPlan,
                                   grads: &mut GradientStore,
                                   xs: &[Array2<f64>],
                                   zs: &Option<Vec<Array2<f64>>>,
                                   dys: &[Array2<f64>]|
     -> Result<Vec<Array2<f64>>, ModelError> {
        let mut dxs = Vec::with_capacity(xs.len());
        if p.separable {
            let dw_t = view3(params, &format!("{}.depthwise", p.name))?
                .into_shape_with_order((p.in_channels, p.kernel))
                .expect("depthwise is ch x 1 x k");
            let pw_t = view3(params, &format!("{}.pointwise", p.name))?
                .into_shape_with_order((p.out_channels, p.in_channels))
                .expect("pointwise is out x in x 1");
            let zs = zs.as_ref().expect("separable conv caches z");
            for ((x, z), dy) in xs.iter().zip(zs).zip(dys) {
                let (dx, d_dw, d_pw, d_b) =
                    separable_conv1d_backward(x, z, dw_t, pw_t, p.stride, p.dilation, dy);
                // match the stored ch x 1 x k / out x in x 1 layouts
                let d_dw = d_dw.insert_axis(ndarray::Axis(1));
                let d_pw = d_pw.insert_axis(ndarray::Axis(2));
                accumulate(grads, &format!("{}.depthwise", p.name), d_dw.into_dyn())?;
                accumulate(grads, &format!("{}.pointwise", p.name), d_pw.into_dyn())?;
                accumulate(grads, &format!("{}.bias", p.name), d_b.into_dyn())?;
                dxs.push(dx);
            }
        } else {
            let weight = view3(params, &format!("{}.weight", p.name))?;
            for (x, dy) in xs.iter().zip(dys) {
                let (dx, d_w, d_b) = conv1d_backward(x, weight, p.stride, p.dilation, dy);
                accumulate(grads, &format!("{}.weight", p.name), d_w.into_dyn())?;
                accumulate(grads, &format!("{}.bias", p.name), d_b.into_dyn())?;
                dxs.push(dx);
            }
        }
        Ok(dxs)
    };

    for (step, stage) in steps.iter().zip(cache.stages.iter()).rev() {
        match (step, stage) {
            (Step::Conv(p), StageCache::Conv { x, z }) => {
                d_acts = conv_backward_stage(p, &mut grads, x, z, &d_acts)?;
            }
            (Step::BatchNorm { name, .. }, StageCache::BatchNorm(bn)) => {
                let gain = view1(params, &format!("{name}.gain"))?;
                let (dxs, d_gain, d_shift) = batchnorm_backward(bn, gain, &d_acts);
                accumulate(&mut grads, &format!("{name}.gain"), d_gain.into_dyn())?;
                accumulate(&mut grads, &format!("{name}.shift"), d_shift.into_dyn())?;
                d_acts = dxs;
            }
            (Step::Relu, StageCache::Relu { y }) => {
                d_acts = y
                    .iter()
                    .zip(&d_acts)
                    .map(|(y, dy)| relu_backward(y, dy))
                    .collect();
            }
            (Step::Dropout { .. }, StageCache::Dropout { mask }) => {
                if let Some(masks) = mask {
                    d_acts = masks
                        .iter()
                        .zip(&d_acts)
                        .map(|(m, dy)| dropout_backward(Some(m), dy))
                        .collect();
                }
            }
            (Step::AddResidual { projection }, StageCache::AddResidual { saved_x }) => {
                // The add fans the gradient out to both the main path
                // (kept in d_acts) and the residual path.
                let d_saved = match projection {
                    Some(p) => conv_backward_stage(p, &mut grads, saved_x, &None, &d_acts)?,
                    None => d_acts.clone(),
                };
                d_residual_stack.push(d_saved);
            }
            (Step::SaveResidual, StageCache::SaveResidual) => {
                let d_saved = d_residual_stack
                    .pop()
                    .expect("every save has a matching add");
                for (d, extra) in d_acts.iter_mut().zip(d_saved) {
                    *d += &extra;
                }
            }
            _ => {
                return Err(ModelError::BadCache(
                    "cache stages out of step with the plan".into(),
                ))
            }
        }
    }
    Ok(grads)
}

fn accumulate(grads: &mut GradientStore, name: &str, delta: Tensor) -> Result<(), ModelError> {
    let slot = grads.get_mut(name)?;
    if slot.shape() != delta.shape() {
        return Err(ModelError::ShapeMismatch {
            context: name.to_string(),
            expected: slot.shape().to_vec(),
            got: delta.shape().to_vec(),
        });
    }
    *slot += &delta;
    Ok(())
}

#[cfg(test)]
mod tests;
