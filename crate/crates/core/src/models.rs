//! The two speed regressors.
//!
//! Recurrent: `conv embed → cell unroll → temporal attention → conv → mean-pool → dense`.
//! Transformer: `per-step embed → +PE → encoder×n → mean-pool → dense → relu → dropout → dense`.
//!
//! The network output is a standardized speed; `target_stats` maps it back to km/h.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Track;
use crate::features::{self, FeatureError, FeatureSequence, NormStats, N_FEATURES};
use crate::layers::{
    dropout_backward, dropout_forward, positional_encoding, AttentionCache, CellKind, Conv1d,
    Conv1dGrads, Dense, DenseGrads, EncoderCache, EncoderLayer, EncoderLayerGrads, LayerNorm,
    MultiHeadSelfAttention, Recurrent, RecurrentCache, RecurrentGrads, TemporalAttention,
    TemporalAttentionGrads, KERNEL_SIZE,
};
use crate::params::{Grads, ParamSet};
use crate::rng::{init_param, Init, Rng};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("cache was produced before the last parameter update")]
    StaleCache,
    #[error("track {track_id:?} has {frames} frame(s); the model needs at least {needed}")]
    TooShort {
        track_id: String,
        frames: usize,
        needed: usize,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("parameter {name:?}: {reason}")]
    Param { name: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Rnn,
    Lstm,
    Gru,
    Transformer,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Rnn, Variant::Lstm, Variant::Gru, Variant::Transformer];

    pub fn cell(self) -> Option<CellKind> {
        match self {
            Variant::Rnn => Some(CellKind::Rnn),
            Variant::Lstm => Some(CellKind::Lstm),
            Variant::Gru => Some(CellKind::Gru),
            Variant::Transformer => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rnn => "rnn",
            Variant::Lstm => "lstm",
            Variant::Gru => "gru",
            Variant::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?} (expected rnn, lstm, gru or transformer)"))
    }
}

fn d_input() -> usize {
    N_FEATURES
}
fn d_embed() -> usize {
    32
}
fn d_hidden() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_ff() -> usize {
    128
}
fn d_dropout() -> f64 {
    0.1
}
fn d_seq_len() -> usize {
    20
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "d_input")]
    pub input_dim: usize,
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    /// Stack depth; `None` means 1 for recurrent variants and 2 for the transformer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    #[serde(default = "d_dropout")]
    pub dropout_p: f64,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    /// Transformer only. When false the encoder sees no position signal.
    #[serde(default = "yes")]
    pub use_positional_encoding: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            input_dim: d_input(),
            embed_dim: d_embed(),
            hidden_dim: d_hidden(),
            n_layers: None,
            n_heads: d_heads(),
            d_ff: d_ff(),
            dropout_p: d_dropout(),
            seq_len: d_seq_len(),
            use_positional_encoding: true,
        }
    }

    pub fn layers(&self) -> usize {
        self.n_layers.unwrap_or(match self.variant {
            Variant::Transformer => 2,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let dims = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.layers()),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return err(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.variant == Variant::Transformer {
            if self.embed_dim % self.n_heads != 0 {
                return err(format!(
                    "embed_dim {} is not divisible by n_heads {}",
                    self.embed_dim, self.n_heads
                ));
            }
            if self.use_positional_encoding && self.embed_dim % 2 != 0 {
                return err(format!("positional encoding needs an even embed_dim, got {}", self.embed_dim));
            }
        }
        Ok(())
    }

    /// Every parameter's name, shape and initializer, in initialization order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        use Init::*;
        let (c, e, h) = (self.input_dim, self.embed_dim, self.hidden_dim);
        let mut out = Vec::new();
        let mut push = |n: String, s: Vec<usize>, i: Init| out.push((n, s, i));
        match self.variant.cell() {
            Some(kind) => {
                push("embed.w".into(), vec![KERNEL_SIZE, c, e], XavierUniform);
                push("embed.b".into(), vec![e], Zeros);
                let g = kind.gates() * h;
                for l in 0..self.layers() {
                    let cin = if l == 0 { e } else { h };
                    push(format!("rec{l}.wx"), vec![cin, g], XavierUniform);
                    push(format!("rec{l}.wh"), vec![h, g], XavierUniform);
                    push(format!("rec{l}.b"), vec![g], Zeros);
                }
                push("attn.w".into(), vec![h, h], XavierUniform);
                push("attn.v".into(), vec![h], XavierUniform);
                push("proc.w".into(), vec![KERNEL_SIZE, h, h], XavierUniform);
                push("proc.b".into(), vec![h], Zeros);
                push("fc.w".into(), vec![h, 1], XavierUniform);
                push("fc.b".into(), vec![1], Zeros);
            }
            None => {
                push("embed.w".into(), vec![c, e], XavierUniform);
                push("embed.b".into(), vec![e], Zeros);
                for l in 0..self.layers() {
                    for p in ["q", "k", "v", "o"] {
                        push(format!("enc{l}.w{p}"), vec![e, e], XavierUniform);
                        push(format!("enc{l}.b{p}"), vec![e], Zeros);
                    }
                    push(format!("enc{l}.ln1.gain"), vec![e], Ones);
                    push(format!("enc{l}.ln1.bias"), vec![e], Zeros);
                    push(format!("enc{l}.ff1.w"), vec![e, self.d_ff], XavierUniform);
                    push(format!("enc{l}.ff1.b"), vec![self.d_ff], Zeros);
                    push(format!("enc{l}.ff2.w"), vec![self.d_ff, e], XavierUniform);
                    push(format!("enc{l}.ff2.b"), vec![e], Zeros);
                    push(format!("enc{l}.ln2.gain"), vec![e], Ones);
                    push(format!("enc{l}.ln2.bias"), vec![e], Zeros);
                }
                push("fc1.w".into(), vec![e, h], XavierUniform);
                push("fc1.b".into(), vec![h], Zeros);
                push("out.w".into(), vec![h, 1], XavierUniform);
                push("out.b".into(), vec![1], Zeros);
            }
        }
        out
    }
}

/// Mean and standard deviation of the training labels, in km/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TargetStats {
    /// Population statistics; a (near-)constant label set gets `std = 1`.
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::default();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std < 1e-8 { 1.0 } else { std },
        }
    }

    pub fn standardize(&self, kmh: f64) -> f64 {
        (kmh - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone)]
pub struct SpeedModel {
    config: ModelConfig,
    params: ParamSet,
    pub norm_stats: NormStats,
    pub target_stats: TargetStats,
    version: u64,
}

enum SampleCache {
    Recurrent {
        x: Tensor,
        cells: Vec<RecurrentCache>,
        attn: AttentionCache,
        attended: Tensor,
        pooled: Tensor,
    },
    Transformer {
        x: Tensor,
        layers: Vec<EncoderCache>,
        pooled: Tensor,
        hidden_pre: Tensor,
        hidden: Tensor,
        mask: Option<Tensor>,
    },
}

/// State kept by [`SpeedModel::forward`] for the backward pass.
pub struct ForwardCache {
    version: u64,
    seq_len: usize,
    samples: Vec<SampleCache>,
    standardized: Vec<f64>,
}

impl ForwardCache {
    /// Raw network outputs before de-standardization.
    pub fn standardized(&self) -> &[f64] {
        &self.standardized
    }
}

impl fmt::Debug for ForwardCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardCache")
            .field("version", &self.version)
            .field("batch", &self.samples.len())
            .finish()
    }
}

/// Per-batch gradient accumulators shaped like the model's layers.
enum LayerGrads {
    Recurrent {
        embed: Conv1dGrads,
        cells: Vec<RecurrentGrads>,
        attn: TemporalAttentionGrads,
        proc: Conv1dGrads,
        fc: DenseGrads,
    },
    Transformer {
        embed: DenseGrads,
        layers: Vec<EncoderLayerGrads>,
        fc1: DenseGrads,
        out: DenseGrads,
    },
}

fn batch_dims(batch: &Tensor) -> Result<(usize, usize, usize)> {
    match *batch.shape() {
        [b, t, c] if b > 0 && t > 0 => Ok((b, t, c)),
        _ => Err(TensorError::Rank {
            op: "model input",
            expected: 3,
            shape: batch.shape().to_vec(),
        }
        .into()),
    }
}

fn sample(batch: &Tensor, i: usize, t: usize, c: usize) -> Tensor {
    let n = t * c;
    Tensor::new(vec![t, c], batch.data()[i * n..(i + 1) * n].to_vec()).expect("sample slice")
}

/// Stacks equal-length windows into a `[B, T, C]` batch.
pub fn stack_windows(windows: &[&Tensor]) -> Result<Tensor> {
    let first = windows.first().ok_or(TensorError::InvalidShape { shape: vec![0], len: 0 })?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(windows.len() * first.len());
    for w in windows {
        if w.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "stack windows",
                left: shape,
                right: w.shape().to_vec(),
            }
            .into());
        }
        data.extend_from_slice(w.data());
    }
    let mut full = vec![windows.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

fn row_matrix(v: Tensor) -> Tensor {
    let n = v.len();
    v.reshape(&[1, n]).expect("row reshape")
}

fn pool_backward(dpooled: &Tensor, t: usize) -> Tensor {
    let d = dpooled.len();
    let mut out = Tensor::zeros(&[t, d]);
    for r in 0..t {
        for (o, g) in out.row_mut(r).iter_mut().zip(dpooled.data()) {
            *o = g / t as f64;
        }
    }
    out
}

impl SpeedModel {
    /// Fresh model with Xavier-uniform weights, zero biases and unit norm gains.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in config.param_specs() {
            params.insert(name, init_param(&shape, init, rng));
        }
        Ok(Self {
            config,
            params,
            norm_stats: NormStats::identity(),
            target_stats: TargetStats::default(),
            version: 0,
        })
    }

    /// Reassembles a model from stored parts, checking every parameter shape.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamSet,
        norm_stats: NormStats,
        target_stats: TargetStats,
    ) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(ModelError::Param {
                name: "*".into(),
                reason: format!("expected {} tensors, found {}", specs.len(), params.len()),
            });
        }
        for (name, shape, _) in &specs {
            match params.get(name) {
                None => {
                    return Err(ModelError::Param {
                        name: name.clone(),
                        reason: "missing".into(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Param {
                        name: name.clone(),
                        reason: format!("shape {:?}, expected {shape:?}", t.shape()),
                    })
                }
                Some(t) if !t.is_finite() => {
                    return Err(ModelError::Param {
                        name: name.clone(),
                        reason: "non-finite value".into(),
                    })
                }
                _ => {}
            }
        }
        if !(target_stats.std.is_finite() && target_stats.std > 0.0 && target_stats.mean.is_finite()) {
            return Err(ModelError::Config(format!("bad target stats {target_stats:?}")));
        }
        Ok(Self {
            config,
            params,
            norm_stats,
            target_stats,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a validated model"))
    }

    fn conv(&self, prefix: &str) -> Conv1d<'_> {
        Conv1d {
            w: self.p(&format!("{prefix}.w")),
            b: self.p(&format!("{prefix}.b")),
        }
    }

    fn dense(&self, prefix: &str) -> Dense<'_> {
        Dense {
            w: self.p(&format!("{prefix}.w")),
            b: self.p(&format!("{prefix}.b")),
        }
    }

    fn cell(&self, kind: CellKind, l: usize) -> Recurrent<'_> {
        Recurrent {
            kind,
            wx: self.p(&format!("rec{l}.wx")),
            wh: self.p(&format!("rec{l}.wh")),
            b: self.p(&format!("rec{l}.b")),
        }
    }

    fn attention(&self) -> TemporalAttention<'_> {
        TemporalAttention {
            w: self.p("attn.w"),
            v: self.p("attn.v"),
        }
    }

    fn encoder(&self, l: usize) -> EncoderLayer<'_> {
        let p = |s: &str| self.p(&format!("enc{l}.{s}"));
        EncoderLayer {
            dropout_p: self.config.dropout_p,
            attn: MultiHeadSelfAttention {
                n_heads: self.config.n_heads,
                wq: p("wq"),
                bq: p("bq"),
                wk: p("wk"),
                bk: p("bk"),
                wv: p("wv"),
                bv: p("bv"),
                wo: p("wo"),
                bo: p("bo"),
            },
            norm1: LayerNorm {
                gain: p("ln1.gain"),
                bias: p("ln1.bias"),
            },
            ff1: self.dense(&format!("enc{l}.ff1")),
            ff2: self.dense(&format!("enc{l}.ff2")),
            norm2: LayerNorm {
                gain: p("ln2.gain"),
                bias: p("ln2.bias"),
            },
        }
    }

    /// Predicts km/h for a `[B, seq_len, input_dim]` batch of normalized windows.
    /// Train mode enables dropout and needs `rng` whenever `dropout_p > 0`.
    pub fn forward(
        &self,
        batch: &Tensor,
        train_mode: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Tensor, ForwardCache)> {
        let (b, t, c) = batch_dims(batch)?;
        if t != self.config.seq_len || c != self.config.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                left: batch.shape().to_vec(),
                right: vec![b, self.config.seq_len, self.config.input_dim],
            }
            .into());
        }
        let needs_rng = train_mode && self.config.dropout_p > 0.0 && self.config.variant == Variant::Transformer;
        if needs_rng && rng.is_none() {
            return Err(ModelError::Config("train-mode forward with dropout needs an rng".into()));
        }
        let pe = match self.config.variant {
            Variant::Transformer if self.config.use_positional_encoding => {
                Some(positional_encoding(t, self.config.embed_dim)?)
            }
            _ => None,
        };
        let mut samples = Vec::with_capacity(b);
        let mut standardized = Vec::with_capacity(b);
        for i in 0..b {
            let x = sample(batch, i, t, c);
            let (z, cache) = match self.config.variant.cell() {
                Some(kind) => self.forward_recurrent(kind, x)?,
                None => self.forward_transformer(x, pe.as_ref(), train_mode, rng.as_deref_mut())?,
            };
            standardized.push(z);
            samples.push(cache);
        }
        let pred = Tensor::vector(standardized.iter().map(|&z| self.target_stats.destandardize(z)).collect());
        Ok((
            pred,
            ForwardCache {
                version: self.version,
                seq_len: t,
                samples,
                standardized,
            },
        ))
    }

    fn forward_recurrent(&self, kind: CellKind, x: Tensor) -> Result<(f64, SampleCache)> {
        let mut h = self.conv("embed").forward(&x)?;
        let mut cells = Vec::with_capacity(self.config.layers());
        for l in 0..self.config.layers() {
            let (next, cache) = self.cell(kind, l).forward(&h)?;
            cells.push(cache);
            h = next;
        }
        let (attended, _, attn) = self.attention().forward(&h)?;
        let processed = self.conv("proc").forward(&attended)?;
        let pooled = row_matrix(processed.mean_rows());
        let z = self.dense("fc").forward(&pooled)?.data()[0];
        Ok((
            z,
            SampleCache::Recurrent {
                x,
                cells,
                attn,
                attended,
                pooled,
            },
        ))
    }

    fn forward_transformer(
        &self,
        x: Tensor,
        pe: Option<&Tensor>,
        train_mode: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<(f64, SampleCache)> {
        let mut h = self.dense("embed").forward(&x)?;
        if let Some(pe) = pe {
            h.add_assign(pe)?;
        }
        let mut layers = Vec::with_capacity(self.config.layers());
        for l in 0..self.config.layers() {
            let (next, cache) = self.encoder(l).forward(&h, train_mode, rng.as_deref_mut())?;
            layers.push(cache);
            h = next;
        }
        let pooled = row_matrix(h.mean_rows());
        let hidden_pre = self.dense("fc1").forward(&pooled)?;
        let act = hidden_pre.map(|v| v.max(0.0));
        let (hidden, mask) = dropout_forward(&act, self.config.dropout_p, train_mode, rng);
        let z = self.dense("out").forward(&hidden)?.data()[0];
        Ok((
            z,
            SampleCache::Transformer {
                x,
                layers,
                pooled,
                hidden_pre,
                hidden,
                mask,
            },
        ))
    }

    /// Gradients of a loss with respect to every parameter, given
    /// `grad_pred = dL/dpred_kmh` for each sample of the cached batch.
    pub fn backward(&self, cache: &ForwardCache, grad_pred: &Tensor) -> Result<Grads> {
        let scaled = grad_pred.scale(self.target_stats.std);
        self.backward_standardized(cache, &scaled)
    }

    /// Like [`backward`](Self::backward) but with `dL/dz` for the
    /// standardized outputs `z`.
    pub fn backward_standardized(&self, cache: &ForwardCache, grad_z: &Tensor) -> Result<Grads> {
        if cache.version != self.version {
            return Err(ModelError::StaleCache);
        }
        if grad_z.len() != cache.samples.len() {
            return Err(TensorError::ShapeMismatch {
                op: "model backward",
                left: grad_z.shape().to_vec(),
                right: vec![cache.samples.len()],
            }
            .into());
        }
        let mut acc = self.zero_layer_grads();
        for (s, &dz) in cache.samples.iter().zip(grad_z.data()) {
            let dout = Tensor::from_rows(&[[dz]])?;
            match (s, &mut acc) {
                (
                    SampleCache::Recurrent {
                        x,
                        cells,
                        attn,
                        attended,
                        pooled,
                    },
                    LayerGrads::Recurrent {
                        embed,
                        cells: gcells,
                        attn: gattn,
                        proc,
                        fc,
                    },
                ) => {
                    let kind = self.config.variant.cell().expect("recurrent cache");
                    let dpooled = self.dense("fc").backward(pooled, &dout, fc)?;
                    let dproc = pool_backward(&dpooled, cache.seq_len);
                    let dattended = self.conv("proc").backward(attended, &dproc, proc)?;
                    let mut dh = self.attention().backward(attn, &dattended, gattn)?;
                    for (l, c) in cells.iter().enumerate().rev() {
                        dh = self.cell(kind, l).backward(c, &dh, &mut gcells[l])?;
                    }
                    self.conv("embed").backward(x, &dh, embed)?;
                }
                (
                    SampleCache::Transformer {
                        x,
                        layers,
                        pooled,
                        hidden_pre,
                        hidden,
                        mask,
                    },
                    LayerGrads::Transformer {
                        embed,
                        layers: glayers,
                        fc1,
                        out,
                    },
                ) => {
                    let dhidden = self.dense("out").backward(hidden, &dout, out)?;
                    let dact = dropout_backward(&dhidden, mask.as_ref());
                    let dpre = Tensor::new(
                        dact.shape().to_vec(),
                        dact.data()
                            .iter()
                            .zip(hidden_pre.data())
                            .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )?;
                    let dpooled = self.dense("fc1").backward(pooled, &dpre, fc1)?;
                    let mut dh = pool_backward(&dpooled, cache.seq_len);
                    for (l, c) in layers.iter().enumerate().rev() {
                        dh = self.encoder(l).backward(c, &dh, &mut glayers[l])?;
                    }
                    self.dense("embed").backward(x, &dh, embed)?;
                }
                _ => unreachable!("cache variant always matches the model"),
            }
        }
        Ok(self.name_grads(acc))
    }

    fn zero_layer_grads(&self) -> LayerGrads {
        let n = self.config.layers();
        match self.config.variant.cell() {
            Some(kind) => LayerGrads::Recurrent {
                embed: Conv1dGrads::zeros_like(&self.conv("embed")),
                cells: (0..n).map(|l| RecurrentGrads::zeros_like(&self.cell(kind, l))).collect(),
                attn: TemporalAttentionGrads::zeros_like(&self.attention()),
                proc: Conv1dGrads::zeros_like(&self.conv("proc")),
                fc: DenseGrads::zeros_like(&self.dense("fc")),
            },
            None => LayerGrads::Transformer {
                embed: DenseGrads::zeros_like(&self.dense("embed")),
                layers: (0..n).map(|l| EncoderLayerGrads::zeros_like(&self.encoder(l))).collect(),
                fc1: DenseGrads::zeros_like(&self.dense("fc1")),
                out: DenseGrads::zeros_like(&self.dense("out")),
            },
        }
    }

    fn name_grads(&self, acc: LayerGrads) -> Grads {
        let mut g = Grads::new();
        let mut put = |n: String, t: Tensor| {
            g.insert(n, t);
        };
        match acc {
            LayerGrads::Recurrent {
                embed,
                cells,
                attn,
                proc,
                fc,
            } => {
                put("embed.w".into(), embed.w);
                put("embed.b".into(), embed.b);
                for (l, c) in cells.into_iter().enumerate() {
                    put(format!("rec{l}.wx"), c.wx);
                    put(format!("rec{l}.wh"), c.wh);
                    put(format!("rec{l}.b"), c.b);
                }
                put("attn.w".into(), attn.w);
                put("attn.v".into(), attn.v);
                put("proc.w".into(), proc.w);
                put("proc.b".into(), proc.b);
                put("fc.w".into(), fc.w);
                put("fc.b".into(), fc.b);
            }
            LayerGrads::Transformer {
                embed,
                layers,
                fc1,
                out,
            } => {
                put("embed.w".into(), embed.w);
                put("embed.b".into(), embed.b);
                for (l, e) in layers.into_iter().enumerate() {
                    let a = e.attn;
                    for (s, t) in [
                        ("wq", a.wq),
                        ("bq", a.bq),
                        ("wk", a.wk),
                        ("bk", a.bk),
                        ("wv", a.wv),
                        ("bv", a.bv),
                        ("wo", a.wo),
                        ("bo", a.bo),
                        ("ln1.gain", e.norm1.gain),
                        ("ln1.bias", e.norm1.bias),
                        ("ff1.w", e.ff1.w),
                        ("ff1.b", e.ff1.b),
                        ("ff2.w", e.ff2.w),
                        ("ff2.b", e.ff2.b),
                        ("ln2.gain", e.norm2.gain),
                        ("ln2.bias", e.norm2.bias),
                    ] {
                        put(format!("enc{l}.{s}"), t);
                    }
                }
                put("fc1.w".into(), fc1.w);
                put("fc1.b".into(), fc1.b);
                put("out.w".into(), out.w);
                put("out.b".into(), out.b);
            }
        }
        g
    }

    /// Eval-mode km/h predictions for already-normalized windows.
    pub fn predict_windows(&self, windows: &[FeatureSequence]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&Tensor> = windows.iter().map(|w| &w.values).collect();
        let batch = stack_windows(&refs)?;
        Ok(self.forward(&batch, false, None)?.0.into_data())
    }

    /// Normalized windows (stride 1) of a track at the model's sequence length.
    pub fn track_windows(&self, track: &Track) -> Result<Vec<FeatureSequence>> {
        let needed = self.config.seq_len + 1;
        if track.frames.len() < needed {
            return Err(ModelError::TooShort {
                track_id: track.track_id.clone(),
                frames: track.frames.len(),
                needed,
            });
        }
        let seq = features::normalize(&features::extract_features(track)?, &self.norm_stats);
        Ok(features::window(&seq, self.config.seq_len, 1))
    }

    /// Track speed as the mean of every window prediction, plus those predictions.
    pub fn predict_track(&self, track: &Track) -> Result<(f64, Vec<f64>)> {
        let per_window = self.predict_windows(&self.track_windows(track)?)?;
        let speed = per_window.iter().sum::<f64>() / per_window.len() as f64;
        Ok((speed, per_window))
    }
}
