//! Column-patch transformer for mapping a linear system to its solution.
//!
//! A system `(A, b)` of size `n` becomes `n` tokens, token `i` being the
//! `i`-th column of `A` followed by `b_i`. Tokens are embedded linearly, get a
//! learned positional embedding, pass through pre-norm blocks
//!
//! ```text
//! x̂ = x + Attn(LN₁(x))
//! x' = x̂ + MLP(LN₂(x̂))
//! ```
//!
//! then a final layer norm, and every token is decoded to one scalar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::binio;
use crate::linalg::{DenseMatrix, Vector};
use crate::seeding::{self, streams};

pub const WEIGHTS_FORMAT: &str = "afw-v1";
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{n} tokens exceed the model limit of {max}")]
    TooManyTokens { n: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub token_dim: usize,
    pub out_dim_per_token: usize,
    pub max_tokens: usize,
    pub init_std: f64,
    /// Mask attention to earlier tokens only.
    pub causal: bool,
    /// Add learned absolute positional embeddings after the encoder.
    pub positional: bool,
}

impl ModelConfig {
    /// 12 blocks, width 256, 8 heads, MLP ratio 4.
    pub fn paper(token_dim: usize, max_tokens: usize) -> Self {
        ModelConfig {
            preset: "paper".into(),
            n_layers: 12,
            d_model: 256,
            n_heads: 8,
            mlp_ratio: 4,
            token_dim,
            out_dim_per_token: 1,
            max_tokens,
            init_std: 0.02,
            causal: false,
            positional: true,
        }
    }

    /// 2 blocks, width 64, 4 heads: trainable on one CPU core.
    pub fn desk(token_dim: usize, max_tokens: usize) -> Self {
        ModelConfig { preset: "desk".into(), n_layers: 2, d_model: 64, n_heads: 4, ..Self::paper(token_dim, max_tokens) }
    }

    pub fn from_preset(name: &str, token_dim: usize, max_tokens: usize) -> Result<Self, ModelError> {
        match name {
            "paper" => Ok(Self::paper(token_dim, max_tokens)),
            "desk" => Ok(Self::desk(token_dim, max_tokens)),
            other => Err(ModelError::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Column-patch configuration for `n × n` systems.
    pub fn for_systems(preset: &str, n: usize) -> Result<Self, ModelError> {
        Self::from_preset(preset, n + 1, n)
    }

    /// Newton-state configuration for `n`-dimensional iterates.
    pub fn for_newton(preset: &str, n: usize) -> Result<Self, ModelError> {
        Self::from_preset(preset, 2, n)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("token_dim", self.token_dim),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.out_dim_per_token != 1 {
            return Err(ModelError::Config("only one output per token is supported".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(ModelError::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let hidden = d * self.mlp_ratio;
        let mut specs = vec![
            ParamSpec::new("encoder.weight", vec![self.token_dim, d], ParamKind::Weight),
            ParamSpec::new("encoder.bias", vec![d], ParamKind::Bias),
            ParamSpec::new("positional", vec![self.max_tokens, d], ParamKind::Positional),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            specs.extend([
                ParamSpec::new(p("norm1.gain"), vec![d], ParamKind::NormGain),
                ParamSpec::new(p("norm1.bias"), vec![d], ParamKind::NormBias),
                ParamSpec::new(p("attn.wq.weight"), vec![d, d], ParamKind::Weight),
                ParamSpec::new(p("attn.wq.bias"), vec![d], ParamKind::Bias),
                ParamSpec::new(p("attn.wk.weight"), vec![d, d], ParamKind::Weight),
                ParamSpec::new(p("attn.wk.bias"), vec![d], ParamKind::Bias),
                ParamSpec::new(p("attn.wv.weight"), vec![d, d], ParamKind::Weight),
                ParamSpec::new(p("attn.wv.bias"), vec![d], ParamKind::Bias),
                ParamSpec::new(p("attn.wo.weight"), vec![d, d], ParamKind::ResidualProjection),
                ParamSpec::new(p("attn.wo.bias"), vec![d], ParamKind::Bias),
                ParamSpec::new(p("norm2.gain"), vec![d], ParamKind::NormGain),
                ParamSpec::new(p("norm2.bias"), vec![d], ParamKind::NormBias),
                ParamSpec::new(p("mlp.in.weight"), vec![d, hidden], ParamKind::Weight),
                ParamSpec::new(p("mlp.in.bias"), vec![hidden], ParamKind::Bias),
                ParamSpec::new(p("mlp.out.weight"), vec![hidden, d], ParamKind::ResidualProjection),
                ParamSpec::new(p("mlp.out.bias"), vec![d], ParamKind::Bias),
            ]);
        }
        specs.extend([
            ParamSpec::new("final_norm.gain", vec![d], ParamKind::NormGain),
            ParamSpec::new("final_norm.bias", vec![d], ParamKind::NormBias),
            ParamSpec::new("decoder.weight", vec![d, self.out_dim_per_token], ParamKind::Weight),
            ParamSpec::new("decoder.bias", vec![self.out_dim_per_token], ParamKind::Bias),
        ]);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    /// Output projection of a residual branch; initialized with a depth-scaled std.
    ResidualProjection,
    Bias,
    NormGain,
    NormBias,
    Positional,
}

impl ParamKind {
    /// Whether AdamW applies weight decay to this parameter.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::ResidualProjection)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) -> Self {
        ParamSpec { name: name.into(), shape, kind }
    }
}

const ENCODER_W: usize = 0;
const ENCODER_B: usize = 1;
const POSITIONAL: usize = 2;
const BLOCK_BASE: usize = 3;
const PER_BLOCK: usize = 16;

/// All learnable tensors in [`ModelConfig::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(ModelError::ShapeMismatch(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(ModelError::ShapeMismatch(format!("{}: expected {:?}, got {:?}", s.name, s.shape, t.shape())));
            }
        }
        Ok(ModelWeights { config, specs, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.specs.iter().position(|s| s.name == name).map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a leaf, in spec order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Gaussian initialization; residual projections use `init_std/√(2L)`.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    config.validate()?;
    let mut rng = seeding::rng(seeding::derive(seed, streams::INIT, 0));
    let base = Normal::new(0.0, config.init_std).expect("positive std");
    let residual = Normal::new(0.0, config.init_std / (2.0 * config.n_layers as f64).sqrt()).expect("positive std");
    let specs = config.param_specs();
    let tensors = specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.kind {
                ParamKind::Weight | ParamKind::Positional => (0..n).map(|_| base.sample(&mut rng)).collect(),
                ParamKind::ResidualProjection => (0..n).map(|_| residual.sample(&mut rng)).collect(),
                ParamKind::Bias | ParamKind::NormBias => vec![0.0; n],
                ParamKind::NormGain => vec![1.0; n],
            };
            Tensor::new(s.shape.clone(), data).expect("spec shape")
        })
        .collect();
    Ok(ModelWeights { config: config.clone(), specs, tensors })
}

/// Tokens for `(A, b)`: token `i` is column `i` of `A` followed by `b_i`.
pub fn encode_system(a: &DenseMatrix, b: &[f64], max_tokens: usize) -> Result<Tensor, ModelError> {
    let n = b.len();
    if a.shape() != (n, n) {
        return Err(ModelError::ShapeMismatch(format!("{}x{} matrix with rhs of length {n}", a.rows(), a.cols())));
    }
    if n > max_tokens {
        return Err(ModelError::TooManyTokens { n, max: max_tokens });
    }
    let mut data = Vec::with_capacity(n * (n + 1));
    for i in 0..n {
        data.extend((0..n).map(|r| a[(r, i)]));
        data.push(b[i]);
    }
    Ok(Tensor::new(vec![n, n + 1], data)?)
}

/// Inverse of [`encode_system`].
pub fn decode_system(tokens: &Tensor) -> Result<(DenseMatrix, Vector), ModelError> {
    let s = tokens.shape();
    if s.len() != 2 || s[1] != s[0] + 1 {
        return Err(ModelError::ShapeMismatch(format!("column-patch tokens must be n x (n+1), got {s:?}")));
    }
    let n = s[0];
    let t = tokens.data();
    let a = DenseMatrix::from_fn(n, n, |r, c| t[c * (n + 1) + r]);
    let b = Vector::new((0..n).map(|i| t[i * (n + 1) + n]).collect());
    Ok((a, b))
}

/// Tokens `[(Aᵀb)_i, (x_k)_i]`, one per coordinate.
pub fn encode_newton_state(atb: &[f64], x: &[f64]) -> Result<Tensor, ModelError> {
    if atb.len() != x.len() {
        return Err(ModelError::ShapeMismatch(format!("Aᵀb of length {} vs iterate of length {}", atb.len(), x.len())));
    }
    let data = atb.iter().zip(x).flat_map(|(a, b)| [*a, *b]).collect();
    Ok(Tensor::new(vec![x.len(), 2], data)?)
}

pub fn decode_newton_state(tokens: &Tensor) -> Result<(Vector, Vector), ModelError> {
    let s = tokens.shape();
    if s.len() != 2 || s[1] != 2 {
        return Err(ModelError::ShapeMismatch(format!("newton-state tokens must be n x 2, got {s:?}")));
    }
    let t = tokens.data();
    Ok((Vector::new(t.iter().step_by(2).copied().collect()), Vector::new(t.iter().skip(1).step_by(2).copied().collect())))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Records the forward pass for a `[B, T, token_dim]` batch and returns the
/// `[B, T]` predictions. When `attention` is given, the softmax output of
/// every layer is pushed onto it.
pub fn forward_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &[Var],
    tokens: Var,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var, ModelError> {
    let shape = tape.value(tokens).shape().to_vec();
    if shape.len() != 3 || shape[2] != config.token_dim {
        return Err(ModelError::ShapeMismatch(format!(
            "expected tokens [batch, n, {}], got {shape:?}",
            config.token_dim
        )));
    }
    let (batch, n) = (shape[0], shape[1]);
    if n > config.max_tokens {
        return Err(ModelError::TooManyTokens { n, max: config.max_tokens });
    }
    let heads = config.n_heads;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();

    let mut h = linear(tape, tokens, params[ENCODER_W], params[ENCODER_B])?;
    if config.positional {
        let pos = tape.narrow(params[POSITIONAL], n)?;
        h = tape.add_bias(h, pos)?;
    }
    for l in 0..config.n_layers {
        let p = &params[BLOCK_BASE + l * PER_BLOCK..BLOCK_BASE + (l + 1) * PER_BLOCK];
        let a = tape.layer_norm(h, p[0], p[1], LAYER_NORM_EPS)?;
        let q = linear(tape, a, p[2], p[3])?;
        let k = linear(tape, a, p[4], p[5])?;
        let v = linear(tape, a, p[6], p[7])?;
        let q = tape.split_heads(q, heads)?;
        let k = tape.split_heads(k, heads)?;
        let v = tape.split_heads(v, heads)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.mul_scalar(scores, scale)?;
        if config.causal {
            scores = tape.causal_mask(scores)?;
        }
        let probs = tape.softmax_last_axis(scores)?;
        if let Some(list) = attention.as_deref_mut() {
            list.push(probs);
        }
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.merge_heads(ctx)?;
        let attn = linear(tape, ctx, p[8], p[9])?;
        h = tape.add(h, attn)?;

        let m = tape.layer_norm(h, p[10], p[11], LAYER_NORM_EPS)?;
        let m = linear(tape, m, p[12], p[13])?;
        let m = tape.gelu(m)?;
        let m = linear(tape, m, p[14], p[15])?;
        h = tape.add(h, m)?;
    }
    let tail = BLOCK_BASE + config.n_layers * PER_BLOCK;
    let h = tape.layer_norm(h, params[tail], params[tail + 1], LAYER_NORM_EPS)?;
    let y = linear(tape, h, params[tail + 2], params[tail + 3])?;
    Ok(tape.reshape(y, &[batch, n])?)
}

/// Predictions for a `[B, T, token_dim]` batch, returned as `[B, T]`.
pub fn forward_batch(weights: &ModelWeights, tokens: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape);
    let t = tape.leaf(tokens.clone());
    let y = forward_graph(&mut tape, &weights.config, &params, t, None)?;
    Ok(tape.value(y).clone())
}

/// One prediction per token of a single `[T, token_dim]` sequence.
pub fn forward(weights: &ModelWeights, tokens: &Tensor) -> Result<Vector, ModelError> {
    let (out, _) = forward_with_attention(weights, tokens)?;
    Ok(out)
}

/// Like [`forward`], also returning each layer's `[H, T, T]` attention matrix.
pub fn forward_with_attention(weights: &ModelWeights, tokens: &Tensor) -> Result<(Vector, Vec<Tensor>), ModelError> {
    let s = tokens.shape();
    if s.len() != 2 {
        return Err(ModelError::ShapeMismatch(format!("expected [n, token_dim] tokens, got {s:?}")));
    }
    let batched = tokens.clone().reshaped(vec![1, s[0], s[1]])?;
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape);
    let t = tape.leaf(batched);
    let mut maps = Vec::new();
    let y = forward_graph(&mut tape, &weights.config, &params, t, Some(&mut maps))?;
    let attn = maps
        .into_iter()
        .map(|v| {
            let t = tape.value(v);
            let sh = t.shape()[1..].to_vec();
            t.clone().reshaped(sh).expect("drop unit batch axis")
        })
        .collect();
    Ok((Vector::new(tape.value(y).data().to_vec()), attn))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in doubles.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    format: String,
    preset: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes `u64-LE header length | JSON header | little-endian doubles`.
pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<(), ModelError> {
    let mut offset = 0;
    let tensors = weights
        .specs
        .iter()
        .zip(&weights.tensors)
        .map(|(s, t)| {
            let e = TensorEntry { name: s.name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.numel();
            e
        })
        .collect();
    let header = WeightsHeader {
        format: WEIGHTS_FORMAT.into(),
        preset: weights.config.preset.clone(),
        config: weights.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in &weights.tensors {
        binio::write_f64s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(ModelError::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: WeightsHeader = serde_json::from_slice(&json).map_err(|e| ModelError::Format(e.to_string()))?;
    if header.format != WEIGHTS_FORMAT {
        return Err(ModelError::Format(format!("expected {WEIGHTS_FORMAT}, found {}", header.format)));
    }
    header.config.validate().map_err(|e| ModelError::Format(e.to_string()))?;
    let specs = header.config.param_specs();
    if specs.len() != header.tensors.len() {
        return Err(ModelError::Format(format!(
            "config implies {} tensors, header lists {}",
            specs.len(),
            header.tensors.len()
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(specs.len());
    for (s, e) in specs.iter().zip(&header.tensors) {
        if s.name != e.name || s.shape != e.shape || e.offset != offset {
            return Err(ModelError::Format(format!(
                "tensor {} {:?}@{} does not match config-derived {} {:?}@{offset}",
                e.name, e.shape, e.offset, s.name, s.shape
            )));
        }
        let n: usize = s.shape.iter().product();
        let data = binio::read_f64s(&mut r, n).map_err(|e| ModelError::Format(format!("payload: {e}")))?;
        tensors.push(Tensor::new(s.shape.clone(), data)?);
        offset += n;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelError::Format("trailing bytes after payload".into()));
    }
    Ok(ModelWeights { config: header.config, specs, tensors })
}

/// Loads and checks the stored architecture against `expected`.
pub fn load_weights_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelWeights, ModelError> {
    let w = load_weights(path)?;
    let c = w.config();
    let same_shape = c.n_layers == expected.n_layers
        && c.d_model == expected.d_model
        && c.n_heads == expected.n_heads
        && c.mlp_ratio == expected.mlp_ratio
        && c.token_dim == expected.token_dim
        && c.max_tokens == expected.max_tokens
        && c.out_dim_per_token == expected.out_dim_per_token;
    if !same_shape {
        return Err(ModelError::Format(format!(
            "stored architecture (layers {}, d_model {}, heads {}, token_dim {}, max_tokens {}) differs from expected \
             (layers {}, d_model {}, heads {}, token_dim {}, max_tokens {})",
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.token_dim,
            c.max_tokens,
            expected.n_layers,
            expected.d_model,
            expected.n_heads,
            expected.token_dim,
            expected.max_tokens
        )));
    }
    Ok(w)
}
