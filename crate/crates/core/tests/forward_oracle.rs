//! The tape forward pass against a loop-by-loop reimplementation.

use algebraformer::autodiff::Tensor;
use algebraformer::model::{self, ModelConfig, ModelWeights};

type Mat = Vec<Vec<f64>>;

fn param(w: &ModelWeights, name: &str) -> Vec<f64> {
    w.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

/// `x · W + b` with `W` stored row-major as `[in, out]`.
fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + model::LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn oracle(w: &ModelWeights, tokens: &Mat) -> Vec<f64> {
    let c = w.config();
    let t = tokens.len();
    let (d, heads) = (c.d_model, c.n_heads);
    let dh = d / heads;
    let mut h = linear(tokens, &param(w, "encoder.weight"), &param(w, "encoder.bias"));
    if c.positional {
        let pos = param(w, "positional");
        for (i, row) in h.iter_mut().enumerate() {
            for j in 0..d {
                row[j] += pos[i * d + j];
            }
        }
    }
    for l in 0..c.n_layers {
        let p = |s: &str| param(w, &format!("blocks.{l}.{s}"));
        let a = layer_norm(&h, &p("norm1.gain"), &p("norm1.bias"));
        let q = linear(&a, &p("attn.wq.weight"), &p("attn.wq.bias"));
        let k = linear(&a, &p("attn.wk.weight"), &p("attn.wk.bias"));
        let v = linear(&a, &p("attn.wv.weight"), &p("attn.wv.bias"));
        let mut ctx = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..t {
                let limit = if c.causal { i + 1 } else { t };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| (0..dh).map(|e| q[i][off + e] * k[j][off + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for x in 0..dh {
                        ctx[i][off + x] += e / z * v[j][off + x];
                    }
                }
            }
        }
        let attn = linear(&ctx, &p("attn.wo.weight"), &p("attn.wo.bias"));
        for i in 0..t {
            for j in 0..d {
                h[i][j] += attn[i][j];
            }
        }
        let m = layer_norm(&h, &p("norm2.gain"), &p("norm2.bias"));
        let mut m = linear(&m, &p("mlp.in.weight"), &p("mlp.in.bias"));
        m.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = gelu(*v)));
        let m = linear(&m, &p("mlp.out.weight"), &p("mlp.out.bias"));
        for i in 0..t {
            for j in 0..d {
                h[i][j] += m[i][j];
            }
        }
    }
    let h = layer_norm(&h, &param(w, "final_norm.gain"), &param(w, "final_norm.bias"));
    linear(&h, &param(w, "decoder.weight"), &param(w, "decoder.bias")).into_iter().map(|r| r[0]).collect()
}

fn config(causal: bool, layers: usize) -> ModelConfig {
    ModelConfig {
        preset: "tiny".into(),
        n_layers: layers,
        d_model: 8,
        n_heads: 2,
        mlp_ratio: 4,
        token_dim: 5,
        out_dim_per_token: 1,
        max_tokens: 6,
        init_std: 0.3,
        causal,
        positional: true,
    }
}

fn tokens(t: usize, td: usize) -> Mat {
    (0..t).map(|i| (0..td).map(|j| ((i * 7 + j * 3) as f64 * 0.61).sin()).collect()).collect()
}

fn check(cfg: ModelConfig, t: usize, seed: u64) {
    let w = model::init_weights(&cfg, seed).unwrap();
    let toks = tokens(t, cfg.token_dim);
    let flat: Vec<f64> = toks.iter().flatten().copied().collect();
    let got = model::forward(&w, &Tensor::new(vec![t, cfg.token_dim], flat).unwrap()).unwrap();
    let want = oracle(&w, &toks);
    assert_eq!(got.len(), t);
    for (g, e) in got.iter().zip(&want) {
        assert!((g - e).abs() <= 1e-10, "tape {g} vs oracle {e}");
    }
}

#[test]
fn one_block_width_eight_matches_oracle() {
    check(config(false, 1), 6, 3);
}

#[test]
fn shorter_sequence_uses_leading_positions() {
    check(config(false, 1), 4, 4);
}

#[test]
fn causal_and_deeper_variants_match_oracle() {
    check(config(true, 1), 5, 5);
    check(config(false, 2), 6, 6);
}

#[test]
fn batched_forward_matches_per_sequence() {
    let cfg = config(false, 1);
    let w = model::init_weights(&cfg, 9).unwrap();
    let a = tokens(6, 5);
    let b: Mat = a.iter().map(|r| r.iter().map(|v| v * -0.5 + 0.1).collect()).collect();
    let flat: Vec<f64> = a.iter().chain(&b).flatten().copied().collect();
    let batch = model::forward_batch(&w, &Tensor::new(vec![2, 6, 5], flat).unwrap()).unwrap();
    let ya = oracle(&w, &a);
    let yb = oracle(&w, &b);
    for i in 0..6 {
        assert!((batch.data()[i] - ya[i]).abs() <= 1e-10);
        assert!((batch.data()[6 + i] - yb[i]).abs() <= 1e-10);
    }
}
