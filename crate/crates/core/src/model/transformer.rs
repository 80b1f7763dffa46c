// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder forward pass with residual hooks, and its hand-derived
//! backward pass.

use crate::error::{invalid, Error, Result};

use super::hooks::{ActivationTrace, ForwardPass, Hooks};
use super::params::ModelParams;

const LN_EPS: f64 = 1e-5;

/// `a (n×k) · b (k×m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += s * w;
            }
        }
    }
    out
}

/// `out (n×k) += a (n×m) · bᵀ` where `b` is `k×m`.
fn matmul_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let br = &b[p * m..(p + 1) * m];
            out[i * k + p] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out (k×m) += aᵀ · b` where `a` is `n×k` and `b` is `n×m`.
fn matmul_at_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, y) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += s * y;
            }
        }
    }
}

struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], t: usize, d: usize) -> (Vec<f64>, LayerNormCache) {
    let mut out = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Returns the input gradient; accumulates gain and bias gradients.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    t: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × t × t, causal (entries above the diagonal are zero).
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LayerNormCache,
    m: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
}

struct Tape {
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    y: Vec<f64>,
    /// t × vocab.
    logits: Vec<f64>,
    /// Post-block, post-hook residuals per layer (t × d each).
    residuals: Vec<Vec<f64>>,
}

impl ModelParams {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() > self.config.context {
            return Err(invalid(format!(
                "sequence length {} exceeds context {}",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32], hooks: &Hooks, keep: bool) -> Result<Tape> {
        self.check_tokens(tokens)?;
        hooks.check(self.config.n_layers, tokens.len(), self.config.d_model)?;
        let cfg = &self.config;
        let (t, d, f, h, v) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let w = &self.data;
        let lay = &self.layout;

        let mut x = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &w[lay.tok_emb + tok as usize * d..][..d];
            let pe = &w[lay.pos_emb + i * d..][..d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut residuals = Vec::with_capacity(cfg.n_layers);
        for (l, off) in lay.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &w[off.ln1_g..][..d], &w[off.ln1_b..][..d], t, d);
            let q = matmul(&a, &w[off.wq..][..d * d], t, d, d);
            let k = matmul(&a, &w[off.wk..][..d * d], t, d, d);
            let vv = matmul(&a, &w[off.wv..][..d * d], t, d, d);
            let mut probs = vec![0.0; h * t * t];
            let mut o = vec![0.0; t * d];
            for hd in 0..h {
                let c0 = hd * dh;
                for i in 0..t {
                    let row = &mut probs[(hd * t + i) * t..][..i + 1];
                    let qi = &q[i * d + c0..][..dh];
                    for (s, p) in row.iter_mut().enumerate() {
                        let ks = &k[s * d + c0..][..dh];
                        *p = scale * qi.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(row);
                    let oi = &mut o[i * d + c0..][..dh];
                    for (s, &p) in row.iter().enumerate() {
                        for (oo, vs) in oi.iter_mut().zip(&vv[s * d + c0..][..dh]) {
                            *oo += p * vs;
                        }
                    }
                }
            }
            let attn = matmul(&o, &w[off.wo..][..d * d], t, d, d);
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += ai;
            }
            let (m, ln2) = layer_norm(&x, &w[off.ln2_g..][..d], &w[off.ln2_b..][..d], t, d);
            let mut u = matmul(&m, &w[off.w1..][..d * f], t, d, f);
            let b1 = &w[off.b1..][..f];
            for i in 0..t {
                for j in 0..f {
                    u[i * f + j] += b1[j];
                }
            }
            let r: Vec<f64> = u.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
            let out = matmul(&r, &w[off.w2..][..f * d], t, f, d);
            let b2 = &w[off.b2..][..d];
            for i in 0..t {
                for j in 0..d {
                    x[i * d + j] += out[i * d + j] + b2[j];
                }
            }
            hooks.apply(l, &mut x, d);
            residuals.push(x.clone());
            if keep {
                blocks.push(BlockCache { ln1, a, q, k, v: vv, probs, o, ln2, m, u, r });
            }
        }
        let (y, lnf) = layer_norm(&x, &w[lay.lnf_g..][..d], &w[lay.lnf_b..][..d], t, d);
        let logits = if keep {
            matmul(&y, &w[lay.unembed..][..d * v], t, d, v)
        } else {
            // only the final position is needed
            let mut last = vec![0.0; t * v];
            let tail = matmul(&y[(t - 1) * d..], &w[lay.unembed..][..d * v], 1, d, v);
            last[(t - 1) * v..].copy_from_slice(&tail);
            last
        };
        Ok(Tape { blocks, lnf, y, logits, residuals })
    }

    /// Hooked forward pass returning the next-token distribution at the final
    /// position and the residual trace.
    pub fn forward(&self, tokens: &[u32], hooks: &Hooks) -> Result<ForwardPass> {
        let tape = self.run(tokens, hooks, false)?;
        let (t, d, v) = (tokens.len(), self.config.d_model, self.config.vocab_size);
        let logits = tape.logits[(t - 1) * v..].to_vec();
        let residuals = tape
            .residuals
            .iter()
            .map(|layer| layer.chunks(d).map(<[f64]>::to_vec).collect())
            .collect();
        Ok(ForwardPass::from_logits(logits, ActivationTrace { residuals, logits: Vec::new() }))
    }

    /// Summed cross-entropy over positions that carry a target, and its
    /// gradient with respect to every parameter (accumulated into `grad`).
    ///
    /// `targets[i]` is the token expected after position `i`.
    pub fn loss_and_grad(&self, tokens: &[u32], targets: &[Option<u32>], grad: &mut [f64]) -> Result<f64> {
        if targets.len() != tokens.len() {
            return Err(Error::ShapeMismatch("one target slot per position required".into()));
        }
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch("gradient buffer has wrong length".into()));
        }
        let tape = self.run(tokens, &Hooks::new(), true)?;
        let cfg = &self.config;
        let (t, d, f, h, v) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let w = &self.data;
        let lay = &self.layout;

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t * v];
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target as usize >= v {
                return Err(Error::TokenOutOfRange { id: target, vocab: v });
            }
            let row = &mut dlogits[i * v..(i + 1) * v];
            row.copy_from_slice(&tape.logits[i * v..(i + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[target as usize];
            softmax_in_place(row);
            row[target as usize] -= 1.0;
        }

        matmul_at_acc(&mut grad[lay.unembed..][..d * v], &tape.y, &dlogits, t, d, v);
        let mut dy = vec![0.0; t * d];
        matmul_bt_acc(&mut dy, &dlogits, &w[lay.unembed..][..d * v], t, v, d);
        let (gf, rest) = grad[lay.lnf_g..].split_at_mut(d);
        let mut dx = layer_norm_backward(&dy, &tape.lnf, &w[lay.lnf_g..][..d], gf, &mut rest[..d], t, d);

        for (off, c) in lay.blocks.iter().zip(&tape.blocks).rev() {
            // feed-forward sublayer
            for i in 0..t {
                for j in 0..d {
                    grad[off.b2 + j] += dx[i * d + j];
                }
            }
            matmul_at_acc(&mut grad[off.w2..][..f * d], &c.r, &dx, t, f, d);
            let mut du = vec![0.0; t * f];
            matmul_bt_acc(&mut du, &dx, &w[off.w2..][..f * d], t, d, f);
            for (g, &z) in du.iter_mut().zip(&c.u) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            for i in 0..t {
                for j in 0..f {
                    grad[off.b1 + j] += du[i * f + j];
                }
            }
            matmul_at_acc(&mut grad[off.w1..][..d * f], &c.m, &du, t, d, f);
            let mut dm = vec![0.0; t * d];
            matmul_bt_acc(&mut dm, &du, &w[off.w1..][..d * f], t, f, d);
            let (g2, rest) = grad[off.ln2_g..].split_at_mut(d);
            let dmid = layer_norm_backward(&dm, &c.ln2, &w[off.ln2_g..][..d], g2, &mut rest[..d], t, d);
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // attention sublayer
            matmul_at_acc(&mut grad[off.wo..][..d * d], &c.o, &dx, t, d, d);
            let mut d_o = vec![0.0; t * d];
            matmul_bt_acc(&mut d_o, &dx, &w[off.wo..][..d * d], t, d, d);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for hd in 0..h {
                let c0 = hd * dh;
                for i in 0..t {
                    let p = &c.probs[(hd * t + i) * t..][..i + 1];
                    let doi = &d_o[i * d + c0..][..dh];
                    let mut dot = 0.0;
                    for s in 0..=i {
                        let vs = &c.v[s * d + c0..][..dh];
                        dp[s] = doi.iter().zip(vs).map(|(a, b)| a * b).sum();
                        dot += p[s] * dp[s];
                        for (g, o) in dv[s * d + c0..][..dh].iter_mut().zip(doi) {
                            *g += p[s] * o;
                        }
                    }
                    for s in 0..=i {
                        let ds = p[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..dh {
                            dq[i * d + c0 + j] += ds * c.k[s * d + c0 + j];
                            dk[s * d + c0 + j] += ds * c.q[i * d + c0 + j];
                        }
                    }
                }
            }
            matmul_at_acc(&mut grad[off.wq..][..d * d], &c.a, &dq, t, d, d);
            matmul_at_acc(&mut grad[off.wk..][..d * d], &c.a, &dk, t, d, d);
            matmul_at_acc(&mut grad[off.wv..][..d * d], &c.a, &dv, t, d, d);
            let mut da = vec![0.0; t * d];
            matmul_bt_acc(&mut da, &dq, &w[off.wq..][..d * d], t, d, d);
            matmul_bt_acc(&mut da, &dk, &w[off.wk..][..d * d], t, d, d);
            matmul_bt_acc(&mut da, &dv, &w[off.wv..][..d * d], t, d, d);
            let (g1, rest) = grad[off.ln1_g..].split_at_mut(d);
            let din = layer_norm_backward(&da, &c.ln1, &w[off.ln1_g..][..d], g1, &mut rest[..d], t, d);
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        for (i, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                grad[lay.tok_emb + tok as usize * d + j] += dx[i * d + j];
                grad[lay.pos_emb + i * d + j] += dx[i * d + j];
            }
        }
        Ok(loss)
    }

    /// Summed cross-entropy without gradients.
    pub fn loss(&self, tokens: &[u32], targets: &[Option<u32>]) -> Result<f64> {
        if targets.len() != tokens.len() {
            return Err(Error::ShapeMismatch("one target slot per position required".into()));
        }
        let tape = self.run(tokens, &Hooks::new(), true)?;
        let v = self.config.vocab_size;
        let mut loss = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = &tape.logits[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[target as usize];
        }
        Ok(loss)
    }
}

/// Next-token targets for plain language modelling: position `i` predicts
/// token `i + 1`; the last position has no target.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<u32>> {
    let mut out: Vec<Option<u32>> = tokens.iter().skip(1).map(|&t| Some(t)).collect();
    out.push(None);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> ModelParams {
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context: 8, vocab_size: 11, seed };
        let mut p = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = tiny(1);
        let out = p.forward(&[0, 4, 5, 9], &Hooks::new()).unwrap();
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(out.trace.residuals[0].len(), 4);
        assert_eq!(out.trace.residuals[0][0].len(), 8);
    }

    #[test]
    fn unknown_token_and_overlong_input_rejected() {
        let p = tiny(1);
        assert!(matches!(p.forward(&[0, 11], &Hooks::new()), Err(Error::TokenOutOfRange { id: 11, .. })));
        assert!(p.forward(&[0; 9], &Hooks::new()).is_err());
        assert!(p.forward(&[], &Hooks::new()).is_err());
    }

    #[test]
    fn loss_matches_forward_distribution() {
        let p = tiny(2);
        let toks = [0u32, 3, 7, 2];
        let mut targets = vec![None; 4];
        targets[3] = Some(5);
        let loss = p.loss(&toks, &targets).unwrap();
        let probs = p.forward(&toks, &Hooks::new()).unwrap().probs;
        assert!((loss + probs[5].ln()).abs() < 1e-12);
    }

    /// Hand-set single layer with d_model = 2 whose attention and MLP
    /// contribute nothing, so the logits are LN(embedding) times the
    /// unembedding.
    #[test]
    fn hand_set_weights_match_worked_example() {
        let cfg = ModelConfig { n_layers: 1, n_heads: 1, d_model: 2, d_ff: 2, context: 4, vocab_size: 3, seed: 0 };
        let mut p = ModelParams::init(&cfg).unwrap();
        p.data.fill(0.0);
        p.tensor_mut("tok_emb").unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 3.0, 2.0, 1.0]);
        p.tensor_mut("ln_final.gain").unwrap().copy_from_slice(&[1.0, 1.0]);
        p.tensor_mut("unembed").unwrap().copy_from_slice(&[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        // block adds b2 = (0.5, -0.5) to the residual; attention output is zero
        p.tensor_mut("blocks.0.mlp.b2").unwrap().copy_from_slice(&[0.5, -0.5]);
        let out = p.forward(&[0, 1, 2], &Hooks::new()).unwrap();
        // final residual: (2, 1) + (0.5, -0.5) = (2.5, 0.5); LN gives
        // (1, -1) * sqrt(1 / (1 + 1e-5))
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let expect = [s, -s, 3.0 * s];
        for (a, b) in out.logits.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(out.trace.residuals[0][2], vec![2.5, 0.5]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = tiny(5);
        let toks = [0u32, 4, 9, 3, 3, 7];
        let targets = next_token_targets(&toks);
        let mut grad = vec![0.0; p.n_params()];
        p.loss_and_grad(&toks, &targets, &mut grad).unwrap();
        let step = 1e-3;
        for spec in &p.layout.tensors {
            let mut num = Vec::new();
            for idx in spec.offset..spec.offset + spec.len() {
                let mut plus = p.clone();
                plus.data[idx] += step;
                let mut minus = p.clone();
                minus.data[idx] -= step;
                num.push((plus.loss(&toks, &targets).unwrap() - minus.loss(&toks, &targets).unwrap()) / (2.0 * step));
            }
            let ana = &grad[spec.offset..spec.offset + spec.len()];
            let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            assert!(diff / norm < 1e-4, "{}: rel err {}", spec.name, diff / norm);
        }
    }
}
