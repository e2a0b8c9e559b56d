//! Decoder-only byte-level language model with pluggable attention
//! patterns, rotary embeddings, and a hand-written backward pass.
//!
//! Block layout is pre-norm: RMS-norm, attention (per the layer's
//! pattern, always causal), residual, RMS-norm, SiLU MLP, residual.
//! The unembedding starts at zero, so a fresh model emits exactly
//! uniform logits and its initial loss is exactly `ln(vocab)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, Saved};
use crate::lm::rope::{rope_apply, rope_backward};
use crate::pattern::{AttnConfig, PatternSpec};
use crate::tensor::Tensor;

const MLP_MULT: usize = 4;
const RMS_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Hyperparameters and per-layer pattern assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub train_context: usize,
    /// One attention pattern per layer.
    pub patterns: Vec<PatternSpec>,
    pub rope_base: f64,
    /// Position-interpolation factor; 1 means plain rotary embedding.
    pub pi_scale: f64,
}

impl ModelConfig {
    /// Small config with the same pattern in every layer.
    pub fn with_pattern(
        vocab: usize,
        layers: usize,
        model_dim: usize,
        heads: usize,
        train_context: usize,
        pattern: PatternSpec,
    ) -> Result<ModelConfig> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::config(format!(
                "model_dim {model_dim} must be a multiple of heads {heads}"
            )));
        }
        let cfg = ModelConfig {
            vocab,
            layers,
            model_dim,
            heads,
            head_dim: model_dim / heads,
            train_context,
            patterns: vec![pattern; layers],
            rope_base: 10_000.0,
            pi_scale: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config(format!("vocab {} must be >= 2", self.vocab)));
        }
        if self.layers == 0 {
            return Err(Error::config("model needs at least one layer"));
        }
        if self.heads == 0 || self.model_dim != self.heads * self.head_dim {
            return Err(Error::config(format!(
                "model_dim {} must equal heads {} * head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim
            )));
        }
        if self.patterns.len() != self.layers {
            return Err(Error::config(format!(
                "{} patterns for {} layers",
                self.patterns.len(),
                self.layers
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope base must be positive"));
        }
        if !(self.pi_scale >= 1.0) {
            return Err(Error::config(format!(
                "pi_scale {} must be >= 1",
                self.pi_scale
            )));
        }
        if self.train_context < 2 {
            return Err(Error::config("train context must be >= 2"));
        }
        Ok(())
    }
}

pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Tensor<f64>,
    pub(crate) grad: Tensor<f64>,
}

impl Param {
    fn new(name: String, value: Tensor<f64>) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param { name, value, grad }
    }
}

// Per-layer parameter slots, in order.
const P_ATTN_NORM: usize = 0;
const P_WQ: usize = 1;
const P_WK: usize = 2;
const P_WV: usize = 3;
const P_WO: usize = 4;
const P_MLP_NORM: usize = 5;
const P_W1: usize = 6;
const P_W2: usize = 7;
const PER_LAYER: usize = 8;

pub struct Model {
    pub cfg: ModelConfig,
    params: Vec<Param>,
}

struct NormCache {
    inv_rms: Vec<f64>,
    xhat: Tensor<f64>,
}

struct LayerCache {
    norm1: NormCache,
    y1: Tensor<f64>,
    q4: Tensor<f64>,
    k4: Tensor<f64>,
    v4: Tensor<f64>,
    attn_saved: Saved<f64>,
    merged: Tensor<f64>,
    norm2: NormCache,
    y2: Tensor<f64>,
    mlp_u: Tensor<f64>,
    mlp_a: Tensor<f64>,
}

struct ForwardCache {
    tokens: Vec<u8>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    yf: Tensor<f64>,
    probs: Tensor<f64>,
}

impl Model {
    /// Fresh model with seeded Gaussian init (std 0.02); norm gains are
    /// one and the unembedding is zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let ff = MLP_MULT * d;
        let mut params = Vec::new();
        let gauss = |shape: &[usize], rng: &mut ChaCha8Rng| {
            Tensor::randn(shape, rng).scale(INIT_STD)
        };
        params.push(Param::new("embed.wte".into(), gauss(&[cfg.vocab, d], &mut rng)));
        for l in 0..cfg.layers {
            params.push(Param::new(
                format!("layer{l}.attn_norm.gain"),
                Tensor::filled(&[d], 1.0),
            ));
            // slot order: norm, wq, wk, wv, wo, mlp_norm, w1, w2
            for tag in ["wq", "wk", "wv", "wo"] {
                params.push(Param::new(
                    format!("layer{l}.attn.{tag}"),
                    gauss(&[d, d], &mut rng),
                ));
            }
            params.push(Param::new(
                format!("layer{l}.mlp_norm.gain"),
                Tensor::filled(&[d], 1.0),
            ));
            params.push(Param::new(format!("layer{l}.mlp.w1"), gauss(&[d, ff], &mut rng)));
            params.push(Param::new(format!("layer{l}.mlp.w2"), gauss(&[ff, d], &mut rng)));
        }
        params.push(Param::new("final_norm.gain".into(), Tensor::filled(&[d], 1.0)));
        params.push(Param::new(
            "head.wout".into(),
            Tensor::zeros(&[d, cfg.vocab]),
        ));
        Ok(Model { cfg, params })
    }

    fn idx_wte(&self) -> usize {
        0
    }

    fn idx_layer(&self, layer: usize, slot: usize) -> usize {
        1 + layer * PER_LAYER + slot
    }

    fn idx_final_norm(&self) -> usize {
        1 + self.cfg.layers * PER_LAYER
    }

    fn idx_wout(&self) -> usize {
        2 + self.cfg.layers * PER_LAYER
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_name(&self, i: usize) -> &str {
        &self.params[i].name
    }

    pub fn param_numel(&self, i: usize) -> usize {
        self.params[i].value.numel()
    }

    pub fn param_value(&self, i: usize) -> &Tensor<f64> {
        &self.params[i].value
    }

    pub fn param_grad(&self, i: usize) -> &Tensor<f64> {
        &self.params[i].grad
    }

    /// Add `delta` to one parameter entry (used by finite-difference checks).
    pub fn nudge_param(&mut self, i: usize, entry: usize, delta: f64) {
        self.params[i].value.data_mut()[entry] += delta;
    }

    /// Replace the zero-initialized unembedding with small Gaussian
    /// noise so gradients flow to every layer of an untrained model.
    pub fn randomize_output_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let i = self.idx_wout();
        let shape = self.params[i].value.shape().to_vec();
        self.params[i].value = Tensor::randn(&shape, rng).scale(INIT_STD);
    }

    /// Same parameters under a different position-interpolation factor,
    /// for running a trained model at a longer context.
    pub fn with_pi_scale(&self, pi_scale: f64) -> Result<Model> {
        let cfg = ModelConfig {
            pi_scale,
            ..self.cfg.clone()
        };
        cfg.validate()?;
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            params.push(Param::new(p.name.clone(), p.value.clone()));
        }
        Ok(Model { cfg, params })
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn set_param_value(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    fn embed(&self, tokens: &[u8]) -> Result<Tensor<f64>> {
        let d = self.cfg.model_dim;
        let wte = &self.params[self.idx_wte()].value;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (p, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.cfg.vocab {
                return Err(Error::config(format!(
                    "token id {t} at position {p} exceeds vocab {}",
                    self.cfg.vocab
                )));
            }
            x.data_mut()[p * d..(p + 1) * d].copy_from_slice(&wte.data()[t * d..(t + 1) * d]);
        }
        Ok(x)
    }

    fn split_heads(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let n = x.shape()[0];
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim);
        let mut out = Tensor::zeros(&[1, h, n, dh]);
        for p in 0..n {
            for i in 0..h {
                let src = p * h * dh + i * dh;
                let dst = (i * n + p) * dh;
                out.data_mut()[dst..dst + dh]
                    .copy_from_slice(&x.data()[src..src + dh]);
            }
        }
        out
    }

    fn merge_heads(&self, x4: &Tensor<f64>) -> Tensor<f64> {
        let n = x4.shape()[2];
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim);
        let mut out = Tensor::zeros(&[n, h * dh]);
        for i in 0..h {
            for p in 0..n {
                let src = (i * n + p) * dh;
                let dst = p * h * dh + i * dh;
                out.data_mut()[dst..dst + dh]
                    .copy_from_slice(&x4.data()[src..src + dh]);
            }
        }
        out
    }

    fn attn_cfg(&self, layer: usize, n: usize) -> Result<AttnConfig> {
        let spec = &self.cfg.patterns[layer];
        AttnConfig::new(
            1,
            self.cfg.heads,
            n,
            self.cfg.head_dim,
            spec.window().unwrap_or(n),
            true,
        )
    }

    fn forward_internal(
        &self,
        tokens: &[u8],
        want_cache: bool,
    ) -> Result<(Tensor<f64>, Option<ForwardCache>)> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::config("empty token sequence"));
        }
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed(tokens)?;
        let mut layer_caches = Vec::new();

        for l in 0..self.cfg.layers {
            let g1 = &self.params[self.idx_layer(l, P_ATTN_NORM)].value;
            let (y1, norm1) = rmsnorm_forward(&x, g1);
            let wq = &self.params[self.idx_layer(l, P_WQ)].value;
            let wk = &self.params[self.idx_layer(l, P_WK)].value;
            let wv = &self.params[self.idx_layer(l, P_WV)].value;
            let q4 = rope_apply(
                &self.split_heads(&y1.matmul(wq)?),
                &positions,
                self.cfg.rope_base,
                self.cfg.pi_scale,
            )?;
            let k4 = rope_apply(
                &self.split_heads(&y1.matmul(wk)?),
                &positions,
                self.cfg.rope_base,
                self.cfg.pi_scale,
            )?;
            let v4 = self.split_heads(&y1.matmul(wv)?);

            let cfg_attn = self.attn_cfg(l, n)?;
            let attn = kernels::forward_spec(
                &self.cfg.patterns[l],
                &cfg_attn,
                &q4,
                &k4,
                &v4,
                want_cache,
                false,
            )?;
            let merged = self.merge_heads(&attn.out);
            let wo = &self.params[self.idx_layer(l, P_WO)].value;
            let x_mid = x.add(&merged.matmul(wo)?)?;

            let g2 = &self.params[self.idx_layer(l, P_MLP_NORM)].value;
            let (y2, norm2) = rmsnorm_forward(&x_mid, g2);
            let w1 = &self.params[self.idx_layer(l, P_W1)].value;
            let w2 = &self.params[self.idx_layer(l, P_W2)].value;
            let u = y2.matmul(w1)?;
            let a = silu(&u);
            let x_out = x_mid.add(&a.matmul(w2)?)?;

            if want_cache {
                layer_caches.push(LayerCache {
                    norm1,
                    y1,
                    q4,
                    k4,
                    v4,
                    attn_saved: attn.saved.expect("forward requested saved state"),
                    merged,
                    norm2,
                    y2,
                    mlp_u: u,
                    mlp_a: a,
                });
            }
            x = x_out;
        }

        let gf = &self.params[self.idx_final_norm()].value;
        let (yf, final_norm) = rmsnorm_forward(&x, gf);
        let logits = yf.matmul(&self.params[self.idx_wout()].value)?;

        if !want_cache {
            return Ok((logits, None));
        }
        let probs = softmax_rows(&logits);
        Ok((
            logits,
            Some(ForwardCache {
                tokens: tokens.to_vec(),
                layers: layer_caches,
                final_norm,
                yf,
                probs,
            }),
        ))
    }

    /// Logits `[N, vocab]` without keeping activations.
    pub fn logits(&self, tokens: &[u8]) -> Result<Tensor<f64>> {
        Ok(self.forward_internal(tokens, false)?.0)
    }

    /// Mean next-token cross-entropy in nats.
    pub fn loss_only(&self, tokens: &[u8]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::config("loss needs at least two tokens"));
        }
        let logits = self.logits(&tokens[..tokens.len() - 1])?;
        let mut nll = 0.0;
        for p in 0..tokens.len() - 1 {
            nll += row_nll(&logits, p, tokens[p + 1] as usize);
        }
        Ok(nll / (tokens.len() - 1) as f64)
    }

    /// Forward, cross-entropy, and full backward; gradients accumulate
    /// into the parameter slots (call [`zero_grads`](Self::zero_grads)
    /// first for a fresh step).
    pub fn loss_and_backward(&mut self, tokens: &[u8]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::config("loss needs at least two tokens"));
        }
        let inputs = &tokens[..tokens.len() - 1];
        let n = inputs.len();
        let (logits, cache) = self.forward_internal(inputs, true)?;
        let cache = cache.expect("cache requested");
        let preds = n as f64;

        let mut nll = 0.0;
        let mut dlogits = Tensor::zeros(logits.shape());
        let vocab = self.cfg.vocab;
        for p in 0..n {
            let target = tokens[p + 1] as usize;
            nll += row_nll(&logits, p, target);
            for t in 0..vocab {
                let grad = (cache.probs.at(&[p, t]) - if t == target { 1.0 } else { 0.0 })
                    / preds;
                dlogits.set(&[p, t], grad);
            }
        }
        let loss = nll / preds;
        self.backward(&dlogits, &cache)?;
        Ok(loss)
    }

    fn backward(&mut self, dlogits: &Tensor<f64>, cache: &ForwardCache) -> Result<()> {
        let n = cache.tokens.len();
        let positions: Vec<usize> = (0..n).collect();

        // unembedding
        let wout_idx = self.idx_wout();
        let dwout = cache.yf.matmul_tn(dlogits)?;
        add_into(&mut self.params[wout_idx].grad, &dwout);
        let dyf = dlogits.matmul_nt(&self.params[wout_idx].value)?;

        // final norm
        let gf_idx = self.idx_final_norm();
        let (mut dx, dgf) =
            rmsnorm_backward(&dyf, &self.params[gf_idx].value, &cache.final_norm);
        add_into(&mut self.params[gf_idx].grad, &dgf);

        for l in (0..self.cfg.layers).rev() {
            let lc = &cache.layers[l];
            let (wq_idx, wk_idx) = (self.idx_layer(l, P_WQ), self.idx_layer(l, P_WK));
            let (wv_idx, wo_idx) = (self.idx_layer(l, P_WV), self.idx_layer(l, P_WO));
            let (w1_idx, w2_idx) = (self.idx_layer(l, P_W1), self.idx_layer(l, P_W2));
            let g1_idx = self.idx_layer(l, P_ATTN_NORM);
            let g2_idx = self.idx_layer(l, P_MLP_NORM);

            // MLP branch: x_out = x_mid + silu(y2 W1) W2
            let dmlp = &dx;
            let dw2 = lc.mlp_a.matmul_tn(dmlp)?;
            add_into(&mut self.params[w2_idx].grad, &dw2);
            let da = dmlp.matmul_nt(&self.params[w2_idx].value)?;
            let du = silu_backward(&da, &lc.mlp_u);
            let dw1 = lc.y2.matmul_tn(&du)?;
            add_into(&mut self.params[w1_idx].grad, &dw1);
            let dy2 = du.matmul_nt(&self.params[w1_idx].value)?;
            let (dx_norm2, dg2) =
                rmsnorm_backward(&dy2, &self.params[g2_idx].value, &lc.norm2);
            add_into(&mut self.params[g2_idx].grad, &dg2);
            let dx_mid = dx.add(&dx_norm2)?;

            // attention branch: x_mid = x + merge(attn) Wo
            let dwo = lc.merged.matmul_tn(&dx_mid)?;
            add_into(&mut self.params[wo_idx].grad, &dwo);
            let dmerged = dx_mid.matmul_nt(&self.params[wo_idx].value)?;
            let dout4 = self.split_heads(&dmerged);
            let grads = kernels::backward(&lc.q4, &lc.k4, &lc.v4, &dout4, &lc.attn_saved)?;
            let dq4 = rope_backward(&grads.dq, &positions, self.cfg.rope_base, self.cfg.pi_scale)?;
            let dk4 = rope_backward(&grads.dk, &positions, self.cfg.rope_base, self.cfg.pi_scale)?;
            let dq_pre = self.merge_heads(&dq4);
            let dk_pre = self.merge_heads(&dk4);
            let dv_pre = self.merge_heads(&grads.dv);

            let dwq = lc.y1.matmul_tn(&dq_pre)?;
            add_into(&mut self.params[wq_idx].grad, &dwq);
            let dwk = lc.y1.matmul_tn(&dk_pre)?;
            add_into(&mut self.params[wk_idx].grad, &dwk);
            let dwv = lc.y1.matmul_tn(&dv_pre)?;
            add_into(&mut self.params[wv_idx].grad, &dwv);

            let dy1 = dq_pre
                .matmul_nt(&self.params[wq_idx].value)?
                .add(&dk_pre.matmul_nt(&self.params[wk_idx].value)?)?
                .add(&dv_pre.matmul_nt(&self.params[wv_idx].value)?)?;
            let (dx_norm1, dg1) =
                rmsnorm_backward(&dy1, &self.params[g1_idx].value, &lc.norm1);
            add_into(&mut self.params[g1_idx].grad, &dg1);
            dx = dx_mid.add(&dx_norm1)?;
        }

        // embedding rows
        let d = self.cfg.model_dim;
        let wte_idx = self.idx_wte();
        for (p, &t) in cache.tokens.iter().enumerate() {
            let row = t as usize;
            for dd in 0..d {
                self.params[wte_idx].grad.data_mut()[row * d + dd] += dx.at(&[p, dd]);
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut Tensor<f64>, delta: &Tensor<f64>) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

/// `y = gain * x / rms(x)` per position, cached for backward.
fn rmsnorm_forward(x: &Tensor<f64>, gain: &Tensor<f64>) -> (Tensor<f64>, NormCache) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut inv_rms = vec![0.0; n];
    for p in 0..n {
        let row = &x.data()[p * d..(p + 1) * d];
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
        inv_rms[p] = inv;
        for dd in 0..d {
            let h = row[dd] * inv;
            xhat.data_mut()[p * d + dd] = h;
            y.data_mut()[p * d + dd] = h * gain.data()[dd];
        }
    }
    (y, NormCache { inv_rms, xhat })
}

fn rmsnorm_backward(
    dy: &Tensor<f64>,
    gain: &Tensor<f64>,
    cache: &NormCache,
) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgain = Tensor::zeros(&[d]);
    for p in 0..n {
        let dy_row = &dy.data()[p * d..(p + 1) * d];
        let xh_row = &cache.xhat.data()[p * d..(p + 1) * d];
        let mut proj = 0.0;
        for dd in 0..d {
            dgain.data_mut()[dd] += dy_row[dd] * xh_row[dd];
            proj += dy_row[dd] * gain.data()[dd] * xh_row[dd];
        }
        proj /= d as f64;
        let inv = cache.inv_rms[p];
        for dd in 0..d {
            let dxhat = dy_row[dd] * gain.data()[dd];
            dx.data_mut()[p * d + dd] = inv * (dxhat - xh_row[dd] * proj);
        }
    }
    (dx, dgain)
}

fn silu(u: &Tensor<f64>) -> Tensor<f64> {
    let mut a = u.clone();
    for x in a.data_mut().iter_mut() {
        let sig = 1.0 / (1.0 + (-*x).exp());
        *x *= sig;
    }
    a
}

fn silu_backward(da: &Tensor<f64>, u: &Tensor<f64>) -> Tensor<f64> {
    let mut du = da.clone();
    for (g, &x) in du.data_mut().iter_mut().zip(u.data()) {
        let sig = 1.0 / (1.0 + (-x).exp());
        *g *= sig * (1.0 + x * (1.0 - sig));
    }
    du
}

fn softmax_rows(logits: &Tensor<f64>) -> Tensor<f64> {
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = Tensor::zeros(&[n, v]);
    for p in 0..n {
        let row = &logits.data()[p * v..(p + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (t, &x) in row.iter().enumerate() {
            let e = (x - max).exp();
            probs.data_mut()[p * v + t] = e;
            total += e;
        }
        for t in 0..v {
            probs.data_mut()[p * v + t] /= total;
        }
    }
    probs
}

/// Negative log-likelihood of `target` under row `p` of the logits.
pub(crate) fn row_nll(logits: &Tensor<f64>, p: usize, target: usize) -> f64 {
    let v = logits.shape()[1];
    let row = &logits.data()[p * v..(p + 1) * v];
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target]
}
