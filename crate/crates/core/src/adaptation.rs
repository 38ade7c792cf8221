//! Hybrid parameter-efficient adaptation of the encoder.
//!
//! Every encoder layer carries two adaptation sites:
//!
//! * a gated LoRA branch on the attention query and value projections,
//!   `q = x W_q + g * scale * (x A_q) B_q` (and the same for `v`);
//! * a gated adapter that injects a high-frequency task signal in front of the
//!   layer, `x <- x + g * shared_k(gelu(unshared_l(task)))`.
//!
//! Each site has its own gate `g = sigmoid(w . mean_tokens(input) + b)` in
//! `(0, 1)`. With gates disabled (`gated = false`) the module reduces to plain
//! stacked Adapter + LoRA. `B` and the adapter's shared output layer start at
//! zero, so a freshly initialized model computes exactly what the frozen
//! encoder computes.

use ndarray::{Array4, IxDyn};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Graph, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::layers::{linear, multi_head_attention};
use crate::params::{Bindings, ParamStore, ADAPTATION_PREFIX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub lora_enabled: bool,
    pub lora_rank: usize,
    /// Multiplier on the low-rank delta; `None` means `1 / rank`.
    pub lora_scale: Option<f64>,
    pub adapter_enabled: bool,
    pub adapter_hidden: usize,
    /// Channel width of the embedded task signal.
    pub task_dim: usize,
    /// Learned gates; `false` fixes every gate at 1 (stacked ablation arm).
    pub gated: bool,
    /// Fraction of the spectrum area removed around DC when extracting the task signal.
    pub hf_mask_ratio: f64,
    /// Fraction of encoder layers, counted from the deepest, whose per-layer
    /// adaptation parameters are trainable.
    pub encoder_tune_ratio: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lora_enabled: true,
            lora_rank: 4,
            lora_scale: None,
            adapter_enabled: true,
            adapter_hidden: 8,
            task_dim: 8,
            gated: true,
            hf_mask_ratio: 0.25,
            encoder_tune_ratio: 1.0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.lora_enabled {
            if self.lora_rank == 0 {
                return Err(Error::config("adaptation.lora_rank must be positive"));
            }
            let min_dim = backbone.stage_channels.iter().copied().min().unwrap_or(0);
            if self.lora_rank > min_dim {
                return Err(Error::config(format!(
                    "adaptation.lora_rank {} exceeds the smallest projection width {min_dim}",
                    self.lora_rank
                )));
            }
        }
        if self.adapter_enabled && (self.adapter_hidden == 0 || self.task_dim == 0) {
            return Err(Error::config(
                "adaptation.adapter_hidden and adaptation.task_dim must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.hf_mask_ratio) {
            return Err(Error::config("adaptation.hf_mask_ratio must be in [0, 1)"));
        }
        FreezePolicy::new(self.encoder_tune_ratio)?;
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale.unwrap_or(1.0 / self.lora_rank.max(1) as f64)
    }

    pub fn freeze_policy(&self) -> Result<FreezePolicy> {
        FreezePolicy::new(self.encoder_tune_ratio)
    }
}

/// Overrides applied to every gate during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateMode {
    /// Use the learned gate (or 1 when gating is disabled in the config).
    #[default]
    Learned,
    /// Force every gate output to the given value.
    Fixed(f64),
}

/// Gate of one adaptation site: `sigmoid(mean_tokens(x) @ w + b)` per image.
///
/// `x` is `[B, N, C]`; the result is `[B, 1, 1]` so it broadcasts over tokens.
pub fn gate(g: &mut Graph, p: &Bindings, prefix: &str, x: Var) -> Var {
    let pooled = g.mean_axes(x, &[1]);
    let logit = linear(g, p, prefix, pooled);
    g.sigmoid(logit)
}

/// Resolves the gate for a site according to config and override.
pub(crate) fn site_gate(
    g: &mut Graph,
    p: &Bindings,
    cfg: &AdaptationConfig,
    mode: GateMode,
    prefix: &str,
    x: Var,
) -> Var {
    match mode {
        GateMode::Fixed(v) => g.constant(Array::from_elem(IxDyn(&[1, 1, 1]), v)),
        GateMode::Learned if !cfg.gated => g.constant(Array::from_elem(IxDyn(&[1, 1, 1]), 1.0)),
        GateMode::Learned => gate(g, p, prefix, x),
    }
}

/// Frozen attention projection weights of one layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn bind(p: &Bindings, prefix: &str) -> Self {
        let v = |n: &str| p.var(&format!("{prefix}/{n}"));
        Self {
            wq: v("wq"),
            bq: v("bq"),
            wk: v("wk"),
            bk: v("bk"),
            wv: v("wv"),
            bv: v("bv"),
            wo: v("wo"),
            bo: v("bo"),
        }
    }
}

/// Low-rank factors for the query and value projections: `A` is `d x r`, `B` is `r x d`.
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub a_q: Var,
    pub b_q: Var,
    pub a_v: Var,
    pub b_v: Var,
    pub scale: f64,
}

impl LoraVars {
    pub fn bind(p: &Bindings, prefix: &str, scale: f64) -> Self {
        let v = |n: &str| p.var(&format!("{prefix}/{n}"));
        Self {
            a_q: v("lora_q_a"),
            b_q: v("lora_q_b"),
            a_v: v("lora_v_a"),
            b_v: v("lora_v_b"),
            scale,
        }
    }
}

fn project(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add(y, b)
}

fn lora_delta(g: &mut Graph, x: Var, a: Var, b: Var, scale: f64, gate: Var) -> Var {
    let low = g.matmul(x, a);
    let up = g.matmul(low, b);
    let up = g.scale(up, scale);
    g.mul(up, gate)
}

/// Multi-head self-attention over tokens `[B, N, C]` with gated LoRA deltas on
/// the query and value projections. Keys are untouched. `lora = None` gives the
/// frozen attention.
pub fn gated_lora_attention(
    g: &mut Graph,
    x: Var,
    attn: &AttentionVars,
    lora: Option<(&LoraVars, Var)>,
    heads: usize,
) -> Var {
    let mut q = project(g, x, attn.wq, attn.bq);
    let k = project(g, x, attn.wk, attn.bk);
    let mut v = project(g, x, attn.wv, attn.bv);
    if let Some((l, gate)) = lora {
        let dq = lora_delta(g, x, l.a_q, l.b_q, l.scale, gate);
        q = g.add(q, dq);
        let dv = lora_delta(g, x, l.a_v, l.b_v, l.scale, gate);
        v = g.add(v, dv);
    }
    let o = multi_head_attention(g, q, k, v, heads);
    project(g, o, attn.wo, attn.bo)
}

/// `x + gate * shared(gelu(unshared(task)))`, all over the last axis.
pub fn adapter_inject(
    g: &mut Graph,
    p: &Bindings,
    x: Var,
    task: Var,
    unshared_prefix: &str,
    shared_prefix: &str,
    gate: Var,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ts = g.shape(task).to_vec();
    if xs[..xs.len() - 1] != ts[..ts.len() - 1] {
        return Err(Error::invariant(format!(
            "task signal {ts:?} is not aligned with layer input {xs:?}"
        )));
    }
    let hidden = linear(g, p, unshared_prefix, task);
    let hidden = g.gelu(hidden);
    let out = linear(g, p, shared_prefix, hidden);
    let out_c = *g.shape(out).last().unwrap();
    if out_c != *xs.last().unwrap() {
        return Err(Error::invariant(format!(
            "adapter output width {out_c} differs from layer width {}",
            xs.last().unwrap()
        )));
    }
    let gated = g.mul(out, gate);
    Ok(g.add(x, gated))
}

/// High-frequency component of `[B, H, W, C]` images: per channel 2-D FFT,
/// zero the centered low-frequency square covering `mask_ratio` of the
/// spectrum, inverse FFT, keep the real part.
pub fn high_frequency(images: &Array4<f64>, mask_ratio: f64) -> Array4<f64> {
    let (b, h, w, c) = images.dim();
    let mut out = Array4::<f64>::zeros((b, h, w, c));
    if h == 0 || w == 0 {
        return out;
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row_f, row_i) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (col_f, col_i) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let line = ((h * w) as f64 * mask_ratio).sqrt() as usize / 2;
    let masked = |u: usize, n: usize| {
        let shifted = (u + n / 2) % n;
        shifted + line >= n / 2 && shifted < n / 2 + line
    };
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    buf[y * w + x] = Complex::new(images[[bi, y, x, ci]], 0.0);
                }
            }
            fft2(&mut buf, &mut col, h, w, &*row_f, &*col_f);
            for y in 0..h {
                for x in 0..w {
                    if masked(y, h) && masked(x, w) {
                        buf[y * w + x] = Complex::new(0.0, 0.0);
                    }
                }
            }
            fft2(&mut buf, &mut col, h, w, &*row_i, &*col_i);
            let norm = 1.0 / (h * w) as f64;
            for y in 0..h {
                for x in 0..w {
                    out[[bi, y, x, ci]] = buf[y * w + x].re * norm;
                }
            }
        }
    }
    out
}

fn fft2(
    buf: &mut [Complex<f64>],
    col: &mut [Complex<f64>],
    h: usize,
    w: usize,
    rows: &dyn rustfft::Fft<f64>,
    cols: &dyn rustfft::Fft<f64>,
) {
    for row in buf.chunks_exact_mut(w) {
        rows.process(row);
    }
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.process(col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Which encoder layers get trainable adaptation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreezePolicy {
    pub encoder_tune_ratio: f64,
    pub decoder_trainable: bool,
}

impl FreezePolicy {
    pub fn new(encoder_tune_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&encoder_tune_ratio) || encoder_tune_ratio.is_nan() {
            return Err(Error::config(format!(
                "encoder_tune_ratio must be in [0, 1], got {encoder_tune_ratio}"
            )));
        }
        Ok(Self {
            encoder_tune_ratio,
            decoder_trainable: true,
        })
    }

    /// Number of deepest layers tuned out of `total`.
    pub fn tuned_layers(&self, total: usize) -> usize {
        ((self.encoder_tune_ratio * total as f64).round() as usize).min(total)
    }
}

/// Marks trainable parameters and returns their names.
///
/// Base encoder and neck weights are always frozen. Decoder weights and the
/// layer-shared adaptation weights (task-signal embedding, per-stage shared
/// adapter layers) are always trainable. Per-layer adaptation weights (LoRA
/// factors, unshared adapter layers, gates) are trainable only for the deepest
/// `round(ratio * L)` layers, counted across all stages.
pub fn apply_freeze_policy(
    store: &mut ParamStore,
    backbone: &BackboneConfig,
    policy: &FreezePolicy,
) -> Vec<String> {
    let total = backbone.num_layers();
    let first_tuned = total - policy.tuned_layers(total);
    for (name, p) in store.iter_mut() {
        p.trainable = if name.starts_with("decoder/") {
            policy.decoder_trainable
        } else if let Some(rest) = name.strip_prefix(ADAPTATION_PREFIX) {
            match layer_index(rest) {
                Some(l) => l >= first_tuned,
                None => true,
            }
        } else {
            false
        };
    }
    store.trainable_names()
}

fn layer_index(rest: &str) -> Option<usize> {
    rest.strip_prefix("layer")?.split('/').next()?.parse().ok()
}
