//! Four-stage hierarchical transformer encoder, channel-adjusting neck,
//! stage-3/4 fusion and a three-scale mask decoder.
//!
//! Images enter as `[B, H, W, 3]` arrays with values in `[0, 1]` and are
//! standardized with the configured per-channel mean and std. Internally all
//! feature maps are channels-last; the public [`FeatureMap`] type uses
//! `[B, C, H, W]`.

use ndarray::{Array3, Array4, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapter_inject, gated_lora_attention, high_frequency, site_gate, AdaptationConfig,
    AttentionVars, GateMode, LoraVars,
};
use crate::autograd::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{flatten_tokens, linear, patchify, unflatten_tokens};
use crate::params::{normal, zeros, Bindings, ParamStore};
use crate::s2match::perturb::{stochastic_depth_coefficients, StochasticDepth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Transformer layers per stage.
    pub stage_depths: [usize; 4],
    /// Channel width per stage, strictly increasing.
    pub stage_channels: [usize; 4],
    pub neck_channels: usize,
    /// Downsampling of the stage-1 patch embedding.
    pub patch_stride: usize,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_hidden: usize,
    /// Input `(height, width)` in pixels.
    pub input_size: [usize; 2],
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_depths: [1, 2, 11, 2],
            stage_channels: [16, 32, 64, 128],
            neck_channels: 32,
            patch_stride: 4,
            attention_heads: 2,
            mlp_ratio: 2,
            decoder_hidden: 32,
            input_size: [64, 64],
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.contains(&0) {
            return Err(Error::config("backbone.stage_depths must all be >= 1"));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "backbone.stage_channels must be positive and strictly increasing",
            ));
        }
        if self.attention_heads == 0
            || self.stage_channels.iter().any(|c| c % self.attention_heads != 0)
        {
            return Err(Error::config(
                "backbone.attention_heads must divide every stage width",
            ));
        }
        if self.neck_channels == 0 || self.decoder_hidden == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(
                "backbone.neck_channels, decoder_hidden and mlp_ratio must be positive",
            ));
        }
        if self.patch_stride == 0 {
            return Err(Error::config("backbone.patch_stride must be positive"));
        }
        let total = self.total_stride();
        if self.input_size.iter().any(|&s| s == 0 || s % total != 0) {
            return Err(Error::config(format!(
                "backbone.input_size {:?} must be divisible by the total stride {total}",
                self.input_size
            )));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("backbone.pixel_std must be positive"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.patch_stride * 8
    }

    /// Stride of stage `k` (1-based) relative to the input.
    pub fn stage_stride(&self, k: usize) -> usize {
        self.patch_stride << (k - 1)
    }

    /// Spatial size `(h, w)` of stage `k` (1-based).
    pub fn stage_size(&self, k: usize) -> (usize, usize) {
        let s = self.stage_stride(k);
        (self.input_size[0] / s, self.input_size[1] / s)
    }

    pub fn num_layers(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    /// Global layer indices (shallow to deep) of stage `k` (1-based).
    pub fn stage_layers(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.stage_depths[..k - 1].iter().sum();
        start..start + self.stage_depths[k - 1]
    }
}

/// Encoder or neck activations at one scale, `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array4<f64>,
    /// 1-based scale index.
    pub scale_index: usize,
}

impl FeatureMap {
    pub fn new(data: Array4<f64>, scale_index: usize) -> Result<Self> {
        if !(1..=4).contains(&scale_index) {
            return Err(Error::invariant(format!("scale index {scale_index} not in 1..=4")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant("feature map contains non-finite values"));
        }
        Ok(Self { data, scale_index })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.2, d.3)
    }

    pub(crate) fn to_channels_last(&self) -> Array {
        self.data
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_dyn()
    }

    pub(crate) fn from_channels_last(a: &Array, scale_index: usize) -> Result<Self> {
        let a4 = a
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::invariant(e.to_string()))?;
        Self::new(
            a4.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned(),
            scale_index,
        )
    }
}

/// Per-pixel water probability, `[B, H, W]`, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub data: Array3<f64>,
}

impl ProbabilityMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invariant("probability outside [0, 1]"));
        }
        Ok(Self { data })
    }

    pub fn image(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }
}

/// Binarized mask, `[B, H, W]` with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub data: Array3<u8>,
}

impl BinaryMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invariant("binary mask value other than 0 or 1"));
        }
        Ok(Self { data })
    }

    pub fn from_single(mask: ndarray::Array2<u8>) -> Result<Self> {
        Self::new(mask.insert_axis(Axis(0)))
    }

    pub fn image(&self, i: usize) -> ndarray::ArrayView2<'_, u8> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }
}

/// Knobs that differ between training streams and plain inference.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub stochastic_depth: StochasticDepth,
    /// Multiplicative channel factors for the three decoder inputs, each
    /// `[B, 1, 1, C]` (see [`crate::s2match::perturb::DropoutMaskPair`]).
    pub channel_factors: Option<[Array; 3]>,
    pub gate_mode: GateMode,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoder: [Var; 4],
    pub neck: [Var; 4],
    pub fused: Var,
    /// `[B, H, W]` probabilities.
    pub prob: Var,
}

/// Encoder + neck + decoder with optional hybrid adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub backbone: BackboneConfig,
    pub adaptation: AdaptationConfig,
}

const LN_EPS: f64 = 1e-6;

fn lin_init(
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.insert(
        format!("{prefix}/w"),
        normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
    );
    store.insert(format!("{prefix}/b"), zeros(&[fan_out]));
}

fn zero_lin(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}/w"), zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}/b"), zeros(&[fan_out]));
}

impl Segmenter {
    pub fn new(backbone: BackboneConfig, adaptation: AdaptationConfig) -> Result<Self> {
        backbone.validate()?;
        adaptation.validate(&backbone)?;
        Ok(Self {
            backbone,
            adaptation,
        })
    }

    /// Same base weights without any adaptation branch.
    pub fn frozen_variant(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            adaptation: AdaptationConfig {
                lora_enabled: false,
                adapter_enabled: false,
                ..self.adaptation.clone()
            },
        }
    }

    /// Seeded initialization. Base weights come from one stream and adaptation
    /// weights from another, so toggling adaptation never changes the base.
    /// Adaptation parameters are always created, whether or not enabled, so
    /// checkpoints stay congruent across ablation arms.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.backbone;
        let ch = cfg.stage_channels;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.patch_stride;
        let (h1, w1) = cfg.stage_size(1);
        lin_init(&mut rng, &mut store, "encoder/patch_embed", s * s * 3, ch[0]);
        store.insert("encoder/pos_embed", normal(&mut rng, &[1, h1, w1, ch[0]], 0.5));
        for k in 1..=4 {
            if k > 1 {
                lin_init(&mut rng, &mut store, &format!("encoder/stage{k}/merge"), 4 * ch[k - 2], ch[k - 1]);
            }
            let c = ch[k - 1];
            let hidden = c * cfg.mlp_ratio;
            for l in cfg.stage_layers(k) {
                let pre = format!("encoder/layer{l}");
                for n in ["q", "k", "v", "o"] {
                    store.insert(format!("{pre}/attn/w{n}"), normal(&mut rng, &[c, c], 1.0 / (c as f64).sqrt()));
                    store.insert(format!("{pre}/attn/b{n}"), zeros(&[c]));
                }
                lin_init(&mut rng, &mut store, &format!("{pre}/mlp/fc1"), c, hidden);
                lin_init(&mut rng, &mut store, &format!("{pre}/mlp/fc2"), hidden, c);
            }
        }
        let n = cfg.neck_channels;
        for k in 1..=4 {
            lin_init(&mut rng, &mut store, &format!("neck/scale{k}"), ch[k - 1], n);
        }
        for k in 1..=3 {
            lin_init(&mut rng, &mut store, &format!("decoder/lateral{k}"), n, n);
        }
        lin_init(&mut rng, &mut store, "decoder/hidden", n, cfg.decoder_hidden);
        lin_init(&mut rng, &mut store, "decoder/head", cfg.decoder_hidden, 1);

        let a = &self.adaptation;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9_7a71_0000);
        lin_init(&mut rng, &mut store, "adaptation/task_embed", s * s * 3, a.task_dim);
        for k in 1..=4 {
            zero_lin(&mut store, &format!("adaptation/stage{k}/shared"), a.adapter_hidden, ch[k - 1]);
        }
        for k in 1..=4 {
            let c = ch[k - 1];
            for l in cfg.stage_layers(k) {
                let pre = format!("adaptation/layer{l}");
                lin_init(&mut rng, &mut store, &format!("{pre}/unshared"), a.task_dim, a.adapter_hidden);
                for v in ["q", "v"] {
                    store.insert(
                        format!("{pre}/lora_{v}_a"),
                        normal(&mut rng, &[c, a.lora_rank], 1.0 / (c as f64).sqrt()),
                    );
                    store.insert(format!("{pre}/lora_{v}_b"), zeros(&[a.lora_rank, c]));
                }
                zero_lin(&mut store, &format!("{pre}/gate_lora"), c, 1);
                zero_lin(&mut store, &format!("{pre}/gate_adapter"), c, 1);
            }
        }
        store
    }

    fn check_images(&self, images: &Array4<f64>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        if [h, w] != self.backbone.input_size || c != 3 {
            return Err(Error::config(format!(
                "image batch is {h}x{w}x{c}, model expects {}x{}x3",
                self.backbone.input_size[0], self.backbone.input_size[1]
            )));
        }
        Ok(())
    }

    fn standardize(&self, images: &Array4<f64>) -> Array {
        let mut x = images.clone();
        for (c, mut lane) in x.axis_iter_mut(Axis(3)).enumerate() {
            let (m, s) = (self.backbone.pixel_mean[c], self.backbone.pixel_std[c]);
            lane.mapv_inplace(|v| (v - m) / s);
        }
        x.into_dyn()
    }

    /// Stage outputs `f_1..f_4`, channels-last.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        images: &Array4<f64>,
        gate_mode: GateMode,
    ) -> Result<[Var; 4]> {
        self.check_images(images)?;
        let cfg = &self.backbone;
        let a = &self.adaptation;
        let s = cfg.patch_stride;
        let x = self.standardize(images);
        let xv = g.constant(x.clone());
        let patches = patchify(g, xv, s);
        let mut x = linear(g, p, "encoder/patch_embed", patches);
        let pos = p.var("encoder/pos_embed");
        x = g.add(x, pos);

        let task = if a.adapter_enabled {
            let hf = high_frequency(
                &x_as4(g.value(xv)),
                a.hf_mask_ratio,
            );
            let hv = g.constant(hf.into_dyn());
            let hp = patchify(g, hv, s);
            Some(linear(g, p, "adaptation/task_embed", hp))
        } else {
            None
        };

        let mut outs = Vec::with_capacity(4);
        for k in 1..=4 {
            if k > 1 {
                let merged = patchify(g, x, 2);
                x = linear(g, p, &format!("encoder/stage{k}/merge"), merged);
            }
            let (h, w) = cfg.stage_size(k);
            let task_k = task.map(|t| {
                let pooled = g.avg_pool(t, 1 << (k - 1));
                flatten_tokens(g, pooled)
            });
            let mut tokens = flatten_tokens(g, x);
            for l in cfg.stage_layers(k) {
                tokens = self.layer(g, p, k, l, tokens, task_k, gate_mode)?;
            }
            x = unflatten_tokens(g, tokens, h, w);
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        g: &mut Graph,
        p: &Bindings,
        stage: usize,
        l: usize,
        mut x: Var,
        task: Option<Var>,
        gate_mode: GateMode,
    ) -> Result<Var> {
        let a = &self.adaptation;
        let ad = format!("adaptation/layer{l}");
        if let Some(t) = task {
            let gate = site_gate(g, p, a, gate_mode, &format!("{ad}/gate_adapter"), x);
            x = adapter_inject(
                g,
                p,
                x,
                t,
                &format!("{ad}/unshared"),
                &format!("adaptation/stage{stage}/shared"),
                gate,
            )?;
        }
        let pre = format!("encoder/layer{l}");
        let h = g.layer_norm(x, LN_EPS);
        let attn = AttentionVars::bind(p, &format!("{pre}/attn"));
        let att = if a.lora_enabled {
            let gate = site_gate(g, p, a, gate_mode, &format!("{ad}/gate_lora"), h);
            let lora = LoraVars::bind(p, &ad, a.lora_scale());
            gated_lora_attention(g, h, &attn, Some((&lora, gate)), self.backbone.attention_heads)
        } else {
            gated_lora_attention(g, h, &attn, None, self.backbone.attention_heads)
        };
        x = g.add(x, att);
        let h = g.layer_norm(x, LN_EPS);
        let m = linear(g, p, &format!("{pre}/mlp/fc1"), h);
        let m = g.gelu(m);
        let m = linear(g, p, &format!("{pre}/mlp/fc2"), m);
        Ok(g.add(x, m))
    }

    /// 1x1 projections of every scale to `neck_channels`.
    pub fn neck_graph(&self, g: &mut Graph, p: &Bindings, f: [Var; 4]) -> [Var; 4] {
        let mut out = f;
        for (k, v) in out.iter_mut().enumerate() {
            *v = linear(g, p, &format!("neck/scale{}", k + 1), *v);
        }
        out
    }

    /// Top-down decoder on `(f1_hat, f2_hat, f3_fuse)`; returns `[B, H, W]` probabilities.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bindings, f1: Var, f2: Var, f3: Var) -> Var {
        let l3 = linear(g, p, "decoder/lateral3", f3);
        let l2 = linear(g, p, "decoder/lateral2", f2);
        let l1 = linear(g, p, "decoder/lateral1", f1);
        let up3 = g.upsample(l3, 2);
        let d2 = g.add(l2, up3);
        let up2 = g.upsample(d2, 2);
        let d1 = g.add(l1, up2);
        let h = linear(g, p, "decoder/hidden", d1);
        let h = g.gelu(h);
        let logit = linear(g, p, "decoder/head", h);
        let logit = g.upsample(logit, self.backbone.patch_stride);
        let prob = g.sigmoid(logit);
        let s = g.shape(prob).to_vec();
        g.reshape(prob, &s[..3])
    }

    /// Full pass: encode, neck, (stochastic-depth) fusion, optional channel
    /// dropout on the decoder inputs, decode.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bindings,
        images: &Array4<f64>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let encoder = self.encode_graph(g, p, images, opts.gate_mode)?;
        let neck = self.neck_graph(g, p, encoder);
        let coeffs = stochastic_depth_coefficients(&opts.stochastic_depth, images.dim().0, rng)?;
        let fused = fuse_graph(g, neck[2], neck[3], coeffs)?;
        let mut inputs = [neck[0], neck[1], fused];
        if let Some(factors) = &opts.channel_factors {
            for (v, f) in inputs.iter_mut().zip(factors.iter()) {
                let fv = g.constant(f.clone());
                *v = g.mul(*v, fv);
            }
        }
        let prob = self.decode_graph(g, p, inputs[0], inputs[1], inputs[2]);
        Ok(ForwardTrace {
            encoder,
            neck,
            fused,
            prob,
        })
    }

    pub fn encode(&self, params: &ParamStore, images: &Array4<f64>) -> Result<[FeatureMap; 4]> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f = self.encode_graph(&mut g, &p, images, GateMode::Learned)?;
        let maps = f
            .iter()
            .enumerate()
            .map(|(k, v)| FeatureMap::from_channels_last(g.value(*v), k + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(maps.try_into().expect("four scales"))
    }

    pub fn neck(&self, params: &ParamStore, features: &[FeatureMap]) -> Result<[FeatureMap; 4]> {
        if features.len() != 4 {
            return Err(Error::invariant(format!(
                "neck needs four scales, got {}",
                features.len()
            )));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let mut vars = Vec::with_capacity(4);
        for (k, f) in features.iter().enumerate() {
            let want = self.backbone.stage_channels[k];
            if f.channels() != want {
                return Err(Error::invariant(format!(
                    "scale {} has {} channels, expected {want}",
                    k + 1,
                    f.channels()
                )));
            }
            vars.push(g.constant(f.to_channels_last()));
        }
        let vars: [Var; 4] = vars.try_into().expect("four scales");
        let out = self.neck_graph(&mut g, &p, vars);
        let maps = out
            .iter()
            .enumerate()
            .map(|(k, v)| FeatureMap::from_channels_last(g.value(*v), k + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(maps.try_into().expect("four scales"))
    }

    pub fn decode(
        &self,
        params: &ParamStore,
        f1: &FeatureMap,
        f2: &FeatureMap,
        f3_fuse: &FeatureMap,
    ) -> Result<ProbabilityMap> {
        let (h1, w1) = f1.spatial();
        if f2.spatial() != (h1 / 2, w1 / 2) || f3_fuse.spatial() != (h1 / 4, w1 / 4) {
            return Err(Error::invariant(
                "decoder inputs must be at strides s, 2s, 4s",
            ));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let v1 = g.constant(f1.to_channels_last());
        let v2 = g.constant(f2.to_channels_last());
        let v3 = g.constant(f3_fuse.to_channels_last());
        let prob = self.decode_graph(&mut g, &p, v1, v2, v3);
        to_probability(g.value(prob))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        images: &Array4<f64>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ProbabilityMap> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let t = self.forward_graph(&mut g, &p, images, opts, rng)?;
        to_probability(g.value(t.prob))
    }

    /// Deterministic inference, processed in chunks of `batch` images.
    pub fn predict(&self, params: &ParamStore, images: &Array4<f64>, batch: usize) -> Result<ProbabilityMap> {
        let n = images.dim().0;
        let (h, w) = (self.backbone.input_size[0], self.backbone.input_size[1]);
        let mut out = Array3::<f64>::zeros((n, h, w));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let step = batch.max(1);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let chunk = images.slice_axis(Axis(0), (start..end).into()).to_owned();
            let p = self.forward(params, &chunk, &ForwardOptions::eval(), &mut rng)?;
            out.slice_axis_mut(Axis(0), (start..end).into()).assign(&p.data);
        }
        ProbabilityMap::new(out)
    }
}

fn x_as4(a: &Array) -> Array4<f64> {
    a.view().into_dimensionality::<ndarray::Ix4>().expect("4-d image batch").to_owned()
}

fn to_probability(a: &Array) -> Result<ProbabilityMap> {
    let a3 = a
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::invariant(e.to_string()))?
        .to_owned();
    ProbabilityMap::new(a3)
}

/// `f3 + coeff * Upsample2x(f4)` on channels-last maps. `coeff = None` is the
/// deterministic fusion; otherwise a `[B, 1, 1, 1]` per-sample factor.
pub fn fuse_graph(g: &mut Graph, f3: Var, f4: Var, coeff: Option<Array>) -> Result<Var> {
    let (s3, s4) = (g.shape(f3).to_vec(), g.shape(f4).to_vec());
    if s3[3] != s4[3] {
        return Err(Error::invariant(format!(
            "fusion channel mismatch: {} vs {}",
            s3[3], s4[3]
        )));
    }
    if s3[1] != 2 * s4[1] || s3[2] != 2 * s4[2] {
        return Err(Error::invariant(format!(
            "stage-4 map {:?} is not half of stage-3 map {:?}",
            &s4[1..3],
            &s3[1..3]
        )));
    }
    let up = g.upsample(f4, 2);
    let contrib = match coeff {
        Some(c) => {
            let cv = g.constant(c);
            g.mul(up, cv)
        }
        None => up,
    };
    Ok(g.add(f3, contrib))
}

/// Deterministic fusion `f3_hat + Upsample2x(f4_hat)` with fixed bilinear weights.
pub fn fuse(f3_hat: &FeatureMap, f4_hat: &FeatureMap) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let a = g.constant(f3_hat.to_channels_last());
    let b = g.constant(f4_hat.to_channels_last());
    let out = fuse_graph(&mut g, a, b, None)?;
    FeatureMap::from_channels_last(g.value(out), f3_hat.scale_index)
}

/// Shape of a `[B, H, W, C]` constant for per-sample scaling.
pub(crate) fn per_sample(values: &[f64]) -> Array {
    Array::from_shape_vec(IxDyn(&[values.len(), 1, 1, 1]), values.to_vec()).expect("length")
}
