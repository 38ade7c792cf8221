//! One S2Match iteration.
//!
//! Randomness comes from independent streams keyed by `(seed, iter, purpose)`
//! plus per-sample augmentation seeds carried by the batch, so an iteration is
//! reproducible in isolation and the labeled path never depends on draws made
//! for the unlabeled path.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::GateMode;
use crate::augment::{weak_augment, AugmentationConfig, StrongOps};
use crate::autograd::{Graph, Var};
use crate::backbone::{ForwardOptions, Segmenter};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};

use super::loss::{ss_consistency_graph, supervised_loss_graph, ws_consistency_graph};
use super::{ema_update, poly_lr, AdamW, DropoutMaskPair, S2MatchConfig, SdOrientation, StochasticDepth, TeacherState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    SdLabeled = 1,
    SdUnlabeled = 2,
    Dropout = 3,
    Epoch = 4,
    Init = 5,
}

/// Independent ChaCha stream for `(seed, index, purpose)`.
pub fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(8).wrapping_add(purpose as u64));
    rng
}

/// Augmented, stacked inputs of one iteration (`[B, H, W, 3]`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub x_l: Array4<f64>,
    pub y_l: Array3<u8>,
    pub x_w: Array4<f64>,
    pub x_s1: Array4<f64>,
    pub x_s2: Array4<f64>,
}

pub fn stack(images: &[Array3<f64>], size: [usize; 2]) -> Result<Array4<f64>> {
    let mut out = Array4::zeros((images.len(), size[0], size[1], 3));
    for (i, im) in images.iter().enumerate() {
        if im.dim() != (size[0], size[1], 3) {
            return Err(Error::invariant(format!("image {i} is {:?}, expected {size:?}x3", im.dim())));
        }
        out.index_axis_mut(Axis(0), i).assign(im);
    }
    Ok(out)
}

/// Weak views for every sample, plus two strong views of each unlabeled weak
/// view. Each sample draws from its own seeded stream.
pub fn prepare_input(batch: &Batch, aug: &AugmentationConfig) -> Result<StepInput> {
    let size = aug.crop_size;
    let mut xs = Vec::new();
    let mut ys = Array3::<u8>::zeros((batch.labeled.len(), size[0], size[1]));
    for (i, (s, &seed)) in batch.labeled.iter().zip(&batch.labeled_seeds).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, _) = weak_augment(&s.image, Some(&s.mask), aug, &mut rng)?;
        xs.push(x);
        ys.index_axis_mut(Axis(0), i).assign(&y.expect("mask given"));
    }
    let (mut w, mut s1, mut s2) = (Vec::new(), Vec::new(), Vec::new());
    for (im, &seed) in batch.unlabeled.iter().zip(&batch.unlabeled_seeds) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, _, _) = weak_augment(im, None, aug, &mut rng)?;
        s1.push(StrongOps::sample(aug, &mut rng).apply(&x));
        s2.push(StrongOps::sample(aug, &mut rng).apply(&x));
        w.push(x);
    }
    Ok(StepInput {
        x_l: stack(&xs, size)?,
        y_l: ys,
        x_w: stack(&w, size)?,
        x_s1: stack(&s1, size)?,
        x_s2: stack(&s2, size)?,
    })
}

/// Random perturbation choices of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub keep_labeled: Option<Vec<bool>>,
    /// Survival indicators for the stacked `[s1; s2]` batch.
    pub keep_unlabeled: Option<Vec<bool>>,
    pub masks: Option<DropoutMaskPair>,
}

fn draw_keep(cfg: &S2MatchConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let keep_prob = match cfg.sd_orientation {
        SdOrientation::Survival => 1.0 - cfg.p_skip,
        SdOrientation::Literal => cfg.p_skip,
    };
    (0..n).map(|_| rng.random::<f64>() < keep_prob).collect()
}

pub fn plan_step(cfg: &S2MatchConfig, iter: u64, b_l: usize, b_u: usize, neck_channels: usize) -> Result<StepPlan> {
    let sd = |purpose, n| cfg.sd_enabled.then(|| draw_keep(cfg, n, &mut stream(cfg.seed, iter, purpose)));
    let masks = if cfg.cd_enabled && b_u > 0 {
        let mut rng = stream(cfg.seed, iter, Purpose::Dropout);
        Some(DropoutMaskPair::sample(&[neck_channels; 3], &mut rng)?)
    } else {
        None
    };
    Ok(StepPlan {
        keep_labeled: sd(Purpose::SdLabeled, b_l),
        keep_unlabeled: sd(Purpose::SdUnlabeled, 2 * b_u),
        masks,
    })
}

impl StepPlan {
    fn sd(&self, keep: &Option<Vec<bool>>, cfg: &S2MatchConfig) -> StochasticDepth {
        match keep {
            Some(k) => StochasticDepth::Fixed {
                keep: k.clone(),
                p_skip: cfg.p_skip,
            },
            None => StochasticDepth::Off,
        }
    }

    pub fn labeled_options(&self, cfg: &S2MatchConfig) -> ForwardOptions {
        ForwardOptions {
            stochastic_depth: self.sd(&self.keep_labeled, cfg),
            channel_factors: None,
            gate_mode: GateMode::Learned,
        }
    }

    /// Options for the stacked strong batch of `2 * b_u` images.
    pub fn strong_options(&self, cfg: &S2MatchConfig, b_u: usize) -> ForwardOptions {
        ForwardOptions {
            stochastic_depth: self.sd(&self.keep_unlabeled, cfg),
            channel_factors: self
                .masks
                .as_ref()
                .map(|m| [m.stacked_factors(0, b_u), m.stacked_factors(1, b_u), m.stacked_factors(2, b_u)]),
            gate_mode: GateMode::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_sup: Var,
    pub l_ws: Option<Var>,
    pub l_ss: Option<Var>,
    pub total: Var,
}

/// Builds the total loss on `g`. `p_w` holds the teacher's weak-view
/// probabilities; unlabeled terms are skipped when `lambda_u == 0` or the
/// unlabeled batch is empty.
pub fn build_losses(
    g: &mut Graph,
    model: &Segmenter,
    p: &Bindings,
    input: &StepInput,
    p_w: &Array3<f64>,
    plan: &StepPlan,
    cfg: &S2MatchConfig,
) -> Result<LossVars> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lab = model.forward_graph(g, p, &input.x_l, &plan.labeled_options(cfg), &mut rng)?;
    let l_sup = supervised_loss_graph(g, lab.prob, &input.y_l);
    let b_u = input.x_w.dim().0;
    if b_u == 0 || cfg.lambda_u == 0.0 {
        return Ok(LossVars {
            l_sup,
            l_ws: None,
            l_ss: None,
            total: l_sup,
        });
    }
    let strong = ndarray::concatenate(Axis(0), &[input.x_s1.view(), input.x_s2.view()])
        .map_err(|e| Error::invariant(e.to_string()))?;
    let out = model.forward_graph(g, p, &strong, &plan.strong_options(cfg, b_u), &mut rng)?;
    let p_s1 = g.narrow(out.prob, 0, b_u);
    let p_s2 = g.narrow(out.prob, b_u, b_u);
    let l_ws = ws_consistency_graph(g, p_s1, p_s2, p_w, cfg);
    let l_ss = cfg.sc_enabled.then(|| ss_consistency_graph(g, p_s1, p_s2, p_w, cfg));
    let unl = match l_ss {
        Some(s) => g.add(l_ws, s),
        None => l_ws,
    };
    let unl = g.scale(unl, cfg.lambda_u);
    let total = g.add(l_sup, unl);
    Ok(LossVars {
        l_sup,
        l_ws: Some(l_ws),
        l_ss,
        total,
    })
}

/// Student, teacher and optimizer owned by the training coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: TeacherState,
    pub opt: AdamW,
    /// Iterations completed.
    pub iter: u64,
}

impl TrainState {
    pub fn new(student: ParamStore, cfg: &S2MatchConfig) -> Self {
        Self {
            teacher: TeacherState::from_student(&student),
            student,
            opt: AdamW::new(cfg.adam_betas[0], cfg.adam_betas[1], cfg.adam_eps, cfg.weight_decay),
            iter: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: u64,
    #[serde(rename = "L_l")]
    pub l_sup: f64,
    #[serde(rename = "L_ws")]
    pub l_ws: f64,
    #[serde(rename = "L_ss")]
    pub l_ss: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    pub gamma: f64,
    pub lr: f64,
}

/// Teacher prediction on the weak views (no perturbation, no gradient).
pub fn teacher_predict(model: &Segmenter, teacher: &ParamStore, x_w: &Array4<f64>) -> Result<Array3<f64>> {
    if x_w.dim().0 == 0 {
        return Ok(Array3::zeros((0, x_w.dim().1, x_w.dim().2)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(model.forward(teacher, x_w, &ForwardOptions::eval(), &mut rng)?.data)
}

/// Gradients of `loss` for every trainable parameter reached by the graph.
pub fn trainable_grads(g: &Graph, p: &Bindings, store: &ParamStore, loss: Var) -> BTreeMap<String, crate::autograd::Array> {
    let grads = g.backward(loss);
    store
        .iter()
        .filter(|(_, prm)| prm.trainable)
        .filter_map(|(name, _)| grads.get(p.var(name)).map(|gr| (name.clone(), gr.clone())))
        .collect()
}

/// Teacher pseudo-labels, student losses, one AdamW step, one EMA update.
pub fn train_step(
    model: &Segmenter,
    state: &mut TrainState,
    input: &StepInput,
    cfg: &S2MatchConfig,
    total_iters: u64,
) -> Result<StepStats> {
    let iter = state.iter;
    let b_u = input.x_w.dim().0;
    let p_w = if cfg.lambda_u > 0.0 {
        teacher_predict(model, &state.teacher.params, &input.x_w)?
    } else {
        Array3::zeros((0, 0, 0))
    };
    let plan = plan_step(cfg, iter, input.x_l.dim().0, b_u, model.backbone.neck_channels)?;
    let mut g = Graph::new();
    let p = state.student.bind(&mut g, true);
    let lv = build_losses(&mut g, model, &p, input, &p_w, &plan, cfg)?;
    let loss = g.scalar(lv.total);
    if !loss.is_finite() {
        return Err(Error::invariant(format!("non-finite loss at iteration {iter}")));
    }
    let grads = trainable_grads(&g, &p, &state.student, lv.total);
    let lr = poly_lr(iter, total_iters, cfg.lr0, cfg.poly_power);
    state.opt.step(&mut state.student, &grads, lr)?;
    let gamma = ema_update(&mut state.teacher, &state.student, iter, cfg.gamma_cap)?;
    state.iter += 1;
    Ok(StepStats {
        iter,
        l_sup: g.scalar(lv.l_sup),
        l_ws: lv.l_ws.map_or(0.0, |v| g.scalar(v)),
        l_ss: lv.l_ss.map_or(0.0, |v| g.scalar(v)),
        loss,
        gamma,
        lr,
    })
}
