//! Supervised, weak-to-strong and strong-to-strong losses.
//!
//! Every loss exists as a graph builder (used by the training step) and as a
//! plain function over probability maps. Pseudo labels and confidence masks
//! are computed from values and enter the graph as constants.

use ndarray::{Array3, IxDyn};

use crate::autograd::{Array, Graph, Var};
use crate::backbone::{BinaryMask, ProbabilityMap};
use crate::error::{Error, Result};

use super::S2MatchConfig;

fn to3(a: &Array) -> Array3<f64> {
    a.view().into_dimensionality().expect("[B, H, W] map").to_owned()
}

fn hard(p: &Array3<f64>, threshold: f64) -> Array {
    p.mapv(|v| f64::from(u8::from(v >= threshold))).into_dyn()
}

/// 1 where `p_w >= t` or `p_w <= 1 - t`.
fn confident(p_w: &Array3<f64>, t: f64) -> Array {
    p_w.mapv(|v| f64::from(u8::from(v >= t || v <= 1.0 - t))).into_dyn()
}

/// Mean per-pixel BCE over all images.
pub fn supervised_loss_graph(g: &mut Graph, p: Var, y: &Array3<u8>) -> Var {
    let target = y.mapv(f64::from).into_dyn();
    let ones = Array::ones(IxDyn(target.shape()));
    let l = g.bce(p, target, ones);
    g.mean_all(l)
}

/// `sum(1 * (BCE(s1, target1) + BCE(s2, target2))) / (4 * B_u * H * W)`.
fn paired_loss(g: &mut Graph, p_s1: Var, p_s2: Var, t1: Array, t2: Array, mask: Array) -> Var {
    let s = g.shape(p_s1).to_vec();
    let norm = 4.0 * (s[0] * s[1] * s[2]).max(1) as f64;
    let a = g.bce(p_s1, t1, mask.clone());
    let b = g.bce(p_s2, t2, mask);
    let sum = g.add(a, b);
    let total = g.sum_all(sum);
    g.scale(total, 1.0 / norm)
}

pub fn ws_consistency_graph(g: &mut Graph, p_s1: Var, p_s2: Var, p_w: &Array3<f64>, cfg: &S2MatchConfig) -> Var {
    let target = hard(p_w, cfg.binarize_threshold);
    let mask = confident(p_w, cfg.tau);
    paired_loss(g, p_s1, p_s2, target.clone(), target, mask)
}

/// Strong views supervise each other; the confidence mask comes from the weak
/// view at `tau_s`.
pub fn ss_consistency_graph(g: &mut Graph, p_s1: Var, p_s2: Var, p_w: &Array3<f64>, cfg: &S2MatchConfig) -> Var {
    let t1 = hard(&to3(g.value(p_s1)), cfg.binarize_threshold);
    let t2 = hard(&to3(g.value(p_s2)), cfg.binarize_threshold);
    let mask = confident(p_w, cfg.tau_s);
    paired_loss(g, p_s1, p_s2, t2, t1, mask)
}

fn check_same(maps: &[&Array3<f64>]) -> Result<()> {
    let d = maps[0].dim();
    if maps.iter().any(|m| m.dim() != d) {
        return Err(Error::invariant("probability maps are not aligned"));
    }
    Ok(())
}

pub fn supervised_loss(p_l: &ProbabilityMap, y_l: &BinaryMask) -> Result<f64> {
    if p_l.data.dim() != y_l.data.dim() {
        return Err(Error::invariant("prediction and label shapes differ"));
    }
    let mut g = Graph::new();
    let p = g.constant(p_l.data.clone().into_dyn());
    let l = supervised_loss_graph(&mut g, p, &y_l.data);
    Ok(g.scalar(l))
}

pub fn ws_consistency_loss(
    p_s1: &ProbabilityMap,
    p_s2: &ProbabilityMap,
    p_w: &ProbabilityMap,
    cfg: &S2MatchConfig,
) -> Result<f64> {
    check_same(&[&p_s1.data, &p_s2.data, &p_w.data])?;
    let mut g = Graph::new();
    let a = g.constant(p_s1.data.clone().into_dyn());
    let b = g.constant(p_s2.data.clone().into_dyn());
    let l = ws_consistency_graph(&mut g, a, b, &p_w.data, cfg);
    Ok(g.scalar(l))
}

/// Zero when strong-to-strong consistency is disabled.
pub fn ss_consistency_loss(
    p_s1: &ProbabilityMap,
    p_s2: &ProbabilityMap,
    p_w: &ProbabilityMap,
    cfg: &S2MatchConfig,
) -> Result<f64> {
    check_same(&[&p_s1.data, &p_s2.data, &p_w.data])?;
    if !cfg.sc_enabled {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let a = g.constant(p_s1.data.clone().into_dyn());
    let b = g.constant(p_s2.data.clone().into_dyn());
    let l = ss_consistency_graph(&mut g, a, b, &p_w.data, cfg);
    Ok(g.scalar(l))
}

pub fn total_loss(l_sup: f64, l_ws: f64, l_ss: f64, lambda: f64) -> Result<f64> {
    if ![l_sup, l_ws, l_ss, lambda].iter().all(|v| v.is_finite()) {
        return Err(Error::invariant("non-finite loss term"));
    }
    Ok(l_sup + lambda * (l_ws + l_ss))
}
