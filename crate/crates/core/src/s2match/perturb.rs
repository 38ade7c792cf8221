//! Feature-level perturbations: stochastic depth on the stage-4 contribution to
//! the fusion, and complementary channel dropout for the two strong streams.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Array, Graph};
use crate::backbone::{fuse_graph, per_sample, FeatureMap};
use crate::error::{Error, Result};

/// How the stage-4 branch of the fusion is treated.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum StochasticDepth {
    /// Deterministic fusion (evaluation).
    #[default]
    Off,
    /// Draw a survival indicator per sample with `P(keep) = 1 - p_skip`.
    Sample { p_skip: f64 },
    /// Use the given per-sample indicators.
    Fixed { keep: Vec<bool>, p_skip: f64 },
}

/// Per-sample coefficients `keep / (1 - p_skip)` as a `[B, 1, 1, 1]` array, or
/// `None` for the deterministic path.
pub fn stochastic_depth_coefficients<R: Rng + ?Sized>(
    policy: &StochasticDepth,
    batch: usize,
    rng: &mut R,
) -> Result<Option<Array>> {
    let check = |p: f64| {
        if (0.0..1.0).contains(&p) {
            Ok(())
        } else {
            Err(Error::config(format!("p_skip must be in [0, 1), got {p}")))
        }
    };
    let keep = match policy {
        StochasticDepth::Off => return Ok(None),
        StochasticDepth::Sample { p_skip } => {
            check(*p_skip)?;
            (0..batch).map(|_| rng.random::<f64>() >= *p_skip).collect::<Vec<_>>()
        }
        StochasticDepth::Fixed { keep, p_skip } => {
            check(*p_skip)?;
            if keep.len() != batch {
                return Err(Error::invariant(format!(
                    "{} survival indicators for a batch of {batch}",
                    keep.len()
                )));
            }
            keep.clone()
        }
    };
    let p = match policy {
        StochasticDepth::Sample { p_skip } | StochasticDepth::Fixed { p_skip, .. } => *p_skip,
        StochasticDepth::Off => unreachable!(),
    };
    let coeff: Vec<f64> = keep
        .iter()
        .map(|&k| if k { 1.0 / (1.0 - p) } else { 0.0 })
        .collect();
    Ok(Some(per_sample(&coeff)))
}

/// Train/eval switch for [`stochastic_depth_fuse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `f3_hat + (b / (1 - p_skip)) * Upsample2x(f4_hat)` with one Bernoulli draw per
/// sample in training; deterministic fusion in evaluation.
pub fn stochastic_depth_fuse<R: Rng + ?Sized>(
    f3_hat: &FeatureMap,
    f4_hat: &FeatureMap,
    p_skip: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<FeatureMap> {
    let policy = match mode {
        Mode::Train => StochasticDepth::Sample { p_skip },
        Mode::Eval => StochasticDepth::Off,
    };
    let coeff = stochastic_depth_coefficients(&policy, f3_hat.data.dim().0, rng)?;
    let mut g = Graph::new();
    let a = g.constant(f3_hat.to_channels_last());
    let b = g.constant(f4_hat.to_channels_last());
    let out = fuse_graph(&mut g, a, b, coeff)?;
    FeatureMap::from_channels_last(g.value(out), f3_hat.scale_index)
}

/// Complementary channel masks, one boolean vector per scale. Stream 1 keeps
/// the channels marked `true`, stream 2 the others; exactly half are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMaskPair {
    pub masks: Vec<Vec<bool>>,
}

impl DropoutMaskPair {
    pub fn sample<R: Rng + ?Sized>(channels: &[usize], rng: &mut R) -> Result<Self> {
        let mut masks = Vec::with_capacity(channels.len());
        for &c in channels {
            if c % 2 != 0 {
                return Err(Error::config(format!(
                    "complementary dropout needs an even channel count, got {c}"
                )));
            }
            let mut idx: Vec<usize> = (0..c).collect();
            idx.shuffle(rng);
            let mut m = vec![false; c];
            for &i in &idx[..c / 2] {
                m[i] = true;
            }
            masks.push(m);
        }
        Ok(Self { masks })
    }

    /// Factors `2 * M` for stream 1 and `2 * (1 - M)` for stream 2.
    pub fn factors(&self, scale: usize) -> (Vec<f64>, Vec<f64>) {
        let m = &self.masks[scale];
        let f = |keep: bool| if keep { 2.0 } else { 0.0 };
        (m.iter().map(|&k| f(k)).collect(), m.iter().map(|&k| f(!k)).collect())
    }

    /// `[2B, 1, 1, C]` factors for a batch holding stream 1 in its first `b` rows
    /// and stream 2 in the rest.
    pub fn stacked_factors(&self, scale: usize, b: usize) -> Array {
        let (f1, f2) = self.factors(scale);
        let c = f1.len();
        let mut data = Vec::with_capacity(2 * b * c);
        for _ in 0..b {
            data.extend_from_slice(&f1);
        }
        for _ in 0..b {
            data.extend_from_slice(&f2);
        }
        Array::from_shape_vec(ndarray::IxDyn(&[2 * b, 1, 1, c]), data).expect("factor shape")
    }
}

fn apply(f: &FeatureMap, factors: &[f64]) -> Result<FeatureMap> {
    let mut out = f.data.clone();
    for (c, mut lane) in out.axis_iter_mut(ndarray::Axis(1)).enumerate() {
        lane.mapv_inplace(|v| v * factors[c]);
    }
    FeatureMap::new(out, f.scale_index)
}

/// Applies fresh complementary masks to two streams of decoder inputs.
pub fn complementary_dropout_pair<R: Rng + ?Sized>(
    s1: &[FeatureMap],
    s2: &[FeatureMap],
    rng: &mut R,
) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>, DropoutMaskPair)> {
    if s1.len() != s2.len() {
        return Err(Error::invariant("streams have different numbers of scales"));
    }
    for (a, b) in s1.iter().zip(s2) {
        if a.data.dim() != b.data.dim() {
            return Err(Error::invariant(format!(
                "stream shapes differ at scale {}: {:?} vs {:?}",
                a.scale_index,
                a.data.dim(),
                b.data.dim()
            )));
        }
    }
    let channels: Vec<usize> = s1.iter().map(FeatureMap::channels).collect();
    let pair = DropoutMaskPair::sample(&channels, rng)?;
    let mut o1 = Vec::with_capacity(s1.len());
    let mut o2 = Vec::with_capacity(s2.len());
    for (k, (a, b)) in s1.iter().zip(s2).enumerate() {
        let (f1, f2) = pair.factors(k);
        o1.push(apply(a, &f1)?);
        o2.push(apply(b, &f2)?);
    }
    Ok((o1, o2, pair))
}
