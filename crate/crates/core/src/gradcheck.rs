//! Central finite-difference checks for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::fmvr::{self, FmvrParams, Window};
use crate::matryoshka::{self, PyramidConfig, Sampling};
use crate::mrl::{self, MrlModel, Prepared};
use crate::synthetic::Sample;
use crate::tensor::{ChannelVector, Tensor};

pub const EPSILON: f64 = 1e-5;
/// Denominator floor of [`rel_err`]. Gradients that vanish analytically
/// (for example `w_a` seen through a token-mean readout) would otherwise
/// turn finite-difference round-off into unbounded relative error.
pub const REL_FLOOR: f64 = 1e-3;
/// Inputs keep the two largest values of every max-pool block at least this
/// far apart, well clear of `EPSILON`, so no probe crosses an argmax switch.
pub const MIN_GAP: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Neumaier-compensated dot product. Keeps the loss round-off far below the
/// finite-difference signal, so the check measures the gradient and not the
/// summation order.
pub fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let v = x * y;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Smallest gap between the largest and second largest value over all `k x k`
/// blocks of `x`.
pub fn min_block_gap(x: &Tensor, k: usize) -> f64 {
    let (h, w) = (x.height(), x.width());
    let mut gap = f64::INFINITY;
    for p in 0..x.planes() {
        let plane = x.plane(p);
        for bh in 0..h / k {
            for bw in 0..w / k {
                let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for i in 0..k {
                    for j in 0..k {
                        let v = plane[(bh * k + i) * w + bw * k + j];
                        if v > top {
                            second = top;
                            top = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                gap = gap.min(top - second);
            }
        }
    }
    gap
}

/// A standard normal `(C, H, W)` tensor whose 2x2 max blocks are separated
/// by at least [`MIN_GAP`]; redrawn until they are.
pub fn separated_input(rng: &mut ChaCha8Rng, (c, h, w): (usize, usize, usize)) -> Result<Tensor> {
    loop {
        let x = Tensor::new(vec![c, h, w], normal_vec(rng, c * h * w))?;
        match fmvr::Window::for_grid(h, w)? {
            Window::Block(k) if min_block_gap(&x, k) < MIN_GAP => continue,
            _ => return Ok(x),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupErrors {
    pub case: String,
    pub seed: u64,
    /// `(group name, max relative error)`.
    pub groups: Vec<(String, f64)>,
}

impl GroupErrors {
    pub fn max(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

/// Checks `fmvr_backward` on `L = sum(r ⊙ fmvr(x))` for random `x`, `r`
/// and modulation vectors.
pub fn check_fmvr(shape: (usize, usize, usize), seed: u64, residual_skip: bool) -> Result<GroupErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    let x = separated_input(&mut rng, shape)?;
    let r = Tensor::new(vec![c, h, w], normal_vec(&mut rng, c * h * w))?;
    let params = FmvrParams::from_parts(
        ChannelVector::new(normal_vec(&mut rng, c))?,
        ChannelVector::new(normal_vec(&mut rng, c))?,
        residual_skip,
    )?;
    let loss = |x: &Tensor, p: &FmvrParams| -> f64 {
        let (y, _) = fmvr::fmvr_forward(x, p).expect("shape fixed");
        compensated_dot(y.data(), r.data())
    };

    let (_, acts) = fmvr::fmvr_forward(&x, &params)?;
    let (gx, ga, gm) = fmvr::fmvr_backward(&r, &acts, &params)?;

    let nx = numeric_grad(x.data(), EPSILON, |v| {
        loss(&Tensor::new(x.shape().to_vec(), v.to_vec()).expect("shape fixed"), &params)
    });
    let na = numeric_grad(params.w_a_high.as_slice(), EPSILON, |v| {
        let mut p = params.clone();
        p.w_a_high = ChannelVector::new(v.to_vec()).expect("non-empty");
        loss(&x, &p)
    });
    let nm = numeric_grad(params.w_m_low.as_slice(), EPSILON, |v| {
        let mut p = params.clone();
        p.w_m_low = ChannelVector::new(v.to_vec()).expect("non-empty");
        loss(&x, &p)
    });
    Ok(GroupErrors {
        case: format!("fmvr {c}x{h}x{w}"),
        seed,
        groups: vec![
            ("x".into(), max_rel_err(gx.data(), &nx)),
            ("w_a".into(), max_rel_err(ga.as_slice(), &na)),
            ("w_m".into(), max_rel_err(gm.as_slice(), &nm)),
        ],
    })
}

/// Every tensor that feeds a max or a pooling window in the forward pass
/// keeps its block maxima separated.
fn max_gap_ok(sample: &Tensor, cfg: &PyramidConfig) -> Result<bool> {
    let trace = matryoshka::trace_pyramid(sample, cfg)?;
    for l in &trace.pyramid.levels {
        let k = match Window::for_level(l.side, l.side)? {
            Window::Block(k) => k,
            Window::PassThrough => continue,
        };
        if min_block_gap(&l.raw, k) < MIN_GAP || min_block_gap(&l.restored, k) < MIN_GAP {
            return Ok(false);
        }
    }
    Ok(true)
}

/// End-to-end check of every model parameter through pyramid, FMVR, heads
/// and the weighted multi-scale loss, on a small random model.
pub fn check_mrl(seed: u64, channels: usize, base_side: usize, batch: usize, num_classes: usize) -> Result<GroupErrors> {
    let cfg = PyramidConfig::new(base_side, channels, Sampling::AvgPool, true)?;
    check_mrl_with(seed, cfg, batch, num_classes)
}

/// [`check_mrl`] for an arbitrary pyramid (sampling, skip, chaining).
pub fn check_mrl_with(seed: u64, cfg: PyramidConfig, batch: usize, num_classes: usize) -> Result<GroupErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (channels, base_side) = (cfg.channels, cfg.base_side);
    let mut model = MrlModel::new(cfg.clone(), num_classes)?;
    let levels = model.num_levels();
    let weights = (0..levels).map(|_| rng.random_range(0.5..1.5)).collect();
    model = model.with_loss_weights(weights)?;
    // Moderate scale: chained restoration is polynomial in its input, and
    // large activations would bury the finite-difference signal in round-off.
    let init: Vec<f64> = normal_vec(&mut rng, model.num_params()).into_iter().map(|v| 0.5 * v).collect();
    model.set_params(&init)?;

    let mut prepared = Vec::with_capacity(batch);
    while prepared.len() < batch {
        let x = Tensor::new(
            vec![channels, base_side, base_side],
            normal_vec(&mut rng, channels * base_side * base_side),
        )?;
        if !max_gap_ok(&x, &model.pyramid)? {
            continue;
        }
        let label = prepared.len() % num_classes;
        prepared.push(Prepared::new(&Sample { features: x, label }, &cfg)?);
    }
    let refs: Vec<&Prepared> = prepared.iter().collect();

    let (_, analytic) = mrl::loss_and_grad(&model, &refs)?;
    let theta = model.params();
    let mut probe = model.clone();
    let numeric = numeric_grad(&theta, EPSILON, |v| {
        probe.set_params(v).expect("length fixed");
        mrl::forward_loss(&probe, &refs).expect("valid batch").total
    });

    let mut groups = Vec::new();
    let mut at = 0;
    let mut push = |name: String, n: usize| {
        groups.push((name, max_rel_err(&analytic[at..at + n], &numeric[at..at + n])));
        at += n;
    };
    for e in 0..levels {
        push(format!("level{e}.w_a"), channels);
        push(format!("level{e}.w_m"), channels);
    }
    for e in 0..levels {
        push(format!("head{e}.weight"), num_classes * channels);
        push(format!("head{e}.bias"), num_classes);
    }
    Ok(GroupErrors {
        case: format!("mrl C={channels} side={base_side} batch={batch}"),
        seed,
        groups,
    })
}
