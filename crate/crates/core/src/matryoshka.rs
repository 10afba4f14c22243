//! Nested coarse-to-fine token sets.
//!
//! A square `(C, S, S)` feature grid is pooled 2x2/stride 2 until the side
//! becomes odd, then collapsed to a single token with one window covering
//! the whole odd grid. The default `S = 24` gives sides `24, 12, 6, 3, 1`,
//! i.e. 576, 144, 36, 9 and 1 tokens. Every level may be restored with its
//! own [`FmvrParams`]; the pooling chain itself runs on the raw features
//! unless `chain_restored` is set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmvr::{self, FmvrActivations, FmvrParams, Window};
use crate::tensor::{self, ChannelVector, Tensor};

/// How a level is reduced to the next coarser one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    AvgPool,
    MaxPool,
    /// Every `k*k`-th token of the row-major flattened grid.
    Sequential,
    /// Top-left cell of every window.
    Spatial,
}

impl Sampling {
    pub const ALL: [Sampling; 4] = [
        Sampling::AvgPool,
        Sampling::Sequential,
        Sampling::Spatial,
        Sampling::MaxPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::AvgPool => "avg_pool",
            Sampling::MaxPool => "max_pool",
            Sampling::Sequential => "sequential",
            Sampling::Spatial => "spatial",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sampling::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown sampling {s:?} (expected avg_pool, max_pool, sequential or spatial)"
                ))
            })
    }
}

/// Side lengths from finest to coarsest.
///
/// Accepts `2^a` and `3 * 2^a`; any other base would end the halving chain
/// on an odd side larger than 3.
pub fn level_sides(base_side: usize) -> Result<Vec<usize>> {
    if base_side == 0 {
        return Err(Error::config("base_side must be positive"));
    }
    let mut sides = vec![base_side];
    let mut s = base_side;
    while s.is_multiple_of(2) {
        s /= 2;
        sides.push(s);
    }
    match s {
        1 => {}
        3 => sides.push(1),
        odd => {
            return Err(Error::config(format!(
                "base_side {base_side} halves to odd side {odd}; use 2^a or 3*2^a"
            )))
        }
    }
    Ok(sides)
}

/// Pooling window taking a grid of side `s` to the next level.
fn step_window(s: usize) -> usize {
    if s.is_multiple_of(2) {
        2
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub base_side: usize,
    pub channels: usize,
    pub sampling: Sampling,
    pub fmvr_enabled: bool,
    /// Feed each restored level (instead of the raw level) into the next
    /// pooling step.
    pub chain_restored: bool,
    /// One entry per level, finest first.
    pub level_params: Vec<FmvrParams>,
}

impl PyramidConfig {
    /// Unit-initialised parameters on every level, raw pooling chain.
    pub fn new(base_side: usize, channels: usize, sampling: Sampling, fmvr_enabled: bool) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        let levels = level_sides(base_side)?.len();
        let level_params = (0..levels)
            .map(|_| FmvrParams::new(channels))
            .collect::<Result<_>>()?;
        Ok(Self {
            base_side,
            channels,
            sampling,
            fmvr_enabled,
            chain_restored: false,
            level_params,
        })
    }

    pub fn with_residual_skip(mut self, on: bool) -> Self {
        for p in &mut self.level_params {
            p.residual_skip = on;
        }
        self
    }

    pub fn with_chain_restored(mut self, on: bool) -> Self {
        self.chain_restored = on;
        self
    }

    pub fn sides(&self) -> Vec<usize> {
        level_sides(self.base_side).expect("validated at construction")
    }

    pub fn num_levels(&self) -> usize {
        self.level_params.len()
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.sides().iter().map(|s| s * s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sides = level_sides(self.base_side)?;
        if self.level_params.len() != sides.len() {
            return Err(Error::config(format!(
                "{} levels but {} parameter sets",
                sides.len(),
                self.level_params.len()
            )));
        }
        if let Some(p) = self.level_params.iter().find(|p| p.channels() != self.channels) {
            return Err(Error::config(format!(
                "parameter set has {} channels, pyramid has {}",
                p.channels(),
                self.channels
            )));
        }
        Ok(())
    }

    pub fn check_features(&self, features: &Tensor) -> Result<()> {
        let s = features.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::dim(format!("expected square (C, S, S) features, got {s:?}")));
        }
        if s[1] != self.base_side || s[0] != self.channels {
            return Err(Error::dim(format!(
                "expected ({}, {}, {}) features, got {s:?}",
                self.channels, self.base_side, self.base_side
            )));
        }
        Ok(())
    }
}

/// Reduces one level with a `k x k` window.
pub fn downsample(x: &Tensor, strategy: Sampling, k: usize) -> Result<Tensor> {
    match strategy {
        Sampling::AvgPool => tensor::block_avg_pool(x, k),
        Sampling::MaxPool => tensor::block_max_pool(x, k),
        Sampling::Sequential | Sampling::Spatial => {
            let idx = selected_indices(x, strategy, k)?;
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] /= k;
            shape[r - 1] /= k;
            Tensor::new(shape, idx.iter().map(|&i| x.data()[i]).collect())
        }
    }
}

/// Flat input indices picked by the selection strategies, in output order.
fn selected_indices(x: &Tensor, strategy: Sampling, k: usize) -> Result<Vec<usize>> {
    let (h, w) = (x.height(), x.width());
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!("{h}x{w} grid is not divisible by window {k}")));
    }
    let n = h * w;
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(x.planes() * oh * ow);
    for p in 0..x.planes() {
        for o in 0..oh * ow {
            let local = match strategy {
                Sampling::Sequential => o * k * k,
                Sampling::Spatial => (o / ow) * k * w + (o % ow) * k,
                _ => unreachable!("pooling strategies select no indices"),
            };
            out.push(p * n + local);
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample`] at input `x`.
pub fn downsample_backward(grad_out: &Tensor, x: &Tensor, strategy: Sampling, k: usize) -> Result<Tensor> {
    let mut grad = vec![0.0; x.len()];
    let g = grad_out.data();
    match strategy {
        Sampling::AvgPool => {
            let up = tensor::upsample_replicate(grad_out, k)?;
            let inv = 1.0 / (k * k) as f64;
            for (d, u) in grad.iter_mut().zip(up.data()) {
                *d = u * inv;
            }
        }
        Sampling::MaxPool => {
            for (i, &am) in tensor::block_argmax(x, k)?.iter().enumerate() {
                grad[am] += g[i];
            }
        }
        Sampling::Sequential | Sampling::Spatial => {
            for (i, &src) in selected_indices(x, strategy, k)?.iter().enumerate() {
                grad[src] += g[i];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// The pooling chain over raw features, finest first.
pub fn raw_chain(features: &Tensor, strategy: Sampling) -> Result<Vec<Tensor>> {
    let sides = level_sides(features.height())?;
    let mut levels = vec![features.clone()];
    for &s in &sides[..sides.len() - 1] {
        let next = downsample(levels.last().expect("non-empty"), strategy, step_window(s))?;
        levels.push(next);
    }
    Ok(levels)
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub side: usize,
    pub token_count: usize,
    pub raw: Tensor,
    pub restored: Tensor,
}

#[derive(Debug, Clone)]
pub struct TokenPyramid {
    pub levels: Vec<PyramidLevel>,
}

impl TokenPyramid {
    pub fn token_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.token_count).collect()
    }
}

/// A forward pass with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct PyramidTrace {
    pub pyramid: TokenPyramid,
    acts: Vec<Option<FmvrActivations>>,
}

fn restore(raw: &Tensor, side: usize, cfg: &PyramidConfig, level: usize) -> Result<(Tensor, Option<FmvrActivations>)> {
    if !cfg.fmvr_enabled {
        return Ok((raw.clone(), None));
    }
    let window = Window::for_level(side, side)?;
    let (y, acts) = fmvr::fmvr_forward_windowed(raw, &cfg.level_params[level], window)?;
    Ok((y, Some(acts)))
}

pub fn trace_pyramid(features: &Tensor, cfg: &PyramidConfig) -> Result<PyramidTrace> {
    cfg.validate()?;
    cfg.check_features(features)?;
    let sides = cfg.sides();
    let mut levels: Vec<PyramidLevel> = Vec::with_capacity(sides.len());
    let mut acts = Vec::with_capacity(sides.len());
    for (i, &side) in sides.iter().enumerate() {
        let raw = match levels.last() {
            None => features.clone(),
            Some(prev) => {
                let src = if cfg.chain_restored { &prev.restored } else { &prev.raw };
                downsample(src, cfg.sampling, step_window(prev.side))?
            }
        };
        let (restored, a) = restore(&raw, side, cfg, i)?;
        acts.push(a);
        levels.push(PyramidLevel {
            side,
            token_count: side * side,
            raw,
            restored,
        });
    }
    Ok(PyramidTrace {
        pyramid: TokenPyramid { levels },
        acts,
    })
}

/// Restores a precomputed raw chain (as returned by [`raw_chain`]).
pub fn trace_from_raw(raw: &[Tensor], cfg: &PyramidConfig) -> Result<PyramidTrace> {
    if cfg.chain_restored {
        return Err(Error::config("a precomputed raw chain cannot feed a chained pyramid"));
    }
    let sides = cfg.sides();
    if raw.len() != sides.len() {
        return Err(Error::shape(format!("{} raw levels for {} sides", raw.len(), sides.len())));
    }
    let mut levels = Vec::with_capacity(raw.len());
    let mut acts = Vec::with_capacity(raw.len());
    for (i, (r, &side)) in raw.iter().zip(&sides).enumerate() {
        let (restored, a) = restore(r, side, cfg, i)?;
        acts.push(a);
        levels.push(PyramidLevel {
            side,
            token_count: side * side,
            raw: r.clone(),
            restored,
        });
    }
    Ok(PyramidTrace {
        pyramid: TokenPyramid { levels },
        acts,
    })
}

pub fn build_pyramid(features: &Tensor, cfg: &PyramidConfig) -> Result<TokenPyramid> {
    Ok(trace_pyramid(features, cfg)?.pyramid)
}

/// Gradients of a pyramid forward pass.
#[derive(Debug, Clone)]
pub struct PyramidGrads {
    /// `(d w_a, d w_m)` per level; zero when FMVR is disabled.
    pub params: Vec<(ChannelVector, ChannelVector)>,
    pub features: Tensor,
}

/// Back-propagates per-level gradients on the restored outputs.
pub fn pyramid_backward(trace: &PyramidTrace, cfg: &PyramidConfig, grad_restored: &[Tensor]) -> Result<PyramidGrads> {
    let levels = &trace.pyramid.levels;
    if grad_restored.len() != levels.len() {
        return Err(Error::shape(format!(
            "{} level gradients for {} levels",
            grad_restored.len(),
            levels.len()
        )));
    }
    let c = cfg.channels;
    let mut params = vec![(ChannelVector::zeros(c)?, ChannelVector::zeros(c)?); levels.len()];
    // Gradient arriving at the pooling input of the next level, carried from
    // coarse to fine.
    let mut carried: Option<Tensor> = None;
    for i in (0..levels.len()).rev() {
        let mut g_out = grad_restored[i].clone();
        if cfg.chain_restored {
            if let Some(c) = carried.take() {
                g_out = g_out.add(&c)?;
            }
        }
        let mut g_raw = match &trace.acts[i] {
            Some(acts) => {
                let (gx, ga, gm) = fmvr::fmvr_backward(&g_out, acts, &cfg.level_params[i])?;
                params[i] = (ga, gm);
                gx
            }
            None => g_out,
        };
        if !cfg.chain_restored {
            if let Some(c) = carried.take() {
                g_raw = g_raw.add(&c)?;
            }
        }
        if i == 0 {
            return Ok(PyramidGrads { params, features: g_raw });
        }
        let prev = &levels[i - 1];
        let src = if cfg.chain_restored { &prev.restored } else { &prev.raw };
        carried = Some(downsample_backward(&g_raw, src, cfg.sampling, step_window(prev.side))?);
    }
    unreachable!("a pyramid has at least one level")
}

/// Row-major spatial flattening: token `m` sits at `(m / W, m % W)`.
pub fn flatten_tokens(level: &Tensor) -> Vec<Vec<f64>> {
    let (c, h, w) = (level.channels(), level.height(), level.width());
    (0..h * w)
        .map(|m| (0..c).map(|ch| level.data()[ch * h * w + m]).collect())
        .collect()
}

pub fn unflatten_tokens(tokens: &[Vec<f64>], h: usize, w: usize) -> Result<Tensor> {
    if tokens.len() != h * w || tokens.is_empty() {
        return Err(Error::shape(format!("{} tokens for a {h}x{w} grid", tokens.len())));
    }
    let c = tokens[0].len();
    if tokens.iter().any(|t| t.len() != c) {
        return Err(Error::shape("tokens of unequal width"));
    }
    Tensor::from_fn((c, h, w), |ch, y, x| tokens[y * w + x][ch])
}
