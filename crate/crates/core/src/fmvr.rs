//! Frequency-modulated restoration of a pooled token grid.
//!
//! Two units share the input `x`:
//!
//! * the average unit splits `x` into a blockwise DC part `x_l_a` and the
//!   residual `x_h_a = x - x_l_a`, then returns
//!   `w_a * x_h_a + x_h_a * x`;
//! * the max unit splits `x` into the replicated block maximum `x_h_m` and
//!   the non-positive residual `x_l_m = x - x_h_m`, then returns
//!   `w_m * x_l_m + x_l_m * x`.
//!
//! The restored grid is the sum of both units. `w_a` and `w_m` are per
//! channel. Pooling is a `k x k` block with stride `k` followed by
//! nearest-neighbour replication back to the input grid, so every operation
//! here is local to one block.

use crate::error::{Error, Result};
use crate::tensor::{self, ChannelVector, Tensor};

/// Learnable modulation for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FmvrParams {
    pub w_a_high: ChannelVector,
    pub w_m_low: ChannelVector,
    /// Adds `x` back onto the restored output when set.
    pub residual_skip: bool,
}

impl FmvrParams {
    /// Unit modulation on both units, no skip path.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            w_a_high: ChannelVector::ones(channels)?,
            w_m_low: ChannelVector::ones(channels)?,
            residual_skip: false,
        })
    }

    pub fn from_parts(w_a_high: ChannelVector, w_m_low: ChannelVector, residual_skip: bool) -> Result<Self> {
        if w_a_high.len() != w_m_low.len() {
            return Err(Error::shape(format!(
                "w_a has {} channels, w_m has {}",
                w_a_high.len(),
                w_m_low.len()
            )));
        }
        if !w_a_high.as_slice().iter().chain(w_m_low.as_slice()).all(|v| v.is_finite()) {
            return Err(Error::config("modulation parameters must be finite"));
        }
        Ok(Self {
            w_a_high,
            w_m_low,
            residual_skip,
        })
    }

    pub fn with_skip(mut self, residual_skip: bool) -> Self {
        self.residual_skip = residual_skip;
        self
    }

    pub fn channels(&self) -> usize {
        self.w_a_high.len()
    }
}

/// Pooling window used inside the two units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// 1-wide grids are returned unchanged.
    PassThrough,
    Block(usize),
}

impl Window {
    /// The standard 2x2 rule: pass-through for 1-wide grids, 2x2 blocks for
    /// even grids, error otherwise.
    pub fn for_grid(h: usize, w: usize) -> Result<Self> {
        if h == 1 || w == 1 {
            Ok(Window::PassThrough)
        } else if h.is_multiple_of(2) && w.is_multiple_of(2) {
            Ok(Window::Block(2))
        } else {
            Err(Error::OddDimension { h, w })
        }
    }

    /// Pyramid rule: like [`Window::for_grid`], except that an odd square
    /// grid uses one window covering the whole grid.
    pub fn for_level(h: usize, w: usize) -> Result<Self> {
        match Self::for_grid(h, w) {
            Err(Error::OddDimension { .. }) if h == w => Ok(Window::Block(h)),
            other => other,
        }
    }
}

/// Intermediates of one forward call.
#[derive(Debug, Clone)]
pub struct FmvrActivations {
    pub x: Tensor,
    pub x_l_a: Tensor,
    pub x_h_a: Tensor,
    pub x_h_m: Tensor,
    pub x_l_m: Tensor,
    pub window: Window,
    /// Flat index of each block's maximum (first in row-major order).
    argmax: Vec<usize>,
}

impl FmvrActivations {
    fn new(
        x: Tensor,
        (x_l_a, x_h_a): (Tensor, Tensor),
        (x_h_m, x_l_m): (Tensor, Tensor),
        window: Window,
        argmax: Vec<usize>,
    ) -> Self {
        debug_assert!(
            reassembles(&x, &x_l_a, &x_h_a) && reassembles(&x, &x_h_m, &x_l_m),
            "frequency split does not reassemble its input"
        );
        Self {
            x,
            x_l_a,
            x_h_a,
            x_h_m,
            x_l_m,
            window,
            argmax,
        }
    }
}

/// Spacing between `|v|` and the next larger double.
pub fn ulp(v: f64) -> f64 {
    let a = v.abs();
    a.next_up() - a
}

/// `a + b == x` to within one ulp of the largest operand magnitude.
pub fn reassembles(x: &Tensor, a: &Tensor, b: &Tensor) -> bool {
    x.data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .all(|((&x, &a), &b)| (a + b - x).abs() <= ulp(x.abs().max(a.abs()).max(b.abs())))
}

fn check_channels(x: &Tensor, p: &FmvrParams) -> Result<()> {
    if x.channels() != p.channels() {
        return Err(Error::shape(format!(
            "input has {} channels, parameters have {}",
            x.channels(),
            p.channels()
        )));
    }
    Ok(())
}

/// `(x_l_a, x_h_a)` with a `k x k` average window.
pub fn avg_decompose_with(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let low = tensor::upsample_replicate(&tensor::block_avg_pool(x, k)?, k)?;
    let high = x.sub(&low)?;
    Ok((low, high))
}

/// `(x_h_m, x_l_m)` with a `k x k` max window.
pub fn max_decompose_with(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let high = tensor::upsample_replicate(&tensor::block_max_pool(x, k)?, k)?;
    let low = x.sub(&high)?;
    Ok((high, low))
}

pub fn avg_decompose(x: &Tensor) -> Result<(Tensor, Tensor)> {
    avg_decompose_with(x, 2)
}

pub fn max_decompose(x: &Tensor) -> Result<(Tensor, Tensor)> {
    max_decompose_with(x, 2)
}

fn modulate(component: &Tensor, w: &ChannelVector, x: &Tensor) -> Result<Tensor> {
    component.broadcast_mul(w)?.add(&component.mul(x)?)
}

/// Output of the average (saliency) unit with 2x2 blocks.
pub fn avg_unit_forward(x: &Tensor, w: &ChannelVector) -> Result<Tensor> {
    let (_, high) = avg_decompose(x)?;
    modulate(&high, w, x)
}

/// Output of the max (anti-saliency) unit with 2x2 blocks.
pub fn max_unit_forward(x: &Tensor, w: &ChannelVector) -> Result<Tensor> {
    let (_, low) = max_decompose(x)?;
    modulate(&low, w, x)
}

/// Restores `x` with the standard 2x2 window rule.
pub fn fmvr_forward(x: &Tensor, p: &FmvrParams) -> Result<(Tensor, FmvrActivations)> {
    let window = Window::for_grid(x.height(), x.width())?;
    fmvr_forward_windowed(x, p, window)
}

pub fn fmvr_forward_windowed(
    x: &Tensor,
    p: &FmvrParams,
    window: Window,
) -> Result<(Tensor, FmvrActivations)> {
    check_channels(x, p)?;
    let k = match window {
        Window::PassThrough => {
            let zeros = Tensor::zeros(x.shape())?;
            let acts = FmvrActivations::new(
                x.clone(),
                (x.clone(), zeros.clone()),
                (x.clone(), zeros),
                window,
                Vec::new(),
            );
            return Ok((x.clone(), acts));
        }
        Window::Block(k) => k,
    };
    let avg = avg_decompose_with(x, k)?;
    let max = max_decompose_with(x, k)?;
    let restored_a = modulate(&avg.1, &p.w_a_high, x)?;
    let restored_m = modulate(&max.1, &p.w_m_low, x)?;
    let mut y = restored_a.add(&restored_m)?;
    if p.residual_skip {
        y = y.add(x)?;
    }
    let argmax = tensor::block_argmax(x, k)?;
    Ok((y, FmvrActivations::new(x.clone(), avg, max, window, argmax)))
}

/// Exact gradients of one forward call with respect to its input and both
/// modulation vectors.
pub fn fmvr_backward(
    grad_y: &Tensor,
    acts: &FmvrActivations,
    p: &FmvrParams,
) -> Result<(Tensor, ChannelVector, ChannelVector)> {
    let x = &acts.x;
    if grad_y.shape() != x.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} against activations {:?}",
            grad_y.shape(),
            x.shape()
        )));
    }
    check_channels(x, p)?;
    let c = x.channels();
    let k = match acts.window {
        Window::PassThrough => {
            return Ok((grad_y.clone(), ChannelVector::zeros(c)?, ChannelVector::zeros(c)?));
        }
        Window::Block(k) => k,
    };
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let g = grad_y.data();
    let xd = x.data();
    let xh = acts.x_h_a.data();
    let xl = acts.x_l_m.data();
    let wa = p.w_a_high.as_slice();
    let wm = p.w_m_low.as_slice();

    let mut grad_w_a = vec![0.0; c];
    let mut grad_w_m = vec![0.0; c];
    // Upstream gradients reaching x_h_a and x_l_m.
    let mut g_high = vec![0.0; g.len()];
    let mut g_low = vec![0.0; g.len()];
    let mut grad_x = vec![0.0; g.len()];
    for i in 0..g.len() {
        let ch = (i / n) % c;
        grad_w_a[ch] += g[i] * xh[i];
        grad_w_m[ch] += g[i] * xl[i];
        g_high[i] = g[i] * (wa[ch] + xd[i]);
        g_low[i] = g[i] * (wm[ch] + xd[i]);
        grad_x[i] = g[i] * (xh[i] + xl[i]) + g_high[i] + g_low[i];
        if p.residual_skip {
            grad_x[i] += g[i];
        }
    }

    // x_h_a = x - L x with L the (symmetric) block-mean projector, and
    // x_l_m = x - M x where M copies each block's argmax cell over the block.
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for plane in 0..x.planes() {
        let base = plane * n;
        for by in 0..oh {
            for bx in 0..ow {
                let cells = || {
                    (0..k).flat_map(move |dy| {
                        (0..k).map(move |dx| base + (by * k + dy) * w + bx * k + dx)
                    })
                };
                let mean_high = cells().map(|i| g_high[i]).sum::<f64>() * inv;
                let sum_low: f64 = cells().map(|i| g_low[i]).sum();
                for i in cells() {
                    grad_x[i] -= mean_high;
                }
                let am = acts.argmax[(plane * oh + by) * ow + bx];
                grad_x[am] -= sum_low;
            }
        }
    }

    Ok((
        Tensor::new(x.shape().to_vec(), grad_x)?,
        ChannelVector::new(grad_w_a)?,
        ChannelVector::new(grad_w_m)?,
    ))
}
