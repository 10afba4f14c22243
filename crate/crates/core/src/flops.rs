//! Analytic prefill cost of a dense decoder as a function of visual tokens.
//!
//! All public results are in TB (1e12 operations).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matryoshka::level_sides;

pub const TB: f64 = 1e12;

/// Reference `(visual tokens, LLM FLOPs in TB)` pairs used for calibration.
pub const REFERENCE_POINTS: [(usize, f64); 5] = [(576, 8.0), (144, 2.2), (36, 0.9), (9, 0.5), (1, 0.4)];

/// Speedups relative to 576 tokens that the calibrated model should reproduce.
pub const REFERENCE_RATIOS: [(usize, f64); 4] = [(144, 3.6), (36, 8.9), (9, 16.0), (1, 20.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Weight matrices in the feed-forward block: 3 for a gated unit
    /// (gate, up, down), 2 for a plain one.
    pub ffn_matrices: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 4096,
            ffn_dim: 11008,
            vocab_size: 32000,
            ffn_matrices: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmvrCostConfig {
    pub channels: usize,
    pub base_side: usize,
}

impl Default for FmvrCostConfig {
    fn default() -> Self {
        Self {
            channels: 1024,
            base_side: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelConfig {
    pub llm: LlmConfig,
    /// TB, independent of the visual token count.
    pub vision_encoder_flops: f64,
    pub projection_flops: f64,
    pub text_tokens: usize,
    pub fmvr: FmvrCostConfig,
}

/// Text-token count fitted to [`REFERENCE_POINTS`] by [`fit_text_tokens`]
/// under the default decoder.
pub const CALIBRATED_TEXT_TOKENS: usize = 29;

impl Default for CostModelConfig {
    fn default() -> Self {
        Self {
            llm: LlmConfig::default(),
            vision_encoder_flops: 0.349,
            projection_flops: 0.024,
            text_tokens: CALIBRATED_TEXT_TOKENS,
            fmvr: FmvrCostConfig::default(),
        }
    }
}

impl CostModelConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.llm;
        if l.num_layers == 0 || l.hidden_dim == 0 || l.ffn_dim == 0 || l.vocab_size == 0 || l.ffn_matrices == 0 {
            return Err(Error::config("decoder dimensions must be positive"));
        }
        if !(self.vision_encoder_flops >= 0.0 && self.projection_flops >= 0.0)
            || !(self.vision_encoder_flops.is_finite() && self.projection_flops.is_finite())
        {
            return Err(Error::config("component FLOPs must be finite and non-negative"));
        }
        if self.fmvr.channels == 0 {
            return Err(Error::config("fmvr channels must be positive"));
        }
        level_sides(self.fmvr.base_side)?;
        Ok(())
    }
}

/// Prefill operations (not TB) for `t` total tokens.
fn llm_ops(l: &LlmConfig, t: f64) -> f64 {
    let d = l.hidden_dim as f64;
    let ffn = 2.0 * l.ffn_matrices as f64 * t * d * l.ffn_dim as f64;
    let per_layer = 8.0 * t * d * d + 4.0 * t * t * d + ffn;
    l.num_layers as f64 * per_layer + 2.0 * t * d * l.vocab_size as f64
}

/// Decoder prefill FLOPs in TB for `visual_tokens` plus the configured text.
pub fn llm_prefill_flops(cfg: &CostModelConfig, visual_tokens: usize) -> Result<f64> {
    cfg.validate()?;
    Ok(llm_ops(&cfg.llm, (visual_tokens + cfg.text_tokens) as f64) / TB)
}

/// Operation count of one restoration call on a `side x side` grid per
/// channel. A `k x k` window costs `k^2` adds and one multiply per pooled
/// cell for each of the two poolings; every cell then pays two residual
/// subtractions, two channel-broadcast products, two elementwise products
/// and three additions.
pub fn fmvr_level_ops(side: usize) -> usize {
    let k = match side {
        1 => return 0,
        s if s % 2 == 0 => 2,
        s => s,
    };
    let cells = side * side;
    let pooled = cells / (k * k);
    2 * pooled * (k * k + 1) + 9 * cells
}

/// Restoration FLOPs in TB summed over every pyramid level.
pub fn fmvr_flops(cfg: &CostModelConfig) -> Result<f64> {
    cfg.validate()?;
    let per_channel: usize = level_sides(cfg.fmvr.base_side)?.into_iter().map(fmvr_level_ops).sum();
    Ok((per_channel * cfg.fmvr.channels) as f64 / TB)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub visual_tokens: usize,
    pub vision_encoder: f64,
    pub projection: f64,
    pub fmvr: f64,
    pub llm: f64,
    pub total: f64,
    /// `llm(reference) / llm(visual_tokens)`.
    pub llm_speedup: f64,
    pub total_speedup: f64,
}

pub fn report(cfg: &CostModelConfig, token_counts: &[usize], reference: usize) -> Result<Vec<CostReport>> {
    cfg.validate()?;
    let fm = fmvr_flops(cfg)?;
    let parts = |m: usize| -> Result<(f64, f64)> {
        let llm = llm_prefill_flops(cfg, m)?;
        Ok((llm, cfg.vision_encoder_flops + cfg.projection_flops + fm + llm))
    };
    let (ref_llm, ref_total) = parts(reference)?;
    token_counts
        .iter()
        .map(|&m| {
            let (llm, total) = parts(m)?;
            Ok(CostReport {
                visual_tokens: m,
                vision_encoder: cfg.vision_encoder_flops,
                projection: cfg.projection_flops,
                fmvr: fm,
                llm,
                total,
                llm_speedup: ref_llm / llm,
                total_speedup: ref_total / total,
            })
        })
        .collect()
}

/// Result of calibrating the text-token count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TextTokenFit {
    pub text_tokens: usize,
    /// Sum of squared relative residuals at the optimum.
    pub objective: f64,
    /// `(visual tokens, model TB, reference TB)`.
    pub points: Vec<(usize, f64, f64)>,
}

/// Integer search over `range` minimising the summed squared relative
/// residual against [`REFERENCE_POINTS`]. Relative residuals keep the small
/// token counts, where the speedups are decided, from being swamped by the
/// 576-token point.
pub fn fit_text_tokens(llm: &LlmConfig, range: std::ops::RangeInclusive<usize>) -> Result<TextTokenFit> {
    let objective = |n: usize| -> f64 {
        REFERENCE_POINTS
            .iter()
            .map(|&(m, target)| {
                let r = llm_ops(llm, (m + n) as f64) / TB / target - 1.0;
                r * r
            })
            .sum()
    };
    let best = range
        .clone()
        .map(|n| (n, objective(n)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::config(format!("empty search range {range:?}")))?;
    let points = REFERENCE_POINTS
        .iter()
        .map(|&(m, target)| (m, llm_ops(llm, (m + best.0) as f64) / TB, target))
        .collect();
    Ok(TextTokenFit {
        text_tokens: best.0,
        objective: best.1,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tokens_zero_flops() {
        let cfg = CostModelConfig {
            text_tokens: 0,
            ..Default::default()
        };
        assert_eq!(llm_prefill_flops(&cfg, 0).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_term_has_constant_second_difference() {
        let cfg = CostModelConfig::default();
        let l = &cfg.llm;
        let f = |t: f64| llm_ops(l, t);
        let expected = 8.0 * (l.num_layers * l.hidden_dim) as f64;
        for t in [10.0, 100.0, 600.0] {
            let second = f(t + 1.0) - 2.0 * f(t) + f(t - 1.0);
            assert!((second - expected).abs() / expected < 1e-6, "{second} vs {expected}");
        }
    }

    #[test]
    fn hand_count_two_by_two() {
        // One 2x2 grid, one channel: each pooling sums 4 cells and scales
        // once (5 ops, twice = 10); 4 cells x 9 elementwise ops = 36. The
        // 1x1 level that follows passes through for free.
        let cfg = CostModelConfig {
            fmvr: FmvrCostConfig {
                channels: 1,
                base_side: 2,
            },
            ..Default::default()
        };
        assert_eq!(fmvr_flops(&cfg).unwrap() * TB, 46.0);
    }

    #[test]
    fn global_window_level() {
        // 3x3 grid: one pooled cell per pooling (9 adds + 1 mul) and 81
        // elementwise ops.
        assert_eq!(fmvr_level_ops(3), 2 * 10 + 81);
        assert_eq!(fmvr_level_ops(1), 0);
    }

    #[test]
    fn rejects_zero_channels() {
        let mut cfg = CostModelConfig::default();
        cfg.fmvr.channels = 0;
        assert!(fmvr_flops(&cfg).is_err());
    }

    #[test]
    fn plain_ffn_matches_four_t_d_ffn() {
        let l = LlmConfig {
            ffn_matrices: 2,
            ..Default::default()
        };
        let (t, d, f) = (10.0, l.hidden_dim as f64, l.ffn_dim as f64);
        let expected = l.num_layers as f64 * (8.0 * t * d * d + 4.0 * t * t * d + 4.0 * t * d * f) + 2.0 * t * d * l.vocab_size as f64;
        assert_eq!(llm_ops(&l, t), expected);
    }

    #[test]
    fn components_add_up() {
        let r = report(&CostModelConfig::default(), &[576, 36], 576).unwrap();
        for c in &r {
            assert_eq!(c.total, c.vision_encoder + c.projection + c.fmvr + c.llm);
        }
        assert_eq!(r[0].llm_speedup, 1.0);
    }
}
