//! Synthetic multi-scale classification task.
//!
//! Every class owns a coarse prototype: a per-channel pattern that is
//! constant on a 3x3 grid of blocks and therefore survives pooling down to
//! the 9-token level. Classes come in pairs; the two members of a pair share
//! the block-mean of their prototypes and differ only by a zero-mean split
//! of the 3x3 pattern. On top of the prototype sits a fine texture: at cell
//! sizes 1, 2 and 4 pixels, every 2x2 group of cells carries an alternating
//! `+ - / - +` pattern with a random sign, scaled by a class-dependent
//! amplitude per channel. Each group sums to zero, so average pooling removes
//! the texture entirely while the high-frequency residuals keep it.
//! Gaussian noise is added last.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cell sizes (in pixels) of the alternating texture.
pub const TEXTURE_SCALES: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub channels: usize,
    /// Must be a positive multiple of 24.
    pub side: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the shared 3x3 prototype pattern.
    pub coarse_scale: f64,
    /// Standard deviation of the zero-mean split between paired classes.
    pub pair_split: f64,
    /// Texture amplitudes are drawn uniformly from this range.
    pub amplitude_range: (f64, f64),
}

impl TaskSpec {
    pub fn new(num_classes: usize, channels: usize) -> Self {
        Self {
            num_classes,
            channels,
            side: 24,
            noise_sigma: 0.1,
            coarse_scale: 0.15,
            pair_split: 0.15,
            amplitude_range: (0.3, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.channels == 0 {
            return Err(Error::config("need at least one channel"));
        }
        if self.side == 0 || !self.side.is_multiple_of(24) {
            return Err(Error::config(format!(
                "synthetic side must be a multiple of 24, got {}",
                self.side
            )));
        }
        let (lo, hi) = self.amplitude_range;
        if !(self.noise_sigma >= 0.0 && lo >= 0.0 && hi > lo && self.coarse_scale >= 0.0 && self.pair_split >= 0.0) {
            return Err(Error::config("noise, scales and amplitude range must be non-negative with lo < hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub num_classes: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Class prototypes and texture amplitudes drawn from one seed; sample sets
/// drawn from the same task share them.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub seed: u64,
    /// `[class][channel][3x3 block]`.
    prototypes: Vec<Vec<[f64; 9]>>,
    /// `[class][channel]`.
    amplitudes: Vec<Vec<f64>>,
}

pub(crate) fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl SyntheticTask {
    pub fn new(seed: u64, spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
        let (k, c) = (spec.num_classes, spec.channels);
        let groups = k.div_ceil(2);
        let mut normal = |scale: f64| -> [f64; 9] {
            std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let mut base = Vec::with_capacity(groups);
        let mut split = Vec::with_capacity(groups);
        for _ in 0..groups {
            base.push((0..c).map(|_| normal(spec.coarse_scale)).collect::<Vec<_>>());
            split.push(
                (0..c)
                    .map(|_| {
                        let mut d = normal(spec.pair_split);
                        let mean = d.iter().sum::<f64>() / 9.0;
                        d.iter_mut().for_each(|v| *v -= mean);
                        d
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let prototypes = (0..k)
            .map(|class| {
                let g = class / 2;
                let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
                (0..c)
                    .map(|ch| std::array::from_fn(|b| base[g][ch][b] + sign * split[g][ch][b]))
                    .collect()
            })
            .collect();
        let (lo, hi) = spec.amplitude_range;
        let amplitudes = (0..k)
            .map(|_| (0..c).map(|_| rng.random_range(lo..hi)).collect())
            .collect();
        Ok(Self {
            spec,
            seed,
            prototypes,
            amplitudes,
        })
    }

    /// Noise-free, texture-free template of a class.
    pub fn prototype(&self, class: usize) -> Tensor {
        let s = self.spec.side;
        let block = s / 3;
        Tensor::from_fn((self.spec.channels, s, s), |c, h, w| {
            self.prototypes[class][c][(h / block) * 3 + w / block]
        })
        .expect("valid shape")
    }

    pub fn amplitude(&self, class: usize, channel: usize) -> f64 {
        self.amplitudes[class][channel]
    }

    /// `n` samples with labels `i mod K`; different `split` values give
    /// independent sample sets of the same task.
    pub fn generate(&self, split: u64, n: usize) -> SyntheticDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, split + 1));
        let k = self.spec.num_classes;
        let samples = (0..n)
            .map(|i| {
                let label = i % k;
                Sample {
                    features: self.draw(label, &mut rng),
                    label,
                }
            })
            .collect();
        SyntheticDataset {
            samples,
            seed: self.seed,
            num_classes: k,
        }
    }

    fn draw(&self, label: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let spec = &self.spec;
        let (c, s) = (spec.channels, spec.side);
        let mut x = self.prototype(label);
        let n = s * s;
        let data = x.data_mut();
        for ch in 0..c {
            let amp = self.amplitudes[label][ch];
            let plane = &mut data[ch * n..(ch + 1) * n];
            for &cell in &TEXTURE_SCALES {
                let groups = s / (2 * cell);
                let signs: Vec<f64> = (0..groups * groups)
                    .map(|_| if rng.random::<bool>() { amp } else { -amp })
                    .collect();
                for h in 0..s {
                    for w in 0..s {
                        let parity = if ((h / cell) + (w / cell)) % 2 == 0 { 1.0 } else { -1.0 };
                        plane[h * s + w] += parity * signs[(h / (2 * cell)) * groups + w / (2 * cell)];
                    }
                }
            }
            if spec.noise_sigma > 0.0 {
                for v in plane.iter_mut() {
                    *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        x
    }
}

/// One sample set of a task with default knobs.
pub fn generate_dataset(seed: u64, n_samples: usize, num_classes: usize, channels: usize) -> Result<SyntheticDataset> {
    Ok(SyntheticTask::new(seed, TaskSpec::new(num_classes, channels))?.generate(0, n_samples))
}
