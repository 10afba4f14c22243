//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::process::Command;
use std::time::{Duration, Instant};

use fmvr_core::flops::{fmvr_flops, llm_prefill_flops, CostModelConfig};
use fmvr_core::fmvr::{avg_decompose, fmvr_forward, max_decompose, ulp, FmvrParams};
use fmvr_core::gradcheck::{check_fmvr, check_mrl};
use fmvr_core::matryoshka::{raw_chain, PyramidConfig, Sampling};
use fmvr_core::mrl::{self, moving_average, TrainConfig};
use fmvr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Gate {
    failures: usize,
}

impl Gate {
    fn report(&mut self, id: &str, name: &str, ok: bool, detail: String, elapsed: Duration, limit: Option<Duration>) {
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = ok && in_time;
        if !pass {
            self.failures += 1;
        }
        let budget = limit.map(|l| format!(" / limit {:.0}s", l.as_secs_f64())).unwrap_or_default();
        println!(
            "{} criterion {id} {name}: {detail} [{:.2}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, (c, h, w): (usize, usize, usize)) -> Tensor {
    let scale = 10f64.powi(rng.random_range(-3..4));
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compensated sum, so the check measures the stored residuals and not the
/// round-off of adding them up.
fn exact_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn decomposition(gate: &mut Gate) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shapes = [(1, 2, 2), (3, 4, 4), (16, 24, 24)];
    let (mut bad_sum, mut bad_sign, mut bad_block) = (0usize, 0usize, 0usize);
    for i in 0..1000 {
        let x = random_tensor(&mut rng, shapes[i % 3]);
        let (la, ha) = avg_decompose(&x).unwrap();
        let (hm, lm) = max_decompose(&x).unwrap();
        for (((&v, &a), &b), (&m, &l)) in x.data().iter().zip(la.data()).zip(ha.data()).zip(hm.data().iter().zip(lm.data())) {
            if (a + b - v).abs() > ulp(v.abs().max(a.abs()).max(b.abs())) || (m + l - v).abs() > ulp(v.abs().max(m.abs()).max(l.abs())) {
                bad_sum += 1;
            }
            if l > 0.0 {
                bad_sign += 1;
            }
        }
        let (c, h, w) = (x.channels(), x.height(), x.width());
        for ch in 0..c {
            for bh in (0..h).step_by(2) {
                for bw in (0..w).step_by(2) {
                    let cells = [(bh, bw), (bh, bw + 1), (bh + 1, bw), (bh + 1, bw + 1)];
                    let s = exact_sum(cells.iter().map(|&(p, q)| ha.at(ch, p, q)));
                    let scale = cells.iter().map(|&(p, q)| x.at(ch, p, q).abs()).fold(0.0, f64::max);
                    if s.abs() > 4.0 * ulp(scale) {
                        bad_block += 1;
                    }
                }
            }
        }
    }
    gate.report(
        "1",
        "decomposition exactness",
        bad_sum == 0 && bad_sign == 0 && bad_block == 0,
        format!("1000 tensors; reassembly violations {bad_sum}, positive x_l_m {bad_sign}, block sums beyond 4 ulp {bad_block}"),
        t.elapsed(),
        Some(Duration::from_secs(5)),
    );
}

/// Brute-force scalar evaluation of both units on one 2x2 block.
fn scalar_oracle(x: [f64; 4], w_a: f64, w_m: f64) -> ([f64; 4], [f64; 4]) {
    let mean = (x[0] + x[1] + x[2] + x[3]) / 4.0;
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut a = [0.0; 4];
    let mut m = [0.0; 4];
    for i in 0..4 {
        let high = x[i] - mean;
        let low = x[i] - max;
        a[i] = w_a * high + high * x[i];
        m[i] = w_m * low + low * x[i];
    }
    (a, m)
}

fn oracle_equivalence(gate: &mut Gate) {
    let t = Instant::now();
    let (oa, om) = scalar_oracle([1.0, 2.0, 3.0, 4.0], 1.0, 1.0);
    let expected_a = [-3.0, -1.5, 2.0, 7.5];
    let expected_m = [-6.0, -6.0, -4.0, 0.0];
    let expected_sum = [-9.0, -7.5, -2.0, 7.5];
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, acts) = fmvr_forward(&x, &FmvrParams::new(1).unwrap()).unwrap();
    let lib_a: Vec<f64> = acts.x_h_a.data().iter().zip(x.data()).map(|(h, v)| h + h * v).collect();
    let lib_m: Vec<f64> = acts.x_l_m.data().iter().zip(x.data()).map(|(l, v)| l + l * v).collect();
    let ok = oa == expected_a && om == expected_m && lib_a == expected_a && lib_m == expected_m && y.data() == expected_sum;
    gate.report(
        "2",
        "oracle equivalence",
        ok,
        format!("oracle A={oa:?} M={om:?}; library sum={:?}", y.data()),
        t.elapsed(),
        None,
    );
}

fn gradients(gate: &mut Gate) {
    let t = Instant::now();
    let mut fmvr_worst = 0f64;
    for shape in [(1, 2, 2), (3, 4, 4), (8, 6, 6)] {
        for seed in 0..100 {
            fmvr_worst = fmvr_worst.max(check_fmvr(shape, seed, seed % 2 == 1).unwrap().max());
        }
    }
    let mut mrl_worst = 0f64;
    for seed in 0..100 {
        mrl_worst = mrl_worst.max(check_mrl(seed, 2, 4, 2, 3).unwrap().max());
    }
    gate.report(
        "3",
        "gradient correctness",
        fmvr_worst < 1e-6 && mrl_worst < 1e-5,
        format!("max rel err fmvr {fmvr_worst:.2e} (< 1e-6), end-to-end {mrl_worst:.2e} (< 1e-5), 100 seeds each"),
        t.elapsed(),
        Some(Duration::from_secs(60)),
    );
}

fn pyramid(gate: &mut Gate) {
    let t = Instant::now();
    let cfg = PyramidConfig::new(24, 4, Sampling::AvgPool, true).unwrap();
    let counts = cfg.token_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for _ in 0..100 {
        let x = random_tensor(&mut rng, (4, 24, 24));
        let mean = x.mean();
        for level in raw_chain(&x, Sampling::AvgPool).unwrap() {
            worst = worst.max((level.mean() - mean).abs());
        }
    }
    gate.report(
        "4",
        "pyramid contract",
        counts == [576, 144, 36, 9, 1] && worst <= 1e-12,
        format!("token counts {counts:?}; max global-mean drift {worst:.2e} (<= 1e-12)"),
        t.elapsed(),
        None,
    );
}

fn cost_model(gate: &mut Gate) {
    let t = Instant::now();
    let cfg = CostModelConfig::default();
    let f576 = llm_prefill_flops(&cfg, 576).unwrap();
    let mut ok = (f576 / 8.0 - 1.0).abs() <= 0.15;
    let mut detail = format!("llm(576) = {f576:.3} TB (8.0 +/- 15%)");
    for (m, target, tol) in [(144, 3.6, 0.15), (36, 8.9, 0.15), (9, 16.0, 0.20), (1, 20.0, 0.20)] {
        let r = f576 / llm_prefill_flops(&cfg, m).unwrap();
        let hit = (r / target - 1.0).abs() <= tol;
        ok &= hit;
        detail += &format!("; x{r:.2} at {m} (x{target} +/- {:.0}%{})", tol * 100.0, if hit { "" } else { " MISS" });
    }
    let fm = fmvr_flops(&cfg).unwrap();
    let in_range = (1e-5..=3e-4).contains(&fm);
    let total = f576 + cfg.vision_encoder_flops + cfg.projection_flops + fm;
    let negligible = fm / total < 1e-4;
    ok &= in_range && negligible;
    detail += &format!(
        "; fmvr {fm:.2e} TB (in [1e-5, 3e-4]: {}); fmvr/total {:.1e} (< 1e-4: {})",
        if in_range { "yes" } else { "NO" },
        fm / total,
        if negligible { "yes" } else { "NO" }
    );
    gate.report("5", "cost-model reproduction", ok, detail, t.elapsed(), None);
}

struct Run {
    accuracy: Vec<f64>,
    losses: Vec<f64>,
}

fn run(seed: u64, sampling: Sampling, fmvr: bool) -> Run {
    let cfg = TrainConfig {
        seed,
        sampling,
        fmvr_enabled: fmvr,
        ..Default::default()
    };
    let out = mrl::train(&cfg).unwrap();
    Run {
        accuracy: out.accuracy,
        losses: out.history.iter().map(|r| r.loss.total).collect(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn training_and_ablation(gate: &mut Gate) {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let avg: Vec<Run> = seeds.iter().map(|&s| run(s, Sampling::AvgPool, true)).collect();
    let plain: Vec<Run> = seeds.iter().map(|&s| run(s, Sampling::AvgPool, false)).collect();

    let violations: Vec<usize> = avg
        .iter()
        .map(|r| moving_average(&r.losses[..200], 20).windows(2).filter(|w| w[1] >= w[0]).count())
        .collect();
    let monotone = violations.iter().all(|&v| v == 0);
    let ordered = avg.iter().filter(|r| r.accuracy.windows(2).all(|w| w[1] <= w[0])).count();
    let wins = avg.iter().zip(&plain).filter(|(a, p)| a.accuracy[2] > p.accuracy[2]).count();
    let a36: Vec<String> = avg.iter().map(|r| format!("{:.3}", r.accuracy[2])).collect();
    let p36: Vec<String> = plain.iter().map(|r| format!("{:.3}", r.accuracy[2])).collect();
    let elapsed6 = t.elapsed();

    let t7 = Instant::now();
    let seq: Vec<Run> = seeds.iter().map(|&s| run(s, Sampling::Sequential, true)).collect();
    let spa: Vec<Run> = seeds.iter().map(|&s| run(s, Sampling::Spatial, true)).collect();
    let level_mean = |runs: &[Run]| mean(&runs.iter().map(|r| mean(&r.accuracy)).collect::<Vec<_>>());
    let (m_avg, m_seq, m_spa) = (level_mean(&avg), level_mean(&seq), level_mean(&spa));
    let per_seed = avg
        .iter()
        .zip(&seq)
        .zip(&spa)
        .filter(|((a, q), s)| mean(&a.accuracy) >= mean(&q.accuracy) && mean(&a.accuracy) >= mean(&s.accuracy))
        .count();
    let elapsed7 = t7.elapsed();

    gate.report(
        "6a",
        "loss moving average monotone",
        monotone,
        format!("20-step moving average over 200 steps, non-decreasing steps per seed {violations:?}"),
        elapsed6,
        None,
    );
    gate.report(
        "6b",
        "accuracy non-increasing with fewer tokens",
        ordered >= 4,
        format!(
            "{ordered}/5 seeds ordered (>= 4); seed 0 accuracy {:?}",
            avg[0].accuracy.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
        elapsed6,
        None,
    );
    gate.report(
        "6c",
        "restoration helps at 36 tokens",
        wins == 5,
        format!("{wins}/5 paired seeds; with {a36:?} vs without {p36:?}"),
        elapsed6,
        Some(Duration::from_secs(600)),
    );
    gate.report(
        "7",
        "sampling ablation ordering",
        m_avg >= m_seq && m_avg >= m_spa,
        format!("mean accuracy avg_pool {m_avg:.4}, sequential {m_seq:.4}, spatial {m_spa:.4}; avg_pool best on {per_seed}/5 seeds"),
        elapsed7,
        None,
    );
}

fn determinism(gate: &mut Gate) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_fmvr"))
            .current_dir(dir.path())
            .args(["--seed", "3", "--out", out, "train"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        csvs.push(std::fs::read(dir.path().join(out).join("loss.csv")).unwrap());
    }
    gate.report(
        "8",
        "determinism",
        csvs[0] == csvs[1] && !csvs[0].is_empty(),
        format!("two default train runs, loss.csv {} bytes each, identical: {}", csvs[0].len(), csvs[0] == csvs[1]),
        t.elapsed(),
        None,
    );
}

fn main() {
    let mut gate = Gate { failures: 0 };
    decomposition(&mut gate);
    oracle_equivalence(&mut gate);
    gradients(&mut gate);
    pyramid(&mut gate);
    cost_model(&mut gate);
    training_and_ablation(&mut gate);
    determinism(&mut gate);
    if gate.failures > 0 {
        println!("acceptance: {} criterion line(s) failed", gate.failures);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
