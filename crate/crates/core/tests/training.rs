use fmvr_core::matryoshka::{build_pyramid, PyramidConfig, Sampling};
use fmvr_core::mrl::{self, evaluate, evaluate_level, forward_loss, prepare, MrlModel, TrainConfig};
use fmvr_core::synthetic::{generate_dataset, SyntheticTask, TaskSpec};

fn log_sum_exp_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - logits[label]
}

/// Dense least squares by normal equations and Gauss-Jordan elimination.
fn least_squares(a: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k) = (a[0].len(), y[0].len());
    let mut m = vec![vec![0.0; n + k]; n];
    for (row, target) in a.iter().zip(y) {
        for i in 0..n {
            for j in 0..n {
                m[i][j] += row[i] * row[j];
            }
            for j in 0..k {
                m[i][n + j] += row[i] * target[j];
            }
        }
    }
    for (i, r) in m.iter_mut().enumerate() {
        r[i] += 1e-9;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs())).unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

#[test]
fn zero_heads_score_chance() {
    let cfg = PyramidConfig::new(24, 3, Sampling::AvgPool, true).unwrap();
    let model = MrlModel::new(cfg.clone(), 4).unwrap();
    let data = prepare(&generate_dataset(2, 1000, 4, 3).unwrap(), &cfg).unwrap();
    let sigma = (0.25f64 * 0.75 / 1000.0).sqrt();
    for acc in evaluate(&model, &data).unwrap() {
        assert!((acc - 0.25).abs() <= 3.0 * sigma, "{acc}");
    }
}

#[test]
fn noise_free_pair_is_nearest_prototype_separable() {
    let mut spec = TaskSpec::new(2, 3);
    spec.noise_sigma = 0.0;
    let task = SyntheticTask::new(11, spec).unwrap();
    let protos = [task.prototype(0), task.prototype(1)];
    let d = task.generate(0, 200);
    for s in &d.samples {
        let dist: Vec<f64> = protos
            .iter()
            .map(|p| s.features.data().iter().zip(p.data()).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let pred = if dist[0] <= dist[1] { 0 } else { 1 };
        assert_eq!(pred, s.label);
    }
}

#[test]
fn noise_free_task_converges_to_perfect_finest_level() {
    let cfg = TrainConfig {
        seed: 3,
        num_classes: 4,
        channels: 4,
        noise_sigma: 0.0,
        train_size: 512,
        eval_size: 256,
        steps: 300,
        ..Default::default()
    };
    // Oracle first: a linear separator on the untrained 576-token readout.
    let pyr_cfg = cfg.pyramid().unwrap();
    let task = cfg.task().unwrap();
    let train = task.generate(0, cfg.train_size);
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for s in &train.samples {
        let mut r = build_pyramid(&s.features, &pyr_cfg).unwrap().levels[0].restored.channel_means();
        r.push(1.0);
        feats.push(r);
        targets.push((0..cfg.num_classes).map(|k| if k == s.label { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    }
    let w = least_squares(&feats, &targets);
    for (r, s) in feats.iter().zip(&train.samples) {
        let scores: Vec<f64> = (0..cfg.num_classes).map(|k| r.iter().zip(&w).map(|(x, row)| x * row[k]).sum()).collect();
        let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(best, s.label, "oracle separator misclassifies");
    }

    let out = mrl::train(&cfg).unwrap();
    assert_eq!(out.accuracy[0], 1.0, "{:?}", out.accuracy);
}

#[test]
fn total_loss_is_weighted_sum_of_independent_scale_losses() {
    let cfg = TrainConfig {
        seed: 5,
        num_classes: 3,
        channels: 2,
        train_size: 12,
        eval_size: 3,
        steps: 5,
        batch_size: 6,
        loss_weights: Some(vec![1.0, 0.5, 2.0, 0.25, 1.5]),
        ..Default::default()
    };
    let model = mrl::train(&cfg).unwrap().model;
    let data = generate_dataset(9, 6, 3, 2).unwrap();
    let prepared = prepare(&data, &model.pyramid).unwrap();
    let batch: Vec<_> = prepared.iter().collect();
    let report = forward_loss(&model, &batch).unwrap();

    let mut expected = 0.0;
    for (e, c) in model.loss_weights.iter().enumerate() {
        let mut ce = 0.0;
        for s in &data.samples {
            let r = build_pyramid(&s.features, &model.pyramid).unwrap().levels[e].restored.channel_means();
            let h = &model.heads[e];
            let logits: Vec<f64> = (0..3)
                .map(|k| h.bias[k] + (0..2).map(|ch| h.weight[k * 2 + ch] * r[ch]).sum::<f64>())
                .collect();
            ce += log_sum_exp_ce(&logits, s.label);
        }
        ce /= data.len() as f64;
        assert!((report.per_scale[e] - ce).abs() <= 1e-12 * ce.abs());
        expected += c * ce;
    }
    assert!((report.total - expected).abs() <= 1e-12 * expected.abs());
}

#[test]
fn single_level_evaluation_matches_full_evaluation() {
    let cfg = TrainConfig {
        seed: 1,
        num_classes: 4,
        channels: 3,
        train_size: 64,
        eval_size: 40,
        steps: 20,
        ..Default::default()
    };
    let out = mrl::train(&cfg).unwrap();
    let data = prepare(&mrl::eval_split(&cfg).unwrap(), &out.model.pyramid).unwrap();
    let all = evaluate(&out.model, &data).unwrap();
    assert_eq!(all, out.accuracy);
    assert_eq!(evaluate(&out.model, &data).unwrap(), all);
    for (e, &a) in all.iter().enumerate() {
        assert_eq!(evaluate_level(&out.model, &data, e).unwrap(), a);
    }
    assert!(evaluate_level(&out.model, &data, all.len()).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        seed: 4,
        num_classes: 3,
        channels: 2,
        train_size: 30,
        eval_size: 9,
        steps: 10,
        batch_size: 8,
        ..Default::default()
    };
    let a = mrl::train(&cfg).unwrap();
    let b = mrl::train(&cfg).unwrap();
    assert_eq!(a.model, b.model);
    let bits = |o: &mrl::TrainOutcome| o.history.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn invalid_train_configs_rejected() {
    let bad = [
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { momentum: 1.0, ..Default::default() },
        TrainConfig { base_side: 20, ..Default::default() },
        TrainConfig { loss_weights: Some(vec![1.0; 3]), ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}
