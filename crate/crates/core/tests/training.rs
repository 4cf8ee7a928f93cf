//! Behaviour of the synthetic data and the training loop at realistic sizes.

use promise::dataio::{gen_synthetic, Dataset, SynthConfig};
use promise::trainer::{train, TrainConfig};

/// Plain softmax regression on `[m1; m2]` by full-batch gradient descent,
/// independent of the library's model code. Returns the fitted predictor.
fn linear_probe(ds: &Dataset, steps: usize, lr: f64) -> impl Fn(&[f64]) -> usize {
    let k = ds.header.class_count;
    let x: Vec<Vec<f64>> = ds
        .samples
        .iter()
        .map(|s| [s.m1.clone().unwrap(), s.m2.clone().unwrap()].concat())
        .collect();
    let y: Vec<usize> = ds.samples.iter().map(|s| s.label.class()).collect();
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; k];
    let logits = move |w: &[Vec<f64>], row: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + wc[..d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..steps {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (row, &label) in x.iter().zip(&y) {
            let z = logits(&w, row);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..k {
                let delta = e[c] / sum - if c == label { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += delta * row[j];
                }
                grad[c][d] += delta;
            }
        }
        let n = x.len() as f64;
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= lr * grad[c][j] / n;
            }
        }
    }
    move |row: &[f64]| {
        let z = logits(&w, row);
        (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap()
    }
}

fn probe_accuracy(predict: &dyn Fn(&[f64]) -> usize, ds: &Dataset) -> f64 {
    let hits = ds
        .samples
        .iter()
        .filter(|s| predict(&[s.m1.clone().unwrap(), s.m2.clone().unwrap()].concat()) == s.label.class())
        .count();
    hits as f64 / ds.len() as f64
}

#[test]
fn separated_clusters_are_linearly_separable() {
    let ds = gen_synthetic(&SynthConfig::default()).unwrap();
    let probe = linear_probe(&ds, 60, 0.05);
    let acc = probe_accuracy(&probe, &ds);
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn zero_separation_is_at_chance() {
    let ds = gen_synthetic(&SynthConfig {
        cluster_sep: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (fit, held) = idx.split_at(1000);
    let probe = linear_probe(&ds.select(fit), 60, 0.05);
    let acc = probe_accuracy(&probe, &ds.select(held));
    // 1000 held-out draws at p = 1/4 have a standard deviation near 0.014.
    assert!((acc - 0.25).abs() < 0.06, "held-out accuracy {acc}");
}

#[test]
fn complete_data_training_cuts_task_loss() {
    let ds = gen_synthetic(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        eta: 0.0,
        epochs: 50,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg).unwrap();
    let first = out.log.rows.first().unwrap().task;
    let last = out.log.rows.last().unwrap().task;
    assert!(last <= 0.1 * first, "task loss {first} -> {last}");
    assert_eq!(out.log.meta_value("retain_m1"), Some("100%"));
}
