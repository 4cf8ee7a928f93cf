use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetHeader, Label, LabelKind, Sample};
use crate::error::{Error, Result};
use crate::numkernel::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub d1: usize,
    pub d2: usize,
    pub cluster_sep: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            classes: 4,
            d1: 64,
            d2: 64,
            cluster_sep: 8.0,
            seed: 0,
        }
    }
}

/// Gaussian class clusters in two linked modalities.
///
/// Each class gets an m1 center drawn as `cluster_sep * g` with
/// `g ~ N(0, I / d1)` (so the center norm concentrates at `cluster_sep`).
/// The m2 center of the same class is `M c1` for one random map `M`
/// (`d2 x d1`, entries `N(0, 1/d1)`) shared by all classes. Samples are the
/// class center plus unit-variance isotropic noise, drawn independently per
/// modality. Labels are balanced (`i mod classes`) and the order is shuffled.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.n < cfg.classes {
        return Err(Error::Argument(format!(
            "need n >= classes, got n={} classes={}",
            cfg.n, cfg.classes
        )));
    }
    if cfg.d1 == 0 || cfg.d2 == 0 {
        return Err(Error::Argument("feature dimensions must be positive".into()));
    }
    if !(cfg.cluster_sep >= 0.0) || !cfg.cluster_sep.is_finite() {
        return Err(Error::Argument(format!("cluster_sep must be >= 0, got {}", cfg.cluster_sep)));
    }
    let root = Rng::new(cfg.seed);
    let mut centers_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut order_rng = root.fork(3);

    let s1 = cfg.cluster_sep / (cfg.d1 as f64).sqrt();
    let centers1: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.d1).map(|_| s1 * centers_rng.normal()).collect())
        .collect();
    let link_scale = 1.0 / (cfg.d1 as f64).sqrt();
    let link: Vec<Vec<f64>> = (0..cfg.d2)
        .map(|_| (0..cfg.d1).map(|_| link_scale * centers_rng.normal()).collect())
        .collect();
    let centers2: Vec<Vec<f64>> = centers1
        .iter()
        .map(|c| link.iter().map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();

    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.classes).collect();
    order_rng.shuffle(&mut labels);

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let m1 = centers1[c].iter().map(|&mu| mu + noise_rng.normal()).collect();
            let m2 = centers2[c].iter().map(|&mu| mu + noise_rng.normal()).collect();
            Sample {
                id: format!("s{i:06}"),
                label: Label::Single(c),
                m1: Some(m1),
                m2: Some(m2),
            }
        })
        .collect();

    Ok(Dataset {
        header: DatasetHeader {
            d1: cfg.d1,
            d2: cfg.d2,
            label_kind: LabelKind::Single,
            class_count: cfg.classes,
        },
        samples,
    })
}
