use super::{augment, AugmentConfig, Label, Modality, Sample};
use crate::error::{Error, Result};
use crate::numkernel::{Rng, Tensor};

/// Original and augmented views of one modality across a batch.
///
/// Rows of absent samples are zero until filled by generation; `present`
/// records the data as loaded and `generated` records which rows were
/// synthesized afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySlots {
    pub orig: Tensor,
    pub aug: Tensor,
    pub present: Vec<bool>,
    pub generated: Vec<bool>,
}

impl ModalitySlots {
    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| !self.present[i]).collect()
    }

    pub fn present_rows(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| self.present[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub m1: ModalitySlots,
    pub m2: ModalitySlots,
}

impl FeatureBatch {
    /// Packs samples into a batch, drawing one augmented view per present
    /// feature from `rng` (sample order, m1 before m2).
    pub fn from_samples(
        samples: &[&Sample],
        d1: usize,
        d2: usize,
        aug: &AugmentConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let b = samples.len();
        let mut m1 = empty_slots(b, d1);
        let mut m2 = empty_slots(b, d2);
        for (i, s) in samples.iter().enumerate() {
            if s.m1.is_none() && s.m2.is_none() {
                return Err(Error::Data(format!("sample {} has both modalities missing", s.id)));
            }
            for (slots, feat, d) in [(&mut m1, &s.m1, d1), (&mut m2, &s.m2, d2)] {
                if let Some(x) = feat {
                    if x.len() != d {
                        return Err(Error::dim("FeatureBatch", &[d], &[x.len()]));
                    }
                    slots.orig.row_mut(i).copy_from_slice(x);
                    let xa = augment(x, aug, rng);
                    slots.aug.row_mut(i).copy_from_slice(&xa);
                    slots.present[i] = true;
                }
            }
        }
        Ok(FeatureBatch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            m1,
            m2,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slots(&self, m: Modality) -> &ModalitySlots {
        match m {
            Modality::M1 => &self.m1,
            Modality::M2 => &self.m2,
        }
    }

    pub fn slots_mut(&mut self, m: Modality) -> &mut ModalitySlots {
        match m {
            Modality::M1 => &mut self.m1,
            Modality::M2 => &mut self.m2,
        }
    }

    /// First sample with neither modality present, if any.
    pub fn first_empty(&self) -> Option<usize> {
        (0..self.len()).find(|&i| !self.m1.present[i] && !self.m2.present[i])
    }
}

fn empty_slots(b: usize, d: usize) -> ModalitySlots {
    ModalitySlots {
        orig: Tensor::zeros(&[b, d]),
        aug: Tensor::zeros(&[b, d]),
        present: vec![false; b],
        generated: vec![false; b],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_rows_stay_zero() {
        let a = Sample {
            id: "a".into(),
            label: Label::Single(0),
            m1: Some(vec![1.0, 2.0]),
            m2: None,
        };
        let b = Sample {
            id: "b".into(),
            label: Label::Single(1),
            m1: None,
            m2: Some(vec![3.0]),
        };
        let batch =
            FeatureBatch::from_samples(&[&a, &b], 2, 1, &AugmentConfig::identity(), &mut Rng::new(0)).unwrap();
        assert_eq!(batch.m1.orig.data(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(batch.m2.aug.data(), &[0.0, 3.0]);
        assert_eq!(batch.m1.missing_rows(), vec![1]);
        assert_eq!(batch.m2.present_rows(), vec![1]);
        assert!(batch.first_empty().is_none());
    }
}
