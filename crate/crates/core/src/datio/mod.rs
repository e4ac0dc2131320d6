//! Datasets, file formats and model checkpoints.

mod checkpoint;
mod csvio;
mod idx;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use csvio::{load_csv, load_labels_csv, save_csv, save_labels_csv, write_matrix_csv, LabelColumn};
pub use idx::{encode_idx, load_idx, parse_idx, IdxArray};
pub use synth::{simplex_means, synth_mixture, SynthConfig, Warp};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Intensities scaled into `[0, 1]`.
    BinaryScaled,
    Real,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::BinaryScaled => "binary-scaled",
            FeatureKind::Real => "real",
        }
    }
}

/// Sample matrix with optional ground-truth labels (used for evaluation only).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `N×D`
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub kind: FeatureKind,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        kind: FeatureKind,
        name: impl Into<String>,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            kind,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.features.is_matrix() {
            return Err(Error::Input("features must be an N×D matrix".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Input(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.len()
                )));
            }
        }
        if self.kind == FeatureKind::BinaryScaled
            && self.features.data().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Input("binary-scaled features must lie in [0, 1]".into()));
        }
        if !self.features.all_finite() {
            return Err(Error::Input("features must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `max(label) + 1`, or `None` for unlabeled data.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            kind: self.kind,
            name: self.name.clone(),
        }
    }

    /// Thresholds every feature at 0.5.
    pub fn binarize(&mut self) {
        for v in self.features.data_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics of `features`; constant columns keep unit scale.
    pub fn fit(features: &Tensor) -> Standardizer {
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                var[j] += (features.get(i, j) - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &mut LabeledDataset) -> Result<()> {
        if ds.dim() != self.mean.len() {
            return Err(Error::dim("standardize", &[ds.dim()], &[self.mean.len()]));
        }
        let d = ds.dim();
        for (idx, v) in ds.features.data_mut().iter_mut().enumerate() {
            let j = idx % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        ds.kind = FeatureKind::Real;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_must_match_rows() {
        let f = Tensor::zeros(3, 2);
        assert!(LabeledDataset::new(f.clone(), Some(vec![0, 1]), FeatureKind::Real, "x").is_err());
        let ds = LabeledDataset::new(f, Some(vec![0, 2, 1]), FeatureKind::Real, "x").unwrap();
        assert_eq!(ds.n_classes(), Some(3));
    }

    #[test]
    fn binary_scaled_range_enforced() {
        let f = Tensor::from_rows(&[[0.0, 1.5]]).unwrap();
        assert!(LabeledDataset::new(f, None, FeatureKind::BinaryScaled, "x").is_err());
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let f = Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let mut ds = LabeledDataset::new(f.clone(), None, FeatureKind::Real, "x").unwrap();
        let s = Standardizer::fit(&f);
        s.apply(&mut ds).unwrap();
        let col0: Vec<f64> = (0..3).map(|i| ds.features.get(i, 0)).collect();
        assert!((col0.iter().sum::<f64>()).abs() < 1e-12);
        assert!((col0.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        // constant column is only centered
        assert!((0..3).all(|i| ds.features.get(i, 1) == 0.0));
    }
}
