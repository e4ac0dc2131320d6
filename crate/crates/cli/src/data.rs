//! Dataset loading and the preprocessing a checkpoint remembers.

use std::path::Path;

use vade::datio::{load_csv, load_idx, load_labels_csv, FeatureKind, LabelColumn, LabeledDataset, Standardizer};
use vade::nets::ObsKind;

use crate::config::DataFormat;
use crate::error::CliError;

/// Reads `path` as CSV or IDX, attaching labels from `labels` when given.
pub fn load(
    path: &Path,
    labels: Option<&Path>,
    format: DataFormat,
    label_column: Option<LabelColumn>,
) -> Result<LabeledDataset, CliError> {
    for p in std::iter::once(path).chain(labels) {
        if !p.is_file() {
            return Err(CliError::Data(format!("{}: no such file", p.display())));
        }
    }
    match format.resolve(path) {
        DataFormat::Idx => {
            if label_column.is_some() {
                return Err(CliError::Config("label_column only applies to CSV data".into()));
            }
            Ok(load_idx(path, labels)?)
        }
        _ => {
            let mut ds = load_csv(path, label_column)?;
            if let Some(lp) = labels {
                if ds.labels.is_some() {
                    return Err(CliError::Config("labels given both as a column and as a file".into()));
                }
                let l = load_labels_csv(lp)?;
                if l.len() != ds.len() {
                    return Err(CliError::Data(format!(
                        "{}: {} labels for {} rows of {}",
                        lp.display(),
                        l.len(),
                        ds.len(),
                        path.display()
                    )));
                }
                ds.labels = Some(l);
            }
            Ok(ds)
        }
    }
}

/// Binarizes and/or standardizes in place, in that order.
pub fn preprocess(ds: &mut LabeledDataset, binarize: bool, standardizer: Option<&Standardizer>) -> Result<(), CliError> {
    if binarize {
        ds.binarize();
    }
    if let Some(s) = standardizer {
        if s.mean.len() != ds.dim() {
            return Err(CliError::Shape(format!(
                "data has {} features, the stored standardizer {}",
                ds.dim(),
                s.mean.len()
            )));
        }
        s.apply(ds)?;
    }
    Ok(())
}

/// Bernoulli for unstandardized `[0, 1]` image data, Gaussian otherwise.
pub fn resolve_obs(requested: Option<ObsKind>, ds: &LabeledDataset) -> Result<ObsKind, CliError> {
    let in_unit = ds.features.data().iter().all(|v| (0.0..=1.0).contains(v));
    match requested {
        Some(ObsKind::Bernoulli) if !in_unit => Err(CliError::Config(
            "bernoulli observations need every feature in [0, 1]".into(),
        )),
        Some(o) => Ok(o),
        None if ds.kind == FeatureKind::BinaryScaled && in_unit => Ok(ObsKind::Bernoulli),
        None => Ok(ObsKind::Gaussian),
    }
}
