use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::data::{image_path, label_path, network_input};
use super::train::{validate_cases, Checkpoint, NativeCase};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::network::{CdaNet, CdaOutput};
use crate::preprocess::{resize, PreprocessConfig};
use crate::volume_io::{decode, export_attention, load_volume, save_prediction, IntensityVolume, LabelMap, LabelVolume};

/// Forward pass on the network grid plus the argmax labels resampled back
/// to the native grid of `image`.
pub fn predict_with_outputs(
    net: &CdaNet,
    pre: &PreprocessConfig,
    label_map: &LabelMap,
    image: &IntensityVolume,
) -> Result<(LabelVolume, CdaOutput)> {
    let input = network_input(image, pre)?;
    let out = net.cda_forward(&input)?;
    let grid = decode(&out.probabilities(), label_map)?;
    let mut native = resize(&grid, image.dims)?;
    native.spacing = image.spacing;
    Ok((native, out))
}

pub fn predict_labels(net: &CdaNet, pre: &PreprocessConfig, label_map: &LabelMap, image: &IntensityVolume) -> Result<LabelVolume> {
    Ok(predict_with_outputs(net, pre, label_map, image)?.0)
}

/// Evaluate `checkpoint` on `case_ids` from `cfg.data_root`. Every case
/// needs ground truth.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Checkpoint, case_ids: &[String]) -> Result<MetricsReport> {
    checkpoint.check_matches(cfg)?;
    if let Some(id) = case_ids.iter().find(|id| label_path(&cfg.data_root, id).is_none()) {
        return Err(Error::InvalidArgument(format!(
            "case `{id}` has no ground truth in {}",
            cfg.data_root.display()
        )));
    }
    let net = checkpoint.network()?;
    let cases = case_ids
        .iter()
        .map(|id| NativeCase::load(&cfg.data_root, id, &checkpoint.label_map))
        .collect::<Result<Vec<_>>>()?;
    validate_cases(&net, cfg, &checkpoint.label_map, &cases)
}

/// [`evaluate`], writing `metrics.{csv,json}` and `metrics_summary.{csv,json}` to `out_dir`.
pub fn evaluate_to_dir(cfg: &ExperimentConfig, checkpoint: &Checkpoint, case_ids: &[String], out_dir: &Path) -> Result<MetricsReport> {
    let report = evaluate(cfg, checkpoint, case_ids)?;
    report.write_all(out_dir, "metrics")?;
    Ok(report)
}

/// Segment each case and write `<id>_pred.nii.gz` into `out_dir`.
pub fn predict(cfg: &ExperimentConfig, checkpoint: &Checkpoint, case_ids: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    checkpoint.check_matches(cfg)?;
    let net = checkpoint.network()?;
    case_ids
        .iter()
        .map(|id| {
            let image = load_volume(&image_path(&cfg.data_root, id)?)?;
            let labels = predict_labels(&net, &cfg.preprocess, &checkpoint.label_map, &image)?;
            let path = out_dir.join(format!("{id}_pred.nii.gz"));
            save_prediction(&labels, &path)?;
            Ok(path)
        })
        .collect()
}

/// Write the attention map of each case as `<id>_attention.nii.gz` on the
/// network grid. Only shape-aware variants have one.
pub fn export_attention_maps(
    cfg: &ExperimentConfig,
    checkpoint: &Checkpoint,
    case_ids: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    checkpoint.check_matches(cfg)?;
    let net = checkpoint.network()?;
    if !net.variant().has_shape_attention() {
        return Err(Error::MissingHead {
            variant: net.variant().to_string(),
            head: "shape-aware attention",
        });
    }
    case_ids
        .iter()
        .map(|id| {
            let image = load_volume(&image_path(&cfg.data_root, id)?)?;
            let out = net.cda_forward(&network_input(&image, &cfg.preprocess)?)?;
            let att = out.attention.expect("shape-aware variants return attention");
            att.validate()?;
            let path = out_dir.join(format!("{id}_attention.nii.gz"));
            export_attention(&att, &path)?;
            Ok(path)
        })
        .collect()
}
