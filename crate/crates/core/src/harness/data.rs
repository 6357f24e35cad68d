use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{target_cache_key, ExperimentConfig};
use crate::error::{Error, Result};
use crate::losses::LossTargets;
use crate::metrics::write_file;
use crate::preprocess::{contour_target, fdt_target, resize, window_normalize, PreprocessConfig};
use crate::volume_io::{
    load_labels, load_stack, load_volume, one_hot, save_labels, save_stack, save_volume, ChannelMapStack, Dims,
    IntensityVolume, LabelMap, LabelVolume, MapRole,
};

pub const IMAGE_SUFFIX: &str = "_image";
pub const LABEL_SUFFIX: &str = "_label";
const EXTENSIONS: [&str; 2] = [".nii.gz", ".nii"];

/// Case ids in `root`: every `<id>_image.nii[.gz]`, sorted.
pub fn discover_cases(root: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let stem = EXTENSIONS.iter().find_map(|ext| name.strip_suffix(ext));
        if let Some(id) = stem.and_then(|s| s.strip_suffix(IMAGE_SUFFIX)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `*{IMAGE_SUFFIX}.nii[.gz]` volumes in {}",
            root.display()
        )));
    }
    Ok(ids)
}

fn existing(root: &Path, id: &str, suffix: &str) -> Option<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| root.join(format!("{id}{suffix}{ext}")))
        .find(|p| p.is_file())
}

pub fn image_path(root: &Path, id: &str) -> Result<PathBuf> {
    existing(root, id, IMAGE_SUFFIX).ok_or_else(|| Error::volume(root.join(format!("{id}{IMAGE_SUFFIX}.nii.gz")), "file does not exist"))
}

/// `None` when the case has no ground truth on disk.
pub fn label_path(root: &Path, id: &str) -> Option<PathBuf> {
    existing(root, id, LABEL_SUFFIX)
}

pub fn load_ground_truth(root: &Path, id: &str, label_map: &LabelMap) -> Result<LabelVolume> {
    let path = label_path(root, id).ok_or_else(|| {
        Error::InvalidArgument(format!("case `{id}` has no ground truth in {}", root.display()))
    })?;
    load_labels(&path, label_map)
}

/// Windowed image resampled to the network grid.
pub fn network_input(image: &IntensityVolume, cfg: &PreprocessConfig) -> Result<IntensityVolume> {
    resize(&window_normalize(image, cfg), cfg.target_dims())
}

/// A case on the network grid together with its supervision targets.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub image: IntensityVolume,
    pub labels: LabelVolume,
    pub contour: ChannelMapStack,
    pub distance: ChannelMapStack,
}

impl PreparedCase {
    /// Window, resample and derive contour and distance targets.
    pub fn prepare(id: &str, image: &IntensityVolume, labels: &LabelVolume, cfg: &PreprocessConfig) -> Result<Self> {
        if image.dims != labels.dims {
            return Err(Error::Shape(format!(
                "case `{id}`: image {} and labels {} differ",
                image.dims, labels.dims
            )));
        }
        let image = network_input(image, cfg)?;
        let labels = resize(labels, cfg.target_dims())?;
        Self::on_grid(id, image, labels)
    }

    /// Targets for an image and labels already on the network grid.
    pub fn on_grid(id: &str, image: IntensityVolume, labels: LabelVolume) -> Result<Self> {
        let structures = one_hot(&labels, false);
        Ok(Self {
            id: id.to_string(),
            contour: contour_target(&structures)?,
            distance: fdt_target(&structures)?,
            image,
            labels,
        })
    }

    pub fn targets(&self) -> LossTargets {
        LossTargets {
            onehot: one_hot(&self.labels, true),
            contour: Some(self.contour.clone()),
            distance: Some(self.distance.clone()),
        }
    }

    fn validate(&self, dims: Dims, n_structures: usize) -> Result<()> {
        self.image.validate()?;
        self.labels.validate()?;
        for stack in [&self.contour, &self.distance] {
            stack.validate()?;
            if stack.dims() != dims || stack.channels() != n_structures {
                return Err(Error::Shape(format!(
                    "case `{}`: cached {} targets have {} channels on {}, expected {} on {dims}",
                    self.id,
                    stack.role(),
                    stack.channels(),
                    stack.dims(),
                    n_structures
                )));
            }
        }
        if self.image.dims != dims || self.labels.dims != dims {
            return Err(Error::Shape(format!("case `{}`: cached volumes are not on {dims}", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    case_id: String,
    key: String,
}

/// On-disk store of prepared cases under `<output_root>/targets/<key>/<case>`,
/// where `key` hashes the preprocessing and label map.
#[derive(Clone, Debug)]
pub struct TargetCache {
    dir: PathBuf,
    key: String,
    preprocess: PreprocessConfig,
    label_map: LabelMap,
}

impl TargetCache {
    pub fn new(output_root: &Path, preprocess: &PreprocessConfig, label_map: &LabelMap) -> Self {
        let key = target_cache_key(preprocess, label_map);
        Self {
            dir: output_root.join("targets").join(&key),
            key,
            preprocess: preprocess.clone(),
            label_map: label_map.clone(),
        }
    }

    pub fn for_config(cfg: &ExperimentConfig, label_map: &LabelMap) -> Self {
        Self::new(&cfg.output_root, &cfg.preprocess, label_map)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn case_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.case_dir(id).join("meta.json").is_file()
    }

    /// Read a cached case, re-validating every target invariant.
    pub fn load(&self, id: &str) -> Result<Option<PreparedCase>> {
        let dir = self.case_dir(id);
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Ok(None);
        }
        let meta: CacheMeta = serde_json::from_slice(&std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        if meta.case_id != id || meta.key != self.key {
            return Ok(None);
        }
        let case = PreparedCase {
            id: id.to_string(),
            image: load_volume(&dir.join("image.nii.gz"))?,
            labels: load_labels(&dir.join("labels.nii.gz"), &self.label_map)?,
            contour: load_stack(&dir.join("contour.nii.gz"), MapRole::Contour)?,
            distance: load_stack(&dir.join("distance.nii.gz"), MapRole::Distance)?,
        };
        case.validate(self.preprocess.target_dims(), self.label_map.len())?;
        Ok(Some(case))
    }

    pub fn store(&self, case: &PreparedCase) -> Result<()> {
        let dir = self.case_dir(&case.id);
        save_volume(&case.image, &dir.join("image.nii.gz"))?;
        save_labels(&case.labels, &dir.join("labels.nii.gz"))?;
        save_stack(&case.contour, &dir.join("contour.nii.gz"))?;
        save_stack(&case.distance, &dir.join("distance.nii.gz"))?;
        let meta = CacheMeta {
            case_id: case.id.clone(),
            key: self.key.clone(),
        };
        write_file(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    /// Cached case if present, otherwise prepare it from `data_root` and store it.
    pub fn get_or_prepare(&self, data_root: &Path, id: &str) -> Result<PreparedCase> {
        if let Some(case) = self.load(id)? {
            log::info!("target cache hit for case `{id}` (key {})", self.key);
            return Ok(case);
        }
        log::info!("computing targets for case `{id}` (key {})", self.key);
        let image = load_volume(&image_path(data_root, id)?)?;
        let labels = load_ground_truth(data_root, id, &self.label_map)?;
        let case = PreparedCase::prepare(id, &image, &labels, &self.preprocess)?;
        self.store(&case)?;
        Ok(case)
    }
}

/// Prepare (or fetch from cache) every listed case.
pub fn make_targets(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<PreparedCase>> {
    let label_map = cfg.resolve_label_map()?;
    let cache = TargetCache::for_config(cfg, &label_map);
    ids.iter().map(|id| cache.get_or_prepare(&cfg.data_root, id)).collect()
}
