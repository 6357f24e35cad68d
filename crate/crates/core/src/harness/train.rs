use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{discover_cases, image_path, load_ground_truth, PreparedCase, TargetCache};
use super::eval::predict_labels;
use super::folds::select_fold;
use crate::autodiff::{ParamGrads, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{evaluate_case, write_file, MetricsReport, WHOLE_HEART};
use crate::network::{build_variant, CdaNet, ModelVariantSpec};
use crate::optim::Adam;
use crate::preprocess::augment;
use crate::volume_io::{load_volume, IntensityVolume, LabelMap, LabelVolume};

/// Stream of the training RNG; weight init draws from stream 0 of the same seed.
const TRAIN_STREAM: u64 = 1;
const CHECKPOINT_FORMAT: u32 = 1;
pub const LOG_HEADER: [&str; 8] = ["step", "epoch", "case_id", "L", "L_O", "L_C", "L_DT", "E_p"];

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub spec: ModelVariantSpec,
    pub label_map: LabelMap,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
    pub best_val_wh_dsc: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Serde(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }

    pub fn network(&self) -> Result<CdaNet> {
        CdaNet::from_params(&self.spec, &self.params)
    }

    /// The checkpoint must have been trained with `cfg`'s variant and grid.
    pub fn check_matches(&self, cfg: &ExperimentConfig) -> Result<()> {
        let want = cfg.model_spec(self.spec.n_structures)?;
        let same = want.variant == self.spec.variant
            && want.base_channels == self.spec.base_channels
            && want.depth == self.spec.depth
            && want.input_size == self.spec.input_size;
        if !same {
            return Err(Error::Config(format!(
                "checkpoint is a {} model (base {}, depth {}, input {:?}) but the config asks for {} (base {}, depth {}, input {:?})",
                self.spec.variant,
                self.spec.base_channels,
                self.spec.depth,
                self.spec.input_size,
                want.variant,
                want.base_channels,
                want.depth,
                want.input_size
            )));
        }
        Ok(())
    }
}

/// Loss of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub case_ids: Vec<String>,
    pub loss: LossBreakdown,
}

impl StepRecord {
    fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.case_ids.join(";"),
            self.loss.total.to_string(),
            self.loss.seg.to_string(),
            opt(self.loss.contour),
            opt(self.loss.distance),
            opt(self.loss.penalty),
        ]
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = parts.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    LossBreakdown {
        total: avg(|b| Some(b.total)).unwrap_or(0.0),
        seg: avg(|b| Some(b.seg)).unwrap_or(0.0),
        contour: avg(|b| b.contour),
        distance: avg(|b| b.distance),
        penalty: avg(|b| b.penalty),
    }
}

/// Model, optimizer and RNG state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: ExperimentConfig,
    label_map: LabelMap,
    net: CdaNet,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
    epoch: usize,
    best: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, label_map: &LabelMap) -> Result<Self> {
        cfg.validate()?;
        let net = build_variant(&cfg.model_spec(label_map.len())?)?;
        let opt = Adam::new(cfg.adam()?, net.store());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            cfg: cfg.clone(),
            label_map: label_map.clone(),
            net,
            opt,
            rng,
            step: 0,
            epoch: 0,
            best: None,
        })
    }

    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ck.check_matches(cfg)?;
        let net = ck.network()?;
        if !ck.optimizer.matches(net.store()) {
            return Err(Error::Serde("checkpoint optimizer state does not match its parameters".into()));
        }
        let mut opt = ck.optimizer;
        opt.config = cfg.adam()?;
        Ok(Self {
            cfg: cfg.clone(),
            label_map: ck.label_map,
            net,
            opt,
            rng: ck.rng,
            step: ck.step,
            epoch: ck.epoch,
            best: ck.best_val_wh_dsc,
        })
    }

    pub fn net(&self) -> &CdaNet {
        &self.net
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_val_wh_dsc(&self) -> Option<f64> {
        self.best
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            spec: self.net.spec().clone(),
            label_map: self.label_map.clone(),
            params: self.net.store().clone(),
            optimizer: self.opt.clone(),
            rng: self.rng.clone(),
            step: self.step,
            epoch: self.epoch,
            best_val_wh_dsc: self.best,
        }
    }

    /// Loss terms and parameter gradients for one case, without updating.
    pub fn loss_and_grads(&self, case: &PreparedCase) -> Result<(LossBreakdown, ParamGrads)> {
        let mut t = Tape::new();
        let x = t.constant(case.image.to_tensor());
        let vars = self.net.forward(&mut t, x)?;
        let (root, bd) = total_loss(&mut t, &vars, &case.targets(), &self.cfg.loss, self.net.variant())?;
        let grads = t.backward(root, self.net.store()).into_params();
        Ok((bd, grads))
    }

    /// Loss terms for one case.
    pub fn loss(&self, case: &PreparedCase) -> Result<LossBreakdown> {
        let mut t = Tape::new();
        let x = t.constant(case.image.to_tensor());
        let vars = self.net.forward(&mut t, x)?;
        Ok(total_loss(&mut t, &vars, &case.targets(), &self.cfg.loss, self.net.variant())?.1)
    }

    /// A randomly augmented copy when augmentation is on; targets are
    /// rebuilt whenever the labels moved.
    pub fn augmented(&mut self, case: &PreparedCase) -> Result<PreparedCase> {
        if !self.cfg.training.augment {
            return Ok(case.clone());
        }
        let (image, labels) = augment(&case.image, &case.labels, &self.cfg.preprocess, &mut self.rng);
        if labels.voxels == case.labels.voxels {
            let mut out = case.clone();
            out.image = image;
            Ok(out)
        } else {
            PreparedCase::on_grid(&case.id, image, labels)
        }
    }

    /// One Adam update on the mean gradient of `batch`. Non-finite loss
    /// terms or gradients abort without touching the parameters.
    pub fn train_step(&mut self, batch: &[PreparedCase]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(batch.len());
        let mut total = ParamGrads::zeros_like(self.net.store());
        for case in batch {
            let (bd, grads) = self.loss_and_grads(case)?;
            if !bd.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step + 1,
                    case_id: case.id.clone(),
                    breakdown: format!("{bd}{}", if grads.all_finite() { "" } else { " (non-finite gradient)" }),
                });
            }
            total.add(&grads);
            parts.push(bd);
        }
        total.scale(1.0 / batch.len() as f64);
        self.opt.update(self.net.store_mut(), &total);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch + 1,
            case_ids: batch.iter().map(|c| c.id.clone()).collect(),
            loss: mean_breakdown(&parts),
        })
    }

    /// One pass over `cases` in a fresh random order. Stops early at
    /// `max_steps`; returns the records of the steps taken.
    pub fn run_epoch(&mut self, cases: &[PreparedCase], on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.cfg.training.batch_size) {
            if self.finished() {
                break;
            }
            let batch = chunk
                .iter()
                .map(|&i| self.augmented(&cases[i]))
                .collect::<Result<Vec<_>>>()?;
            let rec = self.train_step(&batch)?;
            log::debug!("step {} epoch {}: {}", rec.step, rec.epoch, rec.loss);
            on_step(&rec)?;
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// All epochs done or the step budget is spent.
    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.training.epochs || self.cfg.training.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Record a validation score; true when it is the best so far.
    pub fn observe_validation(&mut self, wh_dsc: Option<f64>) -> bool {
        let score = wh_dsc.unwrap_or(f64::NEG_INFINITY);
        let better = self.best.is_none_or(|b| score > b);
        if better {
            self.best = Some(score).filter(|s| s.is_finite()).or(self.best);
        }
        better
    }
}

/// A case at native resolution for validation.
#[derive(Clone, Debug)]
pub struct NativeCase {
    pub id: String,
    pub image: IntensityVolume,
    pub labels: LabelVolume,
}

impl NativeCase {
    pub fn load(data_root: &Path, id: &str, label_map: &LabelMap) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            image: load_volume(&image_path(data_root, id)?)?,
            labels: load_ground_truth(data_root, id, label_map)?,
        })
    }
}

/// Metrics of `net` on native-resolution cases.
pub fn validate_cases(net: &CdaNet, cfg: &ExperimentConfig, label_map: &LabelMap, cases: &[NativeCase]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for c in cases {
        let pred = predict_labels(net, &cfg.preprocess, label_map, &c.image)?;
        report.extend(evaluate_case(&c.id, &pred, &c.labels)?);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_wh_dsc: Option<f64>,
    pub steps: usize,
    pub history: Vec<StepRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// File names inside `output_root`.
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with(cfg, None)
}

/// Train on the configured fold, optionally resuming from a checkpoint.
pub fn train_with(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let label_map = cfg.resolve_label_map()?;
    let ids = discover_cases(&cfg.data_root)?;
    let t = &cfg.training;
    let fold = select_fold(&ids, t.n_folds, t.fold, t.seed)?;
    train_fold(cfg, &label_map, &fold.train, &fold.val, resume)
}

/// Train on `train_ids`, validate on `val_ids`, writing logs and
/// checkpoints under `cfg.output_root`.
pub fn train_fold(
    cfg: &ExperimentConfig,
    label_map: &LabelMap,
    train_ids: &[String],
    val_ids: &[String],
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let cache = TargetCache::for_config(cfg, label_map);
    let cases = train_ids
        .iter()
        .map(|id| cache.get_or_prepare(&cfg.data_root, id))
        .collect::<Result<Vec<_>>>()?;
    let val = val_ids
        .iter()
        .map(|id| NativeCase::load(&cfg.data_root, id, label_map))
        .collect::<Result<Vec<_>>>()?;
    train_prepared(cfg, label_map, &cases, &val, resume)
}

/// Training loop over already prepared cases.
pub fn train_prepared(
    cfg: &ExperimentConfig,
    label_map: &LabelMap,
    cases: &[PreparedCase],
    val: &[NativeCase],
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let out = &cfg.output_root;
    let mut trainer = match resume {
        Some(p) => {
            log::info!("resuming from {}", p.display());
            Trainer::from_checkpoint(cfg, Checkpoint::load(p)?)?
        }
        None => Trainer::new(cfg, label_map)?,
    };
    let log_path = out.join(TRAIN_LOG);
    let val_path = out.join(VAL_LOG);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fresh = resume.is_none();
    let mut log = csv_appender(&log_path, fresh, &LOG_HEADER)?;
    let mut vlog = csv_appender(&val_path, fresh, &["epoch", "step", "wh_dsc", "wh_hd95", "wh_assd"])?;
    let (best_path, last_path) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT));
    log::info!(
        "training {} on {} cases, validating on {} ({} parameters)",
        trainer.net().variant(),
        cases.len(),
        val.len(),
        trainer.net().param_count()
    );

    let mut history = Vec::new();
    while !trainer.finished() {
        let records = trainer.run_epoch(cases, &mut |rec| {
            log.write_record(rec.csv_record())?;
            Ok(())
        });
        let records = match records {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                dump_failure(out, &trainer, &e);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        history.extend(records);
        let epoch = trainer.epoch();
        if epoch % cfg.training.validate_every == 0 || trainer.finished() {
            let report = validate_cases(trainer.net(), cfg, label_map, val)?;
            let wh = report.summarize().into_iter().find(|s| s.structure == WHOLE_HEART);
            let wh_dsc = report.mean_wh_dsc();
            let fmt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |v| v.to_string());
            vlog.write_record([
                epoch.to_string(),
                trainer.steps().to_string(),
                fmt(wh_dsc),
                fmt(wh.as_ref().and_then(|s| s.hd95.mean)),
                fmt(wh.as_ref().and_then(|s| s.assd.mean)),
            ])?;
            vlog.flush().map_err(|e| Error::io(&val_path, e))?;
            log::info!("epoch {epoch} step {}: validation WH DSC {}", trainer.steps(), fmt(wh_dsc));
            if trainer.observe_validation(wh_dsc) {
                trainer.checkpoint().save(&best_path)?;
                report.write_all(out, "val_best")?;
            }
        }
        trainer.checkpoint().save(&last_path)?;
    }
    if !best_path.is_file() {
        trainer.checkpoint().save(&best_path)?;
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_wh_dsc: trainer.best_val_wh_dsc(),
        steps: trainer.steps(),
        history,
        train_ids: cases.iter().map(|c| c.id.clone()).collect(),
        val_ids: val.iter().map(|c| c.id.clone()).collect(),
    })
}

fn csv_appender(path: &Path, truncate: bool, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let exists = path.is_file() && !truncate;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(header)?;
    }
    Ok(w)
}

fn dump_failure(out: &Path, trainer: &Trainer, err: &Error) {
    let path = out.join(format!("nonfinite_step{}.json", trainer.steps() + 1));
    let body = serde_json::json!({
        "error": err.to_string(),
        "completed_steps": trainer.steps(),
        "epoch": trainer.epoch(),
        "variant": trainer.net().variant().name(),
    });
    match write_file(&path, body.to_string().as_bytes()) {
        Ok(()) => log::error!("{err}; diagnostics written to {}", path.display()),
        Err(e) => log::error!("{err}; could not write diagnostics: {e}"),
    }
}
