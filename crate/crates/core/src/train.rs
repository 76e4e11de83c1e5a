//! Training loop: SRST batches through the dual-branch model, AdamW with a
//! separate learning rate for the cross-attention modules, a per-step CSV
//! loss log and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::{batch_tensor, ImageF32};
use crate::losses::{modality_loss, total_loss, CenterTarget, LossTerms};
use crate::model::{Model, SCAM_PREFIX};
use crate::srst::data::{read_detection_json, read_sot_root};
use crate::srst::{CropSizes, SequenceRecord, TrainingExample, TrainingSampler};

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.safetensors";
pub const RESOLVED_CONFIG: &str = "config.toml";

const CSV_HEADER: &str = "step,total,cls_rgb,cls_sonar,giou_rgb,giou_sonar,l1_rgb,l1_sonar";

/// Offset between the model-initialization seed and the data seed, so the
/// two generators never share a stream.
const DATA_SEED_OFFSET: u64 = 0x5eed_da7a;

/// Loss components of one step. Regression terms are `None` when every
/// target of that modality in the batch was absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: u64,
    pub total: f64,
    pub rgb: LossTerms,
    pub sonar: LossTerms,
}

impl StepLoss {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.total,
            self.rgb.cls,
            self.sonar.cls,
            opt(self.rgb.giou),
            opt(self.sonar.giou),
            opt(self.rgb.l1),
            opt(self.sonar.l1)
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<StepLoss>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// SOT sequences plus detection pseudo-sequences named by the config.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<SequenceRecord>> {
    let mut records = Vec::new();
    if let Some(root) = &cfg.train.sot_root {
        records.extend(read_sot_root(root)?);
    }
    if cfg.srst.detection {
        if let Some(path) = &cfg.train.detection_json {
            records.extend(read_detection_json(path)?);
        }
    }
    if records.is_empty() {
        return Err(Error::data("no training data: set train.sot_root and/or train.detection_json"));
    }
    Ok(records)
}

pub fn crop_sizes(cfg: &RunConfig) -> CropSizes {
    CropSizes {
        template: cfg.model.backbone.template_size,
        search: cfg.model.backbone.search_size,
    }
}

pub struct Trainer {
    cfg: RunConfig,
    model: Model,
    sampler: TrainingSampler,
    pool: Option<Vec<TrainingExample>>,
    opt: AdamW,
    opt_scam: Option<AdamW>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, records: Vec<SequenceRecord>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed, cfg.train.precision.dtype(), &Device::Cpu)?;
        if let Some(init) = &cfg.train.init_checkpoint {
            checkpoint::load_into(&model, init, None)?;
        }
        let sampler = TrainingSampler::new(
            records,
            cfg.srst.clone(),
            crop_sizes(cfg),
            cfg.seed.wrapping_add(DATA_SEED_OFFSET),
        )?;
        let pool = if cfg.train.pool_size > 0 {
            Some(
                (0..cfg.train.pool_size as u64)
                    .map(|i| sampler.example(0, i))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let params = |lr| ParamsAdamW {
            lr,
            weight_decay: cfg.train.weight_decay,
            ..ParamsAdamW::default()
        };
        let opt = AdamW::new(model.store.vars_excluding(&[SCAM_PREFIX]), params(cfg.train.lr))?;
        let scam_vars = model.store.vars_matching(&[SCAM_PREFIX]);
        let opt_scam = if scam_vars.is_empty() {
            None
        } else {
            Some(AdamW::new(scam_vars, params(cfg.train.scam_lr))?)
        };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            sampler,
            pool,
            opt,
            opt_scam,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// The examples of step `step`. In pool mode batches cycle through the
    /// fixed pool in order.
    pub fn batch(&self, step: u64) -> Result<Vec<TrainingExample>> {
        let b = self.cfg.train.batch_size;
        match &self.pool {
            Some(pool) => Ok((0..b)
                .map(|k| pool[(step as usize * b + k) % pool.len()].clone())
                .collect()),
            None => self.sampler.batch(step + 1, b),
        }
    }

    /// Loss of a batch as a differentiable scalar plus its components.
    pub fn batch_loss(&self, batch: &[TrainingExample]) -> Result<(Tensor, LossTerms, LossTerms)> {
        let dtype = self.model.dtype();
        let dev = self.model.device();
        let stack = |f: fn(&TrainingExample) -> &ImageF32| {
            let imgs: Vec<&ImageF32> = batch.iter().map(f).collect();
            batch_tensor(&imgs, dtype, dev)
        };
        let out = self.model.forward(
            &stack(|e| &e.z_rgb)?,
            &stack(|e| &e.x_rgb)?,
            &stack(|e| &e.z_son)?,
            &stack(|e| &e.x_son)?,
        )?;
        let side = out.rgb.side()?;
        let targets_r: Vec<_> = batch.iter().map(|e| CenterTarget::new(&e.gt_rgb, side)).collect();
        let targets_s: Vec<_> = batch.iter().map(|e| CenterTarget::new(&e.gt_son, side)).collect();
        let (cls_r, reg_r) = modality_loss(&out.rgb, &targets_r)?;
        let (cls_s, reg_s) = modality_loss(&out.sonar, &targets_s)?;

        let w = &self.cfg.loss;
        let mut total = (&cls_r + &cls_s)?;
        let mut terms = |cls: &Tensor, reg: &Option<(Tensor, Tensor)>| -> Result<LossTerms> {
            let mut t = LossTerms {
                cls: scalar(cls)?,
                ..LossTerms::default()
            };
            if let Some((g, l1)) = reg {
                total = ((&total + (g * w.lambda_iou)?)? + (l1 * w.lambda_l1)?)?;
                t.giou = Some(scalar(g)?);
                t.l1 = Some(scalar(l1)?);
            }
            Ok(t)
        };
        let rgb = terms(&cls_r, &reg_r)?;
        let sonar = terms(&cls_s, &reg_s)?;
        Ok((total, rgb, sonar))
    }

    /// One optimizer step. A non-finite loss leaves the parameters untouched
    /// and returns [`Error::Numeric`].
    pub fn step(&mut self, step: u64) -> Result<StepLoss> {
        let batch = self.batch(step)?;
        let (loss, rgb, sonar) = self.batch_loss(&batch)?;
        let total = total_loss(&rgb, &sonar, &self.cfg.loss).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        if let Some(o) = &mut self.opt_scam {
            o.step(&grads)?;
        }
        Ok(StepLoss {
            step,
            total,
            rgb,
            sonar,
        })
    }

    /// Runs every configured step, writing the loss log, periodic
    /// `step_N` checkpoints and the final checkpoint into `out_dir`. On a
    /// numeric failure the last good parameters are saved before the error
    /// is returned.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(RESOLVED_CONFIG), self.cfg.to_toml())?;
        let steps = self.cfg.train.total_steps();
        let ckpt = out_dir.join(CHECKPOINT);
        let log_path = out_dir.join(LOSS_LOG);
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        let mut losses = Vec::with_capacity(steps as usize);
        for s in 0..steps {
            let rec = match self.step(s) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    fs::write(&log_path, &csv)?;
                    checkpoint::save(&self.model, &ckpt, s)?;
                    log::error!("{e}; last good parameters saved to {}", ckpt.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let _ = writeln!(csv, "{}", rec.csv_row());
            let every = self.cfg.train.log_every;
            if every > 0 && (s % every == 0 || s + 1 == steps) {
                log::info!(
                    "step {s}/{steps} loss {:.4} (cls {:.4}/{:.4})",
                    rec.total,
                    rec.rgb.cls,
                    rec.sonar.cls
                );
            }
            losses.push(rec);
            let every = self.cfg.train.checkpoint_every;
            if every > 0 && (s + 1) % every == 0 && s + 1 < steps {
                checkpoint::save(&self.model, &out_dir.join(format!("step_{}.safetensors", s + 1)), s + 1)?;
            }
        }
        fs::write(&log_path, csv)?;
        checkpoint::save(&self.model, &ckpt, steps)?;
        Ok(TrainOutcome {
            losses,
            checkpoint: ckpt,
            loss_log: log_path,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Parses a loss log written by [`Trainer::run`] into `(step, total)` pairs.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split(',');
            let bad = || Error::data(format!("{}: bad row {l:?}", path.display()));
            let step = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let total = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            Ok((step, total))
        })
        .collect()
}
