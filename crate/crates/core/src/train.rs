//! Supervised training of the motion network and windowed inference.
//!
//! Sampling: one epoch draws one window of `s + 2` consecutive frames from
//! every training scan (uniform random start), in a shuffled scan order, and
//! cuts the list into batches; the last batch of an epoch may be smaller.
//! Everything random in epoch `e` derives from `(seed, e)`, so any step can be
//! reproduced in isolation — which is what makes resuming bit-exact.
//!
//! Objective per batch:
//! `α₁·MMAE(fused) + α₂·corr + α₃·triplet + aux·α₁·(MMAE(global) + MMAE(local))`. The extra per-path MMAE terms give
//! each estimator its own supervision; with the mean fusion alone the two
//! paths could drift apart while their average stays right.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{render, KeyValues};
use crate::error::{Error, Result};
use crate::losses::{
    correlation_loss_var, labels_tensor, mmae, mmae_var, select_triplets, total_loss_var, triplet_loss_var,
    LossWeights,
};
use crate::network::{attention_grids, frames_tensor, Model, ModelConfig, MotionEstimate};
use crate::pose::PoseVector;
use crate::sim::ScanSequence;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::optim::{step_decay, Adam};
use crate::tensor::{Tape, Tensor, Var};

pub const TRAIN_LOG_HEADER: &str = "step,mmae,corr,triplet,total,lr";
pub const VALIDATION_LOG_HEADER: &str = "step,val_mmae";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VALIDATION_LOG_FILE: &str = "validation.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Optimization hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays ×0.8 every 100 epochs.
    pub lr: f64,
    pub weights: LossWeights,
    /// Weight of the per-path MMAE terms relative to α₁.
    pub aux_weight: f64,
    /// Validate every this many steps (and at step 0 and at the end).
    pub val_every: usize,
    /// Fraction of subjects held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            weights: LossWeights::default(),
            aux_weight: 0.5,
            val_every: 100,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::invalid(
                "batch size and validation interval must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::invalid("auxiliary weight must be nonnegative"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `key=value` lines, each key prefixed with `prefix`.
    pub fn to_kv(&self, prefix: &str) -> String {
        let w = &self.weights;
        let entries = [
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("alpha1", w.alpha1.to_string()),
            ("alpha2", w.alpha2.to_string()),
            ("alpha3", w.alpha3.to_string()),
            ("mmae_epsilon", w.epsilon.to_string()),
            ("aux_weight", self.aux_weight.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ];
        let keys: Vec<String> = entries.iter().map(|(k, _)| format!("{prefix}{k}")).collect();
        let pairs: Vec<(&str, String)> = keys
            .iter()
            .zip(entries)
            .map(|(k, (_, v))| (k.as_str(), v))
            .collect();
        render(&pairs)
    }

    /// Takes the training keys (with `prefix`) from `kv`, defaulting the rest.
    pub fn from_kv(kv: &mut KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let k = |name: &str| format!("{prefix}{name}");
        let c = Self {
            steps: kv.take_or(&k("steps"), d.steps)?,
            batch_size: kv.take_or(&k("batch_size"), d.batch_size)?,
            lr: kv.take_or(&k("lr"), d.lr)?,
            weights: LossWeights {
                alpha1: kv.take_or(&k("alpha1"), d.weights.alpha1)?,
                alpha2: kv.take_or(&k("alpha2"), d.weights.alpha2)?,
                alpha3: kv.take_or(&k("alpha3"), d.weights.alpha3)?,
                epsilon: kv.take_or(&k("mmae_epsilon"), d.weights.epsilon)?,
            },
            aux_weight: kv.take_or(&k("aux_weight"), d.aux_weight)?,
            val_every: kv.take_or(&k("val_every"), d.val_every)?,
            val_fraction: kv.take_or(&k("val_fraction"), d.val_fraction)?,
            seed: kv.take_or(&k("seed"), d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Scan indices of the two sides of a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Subject-disjoint split: the distinct subjects are sorted and the last
/// `round(n · val_fraction)` (at least one, at most n − 1) go to validation.
pub fn split_by_subject(subjects: &[String], val_fraction: f64) -> Result<Split> {
    let mut distinct: Vec<&String> = subjects.iter().collect();
    distinct.sort();
    distinct.dedup();
    let n = distinct.len();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "training needs scans from at least 2 subjects, found {n}"
        )));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val_subjects = &distinct[n - n_val..];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in subjects.iter().enumerate() {
        if val_subjects.contains(&s) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok(Split { train, val })
}

/// Subject tag of a scan (its meta subject, else `fallback`).
pub fn subject_of(scan: &ScanSequence, fallback: &str) -> String {
    scan.meta
        .as_ref()
        .map(|m| m.subject.clone())
        .unwrap_or_else(|| fallback.to_string())
}

/// One training window: scan index (into the training list) and first frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub scan: usize,
    pub start: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Batches of epoch `epoch`, given the frame count of every training scan.
pub fn epoch_batches(
    scan_frames: &[usize],
    window_frames: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<Sample>> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..scan_frames.len()).collect();
    order.shuffle(&mut rng);
    let samples: Vec<Sample> = order
        .into_iter()
        .map(|scan| Sample {
            scan,
            start: rng.random_range(0..=scan_frames[scan] - window_frames),
        })
        .collect();
    samples.chunks(batch_size).map(<[Sample]>::to_vec).collect()
}

/// Values logged for one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub mmae: f64,
    pub corr: f64,
    pub triplet: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.mmae, self.corr, self.triplet, self.total, self.lr
        )
    }
}

/// Training-time view of one scan: frames plus truth relative motions.
struct TrainScan<'a> {
    frames: &'a [Vec<f32>],
    motions: Vec<PoseVector>,
}

fn prepare<'a>(scan: &'a ScanSequence, cfg: &ModelConfig, min_frames: usize) -> Result<TrainScan<'a>> {
    let g = scan.geometry;
    if g.rows != cfg.image_extent || g.cols != cfg.image_extent {
        return Err(Error::Precondition(format!(
            "scan frames are {}x{}, model expects {e}x{e}",
            g.rows,
            g.cols,
            e = cfg.image_extent
        )));
    }
    if scan.len() < min_frames {
        return Err(Error::Precondition(format!(
            "scan has {} frames, a window needs {min_frames}",
            scan.len()
        )));
    }
    Ok(TrainScan {
        frames: &scan.frames,
        motions: scan.relative_poses()?,
    })
}

/// Model, optimizer and data of a training run.
pub struct Trainer<'a> {
    pub model: Model,
    pub cfg: TrainConfig,
    adam: Adam,
    train: Vec<TrainScan<'a>>,
    val: Vec<TrainScan<'a>>,
    /// Number of updates applied so far.
    pub step: usize,
    /// Best validation MMAE so far and the step it was measured at.
    pub best: Option<(usize, f64)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        train: &[&'a ScanSequence],
        val: &[&'a ScanSequence],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Precondition(
                "training needs at least one training and one validation scan".into(),
            ));
        }
        let window = model.cfg.window_steps() + 1;
        let train = train
            .iter()
            .map(|s| prepare(s, &model.cfg, window))
            .collect::<Result<Vec<_>>>()?;
        let val = val
            .iter()
            .map(|s| prepare(s, &model.cfg, 2))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            model,
            cfg,
            adam,
            train,
            val,
            step: 0,
            best: None,
        })
    }

    /// Restores model, optimizer and progress from a [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, train: &[&'a ScanSequence], val: &[&'a ScanSequence]) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let mut kv = KeyValues::parse(&ckpt.config)?;
        let cfg = TrainConfig::from_kv(&mut kv, "train.")?;
        let step: usize = kv
            .take("state.step")?
            .ok_or_else(|| Error::format("checkpoint", "no training state (not written by a trainer)"))?;
        let best_step: Option<usize> = kv.take("state.best_step")?;
        let best_val: Option<f64> = kv.take("state.best_val")?;
        let mut t = Self::new(model, cfg, train, val)?;
        t.adam = Adam::import(&t.model.store, &ckpt.records)?;
        t.step = step;
        t.best = best_step.zip(best_val);
        Ok(t)
    }

    /// Full training state: model config and parameters, training config,
    /// progress and optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.checkpoint();
        ckpt.config.push_str(&self.cfg.to_kv("train."));
        ckpt.config.push_str(&format!("state.step={}\n", self.step));
        if let Some((s, v)) = self.best {
            ckpt.config
                .push_str(&format!("state.best_step={s}\nstate.best_val={v}\n"));
        }
        ckpt.records.extend(self.adam.export(&self.model.store));
        ckpt
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Epoch containing step `step`.
    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.steps_per_epoch()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        step_decay(self.cfg.lr, self.epoch_of(step))
    }

    /// Windows of step `step`.
    pub fn batch_at(&self, step: usize) -> Vec<Sample> {
        let spe = self.steps_per_epoch();
        let lens: Vec<usize> = self.train.iter().map(|s| s.frames.len()).collect();
        let window = self.model.cfg.window_steps() + 1;
        let mut batches = epoch_batches(&lens, window, self.cfg.batch_size, self.cfg.seed, step / spe);
        batches.swap_remove(step % spe)
    }

    /// Loss of step `step`'s batch at the current parameters, without
    /// updating anything.
    pub fn peek_loss(&self, step: usize) -> Result<StepLog> {
        let tape = Tape::new();
        let p = self.model.store.bind_frozen(&tape);
        let (_, log) = self.batch_objective(&tape, &p, step)?;
        Ok(log)
    }

    fn batch_objective<'t>(
        &self,
        tape: &'t Tape,
        p: &crate::tensor::nn::Bound<'t>,
        step: usize,
    ) -> Result<(Var<'t>, StepLog)> {
        let samples = self.batch_at(step);
        let l = self.model.cfg.window_steps();
        let e = self.model.cfg.image_extent;
        let b = samples.len();
        let mut data = Vec::with_capacity(b * (l + 1) * e * e);
        let mut labels = Vec::with_capacity(b * l);
        for s in &samples {
            let scan = &self.train[s.scan];
            let frames: Vec<&[f32]> = scan.frames[s.start..s.start + l + 1]
                .iter()
                .map(Vec::as_slice)
                .collect();
            data.extend(frames_tensor(&frames, e)?.into_data());
            labels.extend_from_slice(&scan.motions[s.start..s.start + l]);
        }
        let input = Tensor::new(vec![b, l + 1, e, e], data)?;
        let out = self.model.forward(p, tape, &input)?;
        let truth = tape.constant(labels_tensor(&labels)?);
        let rows = |v: Var<'t>| v.reshape(&[b * l, 6]);
        let w = &self.cfg.weights;
        let fused = rows(out.fused)?;
        let mmae_f = mmae_var(truth, fused, w.epsilon)?;
        let corr = if l >= 2 {
            let mut acc: Option<Var<'t>> = None;
            for i in 0..b {
                let c = correlation_loss_var(truth.narrow(0, i * l, l)?, fused.narrow(0, i * l, l)?)?;
                acc = Some(match acc {
                    None => c,
                    Some(a) => a.add(c)?,
                });
            }
            acc.map(|a| a.scale(1.0 / b as f64))
        } else {
            None
        };
        let triplet = if labels.len() >= 3 {
            let triplets = select_triplets(&labels)?;
            let gather = |pick: fn(&(usize, usize, usize)) -> usize| -> Result<Var<'t>> {
                let parts = triplets
                    .iter()
                    .map(|t| out.embeddings.narrow(0, pick(t), 1))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&parts, 0)
            };
            Some(triplet_loss_var(
                gather(|t| t.0)?,
                gather(|t| t.1)?,
                gather(|t| t.2)?,
            )?)
        } else {
            None
        };
        let mut total = total_loss_var(mmae_f, corr, triplet, w)?;
        if self.cfg.aux_weight > 0.0 {
            let aux = mmae_var(truth, rows(out.global)?, w.epsilon)?.add(mmae_var(
                truth,
                rows(out.local)?,
                w.epsilon,
            )?)?;
            total = total.add(aux.scale(self.cfg.aux_weight * w.alpha1))?;
        }
        let log = StepLog {
            step,
            mmae: mmae_f.item()?,
            corr: corr.map(|c| c.item()).transpose()?.unwrap_or(0.0),
            triplet: triplet.map(|t| t.item()).transpose()?.unwrap_or(0.0),
            total: total.item()?,
            lr: self.lr_at(step),
        };
        if ![log.mmae, log.corr, log.triplet, log.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "training loss at step {step}: mmae {} corr {} triplet {} total {}",
                log.mmae, log.corr, log.triplet, log.total
            )));
        }
        Ok((total, log))
    }

    /// One optimization step; returns the batch losses before the update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (grads, log) = {
            let tape = Tape::new();
            let p = self.model.store.bind(&tape);
            let (total, log) = self.batch_objective(&tape, &p, step)?;
            tape.backward(total)?;
            (p.grads(), log)
        };
        self.adam.step(&mut self.model.store, &grads, log.lr)?;
        self.step += 1;
        Ok(log)
    }

    /// Fused-motion MMAE over every step of every validation scan.
    pub fn validation_mmae(&self) -> Result<f64> {
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for scan in &self.val {
            let est = predict_scan(&self.model, scan.frames)?;
            truth.extend_from_slice(&scan.motions);
            pred.extend(est.estimates.iter().map(|m| m.fused));
        }
        mmae(&truth, &pred, self.cfg.weights.epsilon)
    }

    /// Records a validation result; true when it is a new best.
    pub fn record_validation(&mut self, value: f64) -> bool {
        let better = self.best.is_none_or(|(_, b)| value < b);
        if better {
            self.best = Some((self.step, value));
        }
        better
    }
}

/// Runs `trainer` to completion, writing into `dir`: the step log, the
/// validation log, `best.ckpt` (lowest validation MMAE) and `last.ckpt`
/// (full resumable state, refreshed at every validation). A resumed trainer
/// truncates the logs to its checkpointed step and appends from there.
pub fn train_to_dir(trainer: &mut Trainer<'_>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (log_path, val_path) = (dir.join(TRAIN_LOG_FILE), dir.join(VALIDATION_LOG_FILE));
    let start = trainer.step;
    truncate_log(&log_path, TRAIN_LOG_HEADER, |s| s < start)?;
    truncate_log(&val_path, VALIDATION_LOG_HEADER, |s| s <= start && start > 0)?;
    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&log_path)?);
    let mut val_log = BufWriter::new(OpenOptions::new().append(true).open(&val_path)?);
    let validate = |t: &mut Trainer<'_>, val_log: &mut BufWriter<File>| -> Result<()> {
        let v = t.validation_mmae()?;
        writeln!(val_log, "{},{v}", t.step)?;
        val_log.flush()?;
        if t.record_validation(v) {
            t.model.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
        }
        t.checkpoint().save(&dir.join(LAST_CHECKPOINT))
    };
    if start == 0 {
        validate(trainer, &mut val_log)?;
    }
    while trainer.step < trainer.cfg.steps {
        let row = trainer.train_step()?;
        writeln!(log, "{}", row.csv_row())?;
        if trainer.step.is_multiple_of(trainer.cfg.val_every) || trainer.step == trainer.cfg.steps {
            log.flush()?;
            validate(trainer, &mut val_log)?;
        }
    }
    log.flush()?;
    Ok(())
}

/// Rewrites a CSV log keeping the header and the rows whose first field
/// satisfies `keep`; creates it with just the header when absent.
fn truncate_log(path: &Path, header: &str, keep: impl Fn(usize) -> bool) -> Result<()> {
    let mut lines = vec![header.to_string()];
    if path.exists() {
        for line in crate::io::open_read(path)?.lines().skip(1) {
            let line = line?;
            let step: usize = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("training log", format!("bad row {line:?}")))?;
            if keep(step) {
                lines.push(line);
            }
        }
    }
    crate::io::write_file(path, lines.join("\n") + "\n")?;
    Ok(())
}

/// Start frame and step count of the inference windows tiling `n_frames`:
/// windows of `steps` motions each, consecutive windows sharing one frame;
/// the last may be shorter.
pub fn inference_windows(n_frames: usize, steps: usize) -> Vec<(usize, usize)> {
    let total = n_frames.saturating_sub(1);
    (0..total)
        .step_by(steps.max(1))
        .map(|start| (start, steps.max(1).min(total - start)))
        .collect()
}

/// Model predictions for a whole scan.
#[derive(Clone, Debug)]
pub struct ScanPrediction {
    /// One estimate per consecutive frame pair.
    pub estimates: Vec<MotionEstimate>,
    /// Block cosine scores per step (attention models only).
    pub scores: Option<Vec<Vec<f64>>>,
}

impl ScanPrediction {
    pub fn fused(&self) -> Vec<PoseVector> {
        self.estimates.iter().map(|m| m.fused).collect()
    }
}

/// Predicts every step of a scan, window by window (windows of the model's
/// `s + 1` steps, LSTM state reset per window as in training). Windows are
/// independent and evaluated in parallel; the result does not depend on
/// scheduling.
pub fn predict_scan(model: &Model, frames: &[Vec<f32>]) -> Result<ScanPrediction> {
    if frames.len() < 2 {
        return Err(Error::invalid("a scan needs at least two frames"));
    }
    let windows = inference_windows(frames.len(), model.cfg.window_steps());
    let parts = windows
        .par_iter()
        .map(|&(start, steps)| {
            let w: Vec<&[f32]> = frames[start..=start + steps].iter().map(Vec::as_slice).collect();
            model.predict_window(&w)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut estimates = Vec::with_capacity(frames.len() - 1);
    let mut scores = model.has_attention().then(Vec::new);
    for (est, s) in parts {
        estimates.extend(est);
        if let Some(all) = scores.as_mut() {
            all.extend(attention_grids(s.as_ref())?);
        }
    }
    Ok(ScanPrediction { estimates, scores })
}

/// The zero-motion predictor.
pub fn zero_motion(steps: usize) -> Vec<PoseVector> {
    vec![PoseVector::zero(); steps]
}

/// Componentwise mean of every relative motion of the given scans.
pub fn mean_motion(scans: &[&ScanSequence]) -> Result<PoseVector> {
    let mut sum = [0.0f64; 6];
    let mut n = 0usize;
    for s in scans {
        for m in s.relative_poses()? {
            for (acc, v) in sum.iter_mut().zip(m.to_array()) {
                *acc += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no motions to average"));
    }
    Ok(PoseVector::from_array(sum.map(|v| v / n as f64)))
}
