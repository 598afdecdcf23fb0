//! Toy-scale training experiment: simulated dataset, subject split, training
//! of the full model and of the pooling ablation, and comparison against
//! the zero-motion and mean-motion predictors on the validation scans.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::losses::mmae;
use crate::metrics::{evaluate, relative_error, MetricsReport};
use crate::network::{Model, ModelConfig};
use crate::pose::{accumulate_poses, PoseVector};
use crate::sim::{simulate_dataset, DatasetSpec, ScanSequence};
use crate::train::{
    mean_motion, predict_scan, split_by_subject, subject_of, train_to_dir, zero_motion, TrainConfig, Trainer,
};

/// Scores of one predictor on the validation scans.
#[derive(Clone, Debug)]
pub struct PredictorSummary {
    pub name: String,
    /// rAE pooled over every validation step.
    pub rae: f64,
    /// MMAE pooled over every validation step.
    pub mmae: f64,
    /// Full metrics per validation scan.
    pub per_scan: Vec<MetricsReport>,
}

impl PredictorSummary {
    pub fn mean_afe(&self) -> f64 {
        self.per_scan.iter().map(|m| m.aFE).sum::<f64>() / self.per_scan.len() as f64
    }

    pub fn mean_fdr(&self) -> f64 {
        self.per_scan.iter().map(|m| m.fdr).sum::<f64>() / self.per_scan.len() as f64
    }
}

/// Scores per-scan relative-motion predictions against the truth.
pub fn summarize(
    name: &str,
    scans: &[&ScanSequence],
    predictions: &[Vec<PoseVector>],
    epsilon: f64,
) -> Result<PredictorSummary> {
    let (mut truth, mut pred, mut per_scan) = (Vec::new(), Vec::new(), Vec::new());
    for (scan, p) in scans.iter().zip(predictions) {
        let t = scan.relative_poses()?;
        per_scan.push(evaluate(
            &scan.trajectory()?,
            &accumulate_poses(p)?,
            &scan.geometry,
        )?);
        truth.extend(t);
        pred.extend_from_slice(p);
    }
    Ok(PredictorSummary {
        name: name.to_string(),
        rae: relative_error(&truth, &pred)?,
        mmae: mmae(&truth, &pred, epsilon)?,
        per_scan,
    })
}

/// Outcome of one model training within the experiment.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub summary: PredictorSummary,
    /// Validation MMAE before the first update and after the last.
    pub initial_val_mmae: f64,
    pub final_val_mmae: f64,
    pub seconds: f64,
}

/// Experiment parameters.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    /// 40 scans (30 train / 10 validation subjects), toy model, 2000 steps.
    pub fn toy() -> Self {
        Self {
            dataset: DatasetSpec::toy(40),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Simulated scans split into (train, validation).
pub struct ExperimentData {
    pub scans: Vec<ScanSequence>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let scans = simulate_dataset(&cfg.dataset, cfg.seed)?;
        let subjects: Vec<String> = scans
            .iter()
            .enumerate()
            .map(|(i, s)| subject_of(s, &i.to_string()))
            .collect();
        let split = split_by_subject(&subjects, cfg.train.val_fraction)?;
        Ok(Self {
            scans,
            train: split.train,
            val: split.val,
        })
    }

    pub fn train_scans(&self) -> Vec<&ScanSequence> {
        self.train.iter().map(|&i| &self.scans[i]).collect()
    }

    pub fn val_scans(&self) -> Vec<&ScanSequence> {
        self.val.iter().map(|&i| &self.scans[i]).collect()
    }

    /// Zero-motion and training-mean predictors on the validation scans.
    pub fn trivial_baselines(&self, epsilon: f64) -> Result<[PredictorSummary; 2]> {
        let val = self.val_scans();
        let steps: Vec<usize> = val.iter().map(|s| s.len() - 1).collect();
        let zero: Vec<_> = steps.iter().map(|&n| zero_motion(n)).collect();
        let mean = mean_motion(&self.train_scans())?;
        let mean: Vec<_> = steps.iter().map(|&n| vec![mean; n]).collect();
        Ok([
            summarize("zero-motion", &val, &zero, epsilon)?,
            summarize("mean-motion", &val, &mean, epsilon)?,
        ])
    }

    /// Trains `model_cfg` from the experiment seed, writing logs and
    /// checkpoints into `dir`, and scores the final model.
    pub fn train_and_score(
        &self,
        name: &str,
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        seed: u64,
        dir: &Path,
    ) -> Result<TrainedRun> {
        let started = Instant::now();
        let (train, val) = (self.train_scans(), self.val_scans());
        let model = Model::new(model_cfg.clone(), seed)?;
        let mut trainer = Trainer::new(model, train_cfg.clone(), &train, &val)?;
        let initial_val_mmae = trainer.validation_mmae()?;
        train_to_dir(&mut trainer, dir)?;
        let final_val_mmae = trainer.validation_mmae()?;
        let preds = val
            .iter()
            .map(|s| Ok(predict_scan(&trainer.model, &s.frames)?.fused()))
            .collect::<Result<Vec<_>>>()?;
        let summary = summarize(name, &val, &preds, train_cfg.weights.epsilon)?;
        Ok(TrainedRun {
            summary,
            initial_val_mmae,
            final_val_mmae,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Markdown table row per predictor plus per-scan FDR columns.
pub fn report_table(rows: &[&PredictorSummary]) -> String {
    let mut s =
        String::from("| predictor | rAE | MMAE | mean aFE (mm) | mean FDR (%) |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.5} | {:.5} | {:.4} | {:.2} |",
            r.name,
            r.rae,
            r.mmae,
            r.mean_afe(),
            r.mean_fdr()
        );
    }
    s.push_str("\nPer-scan FDR (%):\n\n| scan |");
    for r in rows {
        let _ = write!(s, " {} |", r.name);
    }
    s.push_str("\n|---|");
    for _ in rows {
        s.push_str("---|");
    }
    s.push('\n');
    let n = rows.first().map_or(0, |r| r.per_scan.len());
    for i in 0..n {
        let _ = write!(s, "| {i} |");
        for r in rows {
            let _ = write!(s, " {:.2} |", r.per_scan[i].fdr);
        }
        s.push('\n');
    }
    s
}
