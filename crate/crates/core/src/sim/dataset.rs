//! Collections of simulated scans with randomized sweep parameters.
//!
//! Scan `i` of a dataset uses its own seed derived from the dataset seed and
//! is tagged with its own subject, so splitting by subject is splitting by
//! scan. A dataset directory holds one scan directory per scan
//! (`scan_000`, `scan_001`, ...).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{read_scan, simulate_scan, write_scan, ScanSequence, SimConfig, TrajectoryShape, FRAMES_FILE};
use crate::error::{Error, Result};

/// Randomization ranges applied on top of a base simulator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub base: SimConfig,
    pub n_scans: usize,
    /// Mean elevational step, drawn uniformly per scan.
    pub step_range_mm: (f64, f64),
    pub lateral_amplitude_range_mm: (f64, f64),
    pub tilt_range_deg: (f64, f64),
    /// Sweep shapes drawn uniformly per scan.
    pub shapes: Vec<TrajectoryShape>,
}

impl DatasetSpec {
    /// Toy-scale defaults: 64×64 frames, 200 frames per scan, steps in
    /// [0.1, 0.3] mm. Shorter scans let a toy network memorize the per-frame
    /// jitter of its few training windows instead of learning motion.
    pub fn toy(n_scans: usize) -> Self {
        Self {
            base: SimConfig {
                image_extent: 64,
                n_frames: 200,
                ..SimConfig::default()
            },
            n_scans,
            step_range_mm: (0.1, 0.3),
            lateral_amplitude_range_mm: (0.0, 2.0),
            tilt_range_deg: (0.0, 3.0),
            shapes: vec![
                TrajectoryShape::Linear,
                TrajectoryShape::SCurve,
                TrajectoryShape::CCurve,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scans == 0 {
            return Err(Error::invalid("a dataset needs at least one scan"));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("no sweep shapes to draw from"));
        }
        for (name, (lo, hi)) in [
            ("step", self.step_range_mm),
            ("lateral amplitude", self.lateral_amplitude_range_mm),
            ("tilt", self.tilt_range_deg),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::invalid(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        if self.step_range_mm.0 <= 0.0 {
            return Err(Error::invalid("steps must be positive"));
        }
        Ok(())
    }

    /// Configuration, seed and subject tag of scan `i`.
    pub fn scan_config(&self, seed: u64, i: usize) -> (SimConfig, u64, String) {
        let scan_seed = seed
            .wrapping_mul(0x2545_F491_4F6C_DD1D)
            .wrapping_add(i as u64)
            .rotate_left(23);
        let mut rng = ChaCha8Rng::seed_from_u64(scan_seed);
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let step_mm = draw(self.step_range_mm);
        let lateral_amplitude_mm = draw(self.lateral_amplitude_range_mm);
        let tilt_deg = draw(self.tilt_range_deg);
        let shape = self.shapes[rng.random_range(0..self.shapes.len())];
        let cfg = SimConfig {
            shape,
            step_mm,
            lateral_amplitude_mm,
            tilt_deg,
            ..self.base.clone()
        };
        (cfg, scan_seed, format!("subject_{i:03}"))
    }
}

/// Simulates every scan of `spec` (in parallel; the result is independent of
/// scheduling).
pub fn simulate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<ScanSequence>> {
    spec.validate()?;
    (0..spec.n_scans)
        .into_par_iter()
        .map(|i| {
            let (cfg, scan_seed, subject) = spec.scan_config(seed, i);
            simulate_scan(&cfg, scan_seed, &subject)
        })
        .collect()
}

/// Directory name of scan `i`.
pub fn scan_dir_name(i: usize) -> String {
    format!("scan_{i:03}")
}

pub fn write_dataset(dir: &Path, scans: &[ScanSequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, scan) in scans.iter().enumerate() {
        write_scan(&dir.join(scan_dir_name(i)), scan)?;
    }
    Ok(())
}

/// Scan directories below `dir` (those holding a frames container), sorted
/// by name; `dir` itself counts when it is a scan directory.
pub fn scan_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(FRAMES_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join(FRAMES_FILE).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every scan below `dir`, sorted by directory name.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, ScanSequence)>> {
    scan_dirs(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, read_scan(&p)?))
        })
        .collect()
}
