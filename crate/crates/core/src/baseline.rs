//! Classical speckle-decorrelation tracking: in-plane translation from an
//! exhaustive NCC search with parabolic sub-pixel refinement, elevational
//! distance from a calibrated NCC-versus-gap curve. Rotations are not
//! estimated (reported as zero).
//!
//! Shift convention: if `b(r, c) = a(r + k_r, c + k_c)` (the probe moved by
//! `k_r` axial and `k_c` lateral pixels between `a` and `b`), the estimate is
//! `tx = k_r · pitch_axial`, `ty = k_c · pitch_lateral`.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pose::{ImageGeometry, PoseVector, TransformSE3};
use crate::sim::{make_phantom, PhantomSpec};

pub const CALIBRATION_CSV_HEADER: &str = "ncc,gap_mm";
/// Minimum number of calibration pairs.
pub const MIN_CALIBRATION_PAIRS: usize = 10;
/// A correlation peak this close to 1 is treated as an exact match: no
/// sub-pixel refinement and zero elevational gap.
pub const EXACT_MATCH_TOLERANCE: f64 = 1e-9;

/// Patch layout used for the elevational lookup: `grid × grid` patches of
/// `size × size` pixels spread evenly over the aligned overlap (patches
/// overlap when the overlap is smaller than `grid · size`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid: usize,
    pub size: usize,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self { grid: 5, size: 32 }
    }
}

/// In-plane search and patch parameters shared by calibration and estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselineParams {
    pub patches: PatchGrid,
    /// Integer search range in pixels along each in-plane axis.
    pub max_shift: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            patches: PatchGrid::default(),
            max_shift: 8,
        }
    }
}

impl BaselineParams {
    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.patches.grid == 0 || self.patches.size == 0 {
            return Err(Error::invalid("patch grid and size must be positive"));
        }
        if rows <= 2 * self.max_shift + 2 || cols <= 2 * self.max_shift + 2 {
            return Err(Error::invalid(format!(
                "{rows}x{cols} frames are too small for a ±{} pixel search",
                self.max_shift
            )));
        }
        Ok(())
    }
}

/// Calibrated decorrelation model: `(ncc, gap_mm)` points with gap strictly
/// increasing and NCC strictly decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct DecorrModel {
    table: Vec<(f64, f64)>,
    pub params: BaselineParams,
    /// Frame shape the model was calibrated on (unknown when loaded from CSV).
    pub frame_shape: Option<(usize, usize)>,
}

fn check_table(table: &[(f64, f64)]) -> Result<()> {
    if table.len() < 2 {
        return Err(Error::Calibration("the curve needs at least two points".into()));
    }
    if table
        .iter()
        .any(|(n, g)| !n.is_finite() || !g.is_finite() || *g < 0.0)
    {
        return Err(Error::Calibration("non-finite or negative table entry".into()));
    }
    for w in table.windows(2) {
        if !(w[1].1 > w[0].1) {
            return Err(Error::Calibration(format!(
                "gaps must increase strictly ({} then {})",
                w[0].1, w[1].1
            )));
        }
        if !(w[1].0 < w[0].0) {
            return Err(Error::Calibration(format!(
                "non-monotone decorrelation curve: NCC {} at {} mm but {} at {} mm",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    Ok(())
}

impl DecorrModel {
    pub fn from_table(table: Vec<(f64, f64)>, params: BaselineParams) -> Result<Self> {
        check_table(&table)?;
        Ok(Self {
            table,
            params,
            frame_shape: None,
        })
    }

    pub fn table(&self) -> &[(f64, f64)] {
        &self.table
    }

    /// Lowest calibrated NCC.
    pub fn floor(&self) -> f64 {
        self.table.last().expect("validated table").0
    }

    pub fn max_gap(&self) -> f64 {
        self.table.last().expect("validated table").1
    }

    /// Inverts the curve by linear interpolation. Returns `(gap_mm, flagged)`;
    /// NCC below the floor is flagged and clamped to the largest gap.
    pub fn lookup(&self, ncc: f64) -> (f64, bool) {
        let (top_ncc, top_gap) = self.table[0];
        if ncc >= top_ncc - EXACT_MATCH_TOLERANCE {
            return (top_gap, false);
        }
        if !(ncc >= self.floor()) {
            return (self.max_gap(), true);
        }
        // First point whose NCC is ≤ the query; the segment ends there.
        let j = self.table.partition_point(|(n, _)| *n > ncc);
        let (n0, g0) = self.table[j - 1];
        let (n1, g1) = self.table[j];
        let t = (n0 - ncc) / (n0 - n1);
        (g0 + t * (g1 - g0), false)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CALIBRATION_CSV_HEADER}")?;
        for (n, g) in &self.table {
            writeln!(w, "{n},{g}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, params: BaselineParams) -> Result<Self> {
        let bad = |d: String| Error::format("calibration CSV", d);
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != CALIBRATION_CSV_HEADER {
            return Err(bad(format!("expected header {CALIBRATION_CSV_HEADER:?}")));
        }
        let mut table = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 2 {
                return Err(bad(format!("line {}: expected 2 fields", i + 2)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("line {}: {e}", i + 2)))
            };
            table.push((parse(fields[0])?, parse(fields[1])?));
        }
        Self::from_table(table, params)
    }

    fn check_frames(&self, geom: &ImageGeometry) -> Result<()> {
        match self.frame_shape {
            Some(s) if s != (geom.rows, geom.cols) => Err(Error::Precondition(format!(
                "model calibrated on {}x{} frames, got {}x{}",
                s.0, s.1, geom.rows, geom.cols
            ))),
            _ => Ok(()),
        }
    }
}

/// Result of the in-plane search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InPlaneMatch {
    /// Integer argmax (axial, lateral) in pixels.
    pub shift: (isize, isize),
    /// Refined shift in pixels.
    pub refined: (f64, f64),
    pub peak: f64,
}

fn ncc_sums(a: &[f32], b: &[f32], n: f64) -> f64 {
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (sab - sa * sb / n) / (va * vb).sqrt()
}

/// NCC between `b[r0..r0+h, c0..c0+w]` and the same window of `a` displaced
/// by `(dr, dc)`.
#[allow(clippy::too_many_arguments)]
fn window_ncc(
    a: &[f32],
    b: &[f32],
    cols: usize,
    (r0, c0): (usize, usize),
    (h, w): (usize, usize),
    (dr, dc): (isize, isize),
    buf_a: &mut Vec<f32>,
    buf_b: &mut Vec<f32>,
) -> f64 {
    buf_a.clear();
    buf_b.clear();
    for r in r0..r0 + h {
        let ra = (r as isize + dr) as usize;
        let ca = (c0 as isize + dc) as usize;
        buf_b.extend_from_slice(&b[r * cols + c0..r * cols + c0 + w]);
        buf_a.extend_from_slice(&a[ra * cols + ca..ra * cols + ca + w]);
    }
    ncc_sums(buf_a, buf_b, (h * w) as f64)
}

fn parabolic(m: f64, p: f64, plus: f64) -> f64 {
    let denom = m - 2.0 * p + plus;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (m - plus) / denom).clamp(-0.5, 0.5)
}

/// Exhaustive integer NCC search over `±max_shift` pixels on the interior of
/// `b`, followed by independent 3-point parabolic refinement per axis.
pub fn match_in_plane(a: &[f32], b: &[f32], geom: &ImageGeometry, max_shift: usize) -> Result<InPlaneMatch> {
    let (rows, cols) = (geom.rows, geom.cols);
    if a.len() != rows * cols || b.len() != rows * cols {
        return Err(Error::invalid("frame size does not match the geometry"));
    }
    if rows <= 2 * max_shift + 2 || cols <= 2 * max_shift + 2 {
        return Err(Error::invalid("frames too small for the search range"));
    }
    let m = max_shift as isize;
    let side = 2 * max_shift + 1;
    let origin = (max_shift, max_shift);
    let size = (rows - 2 * max_shift, cols - 2 * max_shift);
    let scores: Vec<f64> = (0..side * side)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(ba, bb), k| {
                let d = ((k / side) as isize - m, (k % side) as isize - m);
                window_ncc(a, b, cols, origin, size, d, ba, bb)
            },
        )
        .collect();
    // First maximum in row-major order over (dr, dc).
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    let (ir, ic) = (best / side, best % side);
    let peak = scores[best];
    let at = |r: usize, c: usize| scores[r * side + c];
    let mut refined = ((ir as isize - m) as f64, (ic as isize - m) as f64);
    if peak < 1.0 - EXACT_MATCH_TOLERANCE {
        if ir > 0 && ir + 1 < side {
            refined.0 += parabolic(at(ir - 1, ic), peak, at(ir + 1, ic));
        }
        if ic > 0 && ic + 1 < side {
            refined.1 += parabolic(at(ir, ic - 1), peak, at(ir, ic + 1));
        }
    }
    Ok(InPlaneMatch {
        shift: (ir as isize - m, ic as isize - m),
        refined,
        peak,
    })
}

/// Evenly spread start offsets of `n` windows of length `size` in `len`.
fn patch_starts(len: usize, size: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![(len - size) / 2];
    }
    (0..n)
        .map(|k| ((k * (len - size)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Mean patch NCC between `b` and `a` displaced by the integer `shift`, over
/// the region where both frames overlap.
pub fn aligned_patch_ncc(
    a: &[f32],
    b: &[f32],
    geom: &ImageGeometry,
    shift: (isize, isize),
    patches: PatchGrid,
) -> Result<f64> {
    let (rows, cols) = (geom.rows as isize, geom.cols as isize);
    let (dr, dc) = shift;
    let r0 = (-dr).max(0);
    let r1 = (rows - dr).min(rows);
    let c0 = (-dc).max(0);
    let c1 = (cols - dc).min(cols);
    if r1 - r0 < 2 || c1 - c0 < 2 {
        return Err(Error::invalid("frames do not overlap after alignment"));
    }
    let (h, w) = ((r1 - r0) as usize, (c1 - c0) as usize);
    let (ph, pw) = (patches.size.min(h), patches.size.min(w));
    let rs = patch_starts(h, ph, patches.grid);
    let cs = patch_starts(w, pw, patches.grid);
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for r in &rs {
        for c in &cs {
            let origin = (r0 as usize + r, c0 as usize + c);
            total += window_ncc(a, b, geom.cols, origin, (ph, pw), shift, &mut ba, &mut bb);
        }
    }
    Ok(total / (rs.len() * cs.len()) as f64)
}

/// One baseline step estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepEstimate {
    pub pose: PoseVector,
    /// Mean patch NCC after integer alignment.
    pub ncc: f64,
    /// NCC fell below the calibrated floor; tz was clamped.
    pub flagged: bool,
}

/// Estimates the relative pose from `a` to `b`.
pub fn estimate_step(
    a: &[f32],
    b: &[f32],
    geom: &ImageGeometry,
    model: &DecorrModel,
) -> Result<StepEstimate> {
    model.check_frames(geom)?;
    model.params.validate(geom.rows, geom.cols)?;
    let m = match_in_plane(a, b, geom, model.params.max_shift)?;
    let ncc = aligned_patch_ncc(a, b, geom, m.shift, model.params.patches)?;
    let (tz, flagged) = model.lookup(ncc);
    Ok(StepEstimate {
        pose: PoseVector::new(
            m.refined.0 * geom.pitch_axial,
            m.refined.1 * geom.pitch_lateral,
            tz,
            0.0,
            0.0,
            0.0,
        ),
        ncc,
        flagged,
    })
}

/// Estimates every step of a frame sequence (N frames → N−1 steps).
pub fn estimate_sequence(
    frames: &[Vec<f32>],
    geom: &ImageGeometry,
    model: &DecorrModel,
) -> Result<Vec<StepEstimate>> {
    if frames.len() < 2 {
        return Err(Error::invalid("need at least two frames"));
    }
    frames
        .par_windows(2)
        .map(|w| estimate_step(&w[0], &w[1], geom, model))
        .collect()
}

/// A pair of frames with known elevational separation.
#[derive(Clone, Debug)]
pub struct CalibrationPair {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub gap_mm: f64,
}

/// Fits the decorrelation curve: per distinct gap, the mean aligned patch
/// NCC. A `(1, 0)` anchor is added when no zero-gap pairs are given.
pub fn calibrate(
    pairs: &[CalibrationPair],
    geom: &ImageGeometry,
    params: BaselineParams,
) -> Result<DecorrModel> {
    if pairs.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::Calibration(format!(
            "{} pairs given, at least {MIN_CALIBRATION_PAIRS} required",
            pairs.len()
        )));
    }
    params.validate(geom.rows, geom.cols)?;
    if pairs.iter().any(|p| !(p.gap_mm >= 0.0 && p.gap_mm.is_finite())) {
        return Err(Error::Calibration("gaps must be finite and nonnegative".into()));
    }
    let nccs: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            let m = match_in_plane(&p.a, &p.b, geom, params.max_shift)?;
            aligned_patch_ncc(&p.a, &p.b, geom, m.shift, params.patches)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|i, j| pairs[*i].gap_mm.total_cmp(&pairs[*j].gap_mm));
    let mut table: Vec<(f64, f64)> = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let gap = pairs[order[k]].gap_mm;
        let group: Vec<f64> = order[k..]
            .iter()
            .take_while(|i| pairs[**i].gap_mm == gap)
            .map(|i| nccs[*i])
            .collect();
        k += group.len();
        table.push((group.iter().sum::<f64>() / group.len() as f64, gap));
    }
    if table[0].1 > 0.0 {
        table.insert(0, (1.0, 0.0));
    }
    check_table(&table)?;
    Ok(DecorrModel {
        table,
        params,
        frame_shape: Some((geom.rows, geom.cols)),
    })
}

/// Simulator settings for generating calibration pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSim {
    pub geometry: ImageGeometry,
    pub gaps_mm: Vec<f64>,
    pub pairs_per_gap: usize,
    /// Standard deviation of the in-plane offset between the two frames of a
    /// pair (mm), so the curve includes residual sub-pixel misalignment.
    pub in_plane_jitter_mm: f64,
    pub psf_sigma_mm: [f64; 3],
    pub density_per_mm3: f64,
}

impl CalibrationSim {
    /// Gaps 0, 0.05, …, 0.5 mm with 8 pairs each.
    pub fn new(geometry: ImageGeometry) -> Self {
        Self {
            geometry,
            gaps_mm: (0..=10).map(|k| k as f64 / 20.0).collect(),
            pairs_per_gap: 8,
            in_plane_jitter_mm: 0.01,
            psf_sigma_mm: PhantomSpec::DEFAULT_PSF_SIGMA_MM,
            density_per_mm3: PhantomSpec::DEFAULT_DENSITY,
        }
    }
}

/// Renders calibration pairs from one seeded phantom, the way a stepped probe
/// is calibrated: each of `pairs_per_gap` separate phantom regions holds one
/// reference frame and, for every gap, one frame displaced by that gap (plus
/// in-plane jitter). Pairs from different regions share no scatterers.
pub fn simulate_calibration_pairs(cfg: &CalibrationSim, seed: u64) -> Result<Vec<CalibrationPair>> {
    if cfg.gaps_mm.is_empty() || cfg.pairs_per_gap == 0 {
        return Err(Error::invalid("no calibration gaps requested"));
    }
    if cfg.gaps_mm.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(Error::invalid("calibration gaps must be finite and nonnegative"));
    }
    if !(cfg.in_plane_jitter_mm >= 0.0 && cfg.in_plane_jitter_mm.is_finite()) {
        return Err(Error::invalid("jitter must be nonnegative"));
    }
    let max_gap = cfg.gaps_mm.iter().cloned().fold(0.0, f64::max);
    let spacing = max_gap + 6.0 * cfg.psf_sigma_mm[2] + 0.5;
    let jitter = Normal::new(0.0, cfg.in_plane_jitter_mm).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per region: the reference placement, then one placement per gap.
    let mut placements = Vec::new();
    for region in 0..cfg.pairs_per_gap {
        let z = region as f64 * spacing;
        placements.push(TransformSE3::from_translation(Vector3::new(0.0, 0.0, z)));
        for g in &cfg.gaps_mm {
            placements.push(TransformSE3::from_translation(Vector3::new(
                jitter.sample(&mut rng),
                jitter.sample(&mut rng),
                z + g,
            )));
        }
    }
    let mut spec = PhantomSpec::fit(&placements, &cfg.geometry)?;
    spec.psf_sigma_mm = cfg.psf_sigma_mm;
    spec.density_per_mm3 = cfg.density_per_mm3;
    let phantom = make_phantom(spec, seed ^ 0xCA11_B4A7)?;
    let frames: Vec<Vec<f32>> = placements
        .par_iter()
        .map(|t| phantom.render_frame(t, &cfg.geometry))
        .collect::<Result<_>>()?;
    Ok(frames
        .chunks(cfg.gaps_mm.len() + 1)
        .flat_map(|region| {
            let (reference, moved) = region.split_first().expect("reference frame");
            cfg.gaps_mm.iter().zip(moved).map(|(&gap_mm, b)| CalibrationPair {
                a: reference.clone(),
                b: b.clone(),
                gap_mm,
            })
        })
        .collect())
}
