//! Volume compounding: nearest-voxel splatting of tracked frames with a
//! running mean per voxel, optional inverse-distance hole filling, and the
//! FVL1 volume container.
//!
//! Voxel `(i, j, k)` is centred at `origin + (i, j, k) · voxel_mm` in world
//! millimetres; storage is x fastest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{grid_local_points, GridSampling, ImageGeometry, Trajectory};

pub const VOLUME_MAGIC: &[u8; 4] = b"FVL1";

/// Accumulated splats: per-voxel intensity sum and hit count.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_mm: f64,
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_mm: f64) -> Result<Self> {
        if !(voxel_mm > 0.0 && voxel_mm.is_finite()) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if dims.contains(&0) || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("volume needs positive dims and a finite origin"));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| *n <= 1 << 31)
            .ok_or_else(|| Error::invalid(format!("volume {dims:?} is too large")))?;
        Ok(Self {
            dims,
            origin,
            voxel_mm,
            sum: vec![0.0; n],
            count: vec![0; n],
        })
    }

    /// Grid covering `points` with a one-voxel margin on every side.
    pub fn bounding(points: &[Point3<f64>], voxel_mm: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("no points to bound"));
        }
        if !(voxel_mm > 0.0 && voxel_mm.is_finite()) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let origin = [lo[0] - voxel_mm, lo[1] - voxel_mm, lo[2] - voxel_mm];
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / voxel_mm).round() as usize + 3);
        Self::new(dims, origin, voxel_mm)
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Nearest voxel of a world point, if inside the grid.
    pub fn voxel_of(&self, p: &Point3<f64>) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_mm).round();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            ijk[a] = f as usize;
        }
        Some(self.index(ijk))
    }

    /// Mean intensity of a voxel (0 when empty).
    pub fn mean(&self, idx: usize) -> f64 {
        match self.count[idx] {
            0 => 0.0,
            n => self.sum[idx] / n as f64,
        }
    }

    pub fn values(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.mean(i) as f32).collect()
    }

    /// Fraction of voxels hit at least once.
    pub fn occupancy(&self) -> f64 {
        self.count.iter().filter(|c| **c > 0).count() as f64 / self.len() as f64
    }

    /// Total splatted intensity (count-weighted sum of voxel means).
    pub fn total_mass(&self) -> f64 {
        self.sum.iter().sum()
    }
}

fn check_inputs(frames: &[Vec<f32>], geom: &ImageGeometry, traj: &Trajectory) -> Result<()> {
    geom.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("cannot compound an empty scan"));
    }
    if frames.len() != traj.len() {
        return Err(Error::invalid(format!(
            "{} frames but a trajectory of {}",
            frames.len(),
            traj.len()
        )));
    }
    if frames.iter().any(|f| f.len() != geom.rows * geom.cols) {
        return Err(Error::invalid("frame size does not match the geometry"));
    }
    Ok(())
}

/// World positions of every pixel of every frame (frame-major, row-major).
pub fn world_points(geom: &ImageGeometry, traj: &Trajectory) -> Vec<Vec<Point3<f64>>> {
    let local = grid_local_points(geom, GridSampling::Full);
    traj.transforms()
        .par_iter()
        .map(|t| local.iter().map(|p| t.apply(p)).collect())
        .collect()
}

/// Splats every pixel onto its nearest voxel of an existing grid. Returns
/// the number of pixels that fell outside the grid. Frames are accumulated
/// in order, so the result does not depend on the thread count.
pub fn compound_into(
    grid: &mut VolumeGrid,
    frames: &[Vec<f32>],
    geom: &ImageGeometry,
    traj: &Trajectory,
) -> Result<usize> {
    check_inputs(frames, geom, traj)?;
    let points = world_points(geom, traj);
    let mut dropped = 0;
    for (frame, pts) in frames.iter().zip(&points) {
        let targets: Vec<Option<usize>> = pts.par_iter().map(|p| grid.voxel_of(p)).collect();
        for (v, t) in frame.iter().zip(targets) {
            match t {
                Some(i) => {
                    grid.sum[i] += *v as f64;
                    grid.count[i] += 1;
                }
                None => dropped += 1,
            }
        }
    }
    Ok(dropped)
}

/// Compounds a tracked scan onto an auto-fitted grid (one-voxel margin).
pub fn compound(
    frames: &[Vec<f32>],
    geom: &ImageGeometry,
    traj: &Trajectory,
    voxel_mm: f64,
) -> Result<VolumeGrid> {
    check_inputs(frames, geom, traj)?;
    let points: Vec<Point3<f64>> = world_points(geom, traj).into_iter().flatten().collect();
    let mut grid = VolumeGrid::bounding(&points, voxel_mm)?;
    let dropped = compound_into(&mut grid, frames, geom, traj)?;
    debug_assert_eq!(dropped, 0);
    Ok(grid)
}

/// Fills empty voxels that have at least one filled voxel within `radius`
/// (Euclidean, in voxels) with the inverse-distance-weighted mean of those
/// neighbours. Filled voxels are untouched; a filled hole holds its value
/// with count 1. Only originally filled voxels act as sources.
pub fn fill_holes(vol: &VolumeGrid, radius: usize) -> Result<VolumeGrid> {
    if radius == 0 {
        return Err(Error::invalid("hole-filling radius must be at least 1"));
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize, isize, f64)> = (-r..=r)
        .flat_map(|k| (-r..=r).flat_map(move |j| (-r..=r).map(move |i| (i, j, k))))
        .filter_map(|(i, j, k)| {
            let d = ((i * i + j * j + k * k) as f64).sqrt();
            (d > 0.0 && d <= radius as f64).then_some((i, j, k, 1.0 / d))
        })
        .collect();
    let [nx, ny, nz] = vol.dims;
    let filled: Vec<Option<f64>> = (0..vol.len())
        .into_par_iter()
        .map(|idx| {
            if vol.count[idx] > 0 {
                return None;
            }
            let (i, j, k) = (
                (idx % nx) as isize,
                ((idx / nx) % ny) as isize,
                (idx / (nx * ny)) as isize,
            );
            let (mut wsum, mut vsum) = (0.0, 0.0);
            for (di, dj, dk, w) in &offsets {
                let (a, b, c) = (i + di, j + dj, k + dk);
                if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                    continue;
                }
                let n = vol.index([a as usize, b as usize, c as usize]);
                if vol.count[n] > 0 {
                    wsum += w;
                    vsum += w * vol.mean(n);
                }
            }
            (wsum > 0.0).then(|| vsum / wsum)
        })
        .collect();
    let mut out = vol.clone();
    for (idx, v) in filled.into_iter().enumerate() {
        if let Some(v) = v {
            out.sum[idx] = v;
            out.count[idx] = 1;
        }
    }
    Ok(out)
}

/// A volume as stored on disk: means only.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeData {
    pub dims: [usize; 3],
    pub voxel_mm: f32,
    pub origin: [f32; 3],
    pub values: Vec<f32>,
}

impl VolumeData {
    pub fn from_grid(g: &VolumeGrid) -> Self {
        Self {
            dims: g.dims,
            voxel_mm: g.voxel_mm as f32,
            origin: g.origin.map(|o| o as f32),
            values: g.values(),
        }
    }
}

/// Writes the FVL1 container.
pub fn write_volume<W: Write>(mut w: W, v: &VolumeData) -> Result<()> {
    if v.values.len() != v.dims.iter().product::<usize>() {
        return Err(Error::invalid("volume values do not match its dims"));
    }
    w.write_all(VOLUME_MAGIC)?;
    for d in v.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("volume dim exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&v.voxel_mm.to_le_bytes())?;
    for o in v.origin {
        w.write_all(&o.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(v.values.len() * 4);
    for x in &v.values {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_volume<R: Read>(mut r: R) -> Result<VolumeData> {
    let bad = |d: &str| Error::format("FVL1 volume", d);
    let mut head = [0u8; 32];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != VOLUME_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| -> [u8; 4] { head[i..i + 4].try_into().expect("4 bytes") };
    let dims = [4, 8, 12].map(|i| u32::from_le_bytes(word(i)) as usize);
    let voxel_mm = f32::from_le_bytes(word(16));
    let origin = [20, 24, 28].map(|i| f32::from_le_bytes(word(i)));
    let n = dims
        .iter()
        .try_fold(1usize, |a, d| a.checked_mul(*d))
        .ok_or_else(|| bad("dims overflow"))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * 4 {
        return Err(bad("payload size does not match dims"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(VolumeData {
        dims,
        voxel_mm,
        origin,
        values,
    })
}

/// Which poses placed the frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectorySource {
    Truth,
    Predicted,
    Baseline,
}

impl std::str::FromStr for TrajectorySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(Self::Truth),
            "predicted" => Ok(Self::Predicted),
            "baseline" => Ok(Self::Baseline),
            _ => Err(Error::invalid(format!(
                "unknown trajectory source {s:?} (truth, predicted, baseline)"
            ))),
        }
    }
}

/// JSON sidecar written next to every volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeProvenance {
    pub scan: String,
    pub trajectory_source: TrajectorySource,
    pub poses: String,
    pub frames: usize,
    pub dims: [usize; 3],
    pub voxel_mm: f64,
    pub origin_mm: [f64; 3],
    pub occupancy: f64,
    pub hole_fill_radius: Option<usize>,
}

/// Writes `<stem>.fvl` and `<stem>.json` in `dir`.
pub fn save_volume(dir: &Path, stem: &str, v: &VolumeData, prov: &VolumeProvenance) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_volume(&mut buf, v)?;
    crate::io::write_file(&dir.join(format!("{stem}.fvl")), buf)?;
    let json =
        serde_json::to_string_pretty(prov).map_err(|e| Error::format("volume sidecar", e.to_string()))?;
    crate::io::write_file(&dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}
