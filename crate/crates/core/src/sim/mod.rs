//! Synthetic freehand scans: speckle phantom, parametric sweeps, slicing and
//! the on-disk scan container.
//!
//! A scan directory holds `frames.bin` (FUS1 container), `poses.csv` (ground
//! truth absolute poses, frame 0 = zero pose) and optionally `meta.json`
//! (simulation provenance, including the subject tag used for splitting).

mod dataset;
mod phantom;
mod trajectory;

pub use dataset::{read_dataset, scan_dir_name, scan_dirs, simulate_dataset, write_dataset, DatasetSpec};
pub use phantom::{
    make_phantom, Inclusion, Phantom, PhantomSpec, PSF_TRUNCATION_SIGMAS, SCATTERERS_PER_CELL,
};
pub use trajectory::{make_trajectory, GeneratedTrajectory, TrajectoryShape, TrajectorySpec};

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{read_poses_csv, write_poses_csv, ImageGeometry, PoseVector, Trajectory};

pub const FRAMES_MAGIC: &[u8; 4] = b"FUS1";
pub const FRAMES_FILE: &str = "frames.bin";
pub const POSES_FILE: &str = "poses.csv";
pub const META_FILE: &str = "meta.json";

/// Provenance of a simulated scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    /// Scans sharing a subject never straddle the train/validation split.
    pub subject: String,
    pub seed: u64,
    pub shape: String,
    pub mean_step_mm: f64,
}

/// Ordered frames with geometry and ground-truth absolute poses.
#[derive(Clone, Debug)]
pub struct ScanSequence {
    pub geometry: ImageGeometry,
    pub frame_rate_hz: f64,
    /// Row-major `rows × cols` intensities in [0, 1].
    pub frames: Vec<Vec<f32>>,
    /// Absolute truth poses; frame 0 is the zero pose.
    pub poses: Vec<PoseVector>,
    pub meta: Option<ScanMeta>,
}

impl ScanSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::from_poses(&self.poses)
    }

    pub fn relative_poses(&self) -> Result<Vec<PoseVector>> {
        Ok(self.trajectory()?.relative_poses())
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.frames.len() != self.poses.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} poses",
                self.frames.len(),
                self.poses.len()
            )));
        }
        let n = self.geometry.rows * self.geometry.cols;
        if let Some(i) = self.frames.iter().position(|f| f.len() != n) {
            return Err(Error::invalid(format!("frame {i} has the wrong size")));
        }
        Ok(())
    }
}

/// Rounds a geometry to the f32 precision of the FUS1 header so that written
/// and re-read scans agree exactly.
pub fn storable_geometry(g: &ImageGeometry) -> Result<ImageGeometry> {
    ImageGeometry::new(
        g.rows,
        g.cols,
        g.pitch_axial as f32 as f64,
        g.pitch_lateral as f32 as f64,
    )
}

/// Renders every frame of `traj` from `phantom` (frames in parallel; the result
/// does not depend on the thread count).
pub fn slice(phantom: &Phantom, traj: &Trajectory, geom: &ImageGeometry) -> Result<Vec<Vec<f32>>> {
    if let Some(frame) = traj
        .transforms()
        .iter()
        .position(|t| !phantom.covers_frame(t, geom))
    {
        return Err(Error::OutOfBounds { frame });
    }
    traj.transforms()
        .par_iter()
        .map(|t| phantom.render_frame(t, geom))
        .collect()
}

/// Parameters of one simulated scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub image_extent: usize,
    pub pitch_mm: f64,
    pub frame_rate_hz: f64,
    pub shape: TrajectoryShape,
    pub n_frames: usize,
    pub step_mm: f64,
    pub lateral_amplitude_mm: f64,
    pub speed_variation: f64,
    pub tilt_deg: f64,
    pub jitter_sigma: [f64; 6],
    pub psf_sigma_mm: [f64; 3],
    pub density_per_mm3: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_extent: 256,
            pitch_mm: ImageGeometry::DEFAULT_PITCH_MM,
            frame_rate_hz: 30.0,
            shape: TrajectoryShape::SCurve,
            n_frames: 200,
            step_mm: 0.2,
            lateral_amplitude_mm: 2.0,
            speed_variation: 0.3,
            tilt_deg: 2.0,
            jitter_sigma: [0.01, 0.01, 0.01, 0.1, 0.1, 0.1],
            psf_sigma_mm: PhantomSpec::DEFAULT_PSF_SIGMA_MM,
            density_per_mm3: PhantomSpec::DEFAULT_DENSITY,
        }
    }
}

impl SimConfig {
    pub fn geometry(&self) -> Result<ImageGeometry> {
        storable_geometry(&ImageGeometry::square(self.image_extent, self.pitch_mm)?)
    }

    pub fn trajectory_spec(&self, seed: u64) -> TrajectorySpec {
        TrajectorySpec {
            shape: self.shape,
            n_frames: self.n_frames,
            length_mm: self.step_mm * self.n_frames.saturating_sub(1) as f64,
            lateral_amplitude_mm: self.lateral_amplitude_mm,
            speed_variation: self.speed_variation,
            tilt_deg: self.tilt_deg,
            jitter_sigma: self.jitter_sigma,
            seed,
        }
    }
}

/// Independent phantom seed derived from the scan seed.
fn phantom_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ 0x5EED_F00D
}

/// Simulates one scan: sweep, auto-fitted phantom, slicing.
pub fn simulate_scan(cfg: &SimConfig, seed: u64, subject: &str) -> Result<ScanSequence> {
    if !(cfg.frame_rate_hz > 0.0 && cfg.frame_rate_hz.is_finite()) {
        return Err(Error::invalid("frame rate must be positive"));
    }
    let geom = cfg.geometry()?;
    let gen = make_trajectory(&cfg.trajectory_spec(seed))?;
    let mut spec = PhantomSpec::fit(gen.trajectory.transforms(), &geom)?;
    spec.psf_sigma_mm = cfg.psf_sigma_mm;
    spec.density_per_mm3 = cfg.density_per_mm3;
    let phantom = make_phantom(spec, phantom_seed(seed))?;
    let frames = slice(&phantom, &gen.trajectory, &geom)?;
    Ok(ScanSequence {
        geometry: geom,
        frame_rate_hz: cfg.frame_rate_hz as f32 as f64,
        frames,
        poses: gen.poses,
        meta: Some(ScanMeta {
            subject: subject.to_string(),
            seed,
            shape: cfg.shape.to_string(),
            mean_step_mm: cfg.step_mm,
        }),
    })
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} exceeds u32")))
}

/// Writes the FUS1 frame container.
pub fn write_frames<W: Write>(mut w: W, scan: &ScanSequence) -> Result<()> {
    scan.validate()?;
    let g = &scan.geometry;
    w.write_all(FRAMES_MAGIC)?;
    put_u32(&mut w, to_u32(scan.len(), "frame count")?)?;
    put_u32(&mut w, to_u32(g.rows, "rows")?)?;
    put_u32(&mut w, to_u32(g.cols, "cols")?)?;
    for v in [g.pitch_axial, g.pitch_lateral, scan.frame_rate_hz] {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(g.rows * g.cols * 4);
    for f in &scan.frames {
        buf.clear();
        for v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Parsed FUS1 container: geometry, frame rate and frames.
pub fn read_frames<R: Read>(mut r: R) -> Result<(ImageGeometry, f64, Vec<Vec<f32>>)> {
    let bad = |d: String| Error::format("frames.bin", d);
    let mut head = [0u8; 28];
    r.read_exact(&mut head)
        .map_err(|_| bad("truncated header".into()))?;
    if &head[..4] != FRAMES_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let f = |i: usize| f32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as f64;
    let (n, rows, cols) = (u(4), u(8), u(12));
    let geom = ImageGeometry::new(rows, cols, f(16), f(20)).map_err(|e| bad(format!("geometry: {e}")))?;
    let rate = f(24);
    let px = rows
        .checked_mul(cols)
        .ok_or_else(|| bad("frame size overflow".into()))?;
    let mut frames = Vec::with_capacity(n.min(1 << 16));
    let mut buf = vec![0u8; px * 4];
    for i in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated at frame {i}")))?;
        let frame: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if frame.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad(format!("frame {i} has values outside [0, 1]")));
        }
        frames.push(frame);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok((geom, rate, frames))
}

/// Writes `frames.bin`, `poses.csv` and (if present) `meta.json` into `dir`.
pub fn write_scan(dir: &Path, scan: &ScanSequence) -> Result<()> {
    scan.validate()?;
    fs::create_dir_all(dir)?;
    let mut w = crate::io::create_write(&dir.join(FRAMES_FILE))?;
    write_frames(&mut w, scan)?;
    w.flush()?;
    let mut w = crate::io::create_write(&dir.join(POSES_FILE))?;
    write_poses_csv(&mut w, &scan.poses)?;
    w.flush()?;
    if let Some(meta) = &scan.meta {
        let s = serde_json::to_string_pretty(meta).map_err(|e| Error::format("meta.json", e.to_string()))?;
        crate::io::write_file(&dir.join(META_FILE), s + "\n")?;
    }
    Ok(())
}

pub fn read_scan(dir: &Path) -> Result<ScanSequence> {
    let (geometry, frame_rate_hz, frames) = read_frames(crate::io::open_read(&dir.join(FRAMES_FILE))?)?;
    let poses = read_poses_csv(crate::io::open_read(&dir.join(POSES_FILE))?)?;
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        Some(
            serde_json::from_str(&crate::io::read_text(&meta_path)?)
                .map_err(|e| Error::format("meta.json", e.to_string()))?,
        )
    } else {
        None
    };
    let scan = ScanSequence {
        geometry,
        frame_rate_hz,
        frames,
        poses,
        meta,
    };
    scan.validate()?;
    scan.trajectory()?;
    Ok(scan)
}

/// Zero-mean, unit-norm NCC of two equally sized images.
pub fn image_ncc(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|v| *v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64 - ma, *y as f64 - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}
