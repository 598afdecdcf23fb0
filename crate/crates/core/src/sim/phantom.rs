//! Procedural speckle phantom.
//!
//! Scatterers live in a regular lattice of cubic cells; each cell holds a fixed
//! number of scatterers at uniform random positions with complex Gaussian
//! amplitudes scaled by the local echogenicity. The random numbers of a cell
//! are drawn from a ChaCha stream keyed by the phantom seed and selected by the
//! cell index, so the field is fully determined by `(spec, seed)` and can be
//! evaluated lazily around any frame without storing a voxel grid.
//!
//! Imaging convolves the scatterers with a separable Gaussian point-spread
//! function attached to the probe (axial, lateral, elevational widths) and
//! takes the magnitude of the complex sum. Because the sum of complex Gaussian
//! amplitudes is complex Gaussian, the envelope is Rayleigh distributed in
//! uniform regions (fully developed speckle).

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pose::{ImageGeometry, TransformSE3};

/// The PSF is truncated at this many standard deviations.
pub const PSF_TRUNCATION_SIGMAS: f64 = 3.0;

/// Scatterers per lattice cell; the cell size follows from the density.
pub const SCATTERERS_PER_CELL: usize = 2;

/// Embedded structure with its own echogenicity (1 = background, 0 = anechoic).
#[derive(Clone, Debug, PartialEq)]
pub enum Inclusion {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        echogenicity: f64,
    },
    /// Infinite cylinder ("vessel") through `point` along `direction`.
    Tube {
        point: [f64; 3],
        direction: [f64; 3],
        radius: f64,
        echogenicity: f64,
    },
}

impl Inclusion {
    fn contains(&self, p: &Point3<f64>) -> bool {
        match self {
            Inclusion::Ellipsoid { center, radii, .. } => {
                (0..3)
                    .map(|k| ((p[k] - center[k]) / radii[k]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Inclusion::Tube {
                point,
                direction,
                radius,
                ..
            } => {
                let d = Vector3::from(*direction).normalize();
                let v = p - Point3::from(*point);
                (v - d * v.dot(&d)).norm() <= *radius
            }
        }
    }

    fn echogenicity(&self) -> f64 {
        match self {
            Inclusion::Ellipsoid { echogenicity, .. } | Inclusion::Tube { echogenicity, .. } => *echogenicity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Axis-aligned extent in millimetres (world = frame-0 coordinates).
    pub min_mm: [f64; 3],
    pub max_mm: [f64; 3],
    /// PSF standard deviations (axial, lateral, elevational) in millimetres.
    pub psf_sigma_mm: [f64; 3],
    pub density_per_mm3: f64,
    /// Later inclusions override earlier ones where they overlap.
    pub inclusions: Vec<Inclusion>,
}

impl PhantomSpec {
    pub const DEFAULT_PSF_SIGMA_MM: [f64; 3] = [0.13, 0.25, 0.25];
    pub const DEFAULT_DENSITY: f64 = 128.0;

    /// Homogeneous phantom covering `[min, max]`.
    pub fn uniform(min_mm: [f64; 3], max_mm: [f64; 3]) -> Self {
        Self {
            min_mm,
            max_mm,
            psf_sigma_mm: Self::DEFAULT_PSF_SIGMA_MM,
            density_per_mm3: Self::DEFAULT_DENSITY,
            inclusions: Vec::new(),
        }
    }

    /// Smallest box holding every frame of `placements`, grown by the PSF support.
    pub fn fit(placements: &[TransformSE3], geom: &ImageGeometry) -> Result<Self> {
        geom.validate()?;
        if placements.is_empty() {
            return Err(Error::invalid("cannot fit a phantom to zero frames"));
        }
        let sigma = Self::DEFAULT_PSF_SIGMA_MM;
        let margin = PSF_TRUNCATION_SIGMAS * sigma.iter().cloned().fold(0.0, f64::max) + 0.5;
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for t in placements {
            for p in frame_corners(geom) {
                let q = t.apply(&p);
                for k in 0..3 {
                    lo[k] = lo[k].min(q[k] - margin);
                    hi[k] = hi[k].max(q[k] + margin);
                }
            }
        }
        Ok(Self::uniform(lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        let support = 2.0 * PSF_TRUNCATION_SIGMAS;
        for k in 0..3 {
            let ext = self.max_mm[k] - self.min_mm[k];
            if !ext.is_finite() || ext <= 0.0 {
                return Err(Error::invalid("phantom extent must be positive"));
            }
            if !(self.psf_sigma_mm[k] > 0.0) {
                return Err(Error::invalid("PSF widths must be positive"));
            }
            if ext < support * self.psf_sigma_mm[k] {
                return Err(Error::invalid(format!(
                    "phantom extent {ext} mm on axis {k} is smaller than the PSF kernel"
                )));
            }
        }
        if !(self.density_per_mm3 > 0.0 && self.density_per_mm3.is_finite()) {
            return Err(Error::invalid("scatterer density must be positive"));
        }
        if self.inclusions.iter().any(|i| !(i.echogenicity() >= 0.0)) {
            return Err(Error::invalid("echogenicity must be nonnegative"));
        }
        Ok(())
    }
}

fn frame_corners(geom: &ImageGeometry) -> [Point3<f64>; 4] {
    let (r1, c1) = ((geom.rows - 1) as f64, (geom.cols - 1) as f64);
    [
        geom.local_point(0.0, 0.0),
        geom.local_point(0.0, c1),
        geom.local_point(r1, 0.0),
        geom.local_point(r1, c1),
    ]
}

/// A seeded procedural scatterer field.
#[derive(Clone, Debug)]
pub struct Phantom {
    spec: PhantomSpec,
    seed: u64,
    cell_mm: f64,
}

pub fn make_phantom(spec: PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let cell_mm = (SCATTERERS_PER_CELL as f64 / spec.density_per_mm3).cbrt();
    Ok(Phantom { spec, seed, cell_mm })
}

/// Fills `out` with `scale · exp(−(a + k·b)²/2)` for k = 0…n−1, given
/// `decay = exp(−b²)`. Consecutive samples differ by the factor
/// `exp(−b(a + k·b) − b²/2)`, which itself shrinks by `decay` each step, so a
/// row of PSF weights costs two exponentials instead of one per pixel.
fn gaussian_samples(out: &mut Vec<f64>, n: usize, a: f64, b: f64, decay: f64, scale: f64) {
    out.clear();
    let mut g = (-0.5 * a * a).exp() * scale;
    let mut ratio = (-b * a - 0.5 * b * b).exp();
    for _ in 0..n {
        out.push(g);
        g *= ratio;
        ratio *= decay;
    }
}

/// Packs a signed cell index into a ChaCha stream id (21 bits per axis).
fn cell_stream(i: i64, j: i64, k: i64) -> u64 {
    const OFF: i64 = 1 << 20;
    const MASK: u64 = (1 << 21) - 1;
    (((i + OFF) as u64 & MASK) << 42) | (((j + OFF) as u64 & MASK) << 21) | ((k + OFF) as u64 & MASK)
}

impl Phantom {
    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Echogenicity at a world point (1 outside every inclusion).
    pub fn echogenicity(&self, p: &Point3<f64>) -> f64 {
        self.spec
            .inclusions
            .iter()
            .rev()
            .find(|inc| inc.contains(p))
            .map_or(1.0, Inclusion::echogenicity)
    }

    /// Rayleigh parameter of the envelope in a background region:
    /// `E|S|² = ρ ∫h² = ρ π^{3/2} σx σy σz = 2 σ_r²`.
    pub fn rayleigh_sigma(&self) -> f64 {
        let [sx, sy, sz] = self.spec.psf_sigma_mm;
        (self.spec.density_per_mm3 * std::f64::consts::PI.powf(1.5) * sx * sy * sz / 2.0).sqrt()
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.spec.min_mm[k] && p[k] <= self.spec.max_mm[k])
    }

    /// Calls `f(position, (re, im))` for every scatterer whose cell meets the box.
    fn for_each_scatterer(&self, lo: [f64; 3], hi: [f64; 3], mut f: impl FnMut(Point3<f64>, f64, f64)) {
        let c = self.cell_mm;
        let idx = |v: f64| (v / c).floor() as i64;
        let base = ChaCha8Rng::seed_from_u64(self.seed);
        for i in idx(lo[0])..=idx(hi[0]) {
            for j in idx(lo[1])..=idx(hi[1]) {
                for k in idx(lo[2])..=idx(hi[2]) {
                    let mut rng = base.clone();
                    rng.set_stream(cell_stream(i, j, k));
                    for _ in 0..SCATTERERS_PER_CELL {
                        let p = Point3::new(
                            (i as f64 + rng.random::<f64>()) * c,
                            (j as f64 + rng.random::<f64>()) * c,
                            (k as f64 + rng.random::<f64>()) * c,
                        );
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        if !self.contains(&p) {
                            continue;
                        }
                        let e = self.echogenicity(&p) * std::f64::consts::FRAC_1_SQRT_2;
                        if e != 0.0 {
                            f(p, re * e, im * e);
                        }
                    }
                }
            }
        }
    }

    /// Complex-sum magnitude (unnormalized envelope) of the frame placed at `t`, row-major.
    pub fn render_envelope(&self, t: &TransformSE3, geom: &ImageGeometry) -> Result<Vec<f64>> {
        geom.validate()?;
        let [sx, sy, sz] = self.spec.psf_sigma_mm;
        let reach = [
            PSF_TRUNCATION_SIGMAS * sx,
            PSF_TRUNCATION_SIGMAS * sy,
            PSF_TRUNCATION_SIGMAS * sz,
        ];
        // World box around the frame slab.
        let (rows, cols) = (geom.rows, geom.cols);
        let (x0, x1) = (-reach[0], (rows - 1) as f64 * geom.pitch_axial + reach[0]);
        let half_w = (cols - 1) as f64 / 2.0 * geom.pitch_lateral + reach[1];
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for x in [x0, x1] {
            for y in [-half_w, half_w] {
                for z in [-reach[2], reach[2]] {
                    let q = t.apply(&Point3::new(x, y, z));
                    for k in 0..3 {
                        lo[k] = lo[k].min(q[k]);
                        hi[k] = hi[k].max(q[k]);
                    }
                }
            }
        }
        let inv = t.inverse();
        // Complex sum per pixel, interleaved so the splat is one 2-wide update.
        let mut acc = vec![[0.0f64; 2]; rows * cols];
        let mut ex = Vec::new();
        let mut ey = Vec::new();
        let yc = (cols as f64 - 1.0) / 2.0;
        let (bx, by) = (geom.pitch_axial / sx, geom.pitch_lateral / sy);
        let (decay_x, decay_y) = ((-bx * bx).exp(), (-by * by).exp());
        self.for_each_scatterer(lo, hi, |p, ar, ai| {
            let q = inv.apply(&p);
            if q.z.abs() > reach[2] {
                return;
            }
            let wz = (-0.5 * (q.z / sz).powi(2)).exp();
            let r0 = ((q.x - reach[0]) / geom.pitch_axial).ceil().max(0.0) as usize;
            let r1 = ((q.x + reach[0]) / geom.pitch_axial).floor();
            let c0 = ((q.y - reach[1]) / geom.pitch_lateral + yc).ceil().max(0.0) as usize;
            let c1 = ((q.y + reach[1]) / geom.pitch_lateral + yc).floor();
            if r1 < 0.0 || c1 < 0.0 {
                return;
            }
            let r1 = (r1 as usize).min(rows - 1);
            let c1 = (c1 as usize).min(cols - 1);
            if r0 > r1 || c0 > c1 {
                return;
            }
            gaussian_samples(
                &mut ex,
                r1 - r0 + 1,
                (r0 as f64 * geom.pitch_axial - q.x) / sx,
                bx,
                decay_x,
                wz,
            );
            let y0 = ((c0 as f64 - yc) * geom.pitch_lateral - q.y) / sy;
            gaussian_samples(&mut ey, c1 - c0 + 1, y0, by, decay_y, 1.0);
            for (ri, wx) in ex.iter().enumerate() {
                let start = (r0 + ri) * cols + c0;
                let (ar, ai) = (ar * wx, ai * wx);
                for (a, wy) in acc[start..start + ey.len()].iter_mut().zip(&ey) {
                    a[0] += ar * wy;
                    a[1] += ai * wy;
                }
            }
        });
        Ok(acc.iter().map(|[a, b]| a.hypot(*b)).collect())
    }

    /// Display intensities in [0, 1]: `min(1, envelope / (5 σ_r))`.
    pub fn render_frame(&self, t: &TransformSE3, geom: &ImageGeometry) -> Result<Vec<f32>> {
        let scale = 1.0 / (5.0 * self.rayleigh_sigma());
        Ok(self
            .render_envelope(t, geom)?
            .into_iter()
            .map(|e| (e * scale).min(1.0) as f32)
            .collect())
    }

    /// Whether every corner of the frame placed at `t` lies inside the phantom.
    pub fn covers_frame(&self, t: &TransformSE3, geom: &ImageGeometry) -> bool {
        frame_corners(geom).iter().all(|p| self.contains(&t.apply(p)))
    }
}
