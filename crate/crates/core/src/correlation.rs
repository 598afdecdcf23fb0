//! Patch-wise correlation volumes between consecutive feature maps.
//!
//! A grid of regions of interest (RoIs) is laid over both maps at the same
//! positions. Inside each RoI the patch of the first map stays at the RoI
//! centre while the patch of the second map visits every position of the
//! RoI; the `d × d` array of correlations (`d = roi - patch + 1`) is stored
//! per RoI. Entry `(u, v)` corresponds to the displacement
//! `(u - (d-1)/2, v - (d-1)/2)` of the second patch relative to the centre.
//! Patches span all channels.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch normalization used by [`correlate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Zero-mean, unit-norm patches; values in [-1, 1]. Constant patches give 0.
    Ncc,
    /// Mean of elementwise products of the raw patches.
    Dot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrConfig {
    pub roi_extent: usize,
    pub patch_extent: usize,
    pub roi_stride: usize,
    pub normalization: Normalization,
}

impl Default for CorrConfig {
    /// 9-pixel RoIs with 5-pixel patches (d = 5), stride 7: an 8×8 grid on a 64×64 map.
    fn default() -> Self {
        Self {
            roi_extent: 9,
            patch_extent: 5,
            roi_stride: 7,
            normalization: Normalization::Ncc,
        }
    }
}

/// Placement of the RoI grid on a map of given extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiLayout {
    pub rows: usize,
    pub cols: usize,
    pub top: usize,
    pub left: usize,
    pub stride: usize,
}

impl RoiLayout {
    pub fn n_rois(&self) -> usize {
        self.rows * self.cols
    }
}

impl CorrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi_extent.is_multiple_of(2) || self.patch_extent.is_multiple_of(2) {
            return Err(Error::invalid("RoI and patch extents must be odd"));
        }
        if self.patch_extent > self.roi_extent {
            return Err(Error::invalid("patch extent exceeds RoI extent"));
        }
        if self.roi_stride == 0 {
            return Err(Error::invalid("RoI stride must be positive"));
        }
        Ok(())
    }

    /// Side `d` of each correlation array.
    pub fn displacement_extent(&self) -> usize {
        self.roi_extent - self.patch_extent + 1
    }

    /// Config whose inset grid has exactly `grid × grid` RoIs on a square map.
    pub fn for_grid(map_extent: usize, grid: usize, roi: usize, patch: usize) -> Result<Self> {
        if grid == 0 || roi > map_extent {
            return Err(Error::invalid("RoI grid does not fit the map"));
        }
        let stride = if grid == 1 {
            1
        } else {
            (1..=map_extent)
                .find(|&s| (map_extent - roi) / s + 1 == grid)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "no stride gives a {grid}x{grid} grid of {roi}-pixel RoIs on {map_extent}"
                    ))
                })?
        };
        let cfg = Self {
            roi_extent: roi,
            patch_extent: patch,
            roi_stride: stride,
            normalization: Normalization::Ncc,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Centred, fully-inside RoI grid for an `h × w` map.
    pub fn layout(&self, h: usize, w: usize) -> Result<RoiLayout> {
        self.validate()?;
        if self.roi_extent > h || self.roi_extent > w {
            return Err(Error::invalid(format!(
                "RoI extent {} larger than feature map {h}x{w}",
                self.roi_extent
            )));
        }
        let rows = (h - self.roi_extent) / self.roi_stride + 1;
        let cols = (w - self.roi_extent) / self.roi_stride + 1;
        let span = |n: usize| self.roi_extent + (n - 1) * self.roi_stride;
        Ok(RoiLayout {
            rows,
            cols,
            top: (h - span(rows)) / 2,
            left: (w - span(cols)) / 2,
            stride: self.roi_stride,
        })
    }
}

/// Correlation arrays of one map pair, RoIs in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub d: usize,
    /// (n_rois, d, d) row-major.
    pub values: Vec<f64>,
}

impl CorrelationVolume {
    pub fn n_rois(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn array(&self, roi: usize) -> &[f64] {
        &self.values[roi * self.d * self.d..][..self.d * self.d]
    }

    /// Position `(u, v)` of the largest value of a RoI's array (first on ties).
    pub fn argmax(&self, roi: usize) -> (usize, usize) {
        let arr = self.array(roi);
        let mut best = 0;
        for (i, v) in arr.iter().enumerate() {
            if *v > arr[best] {
                best = i;
            }
        }
        (best / self.d, best % self.d)
    }

    /// Argmax displacement relative to the array centre.
    pub fn peak_displacement(&self, roi: usize) -> (isize, isize) {
        let (u, v) = self.argmax(roi);
        let c = (self.d as isize - 1) / 2;
        (u as isize - c, v as isize - c)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_rois(), self.d, self.d], self.values.clone())
            .expect("volume dimensions are consistent")
    }
}

/// Correlation volume of two (C,H,W) maps.
pub fn correlate(a: &Tensor, b: &Tensor, cfg: &CorrConfig) -> Result<CorrelationVolume> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "correlate",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let s = a.shape();
    let layout = cfg.layout(s[1], s[2])?;
    let values = forward_raw(a.data(), b.data(), [1, s[0], s[1], s[2]], cfg, &layout);
    Ok(CorrelationVolume {
        grid_rows: layout.rows,
        grid_cols: layout.cols,
        d: cfg.displacement_extent(),
        values,
    })
}

/// Per-RoI mean correlation, `grid_rows × grid_cols` row-major.
pub fn mean_map(vol: &CorrelationVolume) -> Vec<f64> {
    let dd = (vol.d * vol.d) as f64;
    (0..vol.n_rois())
        .map(|r| vol.array(r).iter().sum::<f64>() / dd)
        .collect()
}

/// Writes a mean map as a 16-bit binary PGM, mapping [-1, 1] affinely onto [0, 65535].
pub fn write_mean_map_pgm<W: Write>(w: W, vol: &CorrelationVolume) -> Result<()> {
    crate::io::write_pgm16(w, vol.grid_cols, vol.grid_rows, &mean_map(vol), -1.0, 1.0)
}

fn gather_patch(x: &[f64], dims: [usize; 4], n: usize, y0: usize, x0: usize, p: usize, out: &mut Vec<f64>) {
    let [_, c, h, w] = dims;
    out.clear();
    for ci in 0..c {
        let plane = &x[(n * c + ci) * h * w..][..h * w];
        for y in y0..y0 + p {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + p]);
        }
    }
}

fn scatter_patch(g: &mut [f64], dims: [usize; 4], n: usize, y0: usize, x0: usize, p: usize, src: &[f64]) {
    let [_, c, h, w] = dims;
    let mut k = 0;
    for ci in 0..c {
        let plane = &mut g[(n * c + ci) * h * w..][..h * w];
        for y in y0..y0 + p {
            for v in &mut plane[y * w + x0..y * w + x0 + p] {
                *v += src[k];
                k += 1;
            }
        }
    }
}

/// Centres `v` in place and divides by its norm; returns the norm (0 leaves zeros).
fn standardize(v: &mut [f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
        norm
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        0.0
    }
}

fn roi_corner(layout: &RoiLayout, roi: usize) -> (usize, usize) {
    (
        layout.top + (roi / layout.cols) * layout.stride,
        layout.left + (roi % layout.cols) * layout.stride,
    )
}

/// Batched forward on (N,C,H,W) buffers; output (N, n_rois, d, d).
pub(crate) fn forward_raw(
    a: &[f64],
    b: &[f64],
    dims: [usize; 4],
    cfg: &CorrConfig,
    layout: &RoiLayout,
) -> Vec<f64> {
    let (p, d) = (cfg.patch_extent, cfg.displacement_extent());
    let r = (d - 1) / 2;
    let len = (dims[1] * p * p) as f64;
    let mut out = Vec::with_capacity(dims[0] * layout.n_rois() * d * d);
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for n in 0..dims[0] {
        for roi in 0..layout.n_rois() {
            let (ty, tx) = roi_corner(layout, roi);
            gather_patch(a, dims, n, ty + r, tx + r, p, &mut pa);
            let ncc = cfg.normalization == Normalization::Ncc;
            if ncc {
                standardize(&mut pa);
            }
            for u in 0..d {
                for v in 0..d {
                    gather_patch(b, dims, n, ty + u, tx + v, p, &mut pb);
                    let val = if ncc {
                        standardize(&mut pb);
                        // Rounding can push perfectly (anti)correlated patches
                        // a few ulps past ±1.
                        pa.iter()
                            .zip(&pb)
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            .clamp(-1.0, 1.0)
                    } else {
                        pa.iter().zip(&pb).map(|(x, y)| x * y).sum::<f64>() / len
                    };
                    out.push(val);
                }
            }
        }
    }
    out
}

/// Gradients of [`forward_raw`] with respect to both inputs.
pub(crate) fn backward_raw(
    a: &[f64],
    b: &[f64],
    dims: [usize; 4],
    cfg: &CorrConfig,
    layout: &RoiLayout,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (p, d) = (cfg.patch_extent, cfg.displacement_extent());
    let r = (d - 1) / 2;
    let len = (dims[1] * p * p) as f64;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    let mut acc_a = vec![0.0; dims[1] * p * p];
    let mut tmp = vec![0.0; dims[1] * p * p];
    let mut k = 0;
    for n in 0..dims[0] {
        for roi in 0..layout.n_rois() {
            let (ty, tx) = roi_corner(layout, roi);
            gather_patch(a, dims, n, ty + r, tx + r, p, &mut pa);
            let ncc = cfg.normalization == Normalization::Ncc;
            let norm_a = if ncc { standardize(&mut pa) } else { 1.0 };
            acc_a.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..d {
                for v in 0..d {
                    let g = grad_out[k];
                    k += 1;
                    gather_patch(b, dims, n, ty + u, tx + v, p, &mut pb);
                    if ncc {
                        let norm_b = standardize(&mut pb);
                        if norm_a == 0.0 || norm_b == 0.0 || g == 0.0 {
                            continue;
                        }
                        let c: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
                        // d c / d a = (b̂ - c â) / |a - ā|, and symmetrically for b.
                        for i in 0..pa.len() {
                            acc_a[i] += g * (pb[i] - c * pa[i]) / norm_a;
                            tmp[i] = g * (pa[i] - c * pb[i]) / norm_b;
                        }
                    } else {
                        for i in 0..pa.len() {
                            acc_a[i] += g * pb[i] / len;
                            tmp[i] = g * pa[i] / len;
                        }
                    }
                    scatter_patch(&mut gb, dims, n, ty + u, tx + v, p, &tmp);
                }
            }
            scatter_patch(&mut ga, dims, n, ty + r, tx + r, p, &acc_a);
        }
    }
    (ga, gb)
}
