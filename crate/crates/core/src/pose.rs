//! Six-DoF poses, rigid transforms and trajectory accumulation.
//!
//! Conventions used everywhere in the crate:
//!
//! * Axes: `x` axial (depth), `y` lateral, `z` elevational (out of plane).
//! * Euler angles are intrinsic Z-Y-X: `R = Rz(rz) * Ry(ry) * Rx(rx)`, where
//!   `rx` is pitch (about axial), `ry` is yaw (about lateral) and `rz` is roll
//!   (about elevational).
//! * Angles are degrees at every I/O boundary and radians internally.
//! * The relative motion between frames `i` and `i + 1` is
//!   `dT_i = T_{i+1} * T_i^-1`, and absolute transforms are recovered by the
//!   left-multiplied running product starting from `T_0 = I`.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

use crate::error::{Error, Result};

/// Middle-axis angle (degrees) closer to +-90 than this is treated as gimbal lock.
pub const GIMBAL_LOCK_TOLERANCE_DEG: f64 = 1e-7;

/// Compositions between polar re-orthonormalizations inside [`accumulate`].
pub const REORTHONORMALIZE_EVERY: usize = 64;

/// Header of the pose CSV format.
pub const POSE_CSV_HEADER: &str = "frame,tx_mm,ty_mm,tz_mm,rx_deg,ry_deg,rz_deg";

/// Six-DoF pose or motion: translations in millimetres, Euler angles in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseVector {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl PoseVector {
    pub const fn new(tx: f64, ty: f64, tz: f64, rx: f64, ry: f64, rz: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            rx,
            ry,
            rz,
        }
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.rx, self.ry, self.rz]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the six components (mixed units).
    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same pose with every angle wrapped into (-180, 180].
    pub fn normalized(&self) -> Self {
        Self::new(
            self.tx,
            self.ty,
            self.tz,
            wrap_degrees(self.rx),
            wrap_degrees(self.ry),
            wrap_degrees(self.rz),
        )
    }
}

impl fmt::Display for PoseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{:.4} {:.4} {:.4} mm | {:.4} {:.4} {:.4} deg]",
            self.tx, self.ty, self.tz, self.rx, self.ry, self.rz
        )
    }
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

/// Rigid transform with an orthonormal rotation and a translation in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for TransformSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking orthonormality and `det = 1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("transform entries".into()));
        }
        if t.orthonormality_error() > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rotation is not a proper orthonormal matrix"));
        }
        Ok(t)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &TransformSE3) -> TransformSE3 {
        TransformSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> TransformSE3 {
        let rt = self.rotation.transpose();
        TransformSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `max |R^T R - I|` over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    /// Largest elementwise difference between the two 4x4 matrices.
    pub fn max_abs_diff(&self, other: &TransformSE3) -> f64 {
        (self.to_matrix() - other.to_matrix()).amax()
    }

    /// Replaces the rotation by its closest orthonormal matrix (polar factor).
    pub fn reorthonormalized(&self) -> TransformSE3 {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        TransformSE3 {
            rotation: r,
            translation: self.translation,
        }
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Homogeneous transform of a pose vector, `R = Rz * Ry * Rx`.
pub fn pose_to_transform(p: &PoseVector) -> Result<TransformSE3> {
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("pose {p}")));
    }
    let rotation = rot_z(p.rz.to_radians()) * rot_y(p.ry.to_radians()) * rot_x(p.rx.to_radians());
    Ok(TransformSE3::from_parts_unchecked(
        rotation,
        Vector3::new(p.tx, p.ty, p.tz),
    ))
}

/// Result of Euler extraction; `gimbal_lock` marks the degenerate middle-axis case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseExtraction {
    pub pose: PoseVector,
    pub gimbal_lock: bool,
}

/// Pose vector of a transform.
///
/// At gimbal lock (`|ry|` within [`GIMBAL_LOCK_TOLERANCE_DEG`] of 90 degrees)
/// `rx` is set to zero, the remaining rotation is folded into `rz`, and the
/// result is flagged.
pub fn transform_to_pose(t: &TransformSE3) -> PoseExtraction {
    let r = &t.rotation;
    let cy = r[(0, 0)].hypot(r[(1, 0)]);
    let ry = (-r[(2, 0)]).atan2(cy);
    let gimbal_lock = cy < GIMBAL_LOCK_TOLERANCE_DEG.to_radians().sin();
    let (rx, rz) = if gimbal_lock {
        (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
    } else {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    };
    let pose = PoseVector::new(
        t.translation.x,
        t.translation.y,
        t.translation.z,
        rx.to_degrees(),
        ry.to_degrees(),
        rz.to_degrees(),
    )
    .normalized();
    PoseExtraction { pose, gimbal_lock }
}

/// Motion from `t_i` to `t_next`: `t_next ∘ t_i^-1`.
pub fn relative_transform(t_i: &TransformSE3, t_next: &TransformSE3) -> TransformSE3 {
    t_next.compose(&t_i.inverse())
}

/// Absolute frame transforms; element 0 is always the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    transforms: Vec<TransformSE3>,
}

impl Trajectory {
    /// Wraps absolute transforms, requiring the first to be the identity (1e-9).
    pub fn from_absolute(transforms: Vec<TransformSE3>) -> Result<Self> {
        match transforms.first() {
            None => Err(Error::invalid("empty trajectory")),
            Some(t0) if t0.max_abs_diff(&TransformSE3::identity()) > 1e-9 => {
                Err(Error::invalid("trajectory must start at the identity"))
            }
            Some(_) => Ok(Self { transforms }),
        }
    }

    pub fn from_poses(poses: &[PoseVector]) -> Result<Self> {
        let transforms = poses.iter().map(pose_to_transform).collect::<Result<Vec<_>>>()?;
        Self::from_absolute(transforms)
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[TransformSE3] {
        &self.transforms
    }

    pub fn get(&self, i: usize) -> Option<&TransformSE3> {
        self.transforms.get(i)
    }

    /// Relative transforms between consecutive frames (`len - 1` of them).
    pub fn relatives(&self) -> Vec<TransformSE3> {
        self.transforms
            .windows(2)
            .map(|w| relative_transform(&w[0], &w[1]))
            .collect()
    }

    pub fn relative_poses(&self) -> Vec<PoseVector> {
        self.relatives()
            .iter()
            .map(|t| transform_to_pose(t).pose)
            .collect()
    }

    pub fn poses(&self) -> Vec<PoseVector> {
        self.transforms
            .iter()
            .map(|t| transform_to_pose(t).pose)
            .collect()
    }

    /// Applies `g` on the left of every transform (moves the whole scan rigidly).
    /// The result no longer starts at the identity, so it is returned as plain transforms.
    pub fn rigidly_moved(&self, g: &TransformSE3) -> Vec<TransformSE3> {
        self.transforms.iter().map(|t| g.compose(t)).collect()
    }
}

/// Running product of relative transforms, `T_{n+1} = dT_n * ... * dT_0 * I`.
///
/// The rotation is re-orthonormalized every [`REORTHONORMALIZE_EVERY`]
/// compositions to keep long chains on SO(3).
pub fn accumulate(relatives: &[TransformSE3]) -> Result<Trajectory> {
    if relatives.is_empty() {
        return Err(Error::invalid("accumulate needs at least one relative transform"));
    }
    let mut transforms = Vec::with_capacity(relatives.len() + 1);
    let mut current = TransformSE3::identity();
    transforms.push(current);
    for (n, rel) in relatives.iter().enumerate() {
        current = rel.compose(&current);
        if (n + 1) % REORTHONORMALIZE_EVERY == 0 {
            current = current.reorthonormalized();
        }
        transforms.push(current);
    }
    Ok(Trajectory { transforms })
}

/// Accumulates relative pose vectors into absolute transforms.
pub fn accumulate_poses(relatives: &[PoseVector]) -> Result<Trajectory> {
    let rel = relatives
        .iter()
        .map(pose_to_transform)
        .collect::<Result<Vec<_>>>()?;
    accumulate(&rel)
}

/// In-plane pixel lattice of a B-mode frame.
///
/// Rows run along the axial direction and columns along the lateral one.
/// The frame-local origin sits at the transducer face, laterally centred:
/// pixel `(r, c)` lives at `(r * pitch_axial, (c - (cols - 1) / 2) * pitch_lateral, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGeometry {
    pub rows: usize,
    pub cols: usize,
    pub pitch_axial: f64,
    pub pitch_lateral: f64,
}

impl ImageGeometry {
    /// Pixel pitch of the reference linear-array acquisition, in millimetres.
    pub const DEFAULT_PITCH_MM: f64 = 0.1484;

    pub fn new(rows: usize, cols: usize, pitch_axial: f64, pitch_lateral: f64) -> Result<Self> {
        let g = Self {
            rows,
            cols,
            pitch_axial,
            pitch_lateral,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn square(extent: usize, pitch: f64) -> Result<Self> {
        Self::new(extent, extent, pitch, pitch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("image geometry needs at least one pixel"));
        }
        if !(self.pitch_axial > 0.0 && self.pitch_lateral > 0.0)
            || !self.pitch_axial.is_finite()
            || !self.pitch_lateral.is_finite()
        {
            return Err(Error::invalid("pixel pitch must be positive and finite"));
        }
        Ok(())
    }

    pub fn local_point(&self, row: f64, col: f64) -> Point3<f64> {
        Point3::new(
            row * self.pitch_axial,
            (col - (self.cols as f64 - 1.0) / 2.0) * self.pitch_lateral,
            0.0,
        )
    }

    /// Frame centre in local coordinates.
    pub fn center(&self) -> Point3<f64> {
        self.local_point((self.rows as f64 - 1.0) / 2.0, (self.cols as f64 - 1.0) / 2.0)
    }
}

/// Which in-plane pixels [`frame_grid_points`] maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridSampling {
    /// Every pixel, row-major.
    Full,
    /// Four frame corners followed by the frame centre.
    CornersAndCenter,
}

pub fn grid_local_points(geom: &ImageGeometry, sampling: GridSampling) -> Vec<Point3<f64>> {
    match sampling {
        GridSampling::Full => (0..geom.rows)
            .flat_map(|r| (0..geom.cols).map(move |c| (r, c)))
            .map(|(r, c)| geom.local_point(r as f64, c as f64))
            .collect(),
        GridSampling::CornersAndCenter => {
            let (r1, c1) = ((geom.rows - 1) as f64, (geom.cols - 1) as f64);
            vec![
                geom.local_point(0.0, 0.0),
                geom.local_point(0.0, c1),
                geom.local_point(r1, 0.0),
                geom.local_point(r1, c1),
                geom.center(),
            ]
        }
    }
}

/// Maps the sampled in-plane pixel positions of a frame through `t` (millimetres).
pub fn frame_grid_points(
    t: &TransformSE3,
    geom: &ImageGeometry,
    sampling: GridSampling,
) -> Result<Vec<Point3<f64>>> {
    geom.validate()?;
    Ok(grid_local_points(geom, sampling)
        .iter()
        .map(|p| t.apply(p))
        .collect())
}

/// Writes poses in the `frame,tx_mm,...,rz_deg` CSV format.
pub fn write_poses_csv<W: Write>(mut w: W, poses: &[PoseVector]) -> Result<()> {
    writeln!(w, "{POSE_CSV_HEADER}")?;
    for (i, p) in poses.iter().enumerate() {
        writeln!(w, "{},{},{},{},{},{},{}", i, p.tx, p.ty, p.tz, p.rx, p.ry, p.rz)?;
    }
    Ok(())
}

/// Reads the pose CSV format; rows must be numbered 0, 1, 2, ... in order.
pub fn read_poses_csv<R: BufRead>(r: R) -> Result<Vec<PoseVector>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::format("pose csv", "empty file"))?;
    if header.trim_end() != POSE_CSV_HEADER {
        return Err(Error::format("pose csv", format!("unexpected header {header:?}")));
    }
    let mut poses = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 7 {
            return Err(Error::format(
                "pose csv",
                format!("line {}: expected 7 fields", lineno + 2),
            ));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| Error::format("pose csv", format!("bad frame index {:?}", fields[0])))?;
        if frame != poses.len() {
            return Err(Error::format(
                "pose csv",
                format!("frame index {frame} out of order"),
            ));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| Error::format("pose csv", format!("bad number {f:?}")))?;
        }
        poses.push(PoseVector::from_array(v));
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rodrigues formula, independent of the Euler code path.
    fn axis_angle(axis: Vector3<f64>, deg: f64) -> Matrix3<f64> {
        let k = axis.normalize();
        let (s, c) = deg.to_radians().sin_cos();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * s + kx * kx * (1.0 - c)
    }

    fn random_pose(rng: &mut impl Rng) -> PoseVector {
        PoseVector::new(
            rng.random_range(-40.0..40.0),
            rng.random_range(-40.0..40.0),
            rng.random_range(-40.0..40.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(-60.0..60.0),
        )
    }

    #[test]
    fn zero_pose_is_identity() {
        let t = pose_to_transform(&PoseVector::zero()).unwrap();
        assert_eq!(t, TransformSE3::identity());
    }

    #[test]
    fn pure_translation() {
        let t = pose_to_transform(&PoseVector::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(*t.rotation(), Matrix3::identity());
        assert_eq!(*t.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn single_axis_rotations_match_rodrigues() {
        let cases = [
            (PoseVector::new(0.0, 0.0, 0.0, 90.0, 0.0, 0.0), Vector3::x()),
            (PoseVector::new(0.0, 0.0, 0.0, 0.0, 90.0, 0.0), Vector3::y()),
            (PoseVector::new(0.0, 0.0, 0.0, 0.0, 0.0, 90.0), Vector3::z()),
        ];
        for (p, axis) in cases {
            let t = pose_to_transform(&p).unwrap();
            let oracle = axis_angle(axis, 90.0);
            assert!((t.rotation() - oracle).amax() < 1e-15, "{p}");
        }
    }

    #[test]
    fn composition_order_is_z_y_x() {
        let p = PoseVector::new(0.0, 0.0, 0.0, 10.0, 20.0, 30.0);
        let oracle =
            axis_angle(Vector3::z(), 30.0) * axis_angle(Vector3::y(), 20.0) * axis_angle(Vector3::x(), 10.0);
        let t = pose_to_transform(&p).unwrap();
        assert!((t.rotation() - oracle).amax() < 1e-14);
    }

    #[test]
    fn non_finite_pose_rejected() {
        let p = PoseVector::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(pose_to_transform(&p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn identity_extracts_to_zero() {
        let e = transform_to_pose(&TransformSE3::identity());
        assert_eq!(e.pose, PoseVector::zero());
        assert!(!e.gimbal_lock);
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let t = pose_to_transform(&p).unwrap();
            let e = transform_to_pose(&t);
            assert!(!e.gimbal_lock);
            let back = pose_to_transform(&e.pose).unwrap();
            worst = worst.max(back.max_abs_diff(&t));
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn gimbal_lock_is_flagged_and_folded_into_roll() {
        for ry in [90.0, -90.0] {
            let p = PoseVector::new(0.0, 0.0, 0.0, 0.0, ry, 0.0);
            let t = pose_to_transform(&p).unwrap();
            let e = transform_to_pose(&t);
            assert!(e.gimbal_lock);
            assert_eq!(e.pose.rx, 0.0);
            let back = pose_to_transform(&e.pose).unwrap();
            assert!(back.max_abs_diff(&t) < 1e-12);
        }
        // rx and rz are coupled at lock; the tie-break puts everything in rz.
        let p = PoseVector::new(0.0, 0.0, 0.0, 25.0, 90.0, 10.0);
        let t = pose_to_transform(&p).unwrap();
        let e = transform_to_pose(&t);
        assert!(e.gimbal_lock);
        assert!(pose_to_transform(&e.pose).unwrap().max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn wrap_degrees_range() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-540.0), 180.0);
        assert_eq!(wrap_degrees(45.0), 45.0);
    }

    #[test]
    fn relative_transform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = pose_to_transform(&random_pose(&mut rng)).unwrap();
        let b = pose_to_transform(&random_pose(&mut rng)).unwrap();
        assert!(relative_transform(&a, &a).max_abs_diff(&TransformSE3::identity()) < 1e-12);
        assert!(relative_transform(&TransformSE3::identity(), &b).max_abs_diff(&b) < 1e-12);
        let d = relative_transform(&a, &b);
        // Oracle: plain 4x4 products.
        let back = d.to_matrix() * a.to_matrix();
        assert!((back - b.to_matrix()).amax() < 1e-9);
    }

    #[test]
    fn accumulate_identities() {
        let traj = accumulate(&[TransformSE3::identity(); 3]).unwrap();
        assert_eq!(traj.len(), 4);
        assert!(traj.transforms().iter().all(|t| *t == TransformSE3::identity()));
    }

    #[test]
    fn accumulate_linear_steps() {
        let step = TransformSE3::from_translation(Vector3::new(0.0, 0.0, 0.2));
        let traj = accumulate(&[step; 10]).unwrap();
        let last = traj.transforms().last().unwrap();
        assert!((last.translation() - Vector3::new(0.0, 0.0, 2.0)).amax() < 1e-12);
    }

    #[test]
    fn accumulate_empty_is_error() {
        assert!(accumulate(&[]).is_err());
    }

    #[test]
    fn accumulate_matches_matrix_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rel: Vec<_> = (0..50)
            .map(|_| pose_to_transform(&random_pose(&mut rng)).unwrap())
            .collect();
        let traj = accumulate(&rel).unwrap();
        let mut fold = Matrix4::identity();
        for (n, r) in rel.iter().enumerate() {
            fold = r.to_matrix() * fold;
            assert!((traj.transforms()[n + 1].to_matrix() - fold).amax() < 1e-9);
        }
        // Extracted relatives re-accumulate to the same chain.
        let again = accumulate(&traj.relatives()).unwrap();
        for (x, y) in again.transforms().iter().zip(traj.transforms()) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
    }

    #[test]
    fn accumulate_split_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rel: Vec<_> = (0..30)
            .map(|_| pose_to_transform(&random_pose(&mut rng)).unwrap())
            .collect();
        let full = accumulate(&rel).unwrap();
        for split in [1, 7, 15, 29] {
            let head = accumulate(&rel[..split]).unwrap();
            let tail = accumulate(&rel[split..]).unwrap();
            let joined = tail
                .transforms()
                .last()
                .unwrap()
                .compose(head.transforms().last().unwrap());
            assert!(joined.max_abs_diff(full.transforms().last().unwrap()) < 1e-9);
        }
    }

    #[test]
    fn long_chains_stay_orthonormal() {
        let step = pose_to_transform(&PoseVector::new(0.01, -0.02, 0.2, 1.3, -0.7, 2.1)).unwrap();
        let traj = accumulate(&vec![step; 10_000]).unwrap();
        for t in traj.transforms() {
            assert!(t.orthonormality_error() < 1e-7);
            assert!((t.rotation().determinant() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn grid_points_identity_and_translation() {
        let g = ImageGeometry::square(2, ImageGeometry::DEFAULT_PITCH_MM).unwrap();
        let pts = frame_grid_points(&TransformSE3::identity(), &g, GridSampling::Full).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(((pts[1] - pts[0]).norm() - 0.1484).abs() < 1e-15);
        assert!(((pts[2] - pts[0]).norm() - 0.1484).abs() < 1e-15);
        assert!(pts.iter().all(|p| p.z == 0.0));

        let t = TransformSE3::from_translation(Vector3::new(1.0, -2.0, 3.0));
        let moved = frame_grid_points(&t, &g, GridSampling::Full).unwrap();
        for (a, b) in pts.iter().zip(&moved) {
            assert!(((b - a) - t.translation()).amax() < 1e-15);
        }
    }

    #[test]
    fn grid_points_roll_rotates_in_plane() {
        let g = ImageGeometry::square(3, 1.0).unwrap();
        let t = pose_to_transform(&PoseVector::new(0.0, 0.0, 0.0, 0.0, 0.0, 90.0)).unwrap();
        let pts = frame_grid_points(&t, &g, GridSampling::CornersAndCenter).unwrap();
        // Corners (0,-1), (0,1), (2,-1), (2,1) rotated by +90 deg about z: (x,y) -> (-y,x).
        let expected = [(1.0, 0.0), (-1.0, 0.0), (1.0, 2.0), (-1.0, 2.0), (0.0, 1.0)];
        for (p, (x, y)) in pts.iter().zip(expected) {
            assert!((p.x - x).abs() < 1e-15 && (p.y - y).abs() < 1e-15 && p.z == 0.0);
        }
    }

    #[test]
    fn bad_geometry_rejected() {
        assert!(ImageGeometry::square(4, 0.0).is_err());
        assert!(ImageGeometry::square(0, 0.1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses: Vec<_> = (0..20).map(|_| random_pose(&mut rng)).collect();
        let mut buf = Vec::new();
        write_poses_csv(&mut buf, &poses).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,tx_mm,ty_mm,tz_mm,rx_deg,ry_deg,rz_deg\n0,"));
        assert!(!text.contains('\r'));
        assert_eq!(read_poses_csv(&buf[..]).unwrap(), poses);
    }

    #[test]
    fn csv_rejects_bad_input() {
        assert!(read_poses_csv(&b"a,b\n"[..]).is_err());
        let bad = format!("{POSE_CSV_HEADER}\n1,0,0,0,0,0,0\n");
        assert!(read_poses_csv(bad.as_bytes()).is_err());
        let bad = format!("{POSE_CSV_HEADER}\n0,0,0,x,0,0,0\n");
        assert!(read_poses_csv(bad.as_bytes()).is_err());
    }
}
