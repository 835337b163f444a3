//! Pinhole camera: rigid pose plus intrinsics, and the perspective projection.
//!
//! Pixel convention: integer pixel (col, row) sits at continuous (u, v) = (col, row).

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use thiserror::Error;

/// Points at or closer than this camera-frame depth are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;
/// Maximum `‖RᵀR − I‖∞` accepted at construction.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Projection of a point: continuous pixel coordinates plus camera-frame z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    /// False when the point is at or behind the image plane.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    cam_to_world: Matrix4<f64>,
    rot_world_to_cam: Matrix3<f64>,
    position: Vector3<f64>,
}

/// Largest absolute entry of `RᵀR − I`, NaN if any entry is non-finite.
pub fn orthonormality_error(rot: &Matrix3<f64>) -> f64 {
    if rot.iter().any(|x| !x.is_finite()) {
        return f64::NAN;
    }
    (rot.transpose() * rot - Matrix3::identity()).amax()
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        cam_to_world_row_major: [f64; 16],
    ) -> Result<Self, CameraError> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "image extents must be positive, got {width}x{height}"
            )));
        }
        if cam_to_world_row_major.iter().any(|x| !x.is_finite()) {
            return Err(CameraError::InvalidPose("non-finite pose entry".into()));
        }
        let m = Matrix4::from_row_slice(&cam_to_world_row_major);
        let rot: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = orthonormality_error(&rot);
        if !(err <= ORTHONORMAL_TOL) {
            return Err(CameraError::InvalidPose(format!(
                "rotation not orthonormal (deviation {err:e})"
            )));
        }
        let position = m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_to_world: m,
            rot_world_to_cam: rot.transpose(),
            position,
        })
    }

    /// Camera with the given intrinsics at the world origin, looking down +z.
    pub fn with_identity_pose(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let mut pose = [0.0; 16];
        for i in 0..4 {
            pose[i * 5] = 1.0;
        }
        Self::new(fx, fy, cx, cy, width, height, pose)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cam_to_world(&self) -> &Matrix4<f64> {
        &self.cam_to_world
    }

    pub fn cam_to_world_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.cam_to_world[(r, c)];
            }
        }
        out
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.position)
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.cam_to_world.fixed_view::<3, 1>(0, 2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rot_world_to_cam * (p.coords - self.position))
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rot_world_to_cam.transpose() * p.coords + self.position)
    }

    /// Projects a camera-frame point. Depth is the camera-frame z, not ray length.
    pub fn project_camera_point(&self, pc: &Point3<f64>) -> PixelDepth {
        let z = pc.z;
        if !(z > MIN_DEPTH) {
            return PixelDepth {
                u: f64::NAN,
                v: f64::NAN,
                z,
                valid: false,
            };
        }
        PixelDepth {
            u: self.fx * pc.x / z + self.cx,
            v: self.fy * pc.y / z + self.cy,
            z,
            valid: true,
        }
    }

    pub fn project(&self, p: &Point3<f64>) -> PixelDepth {
        self.project_camera_point(&self.world_to_camera(p))
    }

    pub fn in_fov(&self, pd: &PixelDepth) -> bool {
        pd.valid
            && pd.u >= 0.0
            && pd.u < f64::from(self.width)
            && pd.v >= 0.0
            && pd.v < f64::from(self.height)
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<Point3<f64>, CameraError> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(CameraError::Domain(format!(
                "unproject needs positive depth, got {z}"
            )));
        }
        let pc = Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z);
        Ok(self.camera_to_world(&pc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn cam100() -> CameraModel {
        CameraModel::with_identity_pose(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn posed(rot: Rotation3<f64>, t: Vector3<f64>) -> CameraModel {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let mut pose = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                pose[r * 4 + c] = m[(r, c)];
            }
        }
        CameraModel::new(500.0, 480.0, 320.0, 240.0, 640, 480, pose).unwrap()
    }

    #[test]
    fn identity_world_to_camera() {
        let p = cam100().world_to_camera(&Point3::new(1.0, 2.0, 3.0));
        assert_eq!(p, Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn translated_camera_origin() {
        let cam = posed(Rotation3::identity(), Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(
            cam.world_to_camera(&Point3::new(0.0, 0.0, 5.0)),
            Point3::origin()
        );
    }

    #[test]
    fn projection_examples() {
        let cam = cam100();
        let pd = cam.project(&Point3::new(0.0, 0.0, 2.0));
        assert_eq!((pd.u, pd.v, pd.z, pd.valid), (50.0, 50.0, 2.0, true));
        let pd = cam.project(&Point3::new(1.0, 0.0, 2.0));
        assert_eq!((pd.u, pd.v, pd.z, pd.valid), (100.0, 50.0, 2.0, true));
        assert!(!cam.project(&Point3::new(0.0, 0.0, -1.0)).valid);
        assert!(!cam.project(&Point3::new(0.0, 0.0, 0.0)).valid);
    }

    #[test]
    fn fov_boundaries() {
        let cam = CameraModel::with_identity_pose(10.0, 10.0, 5.0, 5.0, 10, 10).unwrap();
        let pd = |u, v| PixelDepth {
            u,
            v,
            z: 1.0,
            valid: true,
        };
        assert!(cam.in_fov(&pd(0.0, 0.0)));
        assert!(!cam.in_fov(&pd(10.0, 5.0)));
        assert!(!cam.in_fov(&pd(5.0, 10.0)));
        assert!(!cam.in_fov(&pd(-1e-12, 5.0)));
        assert!(!cam.in_fov(&PixelDepth {
            valid: false,
            ..pd(1.0, 1.0)
        }));
    }

    #[test]
    fn unproject_principal_axis_and_domain() {
        let cam = cam100();
        assert_eq!(
            cam.unproject(50.0, 50.0, 3.0).unwrap(),
            Point3::new(0.0, 0.0, 3.0)
        );
        assert!(matches!(
            cam.unproject(1.0, 1.0, 0.0),
            Err(CameraError::Domain(_))
        ));
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(CameraModel::with_identity_pose(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraModel::with_identity_pose(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
        let mut pose = cam100().cam_to_world_row_major();
        pose[0] = 1.001;
        assert!(matches!(
            CameraModel::new(1.0, 1.0, 0.0, 0.0, 1, 1, pose),
            Err(CameraError::InvalidPose(_))
        ));
        pose[0] = f64::NAN;
        assert!(matches!(
            CameraModel::new(1.0, 1.0, 0.0, 0.0, 1, 1, pose),
            Err(CameraError::InvalidPose(_))
        ));
    }

    fn arb_pose() -> impl Strategy<Value = CameraModel> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -std::f64::consts::PI..std::f64::consts::PI,
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_filter_map("degenerate axis", |(axis, angle, t)| {
                let axis = Vector3::from(axis);
                (axis.norm() > 1e-3).then(|| {
                    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
                    posed(rot, Vector3::from(t))
                })
            })
    }

    proptest! {
        #[test]
        fn rigid_transform_preserves_distances(
            cam in arb_pose(),
            p in prop::array::uniform3(-20.0f64..20.0),
            q in prop::array::uniform3(-20.0f64..20.0),
        ) {
            let (p, q) = (Point3::from(p), Point3::from(q));
            let d0 = (p - q).norm();
            let d1 = (cam.world_to_camera(&p) - cam.world_to_camera(&q)).norm();
            prop_assert!((d0 - d1).abs() <= 1e-6 * d0.max(1.0));
        }

        #[test]
        fn project_unproject_roundtrip(
            cam in arb_pose(),
            u in -100.0f64..800.0,
            v in -100.0f64..600.0,
            z in 0.01f64..50.0,
        ) {
            let pd = cam.project(&cam.unproject(u, v, z).unwrap());
            let tol = 1e-6 * z.abs().max(1.0);
            prop_assert!(pd.valid);
            prop_assert!((pd.u - u).abs() <= tol && (pd.v - v).abs() <= tol && (pd.z - z).abs() <= tol);
        }

        #[test]
        fn projection_scale_invariant(
            x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.1f64..10.0, lambda in 0.1f64..10.0,
        ) {
            let cam = cam100();
            let a = cam.project_camera_point(&Point3::new(x, y, z));
            let b = cam.project_camera_point(&Point3::new(lambda * x, lambda * y, lambda * z));
            prop_assert!((a.u - b.u).abs() <= 1e-9 * a.u.abs().max(1.0));
            prop_assert!((a.v - b.v).abs() <= 1e-9 * a.v.abs().max(1.0));
            prop_assert!((b.z - lambda * a.z).abs() <= 1e-12 * b.z);
        }
    }
}
