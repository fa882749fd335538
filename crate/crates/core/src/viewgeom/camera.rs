use nalgebra::{Matrix3, Vector3};

use crate::tensorio::{rotation_deviation, PoseRecord, ROTATION_TOLERANCE};

use super::GeometryError;

/// Camera-to-world transform `X_w = R_cw X_c + t_cw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraToWorld {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Invert a world-to-camera pose.
pub fn camera_to_world(pose: &PoseRecord) -> Result<CameraToWorld, GeometryError> {
    let r_w2c = pose.rotation();
    let deviation = rotation_deviation(&r_w2c);
    // NaN deviation also lands here.
    if !(deviation <= ROTATION_TOLERANCE) {
        return Err(GeometryError::NonOrthonormalRotation { deviation });
    }
    let rotation = r_w2c.transpose();
    let translation = -(rotation * pose.translation());
    Ok(CameraToWorld {
        rotation,
        translation,
    })
}

/// Optical axis in world coordinates: the camera +z axis, `R_cw · (0, 0, 1)`.
pub fn optical_axis(r_cw: &Matrix3<f64>) -> Vector3<f64> {
    let o = r_cw.column(2).into_owned();
    let norm = o.norm();
    if norm > 0.0 {
        o / norm
    } else {
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::Intrinsics;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(r: Matrix3<f64>, t: Vector3<f64>) -> PoseRecord {
        let k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        };
        PoseRecord::from_parts(0, &r, &t, k)
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.1..3.1);
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    #[test]
    fn identity_pose() {
        let c = camera_to_world(&pose(Matrix3::identity(), Vector3::zeros())).unwrap();
        assert_eq!(c.rotation, Matrix3::identity());
        assert_eq!(c.translation, Vector3::zeros());
    }

    #[test]
    fn pure_translation_negates() {
        let c = camera_to_world(&pose(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0))).unwrap();
        assert_eq!(c.translation, Vector3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn random_pose_inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            let t = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            let c = camera_to_world(&pose(r, t)).unwrap();
            assert!((c.rotation * r - Matrix3::identity()).amax() < 1e-6);
            // x_c = R x_w + t  →  x_w = R_cw x_c + t_cw
            let x_w = Vector3::new(0.3, -1.2, 4.0);
            let x_c = r * x_w + t;
            assert!((c.rotation * x_c + c.translation - x_w).amax() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 0.01;
        assert!(matches!(
            camera_to_world(&pose(r, Vector3::zeros())),
            Err(GeometryError::NonOrthonormalRotation { .. })
        ));
        r[(0, 1)] = f64::NAN;
        assert!(camera_to_world(&pose(r, Vector3::zeros())).is_err());
    }

    #[test]
    fn optical_axis_examples() {
        assert_eq!(optical_axis(&Matrix3::identity()), Vector3::new(0.0, 0.0, 1.0));
        // +90° about x sends z to -y.
        let r = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
        let o = optical_axis(r.matrix());
        assert!((o - Vector3::new(0.0, -1.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn optical_axis_matches_matrix_vector_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let o = optical_axis(&r);
            assert!((o.norm() - 1.0).abs() < 1e-12);
            assert!((o - r * Vector3::z()).amax() < 1e-12);
        }
    }
}
