//! Per-frame view geometry: back-projection, ground candidates, robust plane
//! fit and the optical-axis / ground-normal angle.

mod camera;
mod candidates;
mod ransac;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::PoseRecord;

pub use camera::{camera_to_world, optical_axis, CameraToWorld};
pub use candidates::{
    backproject, depth_band, in_window, inverse_depth_curvature, percentile_sorted,
    select_ground_candidates, DepthMap, SampledPoint,
};
pub use ransac::{
    fit_plane_least_squares, hypothesis_search, orient_normal, plane_through, ransac_plane,
    GroundPlane, Hypothesis, InvalidReason,
};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (deviation {deviation:.3e})")]
    NonOrthonormalRotation { deviation: f64 },
}

/// Tunables for frame scoring. Thresholds are relative so that scores do not
/// depend on the depth unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub stride: usize,
    /// Candidate window: rows with `v / H >= window_top`.
    pub window_top: f64,
    /// Candidate window: columns with `window_left <= u / W < window_right`.
    pub window_left: f64,
    pub window_right: f64,
    /// Depth band, percentiles of the window depths (inclusive).
    pub depth_percentiles: (f64, f64),
    /// Upper bound on the relative second difference of inverse depth.
    pub max_curvature: f64,
    pub ransac_iterations: usize,
    pub min_candidates: usize,
    pub min_inliers: usize,
    /// Inlier distance as a fraction of the median candidate depth.
    pub inlier_threshold_rel: f64,
    /// |n_y| below which the normal is oriented toward the camera centre.
    pub nadir_band: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            window_top: 0.6,
            window_left: 0.2,
            window_right: 0.8,
            depth_percentiles: (5.0, 95.0),
            max_curvature: 0.05,
            ransac_iterations: 200,
            min_candidates: 32,
            min_inliers: 16,
            inlier_threshold_rel: 0.01,
            nadir_band: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGeometry {
    pub depth: DepthMap,
    pub pose: PoseRecord,
    pub stride: usize,
}

/// One frame's view score record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_index: u64,
    pub theta_deg: Option<f64>,
    pub s_deg: Option<f64>,
    pub valid: bool,
    pub invalid_reason: Option<InvalidReason>,
}

impl FrameScore {
    pub fn from_theta(frame_index: u64, theta_deg: f64) -> Self {
        Self {
            frame_index,
            theta_deg: Some(theta_deg),
            s_deg: Some(theta_deg - 90.0),
            valid: true,
            invalid_reason: None,
        }
    }

    pub fn invalid(frame_index: u64, reason: InvalidReason) -> Self {
        Self {
            frame_index,
            theta_deg: None,
            s_deg: None,
            valid: false,
            invalid_reason: Some(reason),
        }
    }

    /// The score `s = θ − 90°` of a valid frame.
    pub fn score(&self) -> Option<f64> {
        if self.valid {
            self.s_deg
        } else {
            None
        }
    }
}

/// `θ = arccos(clip(o · n_world, −1, 1))` in degrees.
pub fn angle_between_deg(o: &Vector3<f64>, n: &Vector3<f64>) -> Option<f64> {
    let c = o.dot(n);
    if c.is_nan() {
        return None;
    }
    Some(c.clamp(-1.0, 1.0).acos().to_degrees())
}

pub fn view_angle(
    frame_index: u64,
    plane: &Result<GroundPlane, InvalidReason>,
    r_cw: &Matrix3<f64>,
) -> FrameScore {
    let plane = match plane {
        Ok(p) => p,
        Err(reason) => return FrameScore::invalid(frame_index, *reason),
    };
    let n_world = plane.normal_world(r_cw);
    match angle_between_deg(&optical_axis(r_cw), &n_world) {
        Some(theta) => FrameScore::from_theta(frame_index, theta),
        None => FrameScore::invalid(frame_index, InvalidReason::NonfiniteGeometry),
    }
}

/// Per-frame RANSAC seed, mixed so consecutive frames draw unrelated samples.
pub fn frame_seed(seed: u64, frame_index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ frame_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full per-frame pipeline: pose inversion, back-projection, candidate
/// selection, RANSAC, angle.
pub fn score_frame(g: &FrameGeometry, cfg: &GeometryConfig, seed: u64) -> FrameScore {
    let idx = g.pose.frame_index;
    if !g.pose.valid || !g.pose.is_finite() || !g.depth.has_finite() {
        return FrameScore::invalid(idx, InvalidReason::NonfiniteGeometry);
    }
    let Ok(c2w) = camera_to_world(&g.pose) else {
        return FrameScore::invalid(idx, InvalidReason::NonfiniteGeometry);
    };
    let points = backproject(g);
    let candidates: Vec<Vector3<f64>> = select_ground_candidates(&points, g, cfg)
        .iter()
        .map(|p| p.position)
        .collect();
    let plane = ransac_plane(&candidates, cfg, frame_seed(seed, idx));
    view_angle(idx, &plane, &c2w.rotation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::Intrinsics;
    use nalgebra::Rotation3;

    fn plane_with_normal(n: Vector3<f64>) -> Result<GroundPlane, InvalidReason> {
        Ok(GroundPlane {
            normal_cam: n,
            offset: 1.0,
            inlier_count: 100,
            candidate_count: 100,
            hypothesis_inliers: 100,
            inlier_threshold: 0.01,
        })
    }

    /// Camera-to-world rotation for a camera yawed by `yaw` and pitched down
    /// by `pitch` in a z-up world; camera axes are x right, y down, z forward.
    fn look(yaw: f64, pitch: f64) -> Matrix3<f64> {
        let forward = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin());
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        Matrix3::from_columns(&[right, down, forward])
    }

    #[test]
    fn level_camera_over_horizontal_ground() {
        let r_cw = look(0.3, 0.0);
        // World up expressed in the camera frame.
        let up_cam = r_cw.transpose() * Vector3::z();
        let s = view_angle(0, &plane_with_normal(up_cam), &r_cw);
        assert!((s.theta_deg.unwrap() - 90.0).abs() < 1e-9);
        assert!(s.s_deg.unwrap().abs() < 1e-9);
    }

    #[test]
    fn nadir_camera() {
        let r_cw = look(0.0, std::f64::consts::FRAC_PI_2);
        let up_cam = r_cw.transpose() * Vector3::z();
        let s = view_angle(0, &plane_with_normal(up_cam), &r_cw);
        assert!((s.theta_deg.unwrap() - 180.0).abs() < 1e-6);
        assert!((s.s_deg.unwrap() - 90.0).abs() < 1e-6);
    }

    #[test]
    fn forty_five_degree_depression_matches_trigonometry() {
        // Build the pose from an axis-angle pitch about the camera x axis.
        let pitch = 45f64.to_radians();
        let base = look(1.1, 0.0);
        let r_cw = base * Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch).into_inner();
        let o = r_cw * Vector3::z();
        // Independent: elevation of the optical axis is asin(o_z).
        let expected_s = -o.z.asin().to_degrees();
        assert!((expected_s - 45.0).abs() < 1e-9);
        let up_cam = r_cw.transpose() * Vector3::z();
        let s = view_angle(0, &plane_with_normal(up_cam), &r_cw);
        assert!((s.s_deg.unwrap() - 45.0).abs() < 1e-6);
    }

    #[test]
    fn clip_keeps_theta_in_range_for_non_unit_inputs() {
        let r = Matrix3::identity();
        for n in [Vector3::new(0.0, 0.0, 1.5), Vector3::new(0.0, 0.0, -3.0), Vector3::new(0.2, 0.0, 1.0)] {
            let s = view_angle(0, &plane_with_normal(n), &r);
            let theta = s.theta_deg.unwrap();
            assert!((0.0..=180.0).contains(&theta));
        }
        assert_eq!(angle_between_deg(&Vector3::new(f64::NAN, 0.0, 0.0), &Vector3::z()), None);
    }

    #[test]
    fn invalid_plane_passes_through() {
        let s = view_angle(4, &Err(InvalidReason::TooFewCandidates), &Matrix3::identity());
        assert!(!s.valid);
        assert_eq!(s.invalid_reason, Some(InvalidReason::TooFewCandidates));
        assert_eq!(s.frame_index, 4);
        assert_eq!(s.score(), None);
    }

    #[test]
    fn invalid_pose_marks_frame_invalid() {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 32.0 };
        let mut pose = PoseRecord::from_parts(2, &Matrix3::identity(), &Vector3::zeros(), k);
        pose.valid = false;
        let g = FrameGeometry {
            depth: DepthMap::from_fn(64, 64, |_, _| 1.0),
            pose,
            stride: 8,
        };
        let s = score_frame(&g, &GeometryConfig::default(), 0);
        assert_eq!(s.invalid_reason, Some(InvalidReason::NonfiniteGeometry));
    }

    #[test]
    fn serialized_record_fields() {
        let rec = serde_json::to_string(&FrameScore::invalid(3, InvalidReason::TooFewInliers)).unwrap();
        assert_eq!(
            rec,
            r#"{"frame_index":3,"theta_deg":null,"s_deg":null,"valid":false,"invalid_reason":"too_few_inliers"}"#
        );
    }
}
