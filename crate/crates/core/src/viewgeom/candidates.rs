use nalgebra::Vector3;

use crate::tensorio::{Intrinsics, TensorFile, TensorIoError};

use super::{FrameGeometry, GeometryConfig};

/// Row-major H × W depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "depth buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self::new(height, width, data)
    }

    pub fn from_tensor(t: &TensorFile) -> Result<Self, TensorIoError> {
        match *t.dims() {
            [h, w] => Ok(Self::new(h as usize, w as usize, t.data().to_vec())),
            _ => Err(TensorIoError::RankMismatch {
                expected: 2,
                actual: t.dims().len(),
            }),
        }
    }

    pub fn to_tensor(&self) -> TensorFile {
        TensorFile::new(
            vec![self.height as u64, self.width as u64],
            self.data.clone(),
        )
        .expect("depth map shape matches buffer")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Depth at column `u`, row `v`.
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, z: f32) {
        self.data[v * self.width + u] = z;
    }

    /// Row-major depths.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn has_finite(&self) -> bool {
        self.data.iter().any(|z| z.is_finite())
    }
}

/// A back-projected grid sample, camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPoint {
    pub u: usize,
    pub v: usize,
    pub position: Vector3<f64>,
}

impl SampledPoint {
    pub fn depth(&self) -> f64 {
        self.position.z
    }
}

fn usable(z: f32) -> bool {
    z.is_finite() && z > 0.0
}

/// Back-project the stride grid (`u = j·stride`, `v = i·stride`) through the
/// pinhole intrinsics. Non-finite and non-positive depths are skipped.
pub fn backproject(g: &FrameGeometry) -> Vec<SampledPoint> {
    let Intrinsics { fx, fy, cx, cy } = g.pose.intrinsics;
    let stride = g.stride.max(1);
    let rows = g.depth.height() / stride;
    let cols = g.depth.width() / stride;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let v = i * stride;
        for j in 0..cols {
            let u = j * stride;
            let z = g.depth.at(u, v);
            if !usable(z) {
                continue;
            }
            let z = f64::from(z);
            out.push(SampledPoint {
                u,
                v,
                position: Vector3::new((u as f64 - cx) * z / fx, (v as f64 - cy) * z / fy, z),
            });
        }
    }
    out
}

/// Linear-interpolated percentile of an ascending slice, `p` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Inclusive depth bounds `[p_lo, p_hi]` over the given points.
pub fn depth_band(points: &[SampledPoint], percentiles: (f64, f64)) -> Option<(f64, f64)> {
    if points.is_empty() {
        return None;
    }
    let mut depths: Vec<f64> = points.iter().map(SampledPoint::depth).collect();
    depths.sort_by(f64::total_cmp);
    Some((
        percentile_sorted(&depths, percentiles.0),
        percentile_sorted(&depths, percentiles.1),
    ))
}

pub fn in_window(u: usize, v: usize, width: usize, height: usize, cfg: &GeometryConfig) -> bool {
    let (fu, fv) = (u as f64 / width as f64, v as f64 / height as f64);
    fv >= cfg.window_top && fu >= cfg.window_left && fu < cfg.window_right
}

/// Largest relative second difference of inverse depth along the image axes,
/// measured at grid spacing `stride`. Inverse depth is affine in pixel
/// coordinates on any plane, so this vanishes on planar surfaces regardless of
/// their slant and spikes at occlusion edges. Axes without two usable
/// neighbours are skipped.
pub fn inverse_depth_curvature(depth: &DepthMap, u: usize, v: usize, stride: usize) -> f64 {
    let z = depth.at(u, v);
    if !usable(z) {
        return f64::INFINITY;
    }
    let w = 1.0 / f64::from(z);
    let inv = |uu: usize, vv: usize| {
        let z = depth.at(uu, vv);
        usable(z).then(|| 1.0 / f64::from(z))
    };
    let mut worst = 0.0f64;
    if u >= stride && u + stride < depth.width() {
        if let (Some(a), Some(b)) = (inv(u - stride, v), inv(u + stride, v)) {
            worst = worst.max((a - 2.0 * w + b).abs() / w);
        }
    }
    if v >= stride && v + stride < depth.height() {
        if let (Some(a), Some(b)) = (inv(u, v - stride), inv(u, v + stride)) {
            worst = worst.max((a - 2.0 * w + b).abs() / w);
        }
    }
    worst
}

/// Keep points in the lower-central window whose depth lies inside the
/// percentile band and whose local surface is free of depth discontinuities.
pub fn select_ground_candidates(
    points: &[SampledPoint],
    g: &FrameGeometry,
    cfg: &GeometryConfig,
) -> Vec<SampledPoint> {
    let (w, h) = (g.depth.width(), g.depth.height());
    let window: Vec<SampledPoint> = points
        .iter()
        .copied()
        .filter(|p| in_window(p.u, p.v, w, h, cfg))
        .collect();
    let Some((lo, hi)) = depth_band(&window, cfg.depth_percentiles) else {
        return Vec::new();
    };
    let stride = g.stride.max(1);
    window
        .into_iter()
        .filter(|p| (lo..=hi).contains(&p.depth()))
        .filter(|p| inverse_depth_curvature(&g.depth, p.u, p.v, stride) < cfg.max_curvature)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::PoseRecord;
    use nalgebra::Matrix3;

    fn geometry(depth: DepthMap, k: Intrinsics, stride: usize) -> FrameGeometry {
        FrameGeometry {
            depth,
            pose: PoseRecord::from_parts(0, &Matrix3::identity(), &Vector3::zeros(), k),
            stride,
        }
    }

    fn k(fx: f64, fy: f64, cx: f64, cy: f64) -> Intrinsics {
        Intrinsics { fx, fy, cx, cy }
    }

    #[test]
    fn principal_point_backprojects_to_axis() {
        let depth = DepthMap::from_fn(8, 8, |_, _| 1.0);
        let g = geometry(depth, k(300.0, 300.0, 4.0, 4.0), 4);
        let pts = backproject(&g);
        let p = pts.iter().find(|p| p.u == 4 && p.v == 4).unwrap();
        assert_eq!(p.position, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn similar_triangles() {
        let depth = DepthMap::from_fn(100, 200, |_, _| 2.0);
        let g = geometry(depth, k(100.0, 100.0, 0.0, 0.0), 100);
        let pts = backproject(&g);
        let p = pts.iter().find(|p| p.u == 100).unwrap();
        assert_eq!(p.position, Vector3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn grid_is_floor_of_size_over_stride() {
        let depth = DepthMap::from_fn(17, 30, |_, _| 3.0);
        let g = geometry(depth, k(1.0, 1.0, 0.0, 0.0), 8);
        assert_eq!(backproject(&g).len(), 2 * 3);
    }

    #[test]
    fn nonfinite_depths_skipped() {
        let depth = DepthMap::from_fn(16, 16, |u, _| if u == 0 { f32::NAN } else { 1.0 });
        let g = geometry(depth, k(1.0, 1.0, 0.0, 0.0), 8);
        assert_eq!(backproject(&g).len(), 2);
    }

    #[test]
    fn slanted_plane_points_satisfy_plane_equation() {
        // plane n·X = c in camera coordinates; depth along ray (x', y', 1) is c / (n·ray).
        let n = Vector3::new(0.1, -0.8, -0.4).normalize();
        let c = -3.0;
        let intr = k(400.0, 420.0, 160.0, 120.0);
        let depth = DepthMap::from_fn(240, 320, |u, v| {
            let ray = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            (c / n.dot(&ray)) as f32
        });
        let g = geometry(depth, intr, 8);
        let pts = backproject(&g);
        assert!(!pts.is_empty());
        for p in &pts {
            if p.depth() > 0.0 {
                let residual = (n.dot(&p.position) - c).abs();
                // f32 storage limits precision to ~1e-7 relative.
                assert!(residual < 1e-5 * p.depth().max(c.abs()), "residual {residual}");
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 50.0), 3.0);
        assert_eq!(percentile_sorted(&v, 100.0), 5.0);
        assert!((percentile_sorted(&v, 5.0) - 1.2).abs() < 1e-12);
    }

    fn window_grid_count(w: usize, h: usize, stride: usize, cfg: &GeometryConfig) -> usize {
        let mut n = 0;
        for i in 0..h / stride {
            for j in 0..w / stride {
                if in_window(j * stride, i * stride, w, h, cfg) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn uniform_plane_keeps_whole_window() {
        let cfg = GeometryConfig::default();
        let depth = DepthMap::from_fn(240, 320, |_, _| 7.5);
        let g = geometry(depth, k(300.0, 300.0, 160.0, 120.0), 8);
        let kept = select_ground_candidates(&backproject(&g), &g, &cfg);
        assert_eq!(kept.len(), window_grid_count(320, 240, 8, &cfg));
        assert!(kept.iter().all(|p| in_window(p.u, p.v, 320, 240, &cfg)));
    }

    #[test]
    fn step_edge_points_removed() {
        let cfg = GeometryConfig::default();
        let (w, h, stride) = (320usize, 240usize, 8usize);
        // Step between grid columns 19 and 20 (pixels 152 / 160).
        let edge_px = 156;
        let depth = DepthMap::from_fn(h, w, |u, _| if u < edge_px { 5.0 } else { 6.0 });
        let g = geometry(depth, k(300.0, 300.0, 160.0, 120.0), stride);
        let kept = select_ground_candidates(&backproject(&g), &g, &cfg);

        // Expected: every window sample except the two columns adjacent to the step.
        let mut expected = 0;
        let mut edge_mask = 0;
        for i in 0..h / stride {
            for j in 0..w / stride {
                let (u, v) = (j * stride, i * stride);
                if !in_window(u, v, w, h, &cfg) {
                    continue;
                }
                let on_edge = u == 152 || u == 160;
                if on_edge {
                    edge_mask += 1;
                } else {
                    expected += 1;
                }
            }
        }
        assert!(edge_mask > 0);
        assert_eq!(kept.len(), expected);
        assert!(kept.iter().all(|p| p.u != 152 && p.u != 160));
    }

    #[test]
    fn near_clip_spike_excluded_by_percentile_band() {
        let cfg = GeometryConfig::default();
        let mut depth = DepthMap::from_fn(240, 320, |_, _| 10.0);
        let (su, sv) = (160, 200);
        depth.set(su, sv, 0.01); // 0.1% of the median
        let g = geometry(depth, k(300.0, 300.0, 160.0, 120.0), 8);
        let pts = backproject(&g);
        let window: Vec<_> = pts
            .iter()
            .copied()
            .filter(|p| in_window(p.u, p.v, 320, 240, &cfg))
            .collect();
        let (lo, _) = depth_band(&window, cfg.depth_percentiles).unwrap();
        assert!(lo > 0.01);
        let kept = select_ground_candidates(&pts, &g, &cfg);
        assert!(kept.iter().all(|p| !(p.u == su && p.v == sv)));

        // Band alone, with the curvature filter disabled.
        let no_curv = GeometryConfig {
            max_curvature: f64::INFINITY,
            ..cfg
        };
        let kept = select_ground_candidates(&pts, &g, &no_curv);
        assert_eq!(kept.len(), window.len() - 1);
    }

    #[test]
    fn curvature_vanishes_on_slanted_plane() {
        let n = Vector3::new(0.0, -0.9, -0.3).normalize();
        let intr = k(500.0, 500.0, 320.0, 240.0);
        let depth = DepthMap::from_fn(480, 640, |u, v| {
            let ray = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            (-2.0 / n.dot(&ray)) as f32
        });
        for (u, v) in [(320, 400), (200, 300), (400, 470)] {
            assert!(inverse_depth_curvature(&depth, u, v, 8) < 1e-5);
        }
    }
}
