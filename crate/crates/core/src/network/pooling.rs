//! Configuration pooling: features sampled at the predicted keypoints.

use alloc::vec::Vec;

use super::FeatureMap;
use crate::geometry::{Keypoints2D, Point2};
use crate::NUM_KEYPOINTS;

/// The four bilinear taps `(flat cell index, weight)` for a point clamped to
/// the map.
fn taps(p: Point2, h: usize, w: usize) -> [(usize, f64); 4] {
    let x = clamp_coord(p.x, w);
    let y = clamp_coord(p.y, h);
    let (x0, y0) = (libm::floor(x) as usize, libm::floor(y) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn clamp_coord(v: f64, n: usize) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, (n - 1) as f64)
    }
}

/// Bilinear sample of every channel at each keypoint (grid coordinates),
/// concatenated keypoint by keypoint: `out[k * channels + c]`.
pub fn configuration_pooling(fmap: &FeatureMap, keypoints: &Keypoints2D) -> Vec<f64> {
    let (c, h, w) = (fmap.channels, fmap.height, fmap.width);
    let mut out = Vec::with_capacity(NUM_KEYPOINTS * c);
    for p in keypoints.points.iter() {
        let t = taps(*p, h, w);
        for ch in 0..c {
            let plane = &fmap.values[ch * h * w..(ch + 1) * h * w];
            out.push(t.iter().map(|(i, wt)| wt * plane[*i]).sum());
        }
    }
    out
}

/// Scatters a pooled-vector gradient back onto the map values. Keypoint
/// positions are treated as constants.
pub fn configuration_pooling_backward(fmap: &FeatureMap, keypoints: &Keypoints2D, d_pooled: &[f64], d_map: &mut [f64]) {
    let (c, h, w) = (fmap.channels, fmap.height, fmap.width);
    for (k, p) in keypoints.points.iter().enumerate() {
        let t = taps(*p, h, w);
        for ch in 0..c {
            let g = d_pooled[k * c + ch];
            if g == 0.0 {
                continue;
            }
            for (i, wt) in t {
                d_map[ch * h * w + i] += wt * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_x(h: usize, w: usize) -> FeatureMap {
        let values = (0..h * w).map(|i| (i % w) as f64).collect();
        FeatureMap::new(1, h, w, values).unwrap()
    }

    #[test]
    fn linear_field_is_reproduced() {
        let fmap = ramp_x(6, 9);
        let kp = Keypoints2D::new(core::array::from_fn(|i| Point2::new(0.3 + 0.77 * i as f64, 0.2 * i as f64)));
        let pooled = configuration_pooling(&fmap, &kp);
        for (v, p) in pooled.iter().zip(kp.points.iter()) {
            assert!((v - p.x.min(8.0)).abs() < 1e-12, "{v} vs {}", p.x);
        }
    }

    #[test]
    fn far_points_clamp_to_border() {
        let fmap = ramp_x(4, 5);
        let kp = Keypoints2D::new([Point2::new(100.0, -40.0); NUM_KEYPOINTS]);
        assert!(configuration_pooling(&fmap, &kp).iter().all(|v| *v == 4.0));
        let kp = Keypoints2D::new([Point2::new(-3.0, 2.5); NUM_KEYPOINTS]);
        assert!(configuration_pooling(&fmap, &kp).iter().all(|v| *v == 0.0));
    }
}
