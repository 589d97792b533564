//! Neutral 68-point face template in normalized face coordinates
//! (x to the right, y down, face center at the origin, half face width 1).

use crate::roi_geometry::{Point, MIRROR_68};

/// Points on the image-left half and the midline; the image-right half is
/// filled in by mirroring.
const LEFT_AND_MIDLINE: &[(usize, f64, f64)] = &[
    // brow 17..21, outer to inner
    (17, -0.80, -0.48),
    (18, -0.65, -0.56),
    (19, -0.48, -0.59),
    (20, -0.32, -0.57),
    (21, -0.15, -0.52),
    // nose bridge
    (27, 0.0, -0.38),
    (28, 0.0, -0.24),
    (29, 0.0, -0.10),
    (30, 0.0, 0.04),
    // nostrils
    (31, -0.18, 0.16),
    (32, -0.09, 0.19),
    (33, 0.0, 0.21),
    // eye 36..41: outer corner, upper lid, inner corner, lower lid
    (36, -0.62, -0.32),
    (37, -0.52, -0.38),
    (38, -0.38, -0.38),
    (39, -0.28, -0.32),
    (40, -0.38, -0.27),
    (41, -0.52, -0.27),
    // outer lip
    (48, -0.36, 0.48),
    (49, -0.24, 0.42),
    (50, -0.10, 0.39),
    (51, 0.0, 0.40),
    (57, 0.0, 0.59),
    (58, -0.10, 0.58),
    (59, -0.24, 0.54),
    // inner lip
    (60, -0.30, 0.48),
    (61, -0.10, 0.45),
    (62, 0.0, 0.45),
    (66, 0.0, 0.51),
    (67, -0.10, 0.50),
];

/// The neutral template; symmetric under `MIRROR_68` by construction.
pub fn neutral_template() -> Vec<Point> {
    let mut pts = vec![Point::new(f64::NAN, f64::NAN); 68];
    // jaw 0..8 along a quarter ellipse down to the chin
    for (k, p) in pts.iter_mut().enumerate().take(9) {
        let theta = std::f64::consts::FRAC_PI_2 * k as f64 / 8.0;
        *p = Point::new(-0.95 * theta.cos(), -0.15 + 1.05 * theta.sin());
    }
    for &(i, x, y) in LEFT_AND_MIDLINE {
        pts[i] = Point::new(x, y);
    }
    for i in 0..68 {
        let m = MIRROR_68[i];
        if pts[m].x.is_nan() && !pts[i].x.is_nan() {
            pts[m] = Point::new(-pts[i].x, pts[i].y);
        }
    }
    debug_assert!(pts.iter().all(|p| p.x.is_finite()));
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_complete_and_symmetric() {
        let t = neutral_template();
        assert_eq!(t.len(), 68);
        for i in 0..68 {
            let m = t[MIRROR_68[i]];
            assert!((t[i].x + m.x).abs() < 1e-12 && (t[i].y - m.y).abs() < 1e-12, "point {i}");
        }
        // outer eye corners straddle the midline
        assert!(t[36].x < 0.0 && t[45].x > 0.0);
    }
}
