use crate::boxes::BoundingBox;

/// One anchor per `(cell, scale, ratio)`, ordered cell-major (row, then
/// column), then scale, then ratio. Centers sit at `(u + 0.5) * stride`;
/// an anchor of scale `s` and ratio `r = h / w` has `w = s / sqrt(r)` and
/// `h = s * sqrt(r)`.
pub fn generate_anchors(
    feature_shape: (usize, usize),
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<BoundingBox> {
    let (h, w) = feature_shape;
    let mut out = Vec::with_capacity(h * w * scales.len() * ratios.len());
    for v in 0..h {
        for u in 0..w {
            let cx = (u as f64 + 0.5) * stride;
            let cy = (v as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    let aw = s / r.sqrt();
                    let ah = s * r.sqrt();
                    out.push(BoundingBox::from_corners_unchecked(
                        cx - aw / 2.0,
                        cy - ah / 2.0,
                        cx + aw / 2.0,
                        cy + ah / 2.0,
                    ));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_grid_times_shapes() {
        assert_eq!(generate_anchors((2, 2), 8.0, &[8.0, 16.0, 32.0], &[1.0]).len(), 12);
        assert_eq!(generate_anchors((3, 5), 8.0, &[8.0, 16.0], &[0.5, 1.0, 2.0]).len(), 90);
    }

    #[test]
    fn centers_and_sizes() {
        let anchors = generate_anchors((2, 3), 8.0, &[10.0], &[1.0]);
        for (i, a) in anchors.iter().enumerate() {
            let (u, v) = (i % 3, i / 3);
            let (cx, cy) = a.center();
            assert!((cx - (u as f64 + 0.5) * 8.0).abs() < 1e-12);
            assert!((cy - (v as f64 + 0.5) * 8.0).abs() < 1e-12);
            assert!((a.width() - 10.0).abs() < 1e-12);
            assert!((a.height() - 10.0).abs() < 1e-12);
        }
    }
}
