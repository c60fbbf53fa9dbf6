//! Polyline rasterization: a pixel is on when its centre lies within `width / 2`
//! of some segment. Pixel `(row, col)` has its centre at `x = col`, `y = row`.

use clld_core::Tensor;

/// `(x, y)` points in pixel coordinates, ordered along the lane.
pub type Polyline = Vec<(f64, f64)>;

/// Euclidean distance from `p` to the segment `a–b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Row-major `h × w` occupancy of one polyline. A single point rasterizes as a disc.
pub fn rasterize(lane: &[(f64, f64)], width: f64, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    rasterize_into(&mut out, lane, width, h, w);
    out
}

fn rasterize_into(out: &mut [bool], lane: &[(f64, f64)], width: f64, h: usize, w: usize) {
    let r = width / 2.0;
    let segments: Vec<((f64, f64), (f64, f64))> = match lane.len() {
        0 => return,
        1 => vec![(lane[0], lane[0])],
        _ => lane.windows(2).map(|s| (s[0], s[1])).collect(),
    };
    for (a, b) in segments {
        let clamp_row = |v: f64| v.max(0.0).min(h as f64 - 1.0);
        let clamp_col = |v: f64| v.max(0.0).min(w as f64 - 1.0);
        let (x0, x1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
        let (y0, y1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
        if x1 < 0.0 || y1 < 0.0 || x0 > w as f64 - 1.0 || y0 > h as f64 - 1.0 {
            continue;
        }
        let (c0, c1) = (clamp_col(x0.floor()) as usize, clamp_col(x1.ceil()) as usize);
        let (r0, r1) = (clamp_row(y0.floor()) as usize, clamp_row(y1.ceil()) as usize);
        for row in r0..=r1 {
            for col in c0..=c1 {
                if point_segment_distance((col as f64, row as f64), a, b) <= r {
                    out[row * w + col] = true;
                }
            }
        }
    }
}

/// Union of all lanes as a `[H, W]` mask of zeros and ones.
pub fn render_lane_mask(lanes: &[Polyline], width_px: usize, hw: (usize, usize)) -> Tensor<f32> {
    let (h, w) = hw;
    let mut occ = vec![false; h * w];
    for lane in lanes {
        rasterize_into(&mut occ, lane, width_px as f64, h, w);
    }
    Tensor::new([h, w], occ.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .expect("mask shape matches buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_list_gives_empty_mask() {
        let m = render_lane_mask(&[], 3, (10, 10));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn horizontal_segment_width_three() {
        let lane = vec![(2.0, 5.0), (7.0, 5.0)];
        let m = render_lane_mask(&[lane], 3, (10, 10));
        // rows 4..=6 over cols 1..=8: the caps reach (1, 4) at distance √2 ≤ 1.5
        let on: usize = m.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(on, 3 * 8);
        assert_eq!(m.data()[4 * 10 + 1], 1.0);
        assert_eq!(m.data()[4 * 10], 0.0);
        assert_eq!(m.data()[3 * 10 + 2], 0.0);
    }

    #[test]
    fn distance_to_degenerate_segment() {
        assert_eq!(point_segment_distance((3.0, 4.0), (0.0, 0.0), (0.0, 0.0)), 5.0);
        assert_eq!(point_segment_distance((1.0, 1.0), (0.0, 0.0), (2.0, 0.0)), 1.0);
    }
}
