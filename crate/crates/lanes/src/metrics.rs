//! Lane extraction from probability maps and the lane-level metrics.

use std::collections::VecDeque;

use clld_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::raster::{rasterize, Polyline};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MIN_COMPONENT_PIXELS: usize = 20;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Fraction of correct points a predicted lane needs to not count as a false positive.
pub const TUSIMPLE_LANE_ACCURACY: f64 = 0.85;

/// Lane width for IoU matching, scaled from 30 px on 590-row images.
pub fn metric_width(h: usize) -> usize {
    ((30.0 * h as f64 / 590.0).round() as usize).max(1)
}

/// Point tolerance scaled from 20 px on 720-row images.
pub fn tusimple_tolerance(h: usize) -> f64 {
    (20.0 * h as f64 / 720.0).round().max(1.0)
}

/// Every second row from 40% of the height down to the bottom.
pub fn default_sample_rows(h: usize) -> Vec<f64> {
    let start = (0.4 * h as f64).round() as usize;
    (start..h).rev().step_by(2).map(|r| r as f64).collect()
}

/// Thresholds `prob: [H, W]`, keeps 8-connected components of at least
/// `min_pixels` pixels and turns each into a polyline of per-row centroids,
/// bottom row first. Lanes are returned left to right by their bottom point.
pub fn extract_lanes_with(prob: &Tensor<f32>, threshold: f64, min_pixels: usize) -> Vec<Polyline> {
    let (h, w) = (prob.shape()[0], prob.shape()[1]);
    let on: Vec<bool> = prob.data().iter().map(|&p| p as f64 >= threshold).collect();
    let mut label = vec![usize::MAX; h * w];
    let mut lanes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..h * w {
        if !on[seed] || label[seed] != usize::MAX {
            continue;
        }
        let id = lanes.len();
        let mut pixels = Vec::new();
        label[seed] = id;
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if on[q] && label[q] == usize::MAX {
                        label[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        lanes.push(pixels);
    }
    let mut out: Vec<Polyline> = lanes
        .into_iter()
        .filter(|px| px.len() >= min_pixels)
        .map(|px| {
            let mut sums = vec![(0usize, 0usize); h];
            for p in px {
                sums[p / w].0 += p % w;
                sums[p / w].1 += 1;
            }
            (0..h)
                .rev()
                .filter(|&r| sums[r].1 > 0)
                .map(|r| (sums[r].0 as f64 / sums[r].1 as f64, r as f64))
                .collect::<Polyline>()
        })
        .filter(|l| l.len() >= 2)
        .collect();
    out.sort_by(|a, b| a[0].0.total_cmp(&b[0].0).then(b[0].1.total_cmp(&a[0].1)));
    out
}

pub fn extract_lanes(prob: &Tensor<f32>, threshold: f64) -> Vec<Polyline> {
    extract_lanes_with(prob, threshold, MIN_COMPONENT_PIXELS)
}

/// Maximum-weight one-to-one assignment on a rectangular `rows × cols` matrix.
/// Returns, for each row, the assigned column (every row gets one when
/// `rows <= cols`; otherwise `cols` rows do).
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n_rows = weights.len();
    let n_cols = weights.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 {
        return vec![None; n_rows];
    }
    let transpose = n_rows > n_cols;
    let (n, m) = if transpose { (n_cols, n_rows) } else { (n_rows, n_cols) };
    // minimize cost = -weight on an n × m matrix with n ≤ m
    let cost = |i: usize, j: usize| if transpose { -weights[j][i] } else { -weights[i][j] };
    // potentials method with 1-based sentinel column 0
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n_rows];
    for j in 1..=m {
        if p[j] != 0 {
            let (i, jj) = (p[j] - 1, j - 1);
            if transpose {
                out[jj] = Some(i);
            } else {
                out[i] = Some(jj);
            }
        }
    }
    out
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// `iou[p][g]` between each predicted and ground-truth lane rasterized at `width_px`.
pub fn iou_matrix(pred: &[Polyline], gt: &[Polyline], width_px: usize, hw: (usize, usize)) -> Vec<Vec<f64>> {
    let (h, w) = hw;
    let raster = |l: &Polyline| rasterize(l, width_px as f64, h, w);
    let gm: Vec<Vec<bool>> = gt.iter().map(raster).collect();
    pred.iter()
        .map(|p| {
            let pm = raster(p);
            gm.iter().map(|g| iou(&pm, g)).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Lane-level true/false positives: optimal IoU assignment, then a pair is a
/// true positive when its IoU exceeds `iou_threshold`.
pub fn culane_counts(pred: &[Polyline], gt: &[Polyline], width_px: usize, iou_threshold: f64, hw: (usize, usize)) -> Counts {
    let m = iou_matrix(pred, gt, width_px, hw);
    let assignment = max_weight_assignment(&m);
    let tp = assignment
        .iter()
        .enumerate()
        .filter(|(p, g)| g.is_some_and(|g| m[*p][g] > iou_threshold))
        .count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for F1Score {
    fn from(counts: Counts) -> Self {
        Self {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

pub fn culane_f1(pred: &[Polyline], gt: &[Polyline], width_px: usize, iou_threshold: f64, hw: (usize, usize)) -> F1Score {
    culane_counts(pred, gt, width_px, iou_threshold, hw).into()
}

/// x of the polyline at row `y` by linear interpolation, or `None` outside its vertical extent.
pub fn x_at_row(lane: &[(f64, f64)], y: f64) -> Option<f64> {
    lane.windows(2).find_map(|s| {
        let ((x0, y0), (x1, y1)) = (s[0], s[1]);
        let (lo, hi) = (y0.min(y1), y0.max(y1));
        if y < lo || y > hi {
            None
        } else if y0 == y1 {
            Some((x0 + x1) / 2.0)
        } else {
            Some(x0 + (x1 - x0) * (y - y0) / (y1 - y0))
        }
    })
}

/// Point-level tallies for one image. Summing fields over images and
/// dividing gives the corpus-level rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuSimpleCounts {
    /// Correct ground-truth points (C).
    pub correct: usize,
    /// Ground-truth points (S).
    pub total: usize,
    pub false_lanes: usize,
    pub pred_lanes: usize,
    pub missed_lanes: usize,
    pub gt_lanes: usize,
}

impl TuSimpleCounts {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    pub fn fp_rate(&self) -> f64 {
        ratio(self.false_lanes, self.pred_lanes)
    }

    pub fn fn_rate(&self) -> f64 {
        ratio(self.missed_lanes, self.gt_lanes)
    }

    pub fn add(&mut self, o: TuSimpleCounts) {
        self.correct += o.correct;
        self.total += o.total;
        self.false_lanes += o.false_lanes;
        self.pred_lanes += o.pred_lanes;
        self.missed_lanes += o.missed_lanes;
        self.gt_lanes += o.gt_lanes;
    }
}

/// Greedy one-to-one matching of lanes by point accuracy, then `C`, `S` and
/// lane-level false/missed counts.
///
/// A ground-truth point at row `y` is correct when its matched prediction is
/// defined at `y` and `|x_pred − x_gt| < x_tolerance`. A predicted lane is
/// false, and a ground-truth lane missed, unless matched with accuracy of at
/// least [`TUSIMPLE_LANE_ACCURACY`].
pub fn tusimple_counts(pred: &[Polyline], gt: &[Polyline], x_tolerance: f64, sample_rows: &[f64]) -> TuSimpleCounts {
    let gt_x: Vec<Vec<(f64, f64)>> = gt
        .iter()
        .map(|g| sample_rows.iter().filter_map(|&y| x_at_row(g, y).map(|x| (y, x))).collect())
        .collect();
    let hits = |p: &Polyline, pts: &[(f64, f64)]| {
        pts.iter()
            .filter(|&&(y, xg)| x_at_row(p, y).is_some_and(|xp| (xp - xg).abs() < x_tolerance))
            .count()
    };
    let mut pairs: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (gi, pts) in gt_x.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let c = hits(p, pts);
            if c > 0 {
                pairs.push((c as f64 / pts.len() as f64, gi, pi, c));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut gt_used, mut pred_used) = (vec![false; gt.len()], vec![false; pred.len()]);
    let mut counts = TuSimpleCounts {
        total: gt_x.iter().map(Vec::len).sum(),
        pred_lanes: pred.len(),
        gt_lanes: gt.len(),
        ..Default::default()
    };
    let mut good_pred = 0;
    let mut good_gt = 0;
    for (acc, gi, pi, c) in pairs {
        if gt_used[gi] || pred_used[pi] {
            continue;
        }
        gt_used[gi] = true;
        pred_used[pi] = true;
        counts.correct += c;
        if acc >= TUSIMPLE_LANE_ACCURACY {
            good_pred += 1;
            good_gt += 1;
        }
    }
    counts.false_lanes = pred.len() - good_pred;
    counts.missed_lanes = gt.len() - good_gt;
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuSimpleScore {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

pub fn tusimple_accuracy(pred: &[Polyline], gt: &[Polyline], x_tolerance: f64, sample_rows: &[f64]) -> TuSimpleScore {
    let c = tusimple_counts(pred, gt, x_tolerance, sample_rows);
    TuSimpleScore {
        accuracy: c.accuracy(),
        fp_rate: c.fp_rate(),
        fn_rate: c.fn_rate(),
    }
}
