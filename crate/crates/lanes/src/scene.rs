//! Procedural road scenes with known lane geometry.
//!
//! A scene is a perspective road under a sky band, 2–4 solid lane marks that
//! converge mildly toward a vanishing point, and one scenario effect. Lane
//! polylines are recorded before any effect is applied, so occluded marks are
//! still labelled. Images are quantized to 8 bits so they survive PNG storage.

use std::fmt;
use std::str::FromStr;

use clld_core::rng::{stream, Domain, Rng};
use clld_core::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{rasterize, Polyline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Normal,
    Shadow,
    Occluded,
    Night,
    Crowd,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Normal,
        Scenario::Shadow,
        Scenario::Occluded,
        Scenario::Night,
        Scenario::Crowd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::Shadow => "shadow",
            Scenario::Occluded => "occluded",
            Scenario::Night => "night",
            Scenario::Crowd => "crowd",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub lane_count_range: [usize; 2],
    /// Lateral drift of the lane tops in pixels (sign gives the bend direction).
    pub curvature_range: [f64; 2],
    pub mark_width_px: usize,
    /// Occluders in the `occluded` scenario.
    pub occluder_count_range: [usize; 2],
    /// Occluders in the `crowd` scenario.
    pub crowd_count_range: [usize; 2],
    pub shadow_polygon_count: usize,
    /// Global brightness factor in the `night` scenario.
    pub brightness_range: [f64; 2],
    pub texture_noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            lane_count_range: [2, 4],
            curvature_range: [-8.0, 8.0],
            mark_width_px: 2,
            occluder_count_range: [1, 2],
            crowd_count_range: [3, 6],
            shadow_polygon_count: 2,
            brightness_range: [0.3, 0.5],
            texture_noise_std: 0.03,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!("image size {h}x{w} below 16x16")));
        }
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")))
            }
        };
        let [l0, l1] = self.lane_count_range;
        ordered("lane_count", l0 as f64, l1 as f64)?;
        if l0 < 1 || l1 > 4 {
            return Err(Error::Config("lane_count_range must lie within [1, 4]".into()));
        }
        ordered("curvature", self.curvature_range[0], self.curvature_range[1])?;
        ordered(
            "occluder_count",
            self.occluder_count_range[0] as f64,
            self.occluder_count_range[1] as f64,
        )?;
        if self.occluder_count_range[0] == 0 {
            return Err(Error::Config("occluded scenes need at least one occluder".into()));
        }
        ordered("crowd_count", self.crowd_count_range[0] as f64, self.crowd_count_range[1] as f64)?;
        ordered("brightness", self.brightness_range[0], self.brightness_range[1])?;
        if self.brightness_range[0] <= 0.0 || self.brightness_range[1] > 1.0 {
            return Err(Error::Config("brightness_range must lie within (0, 1]".into()));
        }
        if self.mark_width_px < 1 {
            return Err(Error::Config("mark_width_px must be >= 1".into()));
        }
        if self.texture_noise_std < 0.0 {
            return Err(Error::Config("texture_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneScene {
    /// `[3, H, W]`, values are multiples of 1/255 in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Left to right at the bottom row.
    pub lanes: Vec<Polyline>,
    pub scenario: Scenario,
    pub seed: u64,
}

/// Intermediate rasters kept for inspecting what an effect did.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayers {
    /// Per-lane stroke pixels before any effect.
    pub strokes: Vec<Vec<bool>>,
    /// Pixels painted by opaque occluders.
    pub occluder: Vec<bool>,
    /// Pixels darkened by shadows.
    pub shadow: Vec<bool>,
}

pub fn generate_scene(seed: u64, scenario: Scenario, config: &GeneratorConfig) -> Result<LaneScene> {
    generate_scene_with_layers(seed, scenario, config).map(|(s, _)| s)
}

struct Canvas {
    h: usize,
    w: usize,
    /// Row-major RGB triples.
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn at(&mut self, row: usize, col: usize) -> &mut [f64; 3] {
        &mut self.px[row * self.w + col]
    }
}

struct Road {
    horizon: f64,
    lanes: Vec<Polyline>,
    /// Lane x position for fractional lane index `k` at row `y`.
    bottom_x: Vec<f64>,
    spacing: f64,
    vanish_x: f64,
    convergence: f64,
    curvature: f64,
}

impl Road {
    fn t(&self, h: usize, y: f64) -> f64 {
        ((h as f64 - 1.0 - y) / (h as f64 - 1.0 - self.horizon)).clamp(0.0, 1.0)
    }

    /// x of a lane whose bottom position is `xb`, at row `y`.
    fn x_at(&self, h: usize, xb: f64, y: f64) -> f64 {
        let t = self.t(h, y);
        xb + (self.vanish_x - xb) * self.convergence * t + self.curvature * t * t
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn uniform_int(rng: &mut Rng, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn layout_road(rng: &mut Rng, config: &GeneratorConfig) -> Road {
    let (h, w) = config.hw();
    let (hf, wf) = (h as f64, w as f64);
    let n = uniform_int(rng, config.lane_count_range);
    let horizon = (0.3 * hf).round();
    let lane_top = horizon + (0.1 * hf).round();
    let margin = 3.0;
    let mut spacing = uniform(rng, 0.22, 0.3) * wf;
    if n > 1 {
        spacing = spacing.min((wf - 1.0 - 2.0 * margin) / (n - 1) as f64);
    }
    let span = spacing * (n as f64 - 1.0);
    let lo = margin + span / 2.0;
    let hi = wf - 1.0 - margin - span / 2.0;
    let center = (wf / 2.0 + uniform(rng, -0.08, 0.08) * wf).clamp(lo.min(hi), hi.max(lo));
    let bottom_x: Vec<f64> = (0..n)
        .map(|i| center + (i as f64 - (n as f64 - 1.0) / 2.0) * spacing)
        .collect();
    let mut road = Road {
        horizon,
        lanes: Vec::new(),
        bottom_x,
        spacing,
        vanish_x: center + uniform(rng, -0.1, 0.1) * wf,
        convergence: uniform(rng, 0.45, 0.6),
        curvature: uniform(rng, config.curvature_range[0], config.curvature_range[1]),
    };
    let mut lanes = Vec::with_capacity(n);
    for &xb in &road.bottom_x {
        let mut pts = Vec::new();
        let mut y = hf - 1.0;
        while y >= lane_top {
            let x = road.x_at(h, xb, y);
            if (0.0..=wf - 1.0).contains(&x) {
                pts.push((round3(x), y));
            }
            y -= 2.0;
        }
        if pts.len() >= 2 {
            lanes.push(pts);
        }
    }
    road.lanes = lanes;
    road
}

fn paint_background(rng: &mut Rng, road: &Road, config: &GeneratorConfig) -> Canvas {
    let (h, w) = config.hw();
    let mut tint = || uniform(rng, -0.05, 0.05);
    let sky = [0.55 + tint(), 0.65 + tint(), 0.8 + tint()];
    let grass = [0.25 + tint(), 0.4 + tint(), 0.2 + tint()];
    let asphalt = 0.33 + tint();
    let road_col = [asphalt, asphalt, asphalt + 0.02];
    let left = road.bottom_x.first().copied().unwrap_or(w as f64 / 2.0) - 0.6 * road.spacing;
    let right = road.bottom_x.last().copied().unwrap_or(w as f64 / 2.0) + 0.6 * road.spacing;
    let mut canvas = Canvas {
        h,
        w,
        px: vec![[0.0; 3]; h * w],
    };
    for row in 0..h {
        let y = row as f64;
        let (xl, xr) = (road.x_at(h, left, y), road.x_at(h, right, y));
        for col in 0..w {
            let x = col as f64;
            *canvas.at(row, col) = if y < road.horizon {
                let fade = 0.1 * y / road.horizon.max(1.0);
                [sky[0] - fade, sky[1] - fade, sky[2] - fade]
            } else if x >= xl && x <= xr {
                road_col
            } else {
                grass
            };
        }
    }
    canvas
}

fn paint_lanes(rng: &mut Rng, canvas: &mut Canvas, lanes: &[Polyline], width: usize) -> Vec<Vec<bool>> {
    let (h, w) = (canvas.h, canvas.w);
    let mut strokes = Vec::with_capacity(lanes.len());
    for (i, lane) in lanes.iter().enumerate() {
        let yellow = i == 0 && rng.random_bool(0.3);
        let paint = if yellow { [0.9, 0.8, 0.3] } else { [0.92, 0.92, 0.9] };
        let stroke = rasterize(lane, width as f64, h, w);
        for (idx, _) in stroke.iter().enumerate().filter(|(_, &on)| on) {
            canvas.px[idx] = paint;
        }
        strokes.push(stroke);
    }
    strokes
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn add_shadows(rng: &mut Rng, canvas: &mut Canvas, lanes: &[Polyline], count: usize, shadow: &mut [bool]) {
    let (h, w) = (canvas.h, canvas.w);
    for _ in 0..count {
        let lane = &lanes[rng.random_range(0..lanes.len())];
        let (cx, cy) = lane[rng.random_range(0..lane.len())];
        let (hw, hh) = (uniform(rng, 5.0, 12.0), uniform(rng, 3.0, 8.0));
        let mut jit = || uniform(rng, -2.0, 2.0);
        let poly = [
            (cx - hw + jit(), cy - hh + jit()),
            (cx + hw + jit(), cy - hh + jit()),
            (cx + hw + jit(), cy + hh + jit()),
            (cx - hw + jit(), cy + hh + jit()),
        ];
        let keep = 1.0 - uniform(rng, 0.45, 0.65);
        for row in 0..h {
            for col in 0..w {
                if point_in_polygon((col as f64, row as f64), &poly) {
                    let idx = row * w + col;
                    if !shadow[idx] {
                        canvas.px[idx].iter_mut().for_each(|c| *c *= keep);
                        shadow[idx] = true;
                    }
                }
            }
        }
    }
}

/// Paints an opaque box over a run of rows of lane `lane`, growing the run
/// until at least `fraction` of that lane's stroke pixels are covered.
fn add_occluder(
    rng: &mut Rng,
    canvas: &mut Canvas,
    lanes: &[Polyline],
    strokes: &[Vec<bool>],
    fraction: f64,
    occluder: &mut [bool],
) {
    let (h, w) = (canvas.h, canvas.w);
    let k = rng.random_range(0..lanes.len());
    let stroke = &strokes[k];
    let total = stroke.iter().filter(|&&b| b).count();
    let rows: Vec<usize> = (0..h).filter(|&r| stroke[r * w..(r + 1) * w].iter().any(|&b| b)).collect();
    if rows.is_empty() || total == 0 {
        return;
    }
    let lane_x = |row: usize| -> f64 {
        let cols: Vec<usize> = (0..w).filter(|&c| stroke[row * w + c]).collect();
        cols.iter().sum::<usize>() as f64 / cols.len() as f64
    };
    let half = uniform(rng, 3.0, 6.0);
    let start = rng.random_range(0..rows.len());
    let (mut lo, mut hi) = (start, start);
    let covered = |lo: usize, hi: usize| -> (usize, usize, usize, usize) {
        let (r0, r1) = (rows[lo], rows[hi]);
        let xs: Vec<f64> = (lo..=hi).map(|i| lane_x(rows[i])).collect();
        let c0 = (xs.iter().cloned().fold(f64::INFINITY, f64::min) - half).floor().max(0.0) as usize;
        let c1 = ((xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + half).ceil() as usize).min(w - 1);
        (r0, r1, c0, c1)
    };
    let coverage = |b: (usize, usize, usize, usize)| -> f64 {
        let mut n = 0;
        for r in b.0..=b.1 {
            for c in b.2..=b.3 {
                n += stroke[r * w + c] as usize;
            }
        }
        n as f64 / total as f64
    };
    let mut bx = covered(lo, hi);
    let mut grow_down = rng.random_bool(0.5);
    while coverage(bx) < fraction && (lo > 0 || hi + 1 < rows.len()) {
        if (grow_down && hi + 1 < rows.len()) || lo == 0 {
            hi += 1;
        } else {
            lo -= 1;
        }
        grow_down = !grow_down;
        bx = covered(lo, hi);
    }
    let base = [uniform(rng, 0.05, 0.6), uniform(rng, 0.05, 0.6), uniform(rng, 0.05, 0.6)];
    for r in bx.0..=bx.1 {
        for c in bx.2..=bx.3 {
            let idx = r * w + c;
            let edge = r == bx.0 || r == bx.1 || c == bx.2 || c == bx.3;
            let shade = if edge { 0.6 } else { 1.0 };
            canvas.px[idx] = [base[0] * shade, base[1] * shade, base[2] * shade];
            occluder[idx] = true;
        }
    }
}

/// Like [`generate_scene`], also returning the intermediate rasters.
pub fn generate_scene_with_layers(
    seed: u64,
    scenario: Scenario,
    config: &GeneratorConfig,
) -> Result<(LaneScene, SceneLayers)> {
    config.validate()?;
    let (h, w) = config.hw();
    let mut rng = stream(seed, Domain::Scene, scenario as u64, 0);
    let road = layout_road(&mut rng, config);
    let mut canvas = paint_background(&mut rng, &road, config);
    let strokes = paint_lanes(&mut rng, &mut canvas, &road.lanes, config.mark_width_px);
    let mut occluder = vec![false; h * w];
    let mut shadow = vec![false; h * w];
    let lanes = &road.lanes;
    if !lanes.is_empty() {
        match scenario {
            Scenario::Normal => {}
            Scenario::Shadow => add_shadows(&mut rng, &mut canvas, lanes, config.shadow_polygon_count, &mut shadow),
            Scenario::Occluded => {
                for _ in 0..uniform_int(&mut rng, config.occluder_count_range) {
                    let f = uniform(&mut rng, 0.12, 0.33);
                    add_occluder(&mut rng, &mut canvas, lanes, &strokes, f, &mut occluder);
                }
            }
            Scenario::Night => {
                let b = uniform(&mut rng, config.brightness_range[0], config.brightness_range[1]);
                canvas.px.iter_mut().flatten().for_each(|c| *c *= b);
            }
            Scenario::Crowd => {
                for _ in 0..uniform_int(&mut rng, config.crowd_count_range) {
                    let f = uniform(&mut rng, 0.04, 0.15);
                    add_occluder(&mut rng, &mut canvas, lanes, &strokes, f, &mut occluder);
                }
            }
        }
    }
    let noise_std = config.texture_noise_std * if scenario == Scenario::Night { 0.6 } else { 1.0 };
    let mut data = vec![0f32; 3 * h * w];
    for (idx, px) in canvas.px.iter().enumerate() {
        let grain: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
        for ch in 0..3 {
            let tint: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std * 0.3;
            let v = (px[ch] + grain + tint).clamp(0.0, 1.0);
            data[ch * h * w + idx] = quantize(v);
        }
    }
    let image = Tensor::new([3, h, w], data)?;
    let scene = LaneScene {
        image,
        lanes: road.lanes.clone(),
        scenario,
        seed,
    };
    Ok((
        scene,
        SceneLayers {
            strokes,
            occluder,
            shadow,
        },
    ))
}

/// Rounds to the nearest multiple of 1/255, as 8-bit storage would.
pub fn quantize(v: f64) -> f32 {
    ((v * 255.0).round() / 255.0) as f32
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of a `[3, H, W]` image.
pub fn luminance(image: &Tensor<f32>) -> Vec<f64> {
    let plane = image.numel() / 3;
    let d = image.data();
    (0..plane)
        .map(|i| 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lanes_are_sorted_and_in_bounds() {
        let cfg = GeneratorConfig::default();
        for seed in 0..50 {
            for sc in Scenario::ALL {
                let s = generate_scene(seed, sc, &cfg).unwrap();
                assert!((2..=4).contains(&s.lanes.len()), "seed {seed}: {} lanes", s.lanes.len());
                for lane in &s.lanes {
                    assert!(lane.len() >= 2);
                    assert!(lane.iter().all(|&(x, y)| (0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y)));
                }
                let bottoms: Vec<f64> = s.lanes.iter().map(|l| l[0].0).collect();
                assert!(bottoms.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for sc in Scenario::ALL {
            assert_eq!(sc.name().parse::<Scenario>().unwrap(), sc);
        }
        assert!("fog".parse::<Scenario>().is_err());
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = GeneratorConfig {
            lane_count_range: [3, 2],
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, Scenario::Normal, &cfg), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            mark_width_px: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
