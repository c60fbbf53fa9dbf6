//! CuLane-style annotations: each image `x.png` has a sibling `x.lines.txt`
//! holding one lane per line as space-separated alternating `x y` values.

use std::path::{Path, PathBuf};

use clld_core::Tensor;

use crate::error::{Error, Result};
use crate::raster::Polyline;
use crate::scene::{LaneScene, Scenario};

/// Lanes of one annotation file and the number of lanes dropped for having
/// fewer than two valid points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLines {
    pub lanes: Vec<Polyline>,
    pub dropped: usize,
}

/// Parses a `.lines.txt` body. Points with a negative coordinate (the
/// dataset's "absent" marker) and an unpaired trailing value are ignored.
pub fn parse_culane_lines(text: &str) -> Result<ParsedLines> {
    let mut out = ParsedLines::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("line {}: malformed number {tok:?}", n + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let lane: Polyline = values
            .chunks_exact(2)
            .map(|p| (p[0], p[1]))
            .filter(|&(x, y)| x >= 0.0 && y >= 0.0)
            .collect();
        if lane.len() >= 2 {
            out.lanes.push(lane);
        } else {
            out.dropped += 1;
        }
    }
    Ok(out)
}

/// Three decimals per coordinate, one lane per line.
pub fn format_culane_lines(lanes: &[Polyline]) -> String {
    let mut s = String::new();
    for lane in lanes {
        let parts: Vec<String> = lane.iter().map(|&(x, y)| format!("{x:.3} {y:.3}")).collect();
        s.push_str(&parts.join(" "));
        s.push('\n');
    }
    s
}

/// `foo/bar.png` → `foo/bar.lines.txt`.
pub fn lines_path(image: &Path) -> PathBuf {
    image.with_extension("lines.txt")
}

pub fn write_culane_annotation(image_path: &Path, lanes: &[Polyline]) -> Result<()> {
    let p = lines_path(image_path);
    std::fs::write(&p, format_culane_lines(lanes)).map_err(Error::io(p))
}

pub fn read_culane_annotation(image_path: &Path) -> Result<ParsedLines> {
    let p = lines_path(image_path);
    let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
    parse_culane_lines(&text)
}

/// Reads an 8-bit image into `[3, H, W]` with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

/// Writes `[3, H, W]` values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Default)]
pub struct AnnotationSet {
    pub scenes: Vec<LaneScene>,
    /// Lanes dropped for having fewer than two points.
    pub dropped_lanes: usize,
    /// Entries that could not be read, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

/// The scenario named in a subset list's file name (`test_shadow.txt` →
/// shadow); lists without one are treated as `normal`.
pub fn scenario_from_list_name(list_path: &Path) -> Scenario {
    let stem = list_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    Scenario::ALL
        .into_iter()
        .find(|sc| stem.contains(sc.name()))
        .unwrap_or(Scenario::Normal)
}

/// Loads every entry of a list file (one image path per line, relative to
/// `root`). Bad entries are collected in [`AnnotationSet::errors`], not fatal.
pub fn load_culane_annotation(list_path: &Path, root: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(list_path).map_err(Error::io(list_path))?;
    let scenario = scenario_from_list_name(list_path);
    let mut set = AnnotationSet::default();
    for rel in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let path = root.join(rel.trim_start_matches('/'));
        let parsed = match read_culane_annotation(&path) {
            Ok(p) => p,
            Err(e) => {
                set.errors.push((path, e.to_string()));
                continue;
            }
        };
        let image = match read_image(&path) {
            Ok(i) => i,
            Err(e) => {
                set.errors.push((path, e.to_string()));
                continue;
            }
        };
        set.dropped_lanes += parsed.dropped;
        set.scenes.push(LaneScene {
            image,
            lanes: parsed.lanes,
            scenario,
            seed: 0,
        });
    }
    Ok(set)
}
