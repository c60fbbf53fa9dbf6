//! Corpus-level evaluation and its text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use clld_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    culane_counts, default_sample_rows, extract_lanes_with, metric_width, tusimple_counts, tusimple_tolerance, Counts,
    TuSimpleCounts, DEFAULT_IOU_THRESHOLD, DEFAULT_THRESHOLD, MIN_COMPONENT_PIXELS,
};
use crate::model::LaneModel;
use crate::raster::Polyline;
use crate::scene::LaneScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub iou_threshold: f64,
    pub min_component_pixels: usize,
    /// `None` scales 30 px at 590 rows to the image height.
    pub metric_width_px: Option<usize>,
    /// `None` scales 20 px at 720 rows to the image height.
    pub x_tolerance_px: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            min_component_pixels: MIN_COMPONENT_PIXELS,
            metric_width_px: None,
            x_tolerance_px: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1)", self.iou_threshold)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.metric_width_px == Some(0) || self.x_tolerance_px.is_some_and(|t| t <= 0.0) {
            return Err(Error::Config("metric width and x tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    /// Scenario name, or `overall`.
    pub subset: String,
    pub images: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SubsetRow {
    fn new(subset: &str, images: usize, counts: Counts) -> Self {
        Self {
            subset: subset.to_string(),
            images,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One row per scenario present, in scenario order, then `overall`.
    pub rows: Vec<SubsetRow>,
    pub tusimple: TuSimpleCounts,
    pub tusimple_accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub config_digest: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn row(&self, subset: &str) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    pub fn overall(&self) -> &SubsetRow {
        self.row("overall").expect("reports always carry an overall row")
    }

    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_digest={}", self.config_digest);
        let _ = writeln!(s, "checkpoint={}", self.checkpoint_id);
        let _ = writeln!(s, "tusimple_accuracy={}", self.tusimple_accuracy);
        let _ = writeln!(s, "tusimple_fp_rate={}", self.fp_rate);
        let _ = writeln!(s, "tusimple_fn_rate={}", self.fn_rate);
        for r in &self.rows {
            let p = format!("subset.{}", r.subset);
            let _ = writeln!(s, "{p}.images={}", r.images);
            let _ = writeln!(s, "{p}.tp={}", r.counts.tp);
            let _ = writeln!(s, "{p}.fp={}", r.counts.fp);
            let _ = writeln!(s, "{p}.fn={}", r.counts.fn_);
            let _ = writeln!(s, "{p}.precision={}", r.precision);
            let _ = writeln!(s, "{p}.recall={}", r.recall);
            let _ = writeln!(s, "{p}.f1={}", r.f1);
        }
        s
    }

    /// One row per subset.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,images,tp,fp,fn,precision,recall,f1\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.subset, r.images, r.counts.tp, r.counts.fp, r.counts.fn_, r.precision, r.recall, r.f1
            );
        }
        s
    }
}

/// Scores already-extracted predictions, one lane list per scene.
pub fn evaluate_predictions(scenes: &[LaneScene], predictions: &[Vec<Polyline>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if scenes.len() != predictions.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    let mut per: BTreeMap<_, (usize, Counts)> = BTreeMap::new();
    let mut overall = Counts::default();
    let mut tus = TuSimpleCounts::default();
    for (scene, pred) in scenes.iter().zip(predictions) {
        let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
        let width = cfg.metric_width_px.unwrap_or_else(|| metric_width(h));
        let c = culane_counts(pred, &scene.lanes, width, cfg.iou_threshold, (h, w));
        let entry = per.entry(scene.scenario).or_default();
        entry.0 += 1;
        entry.1.add(c);
        overall.add(c);
        let tol = cfg.x_tolerance_px.unwrap_or_else(|| tusimple_tolerance(h));
        tus.add(tusimple_counts(pred, &scene.lanes, tol, &default_sample_rows(h)));
    }
    let mut rows: Vec<SubsetRow> = per
        .iter()
        .map(|(sc, (n, c))| SubsetRow::new(sc.name(), *n, *c))
        .collect();
    rows.push(SubsetRow::new("overall", scenes.len(), overall));
    Ok(EvalReport {
        rows,
        tusimple: tus,
        tusimple_accuracy: tus.accuracy(),
        fp_rate: tus.fp_rate(),
        fn_rate: tus.fn_rate(),
        config_digest: String::new(),
        checkpoint_id: String::new(),
    })
}

pub fn predict_lanes<T: Real>(model: &LaneModel<T>, scenes: &[LaneScene], cfg: &EvalConfig) -> Result<Vec<Vec<Polyline>>> {
    scenes
        .iter()
        .map(|s| {
            let prob = model.predict(&s.image.cast::<T>())?;
            Ok(extract_lanes_with(&prob, cfg.threshold, cfg.min_component_pixels))
        })
        .collect()
}

pub fn evaluate<T: Real>(model: &LaneModel<T>, scenes: &[LaneScene], cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = predict_lanes(model, scenes, cfg)?;
    evaluate_predictions(scenes, &preds, cfg)
}
