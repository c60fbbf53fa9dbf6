//! Generated datasets on disk: `NNNNN.png` + `NNNNN.lines.txt` per scene,
//! `list.txt` with every image, `list/<scenario>.txt` subsets and
//! `manifest.json` recording how the scenes were made.

use std::collections::BTreeMap;
use std::path::Path;

use clld_core::rng::{stream, Domain};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::annotation::{read_culane_annotation, read_image, write_culane_annotation, write_image};
use crate::error::{Error, Result};
use crate::scene::{generate_scene, GeneratorConfig, LaneScene, Scenario};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub scenario: Scenario,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: u32,
    pub seed: u64,
    pub count: usize,
    pub config_digest: String,
    pub generator: GeneratorConfig,
    pub proportions: BTreeMap<Scenario, f64>,
    pub counts: BTreeMap<Scenario, usize>,
    pub scenes: Vec<SceneEntry>,
}

/// `floor(count · p)` scenes per non-normal scenario; whatever is left is normal.
pub fn scenario_counts(count: usize, proportions: &BTreeMap<Scenario, f64>) -> Result<BTreeMap<Scenario, usize>> {
    let total: f64 = proportions.values().sum();
    if proportions.values().any(|&p| !(0.0..=1.0).contains(&p)) || total > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "scenario proportions must be in [0, 1] and sum to at most 1 (sum {total})"
        )));
    }
    let mut counts = BTreeMap::new();
    let mut assigned = 0;
    for (&sc, &p) in proportions {
        if sc != Scenario::Normal {
            let n = (count as f64 * p + 1e-9).floor() as usize;
            counts.insert(sc, n);
            assigned += n;
        }
    }
    counts.insert(Scenario::Normal, count - assigned.min(count));
    Ok(counts)
}

/// Scenario and seed for each of `count` scenes, in a seeded shuffled order.
pub fn plan_dataset(seed: u64, count: usize, proportions: &BTreeMap<Scenario, f64>) -> Result<Vec<(Scenario, u64)>> {
    let counts = scenario_counts(count, proportions)?;
    let mut order: Vec<Scenario> = counts
        .iter()
        .flat_map(|(&sc, &n)| std::iter::repeat_n(sc, n))
        .collect();
    order.shuffle(&mut stream(seed, Domain::Scene, u64::MAX, 0));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, sc)| (sc, stream(seed, Domain::Scene, u64::MAX - 1, i as u64).random()))
        .collect())
}

pub fn generate_dataset(
    seed: u64,
    count: usize,
    proportions: &BTreeMap<Scenario, f64>,
    config: &GeneratorConfig,
) -> Result<Vec<LaneScene>> {
    plan_dataset(seed, count, proportions)?
        .into_iter()
        .map(|(sc, s)| generate_scene(s, sc, config))
        .collect()
}

pub fn scene_file(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes `scenes` and a manifest into `dir`, which must exist.
pub fn write_dataset(dir: &Path, scenes: &[LaneScene], manifest: &DatasetManifest) -> Result<()> {
    let list_dir = dir.join("list");
    std::fs::create_dir_all(&list_dir).map_err(Error::io(&list_dir))?;
    let mut all = String::new();
    let mut subsets: BTreeMap<Scenario, String> = BTreeMap::new();
    for (entry, scene) in manifest.scenes.iter().zip(scenes) {
        let path = dir.join(&entry.file);
        write_image(&path, &scene.image)?;
        write_culane_annotation(&path, &scene.lanes)?;
        all.push_str(&entry.file);
        all.push('\n');
        let sub = subsets.entry(entry.scenario).or_default();
        sub.push_str(&entry.file);
        sub.push('\n');
    }
    let write = |p: &Path, body: &str| std::fs::write(p, body).map_err(Error::io(p));
    write(&dir.join("list.txt"), &all)?;
    for (sc, body) in &subsets {
        write(&list_dir.join(format!("{sc}.txt")), body)?;
    }
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Data(e.to_string()))?;
    write(&dir.join(MANIFEST_FILE), &(json + "\n"))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Data(format!(
            "{}: manifest format {} (expected {MANIFEST_FORMAT})",
            p.display(),
            m.format
        )));
    }
    Ok(m)
}

/// Loads every scene listed in the manifest, with scenarios and seeds from the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LaneScene>)> {
    let manifest = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let path = dir.join(&entry.file);
        let image = read_image(&path)?;
        let lanes = read_culane_annotation(&path)?.lanes;
        scenes.push(LaneScene {
            image,
            lanes,
            scenario: entry.scenario,
            seed: entry.seed,
        });
    }
    Ok((manifest, scenes))
}

pub fn default_proportions() -> BTreeMap<Scenario, f64> {
    BTreeMap::from([
        (Scenario::Normal, 0.4),
        (Scenario::Shadow, 0.2),
        (Scenario::Occluded, 0.2),
        (Scenario::Night, 0.1),
        (Scenario::Crowd, 0.1),
    ])
}
