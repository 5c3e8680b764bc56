//! Dataset directory loading shared by train, eval and ablate.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use stdet_core::geometry::{centerline_gt, Polygon, Polyline};
use stdet_core::io::{load_gray_png, read_jsonl, DatasetManifest, Record};
use stdet_core::pipeline::TrainSample;

pub struct LoadedScene {
    pub image_id: String,
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub polygons: Vec<Polygon>,
    pub spines: Vec<Polyline>,
}

/// Reads a dataset directory produced by `stdet synth`: manifest, ground
/// truth and pixels. Instances without a stored center line get one
/// computed from the polygon, which is slow but correct.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedScene>> {
    let manifest = DatasetManifest::load(&dir.join("manifest.json"))
        .with_context(|| format!("reading manifest in {}", dir.display()))?;
    let records: Vec<Record> = read_jsonl(&dir.join(&manifest.gt_file))
        .with_context(|| format!("reading {}", manifest.gt_file))?;
    let by_id: HashMap<&str, &Record> = records
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();

    let mut scenes = Vec::with_capacity(manifest.images.len());
    for img in &manifest.images {
        let (pixels, height, width) = load_gray_png(&dir.join(&img.file))
            .with_context(|| format!("loading {}", img.file))?;
        let Some(record) = by_id.get(img.image_id.as_str()) else {
            bail!("image {} has no ground-truth record", img.image_id);
        };
        let mut polygons = Vec::new();
        let mut spines = Vec::new();
        for entry in &record.detections {
            let poly = entry
                .to_polygon()
                .with_context(|| format!("bad polygon in {}", img.image_id))?;
            let spine = match entry.spine_polyline() {
                Some(s) => s,
                None => centerline_gt(&poly, 16)
                    .with_context(|| format!("center line for {}", img.image_id))?,
            };
            polygons.push(poly);
            spines.push(spine);
        }
        scenes.push(LoadedScene {
            image_id: img.image_id.clone(),
            pixels,
            height,
            width,
            polygons,
            spines,
        });
    }
    Ok(scenes)
}

pub fn to_samples(scenes: &[LoadedScene]) -> Vec<TrainSample> {
    scenes
        .iter()
        .map(|s| {
            let labels = stdet_core::geometry::label_fields(&s.polygons, s.height, s.width);
            TrainSample {
                pixels: s.pixels.clone(),
                width: s.width,
                height: s.height,
                polygons: s.polygons.clone(),
                spines: s.spines.clone(),
                labels,
            }
        })
        .collect()
}
