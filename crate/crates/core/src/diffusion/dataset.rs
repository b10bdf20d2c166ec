//! SFT corpus on disk: `tiles/NNNNN.raw` plus `manifest.csv`
//! (`prompt_id,tile_path`, paths relative to the dataset directory).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encode_image;
use crate::imgproc::{read_raw, write_raw};
use crate::mrc::World;
use crate::sceneworld::{generate_scene, render_multiview, PromptId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub prompt_id: u64,
    pub tile_path: String,
}

/// `(prompt, model-space tile)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<(PromptId, Vec<f64>)>,
}

impl Dataset {
    /// Ground-truth tiles of prompts `0..catalog_size`, in memory.
    pub fn render(world: &World, catalog_size: u64) -> Self {
        let items = (0..catalog_size)
            .map(|p| {
                let scene = generate_scene(PromptId(p), world.scene_res);
                let (_, tile) = render_multiview(&scene, &world.rig);
                (PromptId(p), encode_image(&tile))
            })
            .collect();
        Self { items }
    }
}

pub fn write_dataset(dir: &Path, world: &World, catalog_size: u64) -> Result<Vec<ManifestRow>> {
    if catalog_size == 0 {
        return Err(Error::EmptyCatalog);
    }
    fs::create_dir_all(dir.join("tiles"))?;
    let mut rows = Vec::new();
    for p in 0..catalog_size {
        let scene = generate_scene(PromptId(p), world.scene_res);
        let (_, tile) = render_multiview(&scene, &world.rig);
        let rel = format!("tiles/{p:05}.raw");
        write_raw(&tile, &dir.join(&rel))?;
        rows.push(ManifestRow { prompt_id: p, tile_path: rel });
    }
    let mut w = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mut rd = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    let mut items = Vec::new();
    for row in rd.deserialize::<ManifestRow>() {
        let row = row.map_err(csv_err)?;
        let tile = read_raw(&dir.join(&row.tile_path))?;
        items.push((PromptId(row.prompt_id), encode_image(&tile)));
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset { items })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("manifest: {other:?}")),
    }
}
