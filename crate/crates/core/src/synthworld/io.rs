//! Dataset persistence.
//!
//! A dataset directory holds `catalog.json` (verbs, objects, combination
//! weights, caption vocabulary and the split) and one JSON line per scene in
//! `train.jsonl` / `test.jsonl`. Scene lines carry `id`, `entities`
//! (`box` as `[x1, y1, x2, y2]` pixels, `class`, `is_human`), `triplets`
//! (`human`, `verb`, `object` entity indices) and the `caption` record
//! (`tokens`, `pos_tags`, `weights`). Pixels are not stored; they are
//! re-rendered on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::caption::{caption_scene, CaptionRecord, CaptionVocab, TokenWeights};
use super::catalog::Catalog;
use super::scene::{generate_scene, render, Entity, Scene, Triplet, IMAGE_SIZE};
use super::split::SplitSpec;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogFile {
    pub catalog: Catalog,
    pub vocab: CaptionVocab,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub entities: Vec<Entity>,
    pub triplets: Vec<Triplet>,
    pub caption: CaptionRecord,
}

/// A scene together with its caption.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    pub caption: CaptionRecord,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: Catalog,
    pub vocab: CaptionVocab,
    pub split: SplitSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn sample_seed(base: u64, train: bool, i: usize) -> u64 {
    let stream: u64 = if train { 0x7261_696e } else { 0x7465_7374 };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream << 32).wrapping_add(i as u64)
}

impl Dataset {
    pub fn generate(
        catalog: &Catalog,
        split: &SplitSpec,
        n_train: usize,
        n_test: usize,
        seed: u64,
        weights: &TokenWeights,
        exec: Exec,
    ) -> Result<Self> {
        let vocab = CaptionVocab::from_catalog(catalog);
        let make = |train: bool, n: usize| -> Result<Vec<Sample>> {
            par::map_range(exec, n, |i| -> Result<Sample> {
                let mut scene = generate_scene(sample_seed(seed, train, i), catalog, split, train)?;
                scene.id = i as u64;
                let caption = caption_scene(&scene, catalog, &vocab, weights)?;
                Ok(Sample { scene, caption })
            })
            .into_iter()
            .collect()
        };
        Ok(Self { catalog: catalog.clone(), vocab: vocab.clone(), split: split.clone(), train: make(true, n_train)?, test: make(false, n_test)? })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let cat = CatalogFile { catalog: self.catalog.clone(), vocab: self.vocab.clone(), split: self.split.clone() };
        std::fs::write(dir.join("catalog.json"), serde_json::to_string_pretty(&cat)?)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cat: CatalogFile = serde_json::from_str(&std::fs::read_to_string(dir.join("catalog.json"))?)?;
        Ok(Self {
            train: read_jsonl(&dir.join("train.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
            catalog: cat.catalog,
            vocab: cat.vocab,
            split: cat.split,
        })
    }
}

fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let rec = SceneRecord {
            id: s.scene.id,
            entities: s.scene.entities.clone(),
            triplets: s.scene.triplets.clone(),
            caption: s.caption.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)?;
        let image = render(&rec.entities, &rec.triplets, IMAGE_SIZE, IMAGE_SIZE);
        let scene = Scene { id: rec.id, image, entities: rec.entities, triplets: rec.triplets };
        scene.validate().map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(Sample { scene, caption: rec.caption });
    }
    Ok(out)
}
