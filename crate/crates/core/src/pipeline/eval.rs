use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalmetrics::{split_report, triplet_map, GroundTruth, MapReport, TripletPrediction};
use crate::model::HoiModel;
use crate::nncore::ParamStore;
use crate::par::{self, Exec};
use crate::synthworld::{Combo, Dataset, Sample};

use super::checkpoint::Checkpoint;
use super::config::EvalConfig;

pub struct Evaluation {
    pub report: MapReport,
    pub predictions: Vec<TripletPrediction>,
}

/// Top-k triplets per test image; images are scored independently.
pub fn predict_all(store: &ParamStore, model: &HoiModel, samples: &[Sample], top_k: usize, exec: Exec) -> Result<Vec<TripletPrediction>> {
    let per_image = par::map(exec, samples, |_, s| -> Result<Vec<TripletPrediction>> {
        let img = model.prepare(store, s.scene.id, &s.scene.image)?;
        model.predict(store, &img, top_k)
    });
    let mut out = Vec::new();
    for p in per_image {
        out.extend(p?);
    }
    Ok(out)
}

pub fn train_frequencies(data: &Dataset) -> BTreeMap<Combo, usize> {
    let mut f = BTreeMap::new();
    for s in &data.train {
        for c in s.scene.combos() {
            *f.entry(c).or_insert(0) += 1;
        }
    }
    f
}

/// Scores the test split. Only the detector, tower and heads run here.
pub fn evaluate(store: &ParamStore, model: &HoiModel, data: &Dataset, cfg: &EvalConfig, exec: Exec) -> Result<Evaluation> {
    let predictions = predict_all(store, model, &data.test, cfg.top_k, exec)?;
    let scenes: Vec<_> = data.test.iter().map(|s| s.scene.clone()).collect();
    let gts = GroundTruth::from_scenes(&scenes);
    let ap = triplet_map(&predictions, &gts, cfg.iou_threshold);
    let freq = train_frequencies(data);
    let report = split_report(&ap, &data.split, Some(&freq))?;
    Ok(Evaluation { report, predictions })
}

/// Restores `checkpoint`, scores the test split of the dataset in
/// `data_dir` and returns the report as pretty JSON. Nothing from the LM
/// file is read.
pub fn run_eval(checkpoint: &Path, data_dir: &Path, exec: Exec) -> Result<(String, Evaluation)> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    if data.split != ck.split || data.catalog != ck.catalog {
        return Err(Error::Config(format!("dataset {} does not match the checkpoint's catalog and split", data_dir.display())));
    }
    let (store, model) = ck.restore()?;
    let ev = evaluate(&store, &model, &data, &ck.config.eval, exec)?;
    Ok((serde_json::to_string_pretty(&ev.report)? + "\n", ev))
}
