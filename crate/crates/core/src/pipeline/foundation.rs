//! Frozen foundation models: the caption LM and the vision tower with its
//! query set, pretrained on a broad caption corpus before any HOI training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsg::{lsg_loss_with_weights, pretrain_lm, LmCheckpoint, PretrainConfig};
use crate::nncore::layers::{Init, Linear};
use crate::nncore::{AdamW, Mat, ParamStore, Tape};
use crate::par::{self, Exec};
use crate::synthworld::{Catalog, Dataset, Sample, SplitSpec, TokenWeights};
use crate::visiontower::{patchify, TokenLayout, TowerBias, TowerConfig, VisionTower};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoundationConfig {
    /// Captioned scenes over every valid combination.
    pub corpus_size: usize,
    pub seed: u64,
    pub lm: PretrainConfig,
    pub tower_steps: usize,
    pub tower_batch: usize,
    pub tower_lr: f64,
    pub n_queries: usize,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        Self {
            corpus_size: 2000,
            seed: 0x77eb,
            lm: PretrainConfig::default(),
            tower_steps: 8000,
            tower_batch: 8,
            tower_lr: 1e-3,
            n_queries: 8,
        }
    }
}

/// Tower weights, the pretrained query set and the query-to-LM projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerCheckpoint {
    pub config: TowerConfig,
    pub params: Vec<(String, Mat)>,
    pub queries: Mat,
    pub proj_w: Mat,
    pub proj_b: Mat,
    pub losses: Vec<f64>,
}

impl TowerCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Foundation {
    pub lm: Option<LmCheckpoint>,
    pub tower: Option<TowerCheckpoint>,
}

impl Foundation {
    pub const LM_FILE: &'static str = "lm.json";
    pub const TOWER_FILE: &'static str = "tower.json";

    pub fn save(&self, dir: &Path) -> Result<()> {
        if let Some(lm) = &self.lm {
            lm.save(&dir.join(Self::LM_FILE))?;
        }
        if let Some(t) = &self.tower {
            t.save(&dir.join(Self::TOWER_FILE))?;
        }
        Ok(())
    }

    /// Loads whichever files exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let lm = dir.join(Self::LM_FILE);
        let tower = dir.join(Self::TOWER_FILE);
        Ok(Self {
            lm: if lm.exists() { Some(LmCheckpoint::load(&lm)?) } else { None },
            tower: if tower.exists() { Some(TowerCheckpoint::load(&tower)?) } else { None },
        })
    }
}

/// Scenes drawn from every valid combination with their own seed stream.
pub fn web_corpus(catalog: &Catalog, cfg: &FoundationConfig, exec: Exec) -> Result<Vec<Sample>> {
    let all = SplitSpec::closed(catalog);
    Ok(Dataset::generate(catalog, &all, cfg.corpus_size, 0, cfg.seed, &TokenWeights::default(), exec)?.train)
}

/// Joint captioning: starting from the text-only LM, the tower, queries,
/// projection and LM all train on image-conditioned captions. Both models
/// are returned for freezing.
pub fn pretrain_tower(corpus: &[Sample], lm_ck: &LmCheckpoint, tower_cfg: &TowerConfig, cfg: &FoundationConfig, exec: Exec) -> Result<(TowerCheckpoint, LmCheckpoint)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7043);
    let mut store = ParamStore::new();
    let tower = VisionTower::new(&mut store, "tower", tower_cfg.clone(), &mut rng);
    for id in store.ids_with_prefix("tower.") {
        store.set_trainable(id, true);
    }
    let dq = tower_cfg.query_dim;
    let queries = store.add("queries", Mat::randn(cfg.n_queries, dq, 1.0, &mut rng), true);
    let proj = Linear::new(&mut store, "proj", dq, lm_ck.config.width, Init::Xavier(1.0), true, &mut rng);
    let lm = lm_ck.install(&mut store)?;
    for id in lm.params(&store) {
        store.set_trainable(id, true);
    }
    let vocab = &lm_ck.vocab;
    let layout = TokenLayout::vanilla(tower_cfg.n_patches());
    let patches: Vec<Mat> = par::map(exec, corpus, |_, s| patchify(&s.scene.image, tower_cfg.patch));
    let captions: Vec<_> = corpus.iter().map(|s| s.caption.reweighted(&TokenWeights { noun: 1.0, verb: 1.0, other: 1.0 })).collect();

    let mut opt = AdamW::new(cfg.tower_lr, 0.0);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.tower_steps);
    for step in 0..cfg.tower_steps {
        let mut batch = Vec::with_capacity(cfg.tower_batch);
        for _ in 0..cfg.tower_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = par::map(exec, &batch, |_, &i| -> Result<(f64, Vec<Option<Mat>>)> {
            let mut t = Tape::new(&store);
            let q = t.param(queries);
            let out = tower.forward(&mut t, &patches[i], &layout, Some(q), None, &TowerBias::default())?;
            let e = out.e_q_ho.expect("queries were given");
            let l = lsg_loss_with_weights(&mut t, e, &captions[i], &lm, &proj, vocab, 1.0)?;
            Ok((t.scalar(l), t.backward(l).into_params()))
        });
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Mat>> = vec![None; store.len()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l * scale;
            for (slot, g) in grads.iter_mut().zip(g) {
                let Some(mut g) = g else { continue };
                g.scale_in_place(scale);
                match slot {
                    Some(s) => s.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("tower pretraining step {step}: {loss}")));
        }
        losses.push(loss);
        opt.step(&mut store, &grads);
    }
    log::info!("tower pretraining: caption loss {:.4} -> {:.4}", losses.first().copied().unwrap_or(f64::NAN), losses.last().copied().unwrap_or(f64::NAN));
    let params = store
        .ids_with_prefix("tower.")
        .into_iter()
        .map(|id| (store.get(id).name().to_string(), store.value(id).clone()))
        .collect();
    let tower_ck = TowerCheckpoint {
        config: tower_cfg.clone(),
        params,
        queries: store.value(queries).clone(),
        proj_w: store.value(proj.w).clone(),
        proj_b: store.value(proj.b.expect("projection has a bias")).clone(),
        losses,
    };
    Ok((tower_ck, LmCheckpoint::from_store(&store, &lm, vocab)))
}

/// LM on the corpus captions, then joint captioning with the tower.
pub fn build_foundation(catalog: &Catalog, tower_cfg: &TowerConfig, cfg: &FoundationConfig, exec: Exec) -> Result<Foundation> {
    let corpus = web_corpus(catalog, cfg, exec)?;
    let captions: Vec<_> = corpus.iter().map(|s| s.caption.clone()).collect();
    let vocab = crate::synthworld::CaptionVocab::from_catalog(catalog);
    let lm_cfg = PretrainConfig { seed: cfg.seed, ..cfg.lm.clone() };
    let out = pretrain_lm(&captions, &vocab, &lm_cfg)?;
    log::info!("LM pretraining: loss {:.4} -> {:.4}", out.losses.first().copied().unwrap_or(f64::NAN), out.losses.last().copied().unwrap_or(f64::NAN));
    let lm = LmCheckpoint::from_store(&out.store, &out.lm, &vocab);
    let (tower, lm) = pretrain_tower(&corpus, &lm, tower_cfg, cfg, exec)?;
    Ok(Foundation { lm: Some(lm), tower: Some(tower) })
}
