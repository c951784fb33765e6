use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use super::foundation::Foundation;
use crate::lsg::ToyLM;
use crate::model::{HoiModel, TrainItem};
use crate::nncore::{clip_grad_norm, AdamW, Mat, ParamId, ParamStore, Tape};
use crate::par::{self, Exec};
use crate::synthworld::{CaptionVocab, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub loss: f64,
    pub hoi: f64,
    pub lsg: f64,
    /// Unweighted detection terms: box L1, GIoU, object CE, interaction BCE.
    pub terms: [f64; 4],
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Stop after this many optimizer steps, possibly mid-epoch.
    pub max_steps: Option<u64>,
}

pub struct Trained {
    pub store: ParamStore,
    pub model: HoiModel,
    pub lm: Option<ToyLM>,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Bitwise copy of every frozen parameter, checked during training.
pub struct FrozenSnapshot(Vec<(ParamId, Mat)>);

impl FrozenSnapshot {
    pub fn take(store: &ParamStore) -> Self {
        Self(store.iter().filter(|(_, p)| !p.trainable()).map(|(id, p)| (id, p.values().clone())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn verify(&self, store: &ParamStore) -> Result<()> {
        for (id, v) in &self.0 {
            let p = store.get(*id);
            let same = p.values().as_slice().iter().zip(v.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            if p.trainable() || !same || p.shape() != v.shape() {
                return Err(Error::FrozenParameterChanged(p.name().to_string()));
            }
        }
        Ok(())
    }
}

/// Builds the model in a fresh store, loads the pretrained tower when one is
/// given, and installs the frozen LM when LSG is on.
pub fn build_model(cfg: &RunConfig, data: &Dataset, foundation: &Foundation) -> Result<(ParamStore, HoiModel, Option<ToyLM>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = HoiModel::new(&mut store, cfg.model.clone(), &data.catalog, &data.split, &mut rng)?;
    if let Some(t) = &foundation.tower {
        model.install_tower(&mut store, t)?;
    }
    let lm = if cfg.model.toggles.lsg {
        let ck = foundation.lm.as_ref().ok_or_else(|| Error::Config("LSG is on but no language model checkpoint was given".into()))?;
        if ck.vocab != data.vocab {
            return Err(Error::Config("language model vocabulary differs from the dataset's".into()));
        }
        if ck.config.width != cfg.model.lm_width {
            return Err(Error::Config(format!("language model width {} != configured {}", ck.config.width, cfg.model.lm_width)));
        }
        Some(ck.install(&mut store)?)
    } else {
        None
    };
    Ok((store, model, lm))
}

pub fn prepare_items(store: &ParamStore, model: &HoiModel, data: &Dataset, exec: Exec) -> Result<Vec<TrainItem>> {
    par::map(exec, &data.train, |_, s| model.train_item(store, s)).into_iter().collect()
}

pub struct StepResult {
    pub loss: f64,
    pub hoi: f64,
    pub lsg: f64,
    pub terms: [f64; 4],
    pub grads: Vec<Option<Mat>>,
}

/// Loss and parameter gradients for one item.
pub fn item_step(store: &ParamStore, model: &HoiModel, item: &TrainItem, lm: Option<(&ToyLM, &CaptionVocab)>) -> Result<StepResult> {
    let mut t = Tape::new(store);
    let parts = model.loss(&mut t, item, lm)?;
    let loss = t.scalar(parts.total);
    let grads = t.backward(parts.total).into_params();
    let d = &parts.detection;
    Ok(StepResult { loss, hoi: parts.hoi, lsg: parts.lsg, terms: [d.l1, d.giou, d.ce, d.bce], grads })
}

/// Mean of the per-item gradients, reduced in item order.
pub fn batch_step(
    store: &ParamStore,
    model: &HoiModel,
    items: &[&TrainItem],
    lm: Option<(&ToyLM, &CaptionVocab)>,
    exec: Exec,
) -> Result<StepResult> {
    let results = par::map(exec, items, |_, it| item_step(store, model, it, lm));
    let scale = 1.0 / items.len() as f64;
    let mut acc = StepResult { loss: 0.0, hoi: 0.0, lsg: 0.0, terms: [0.0; 4], grads: vec![None; store.len()] };
    for r in results {
        let r = r?;
        acc.loss += r.loss * scale;
        acc.hoi += r.hoi * scale;
        acc.lsg += r.lsg * scale;
        for (a, b) in acc.terms.iter_mut().zip(r.terms) {
            *a += b * scale;
        }
        for (slot, g) in acc.grads.iter_mut().zip(r.grads) {
            let Some(mut g) = g else { continue };
            g.scale_in_place(scale);
            match slot {
                Some(s) => s.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
    Ok(acc)
}

/// Minimizes `L_hoi + L_lsg` with AdamW, checking after every epoch that
/// the tower and LM weights are untouched.
pub fn train(cfg: &RunConfig, data: &Dataset, foundation: &Foundation, opts: TrainOptions) -> Result<Trained> {
    let (mut store, model, lm) = build_model(cfg, data, foundation)?;
    let items = prepare_items(&store, &model, data, opts.exec)?;
    let frozen = FrozenSnapshot::take(&store);
    let mut opt = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut steps = 0u64;
    'epochs: for epoch in 0..cfg.train.epochs {
        let start = Instant::now();
        opt.lr = cfg.train.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut run = Running::default();
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let lm_ref = lm.as_ref().map(|l| (l, &data.vocab));
            let mut r = batch_step(&store, &model, &batch, lm_ref, opts.exec).map_err(|e| match e {
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("epoch {epoch}, step {steps}: {m}")),
                e => e,
            })?;
            if let Some(c) = cfg.train.grad_clip {
                clip_grad_norm(&mut r.grads, c);
            }
            opt.step(&mut store, &r.grads);
            steps += 1;
            run.add(&r, chunk.len());
            if opts.max_steps.is_some_and(|m| steps >= m) {
                frozen.verify(&store)?;
                history.push(run.record(epoch, steps, opt.lr, start));
                break 'epochs;
            }
        }
        frozen.verify(&store)?;
        let rec = run.record(epoch, steps, opt.lr, start);
        log::info!("epoch {} loss {:.4} (hoi {:.4}, lsg {:.4}) lr {:.1e} {:.1}s", rec.epoch, rec.loss, rec.hoi, rec.lsg, rec.lr, rec.seconds);
        history.push(rec);
    }
    Ok(Trained { store, model, lm, history, steps })
}

#[derive(Default)]
struct Running {
    loss: f64,
    hoi: f64,
    lsg: f64,
    terms: [f64; 4],
    n: usize,
}

impl Running {
    fn add(&mut self, r: &StepResult, items: usize) {
        let w = items as f64;
        self.loss += r.loss * w;
        self.hoi += r.hoi * w;
        self.lsg += r.lsg * w;
        for (a, b) in self.terms.iter_mut().zip(r.terms) {
            *a += b * w;
        }
        self.n += items;
    }

    fn record(&self, epoch: usize, steps: u64, lr: f64, start: Instant) -> EpochRecord {
        let n = self.n.max(1) as f64;
        EpochRecord {
            epoch,
            steps,
            lr,
            loss: self.loss / n,
            hoi: self.hoi / n,
            lsg: self.lsg / n,
            terms: self.terms.map(|x| x / n),
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}
