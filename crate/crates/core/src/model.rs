//! The assembled interaction detector.
//!
//! Component toggles select which parts are wired in:
//!
//! | toggles            | tower tokens        | interaction embedding      | adapter keys |
//! |--------------------|---------------------|----------------------------|--------------|
//! | none (baseline)    | `C, P_img`          | `E_ho`                     | `E^q_ho`     |
//! | `early_fusion`     | `C, P_img`          | `E_ho`                     | `E^q_ho`     |
//! | `abg`              | `C, C_ho, P_img`    | `E_ho + proj(E^q_ho)`      | `E^q_ho`     |
//! | `lsg`              | `C, C_f, P_img`     | `E_ho`                     | `E^q_f`      |
//! | `abg` + `lsg`      | `C, C_ho, C_f, P_img` | `E_ho + proj(E^q_ho)`    | `E^q_f`      |
//!
//! Without ABG the pair queries `Q^q_ho` read the unbiased tower, which is
//! the late-fusion-only structure of the baseline.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{average_maps, detection_loss, DetectionLoss, Detector, DetectorConfig, Heads, HoiTarget, LossWeights};
use crate::error::{Error, Result};
use crate::evalmetrics::TripletPrediction;
use crate::fusionheads::{classify_interactions, total_loss, FusionAdapter, LateFusion, PhraseClassifier, DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE};
use crate::lsg::{caption_level_loss_variant, lsg_loss_with_weights, LsgLossConfig, ToyLM};
use crate::nncore::layers::{Init, Linear};
use crate::nncore::mat::sigmoid;
use crate::nncore::{Mat, ParamId, ParamStore, Tape, Var};
use crate::synthworld::{BBox, CaptionRecord, CaptionVocab, Catalog, Combo, Sample, SplitSpec, TokenWeights, IMAGE_SIZE};
use crate::pipeline::foundation::TowerCheckpoint;
use crate::visiontower::{patchify, BiasAdapter, TokenLayout, TowerBias, TowerConfig, VisionTower};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasSource {
    Detection,
    Interaction,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasDestination {
    Vit,
    Qformer,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Weighted next-token loss through the frozen LM.
    Token,
    /// Cosine distance between mean prefix and mean caption embedding.
    Caption,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub early_fusion: bool,
    pub abg: bool,
    pub lsg: bool,
    pub fusion_adapter: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { early_fusion: true, abg: true, lsg: true, fusion_adapter: true }
    }
}

impl Toggles {
    pub fn baseline() -> Self {
        Self { early_fusion: false, abg: false, lsg: false, fusion_adapter: true }
    }

    pub fn named(name: &str) -> Result<Self> {
        let b = Self::baseline();
        Ok(match name.to_ascii_lowercase().as_str() {
            "baseline" => b,
            "ef" => Self { early_fusion: true, ..b },
            "ef+abg" => Self { early_fusion: true, abg: true, ..b },
            "ef+lsg" => Self { early_fusion: true, lsg: true, ..b },
            "full" | "ef+abg+lsg" => Self::default(),
            other => return Err(Error::Config(format!("unknown configuration `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variants {
    pub bias_source: BiasSource,
    pub bias_destination: BiasDestination,
    /// Free per-query bias parameters instead of adapted attention maps.
    pub plain_bias: bool,
    pub supervision: Supervision,
}

impl Default for Variants {
    fn default() -> Self {
        Self {
            bias_source: BiasSource::Interaction,
            bias_destination: BiasDestination::Both,
            plain_bias: false,
            supervision: Supervision::Token,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub tower: TowerConfig,
    pub classifier_dim: usize,
    pub logit_scale: f64,
    /// Initial shared logit offset.
    pub logit_bias: f64,
    pub lm_width: usize,
    pub toggles: Toggles,
    pub variants: Variants,
    pub lsg: LsgLossConfig,
    /// Weight of caption tokens that are neither nouns nor verbs.
    pub other_weight: f64,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            tower: TowerConfig::default(),
            classifier_dim: 32,
            logit_scale: DEFAULT_LOGIT_SCALE,
            logit_bias: DEFAULT_LOGIT_BIAS,
            lm_width: 32,
            toggles: Toggles::default(),
            variants: Variants::default(),
            lsg: LsgLossConfig::default(),
            other_weight: 1.0,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.detector;
        let tw = &self.tower;
        if d.n_q == 0 {
            return Err(Error::Config("N_q must be positive".into()));
        }
        if self.toggles.lsg && d.n_f == 0 {
            return Err(Error::Config("N_f must be positive when LSG is on".into()));
        }
        if d.tower_dim != tw.dim || d.n_tower_patches != tw.n_patches() {
            return Err(Error::Config(format!(
                "detector expects {}x{} tower features, tower yields {}x{}",
                d.n_tower_patches,
                d.tower_dim,
                tw.n_patches(),
                tw.dim
            )));
        }
        if d.image_size != tw.image_size || d.image_size % d.patch != 0 {
            return Err(Error::Config("detector and tower must share the image size, and patches must tile it".into()));
        }
        if d.dim % d.heads != 0 || tw.query_dim % tw.query_heads != 0 || tw.dim % tw.heads != 0 {
            return Err(Error::Config("widths must divide evenly into heads".into()));
        }
        if self.other_weight < 0.0 {
            return Err(Error::Config("other-token weight must be non-negative".into()));
        }
        self.lsg.validate()
    }

    fn with_ho_queries(&self) -> bool {
        self.toggles.abg || !self.toggles.lsg
    }

    fn bias_to_vit(&self) -> bool {
        self.variants.bias_destination != BiasDestination::Qformer
    }

    fn bias_to_qformer(&self) -> bool {
        self.variants.bias_destination != BiasDestination::Vit
    }
}

/// Per-image tensors that do not depend on trainable weights.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub image_id: u64,
    /// Tower patches.
    pub patches: Mat,
    /// Detector patches (the detector grid may be finer than the tower's).
    pub det_patches: Mat,
    /// Unbiased tower output `[C; P_img]` after the final ViT norm.
    pub vanilla_tokens: Mat,
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: PreparedImage,
    pub targets: Vec<HoiTarget>,
    pub caption: CaptionRecord,
}

pub struct ForwardPass {
    pub heads: Heads,
    pub logits: Var,
    pub e_q_f: Option<Var>,
    pub a_ho: Var,
    /// Adapted bias over `P_img` for the `C_ho` rows (ViT destination first).
    pub bias_ho: Option<Var>,
    pub layout: TokenLayout,
    /// Tower ViT attention `[layer][head]` when the full tower ran on tape.
    pub vit_maps: Option<Vec<Vec<Var>>>,
}

pub struct LossParts {
    pub total: Var,
    pub hoi: f64,
    pub lsg: f64,
    pub detection: DetectionLoss,
}

pub struct HoiModel {
    pub cfg: ModelConfig,
    pub detector: Detector,
    pub tower: VisionTower,
    pub q_ho: Option<ParamId>,
    pub q_f: Option<ParamId>,
    pub adapters: TowerBias<BiasAdapter>,
    pub plain_bias: TowerBias<ParamId>,
    pub late_fusion: Option<LateFusion>,
    pub fusion_adapter: Option<FusionAdapter>,
    pub cls_proj: Linear,
    pub cls_bias: ParamId,
    pub prefix_proj: Option<Linear>,
    pub classifier: PhraseClassifier,
    pub train_labels: Vec<Combo>,
    pub eval_labels: Vec<Combo>,
    train_matrix: Mat,
    eval_matrix: Mat,
    slot_of: BTreeMap<Combo, usize>,
}

impl HoiModel {
    pub const TOWER: &'static str = "tower";

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ModelConfig, catalog: &Catalog, split: &SplitSpec, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tg = cfg.toggles;
        let d = cfg.detector.clone();
        let tw = cfg.tower.clone();
        let detector = Detector::new(store, "det", d.clone(), tg.lsg, rng);
        let tower = VisionTower::new(store, Self::TOWER, tw.clone(), rng);
        let dq = tw.query_dim;
        let q_ho = cfg.with_ho_queries().then(|| store.add("query.ho", Mat::randn(d.n_q, dq, 1.0, rng), true));
        let q_f = tg.lsg.then(|| store.add("query.f", Mat::randn(d.n_f, dq, 1.0, rng), true));

        let (mut adapters, mut plain_bias) = (TowerBias::default(), TowerBias::default());
        let grid = tw.grid();
        let n_p = tw.n_patches();
        let make = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut R| -> Result<(Option<BiasAdapter>, Option<ParamId>)> {
            if cfg.variants.plain_bias {
                Ok((None, Some(store.add(format!("bias.{name}"), Mat::zeros(rows, n_p), true))))
            } else {
                Ok((Some(BiasAdapter::new(store, &format!("adapter.{name}"), d.grid(), grid, n_p, rng)?), None))
            }
        };
        if tg.abg && cfg.bias_to_vit() {
            (adapters.vit_ho, plain_bias.vit_ho) = make(store, "vit_ho", d.n_q, rng)?;
        }
        if tg.abg && cfg.bias_to_qformer() {
            (adapters.qf_ho, plain_bias.qf_ho) = make(store, "qf_ho", d.n_q, rng)?;
        }
        if tg.lsg && cfg.bias_to_vit() {
            (adapters.vit_f, plain_bias.vit_f) = make(store, "vit_f", d.n_f, rng)?;
        }
        if tg.lsg && cfg.bias_to_qformer() {
            (adapters.qf_f, plain_bias.qf_f) = make(store, "qf_f", d.n_f, rng)?;
        }

        let late_fusion = tg.abg.then(|| LateFusion::new(store, "late_fusion", dq, d.dim, rng));
        let fusion_adapter = tg.fusion_adapter.then(|| FusionAdapter::new(store, "fusion_adapter", d.dim, dq, d.heads, rng));
        let cls_proj = Linear::new(store, "cls_proj", d.dim, cfg.classifier_dim, Init::Xavier(1.0), true, rng);
        let cls_bias = store.add("cls_bias", Mat::scalar(cfg.logit_bias), true);
        let prefix_proj = tg.lsg.then(|| Linear::new(store, "prefix_proj", dq, cfg.lm_width, Init::Xavier(1.0), true, rng));

        let classifier = PhraseClassifier::new(catalog, cfg.classifier_dim);
        let train_labels: Vec<Combo> = split.seen_combinations.iter().copied().collect();
        let mut eval_labels: Vec<Combo> = split.seen_combinations.union(&split.unseen_combinations).copied().collect();
        eval_labels.sort_unstable();
        let train_matrix = classifier.matrix(&train_labels)?;
        let eval_matrix = classifier.matrix(&eval_labels)?;
        let slot_of = train_labels.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self {
            cfg,
            detector,
            tower,
            q_ho,
            q_f,
            adapters,
            plain_bias,
            late_fusion,
            fusion_adapter,
            cls_proj,
            cls_bias,
            prefix_proj,
            classifier,
            train_labels,
            eval_labels,
            train_matrix,
            eval_matrix,
            slot_of,
        })
    }

    /// Loads pretrained tower weights (kept frozen) and initializes the query
    /// sets and the LM prefix projection from the pretrained ones. Query rows
    /// are taken cyclically from the pretrained set.
    pub fn install_tower(&self, store: &mut ParamStore, ck: &TowerCheckpoint) -> Result<()> {
        if ck.config != self.cfg.tower {
            return Err(Error::Config("pretrained tower has a different configuration".into()));
        }
        for (name, values) in &ck.params {
            let id = store.id(name)?;
            store.set_values(id, values.clone())?;
        }
        let cycle = |n: usize| {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| ck.queries.row(i % ck.queries.rows()).to_vec()).collect();
            Mat::from_rows(&rows)
        };
        if let Some(id) = self.q_ho {
            store.set_values(id, cycle(self.cfg.detector.n_q))?;
        }
        if let Some(id) = self.q_f {
            store.set_values(id, cycle(self.cfg.detector.n_f))?;
        }
        if let Some(p) = &self.prefix_proj {
            store.set_values(p.w, ck.proj_w.clone())?;
            store.set_values(p.b.expect("projection has a bias"), ck.proj_b.clone())?;
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        let d = &self.cfg.detector;
        let tg = self.cfg.toggles;
        TokenLayout::new(if tg.abg { d.n_q } else { 0 }, if tg.lsg { d.n_f } else { 0 }, self.cfg.tower.n_patches())
    }

    /// Ids of every parameter under the frozen tower.
    pub fn tower_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(&format!("{}.", Self::TOWER))
    }

    pub fn prepare(&self, store: &ParamStore, image_id: u64, image: &crate::synthworld::Image) -> Result<PreparedImage> {
        let patches = patchify(image, self.cfg.tower.patch);
        let det_patches = patchify(image, self.cfg.detector.patch);
        let vanilla = self.tower.forward_plain(store, &patches, &TokenLayout::vanilla(self.cfg.tower.n_patches()), None, None, &TowerBias::default())?;
        Ok(PreparedImage { image_id, patches, det_patches, vanilla_tokens: vanilla.vit_tokens })
    }

    /// Ground-truth targets in normalized boxes with training label slots.
    /// Interactions outside the training label set are dropped.
    pub fn targets(&self, sample: &Sample) -> Vec<HoiTarget> {
        let s = &sample.scene;
        let size = IMAGE_SIZE as f64;
        s.triplets
            .iter()
            .filter_map(|tr| {
                let obj = &s.entities[tr.object];
                let slot = *self.slot_of.get(&(tr.verb, obj.class))?;
                Some(HoiTarget {
                    human_box: s.entities[tr.human].bbox.to_cxcywh_norm(size),
                    object_box: obj.bbox.to_cxcywh_norm(size),
                    object_class: obj.class,
                    slot,
                })
            })
            .collect()
    }

    pub fn train_item(&self, store: &ParamStore, sample: &Sample) -> Result<TrainItem> {
        Ok(TrainItem {
            image: self.prepare(store, sample.scene.id, &sample.scene.image)?,
            targets: self.targets(sample),
            caption: sample.caption.clone(),
        })
    }

    fn bias(&self, t: &mut Tape, adapter: &Option<BiasAdapter>, plain: Option<ParamId>, maps: Var) -> Result<Option<Var>> {
        if let Some(id) = plain {
            return Ok(Some(t.param(id)));
        }
        match adapter {
            Some(a) => Ok(Some(a.forward(t, maps)?)),
            None => Ok(None),
        }
    }

    fn source_maps(&self, t: &mut Tape, det_avg: Var, interaction: Var, rows: std::ops::Range<usize>) -> Var {
        let detection = t.slice_rows(det_avg, rows.start, rows.len());
        match self.cfg.variants.bias_source {
            BiasSource::Interaction => interaction,
            BiasSource::Detection => detection,
            BiasSource::Both => {
                let s = t.add(detection, interaction);
                t.scale(s, 0.5)
            }
        }
    }

    /// Full forward pass, scoring against the training or evaluation labels.
    pub fn forward(&self, t: &mut Tape, image: &PreparedImage, eval_labels: bool) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let n_q = cfg.detector.n_q;
        let tg = cfg.toggles;
        let n_p = cfg.tower.n_patches();
        let tower_feats = tg.early_fusion.then(|| image.vanilla_tokens.slice_rows(1, n_p));
        let fused = self.detector.early_fuse(t, &image.det_patches, tower_feats.as_ref())?;
        let det = self.detector.detect(t, &fused, tg.lsg)?;
        let inter = self.detector.interact(t, &fused, &det)?;
        let heads = self.detector.heads(t, &det);

        let det_avg = {
            let avg = average_maps(t, &det.maps);
            t.slice_cols(avg, 0, fused.cnn_rows)
        };
        let a_det_ho = {
            let h = t.slice_rows(det_avg, 0, n_q);
            let o = t.slice_rows(det_avg, n_q, n_q);
            let s = t.add(h, o);
            t.scale(s, 0.5)
        };
        let a_ho = match cfg.variants.bias_source {
            BiasSource::Interaction => inter.a_ho,
            BiasSource::Detection => a_det_ho,
            BiasSource::Both => {
                let s = t.add(a_det_ho, inter.a_ho);
                t.scale(s, 0.5)
            }
        };
        let a_f = match inter.a_f {
            Some(a) => Some(self.source_maps(t, det_avg, a, 2 * n_q..2 * n_q + cfg.detector.n_f)),
            None => None,
        };

        let mut bias = TowerBias::default();
        if tg.abg {
            bias.vit_ho = self.bias(t, &self.adapters.vit_ho, self.plain_bias.vit_ho, a_ho)?;
            bias.qf_ho = self.bias(t, &self.adapters.qf_ho, self.plain_bias.qf_ho, a_ho)?;
        }
        if let Some(a_f) = a_f {
            bias.vit_f = self.bias(t, &self.adapters.vit_f, self.plain_bias.vit_f, a_f)?;
            bias.qf_f = self.bias(t, &self.adapters.qf_f, self.plain_bias.qf_f, a_f)?;
        }

        let layout = self.layout();
        let q_ho = self.q_ho.map(|id| t.param(id));
        let q_f = self.q_f.map(|id| t.param(id));
        let (e_q_ho, e_q_f, vit_maps) = if layout.has_duplicates() {
            let out = self.tower.forward(t, &image.patches, &layout, q_ho, q_f, &bias)?;
            (out.e_q_ho, out.e_q_f, Some(out.vit_maps))
        } else {
            let tokens = t.constant(image.vanilla_tokens.clone());
            let (ho, f) = self.tower.qformer_forward(t, tokens, &layout, q_ho, q_f, &bias)?;
            (ho, f, None)
        };

        let fused_ho = match (&self.late_fusion, e_q_ho) {
            (Some(lf), Some(e)) => lf.forward(t, inter.e_ho, e)?,
            _ => inter.e_ho,
        };
        let kv = if tg.lsg { e_q_f } else { e_q_ho };
        let refined = match (&self.fusion_adapter, kv) {
            (Some(fa), Some(kv)) => fa.forward(t, fused_ho, kv)?.refined,
            _ => fused_ho,
        };
        let bias_ho = bias.vit_ho.or(bias.qf_ho);
        let labels = if eval_labels { &self.eval_matrix } else { &self.train_matrix };
        let b = t.param(self.cls_bias);
        let logits = classify_interactions(t, refined, &self.cls_proj, labels, cfg.logit_scale, Some(b))?;
        Ok(ForwardPass { heads, logits, e_q_f, a_ho, bias_ho, layout, vit_maps })
    }

    /// `L = L_hoi + L_lsg` for one training item. The LM is required only
    /// when LSG is on.
    pub fn loss(&self, t: &mut Tape, item: &TrainItem, lm: Option<(&ToyLM, &CaptionVocab)>) -> Result<LossParts> {
        let fp = self.forward(t, &item.image, false)?;
        let detection = detection_loss(t, &fp.heads, fp.logits, &item.targets, &self.cfg.loss)?;
        let hoi = t.scalar(detection.total);
        let l_lsg = match (self.cfg.toggles.lsg, fp.e_q_f) {
            (true, Some(e_q_f)) => {
                let (lm, vocab) = lm.ok_or_else(|| Error::Config("LSG is on but no language model was provided".into()))?;
                let proj = self.prefix_proj.as_ref().expect("prefix projection exists with LSG");
                let l = match self.cfg.variants.supervision {
                    Supervision::Token => {
                        let w = TokenWeights { noun: self.cfg.lsg.alpha, verb: self.cfg.lsg.beta, other: self.cfg.other_weight };
                        let cap = item.caption.reweighted(&w);
                        lsg_loss_with_weights(t, e_q_f, &cap, lm, proj, vocab, self.cfg.lsg.gamma)?
                    }
                    Supervision::Caption => {
                        let l = caption_level_loss_variant(t, e_q_f, &item.caption, lm, proj)?;
                        t.scale(l, self.cfg.lsg.gamma)
                    }
                };
                Some(l)
            }
            _ => None,
        };
        let lsg = l_lsg.map_or(0.0, |l| t.scalar(l));
        let total = total_loss(t, detection.total, l_lsg)?;
        Ok(LossParts { total, hoi, lsg, detection })
    }

    /// Scored triplets for one image: `σ(s_il) · p_i(o_l)` for every query
    /// `i` and evaluation label `l`, keeping the `top_k` best.
    pub fn predict(&self, store: &ParamStore, image: &PreparedImage, top_k: usize) -> Result<Vec<TripletPrediction>> {
        let mut t = Tape::new(store);
        let fp = self.forward(&mut t, image, true)?;
        let hb = t.value(fp.heads.human_boxes);
        let ob = t.value(fp.heads.object_boxes);
        let ol = t.value(fp.heads.object_logits);
        let s = t.value(fp.logits);
        let size = IMAGE_SIZE as f64;
        let mut out = Vec::with_capacity(hb.rows() * self.eval_labels.len());
        for i in 0..hb.rows() {
            let row = ol.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let human_box = BBox::from_cxcywh_norm(box4(hb.row(i)), size);
            let object_box = BBox::from_cxcywh_norm(box4(ob.row(i)), size);
            for (l, &(v, o)) in self.eval_labels.iter().enumerate() {
                let p_obj = (row[o] - mx).exp() / z;
                out.push(TripletPrediction {
                    image_id: image.image_id,
                    human_box,
                    object_box,
                    object_class: o,
                    verb: v,
                    score: sigmoid(s[(i, l)]) * p_obj,
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(top_k);
        Ok(out)
    }
}

fn box4(r: &[f64]) -> [f64; 4] {
    [r[0], r[1], r[2], r[3]]
}
