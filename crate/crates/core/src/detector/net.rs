use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nncore::layers::{DecoderLayer, EncoderLayer, Init, LayerNorm, Linear, Mlp};
use crate::nncore::{Mat, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub interaction_layers: usize,
    pub n_q: usize,
    pub n_f: usize,
    pub patch: usize,
    pub image_size: usize,
    pub num_objects: usize,
    /// Width of the tower patch features fused into the encoder input.
    pub tower_dim: usize,
    pub n_tower_patches: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            hidden: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            interaction_layers: 2,
            n_q: 8,
            n_f: 4,
            patch: 8,
            image_size: 64,
            num_objects: 6,
            tower_dim: 48,
            n_tower_patches: 16,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }

    pub fn cnn_rows(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// Learnable human, object and caption query sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryBank {
    pub q_h: ParamId,
    pub q_o: ParamId,
    pub q_f: Option<ParamId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub backbone: Mlp,
    pub tower_proj: Linear,
    pub pos: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub bank: QueryBank,
    pub decoder: Vec<DecoderLayer>,
    pub ln_dec: LayerNorm,
    pub interaction: Vec<DecoderLayer>,
    pub ln_int: LayerNorm,
    pub human_box: Mlp,
    pub object_box: Mlp,
    pub object_class: Linear,
}

/// Encoder memory `M`: CNN rows first, then tower rows when fused.
pub struct FusedFeatureMap {
    /// Encoder input before position embedding.
    pub pre: Var,
    pub m: Var,
    pub cnn_rows: usize,
    pub tower_rows: usize,
}

pub struct Detection {
    pub e_h: Var,
    pub e_o: Var,
    pub e_f: Option<Var>,
    /// Cross-attention maps of the detection decoder, `[layer][head]`.
    pub maps: Vec<Vec<Var>>,
}

pub struct InteractionOutputs {
    pub e_ho: Var,
    pub e_f: Option<Var>,
    /// N_q × (h·w), averaged over layers and heads, CNN extent only.
    pub a_ho: Var,
    pub a_f: Option<Var>,
}

pub struct Heads {
    /// Sigmoid-normalized `(cx, cy, w, h)`.
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// N_q × (objects + 1); the last column is "no object".
    pub object_logits: Var,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: DetectorConfig, with_captions: bool, rng: &mut R) -> Self {
        let d = cfg.dim;
        let patch_len = cfg.patch * cfg.patch * crate::synthworld::scene::CHANNELS;
        let backbone = Mlp::new(store, &format!("{prefix}.backbone"), &[patch_len, d, d], rng);
        let tower_proj = Linear::new(store, &format!("{prefix}.tower_proj"), cfg.tower_dim, d, Init::Zeros, true, rng);
        let pos = store.add(format!("{prefix}.pos"), Mat::randn(cfg.cnn_rows() + cfg.n_tower_patches, d, 0.1, rng), true);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.encoder.{i}"), d, cfg.heads, cfg.hidden, rng))
            .collect();
        let bank = QueryBank {
            q_h: store.add(format!("{prefix}.q_h"), Mat::randn(cfg.n_q, d, 1.0, rng), true),
            q_o: store.add(format!("{prefix}.q_o"), Mat::randn(cfg.n_q, d, 1.0, rng), true),
            q_f: with_captions.then(|| store.add(format!("{prefix}.q_f"), Mat::randn(cfg.n_f, d, 1.0, rng), true)),
        };
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(store, &format!("{prefix}.decoder.{i}"), d, cfg.heads, cfg.hidden, rng))
            .collect();
        let interaction = (0..cfg.interaction_layers)
            .map(|i| DecoderLayer::new(store, &format!("{prefix}.interaction.{i}"), d, cfg.heads, cfg.hidden, rng))
            .collect();
        Self {
            backbone,
            tower_proj,
            pos,
            encoder,
            bank,
            decoder,
            ln_dec: LayerNorm::new(store, &format!("{prefix}.ln_dec"), d),
            interaction,
            ln_int: LayerNorm::new(store, &format!("{prefix}.ln_int"), d),
            human_box: Mlp::new(store, &format!("{prefix}.human_box"), &[d, d, 4], rng),
            object_box: Mlp::new(store, &format!("{prefix}.object_box"), &[d, d, 4], rng),
            object_class: Linear::new(store, &format!("{prefix}.object_class"), d, cfg.num_objects + 1, Init::Xavier(1.0), true, rng),
            cfg,
        }
    }

    /// Patch embedding, optional concatenation of projected tower patch
    /// features along the token axis, then the shared encoder.
    pub fn early_fuse(&self, t: &mut Tape, patches: &Mat, tower: Option<&Mat>) -> Result<FusedFeatureMap> {
        let cnn_rows = self.cfg.cnn_rows();
        if patches.rows() != cnn_rows {
            return Err(shape_err("detector patches", cnn_rows, patches.rows()));
        }
        let x = t.constant(patches.clone());
        let cnn = self.backbone.forward(t, x);
        let (pre, tower_rows) = match tower {
            Some(tf) => {
                if tf.shape() != (self.cfg.n_tower_patches, self.cfg.tower_dim) {
                    return Err(shape_err("tower features", (self.cfg.n_tower_patches, self.cfg.tower_dim), tf.shape()));
                }
                let tv = t.constant(tf.clone());
                let proj = self.tower_proj.forward(t, tv);
                (t.concat_rows(&[cnn, proj]), tf.rows())
            }
            None => (cnn, 0),
        };
        let pos = self.positions(t, cnn_rows + tower_rows);
        let mut m = t.add(pre, pos);
        for layer in &self.encoder {
            m = layer.forward(t, m, None)?.0;
        }
        Ok(FusedFeatureMap { pre, m, cnn_rows, tower_rows })
    }

    fn positions(&self, t: &mut Tape, rows: usize) -> Var {
        let p = t.param(self.pos);
        t.slice_rows(p, 0, rows)
    }

    fn memory_keys(&self, t: &mut Tape, fused: &FusedFeatureMap) -> Var {
        let pos = self.positions(t, fused.cnn_rows + fused.tower_rows);
        t.add(fused.m, pos)
    }

    /// Joint decoding of `[Q_h; Q_o; Q_f]`.
    pub fn detect(&self, t: &mut Tape, fused: &FusedFeatureMap, use_captions: bool) -> Result<Detection> {
        let n_q = self.cfg.n_q;
        let mut qs = vec![t.param(self.bank.q_h), t.param(self.bank.q_o)];
        let q_f = if use_captions { self.bank.q_f } else { None };
        if let Some(id) = q_f {
            qs.push(t.param(id));
        }
        let mut x = t.concat_rows(&qs);
        let keys = self.memory_keys(t, fused);
        let mut maps = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (nx, w) = layer.forward(t, x, keys, fused.m)?;
            x = nx;
            maps.push(w);
        }
        let x = self.ln_dec.forward(t, x);
        let e_h = t.slice_rows(x, 0, n_q);
        let e_o = t.slice_rows(x, n_q, n_q);
        let e_f = q_f.map(|_| t.slice_rows(x, 2 * n_q, self.cfg.n_f));
        Ok(Detection { e_h, e_o, e_f, maps })
    }

    /// Interaction decoding of `[E_h + E_o; E_f]`.
    pub fn interact(&self, t: &mut Tape, fused: &FusedFeatureMap, det: &Detection) -> Result<InteractionOutputs> {
        let n_q = self.cfg.n_q;
        let ho = t.add(det.e_h, det.e_o);
        let mut x = match det.e_f {
            Some(f) => t.concat_rows(&[ho, f]),
            None => ho,
        };
        let keys = self.memory_keys(t, fused);
        let mut maps = Vec::with_capacity(self.interaction.len());
        for layer in &self.interaction {
            let (nx, w) = layer.forward(t, x, keys, fused.m)?;
            x = nx;
            maps.push(w);
        }
        let x = self.ln_int.forward(t, x);
        let avg = average_maps(t, &maps);
        let a = t.slice_cols(avg, 0, fused.cnn_rows);
        let e_ho = t.slice_rows(x, 0, n_q);
        let a_ho = t.slice_rows(a, 0, n_q);
        let (e_f, a_f) = match det.e_f {
            Some(_) => (Some(t.slice_rows(x, n_q, self.cfg.n_f)), Some(t.slice_rows(a, n_q, self.cfg.n_f))),
            None => (None, None),
        };
        Ok(InteractionOutputs { e_ho, e_f, a_ho, a_f })
    }

    /// Detection-decoder maps for the interaction queries: the mean of each
    /// human query's and object query's averaged map, CNN extent only.
    pub fn detection_maps(&self, t: &mut Tape, fused: &FusedFeatureMap, det: &Detection) -> Var {
        let n_q = self.cfg.n_q;
        let avg = average_maps(t, &det.maps);
        let a = t.slice_cols(avg, 0, fused.cnn_rows);
        let h = t.slice_rows(a, 0, n_q);
        let o = t.slice_rows(a, n_q, n_q);
        let s = t.add(h, o);
        t.scale(s, 0.5)
    }

    pub fn heads(&self, t: &mut Tape, det: &Detection) -> Heads {
        let hb = self.human_box.forward(t, det.e_h);
        let ob = self.object_box.forward(t, det.e_o);
        Heads {
            human_boxes: t.sigmoid(hb),
            object_boxes: t.sigmoid(ob),
            object_logits: self.object_class.forward(t, det.e_o),
        }
    }
}

/// Arithmetic mean over every layer and head.
pub fn average_maps(t: &mut Tape, maps: &[Vec<Var>]) -> Var {
    let all: Vec<Var> = maps.iter().flatten().copied().collect();
    assert!(!all.is_empty(), "no attention maps to average");
    let mut acc = all[0];
    for &m in &all[1..] {
        acc = t.add(acc, m);
    }
    t.scale(acc, 1.0 / all.len() as f64)
}
