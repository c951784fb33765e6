use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{qformer_bias, vit_bias, TokenLayout};
use crate::error::{shape_err, Result};
use crate::nncore::layers::{EncoderLayer, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::nncore::{Mat, ParamId, ParamStore, Tape, Var};
use crate::synthworld::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vit_layers: usize,
    pub qformer_layers: usize,
    pub query_dim: usize,
    pub query_heads: usize,
    pub patch: usize,
    pub image_size: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            dim: 48,
            heads: 4,
            hidden: 96,
            vit_layers: 3,
            qformer_layers: 2,
            query_dim: 24,
            query_heads: 4,
            patch: 16,
            image_size: 64,
        }
    }
}

impl TowerConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * crate::synthworld::scene::CHANNELS
    }
}

/// Flattens non-overlapping `patch × patch` tiles in row-major tile order.
pub fn patchify(image: &Image, patch: usize) -> Mat {
    let (gh, gw) = (image.height / patch, image.width / patch);
    let c = crate::synthworld::scene::CHANNELS;
    let mut out = Mat::zeros(gh * gw, patch * patch * c);
    for ty in 0..gh {
        for tx in 0..gw {
            let row = out.row_mut(ty * gw + tx);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for &v in image.pixel(ty * patch + y, tx * patch + x) {
                        row[k] = v;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QFormerLayer {
    pub ln_q: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// ViT encoder followed by a cross-attention-only Q-Former. Every weight here
/// is frozen; the learnable queries live with the caller.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VisionTower {
    pub cfg: TowerConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub vit: Vec<EncoderLayer>,
    pub ln_vit: LayerNorm,
    pub qformer: Vec<QFormerLayer>,
    pub ln_query: LayerNorm,
}

/// Adapted logit blocks for the P_img columns. `None` means zero bias.
#[derive(Clone, Debug)]
pub struct TowerBias<V> {
    pub vit_ho: Option<V>,
    pub vit_f: Option<V>,
    pub qf_ho: Option<V>,
    pub qf_f: Option<V>,
}

impl<V> Default for TowerBias<V> {
    fn default() -> Self {
        Self { vit_ho: None, vit_f: None, qf_ho: None, qf_f: None }
    }
}

pub struct TowerOutputs {
    pub e_q_ho: Option<Var>,
    pub e_q_f: Option<Var>,
    /// Final ViT tokens in layout order.
    pub vit_tokens: Var,
    /// Post-softmax self-attention maps, `[layer][head]`.
    pub vit_maps: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainTowerOutputs {
    pub e_q_ho: Option<Mat>,
    pub e_q_f: Option<Mat>,
    pub vit_tokens: Mat,
}

impl VisionTower {
    /// Registers the tower under `prefix` and freezes it.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: TowerConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), cfg.patch_len(), d, Init::Xavier(1.0), true, rng);
        let cls = store.add(format!("{prefix}.cls"), Mat::randn(1, d, 0.5, rng), true);
        let pos = store.add(format!("{prefix}.pos"), Mat::randn(1 + cfg.n_patches(), d, 0.1, rng), true);
        let vit = (0..cfg.vit_layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.vit.{i}"), d, cfg.heads, cfg.hidden, rng))
            .collect();
        let ln_vit = LayerNorm::new(store, &format!("{prefix}.ln_vit"), d);
        let dq = cfg.query_dim;
        let qformer = (0..cfg.qformer_layers)
            .map(|i| {
                let n = format!("{prefix}.qformer.{i}");
                QFormerLayer {
                    ln_q: LayerNorm::new(store, &format!("{n}.ln_q"), dq),
                    cross: MultiHeadAttention::new(store, &format!("{n}.cross"), dq, d, dq, cfg.query_heads, Init::Xavier(1.0), rng),
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), dq),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), dq, 2 * dq, rng),
                }
            })
            .collect();
        let ln_query = LayerNorm::new(store, &format!("{prefix}.ln_query"), dq);
        let tower = Self { cfg, patch_embed, cls, pos, vit, ln_vit, qformer, ln_query };
        let ids = store.ids_with_prefix(&format!("{prefix}."));
        store.freeze(&ids);
        tower
    }

    /// Embedded `[C; C_ho; C_f; P_img]`; every duplicated token starts as a
    /// copy of the cls token, position embedding included.
    fn embed_plain(&self, store: &ParamStore, patches: &Mat, layout: &TokenLayout) -> Result<Mat> {
        if patches.shape() != (layout.n_p, self.cfg.patch_len()) {
            return Err(shape_err("tower patches", (layout.n_p, self.cfg.patch_len()), patches.shape()));
        }
        let pos = store.value(self.pos);
        if pos.rows() != 1 + layout.n_p {
            return Err(shape_err("tower layout patches", pos.rows() - 1, layout.n_p));
        }
        let mut cls = store.value(self.cls).clone();
        cls.add_assign(&pos.slice_rows(0, 1));
        let mut p = self.patch_embed.forward_plain(store, patches);
        p.add_assign(&pos.slice_rows(1, layout.n_p));
        let dup = 1 + layout.n_q + layout.n_f;
        let mut rows: Vec<&Mat> = vec![&cls; dup];
        rows.push(&p);
        Ok(Mat::concat_rows(&rows))
    }

    /// Unified forward: one biased attention call per layer and head over the
    /// whole stacked sequence.
    pub fn forward(
        &self,
        t: &mut Tape,
        patches: &Mat,
        layout: &TokenLayout,
        q_ho: Option<Var>,
        q_f: Option<Var>,
        bias: &TowerBias<Var>,
    ) -> Result<TowerOutputs> {
        let x0 = self.embed_plain(t.store(), patches, layout)?;
        let mut x = t.constant(x0);
        let vit_b = if layout.has_duplicates() {
            let template = vit_bias(layout, None, None)?;
            let mut parts = Vec::new();
            if let Some(b) = bias.vit_ho {
                check_block(t, b, layout.n_q, layout.n_p)?;
                parts.push((b, layout.c_ho().start, layout.patches().start));
            }
            if let Some(b) = bias.vit_f {
                check_block(t, b, layout.n_f, layout.n_p)?;
                parts.push((b, layout.c_f().start, layout.patches().start));
            }
            Some(t.place(template, &parts))
        } else {
            None
        };
        let mut vit_maps = Vec::with_capacity(self.vit.len());
        for layer in &self.vit {
            let (nx, maps) = layer.forward(t, x, vit_b)?;
            x = nx;
            vit_maps.push(maps);
        }
        let vit_tokens = self.ln_vit.forward(t, x);

        let (e_q_ho, e_q_f) = self.qformer_forward(t, vit_tokens, layout, q_ho, q_f, bias)?;
        Ok(TowerOutputs { e_q_ho, e_q_f, vit_tokens, vit_maps })
    }

    /// Q-Former stage alone over already computed ViT tokens.
    pub fn qformer_forward(
        &self,
        t: &mut Tape,
        vit_tokens: Var,
        layout: &TokenLayout,
        q_ho: Option<Var>,
        q_f: Option<Var>,
        bias: &TowerBias<Var>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        if t.shape(vit_tokens) != (layout.total(), self.cfg.dim) {
            return Err(shape_err("qformer keys", (layout.total(), self.cfg.dim), t.shape(vit_tokens)));
        }
        let n_qho = q_ho.map_or(0, |q| t.shape(q).0);
        let n_qf = q_f.map_or(0, |q| t.shape(q).0);
        let (mut e_q_ho, mut e_q_f) = (None, None);
        if n_qho + n_qf > 0 {
            let template = qformer_bias(layout, n_qho, n_qf, None, None)?;
            let mut parts = Vec::new();
            if let Some(b) = bias.qf_ho {
                check_block(t, b, n_qho, layout.n_p)?;
                parts.push((b, 0, layout.patches().start));
            }
            if let Some(b) = bias.qf_f {
                check_block(t, b, n_qf, layout.n_p)?;
                parts.push((b, n_qho, layout.patches().start));
            }
            let qb = if parts.is_empty() && template.as_slice().iter().all(|&v| v == 0.0) {
                None
            } else {
                Some(t.place(template, &parts))
            };
            let qs: Vec<Var> = q_ho.into_iter().chain(q_f).collect();
            let mut q = t.concat_rows(&qs);
            for l in &self.qformer {
                let h = l.ln_q.forward(t, q);
                let a = l.cross.forward(t, h, vit_tokens, qb)?;
                q = t.add(q, a.out);
                let h = l.ln_ffn.forward(t, q);
                let f = l.ffn.forward(t, h);
                q = t.add(q, f);
            }
            let q = self.ln_query.forward(t, q);
            if n_qho > 0 {
                e_q_ho = Some(t.slice_rows(q, 0, n_qho));
            }
            if n_qf > 0 {
                e_q_f = Some(t.slice_rows(q, n_qho, n_qf));
            }
        }
        Ok((e_q_ho, e_q_f))
    }

    /// Forward-only unified path on plain matrices.
    pub fn forward_plain(
        &self,
        store: &ParamStore,
        patches: &Mat,
        layout: &TokenLayout,
        q_ho: Option<&Mat>,
        q_f: Option<&Mat>,
        bias: &TowerBias<Mat>,
    ) -> Result<PlainTowerOutputs> {
        let mut t = Tape::new(store);
        let q_ho = q_ho.map(|q| t.constant(q.clone()));
        let q_f = q_f.map(|q| t.constant(q.clone()));
        let mut b = TowerBias::default();
        b.vit_ho = bias.vit_ho.clone().map(|m| t.constant(m));
        b.vit_f = bias.vit_f.clone().map(|m| t.constant(m));
        b.qf_ho = bias.qf_ho.clone().map(|m| t.constant(m));
        b.qf_f = bias.qf_f.clone().map(|m| t.constant(m));
        let out = self.forward(&mut t, patches, layout, q_ho, q_f, &b)?;
        Ok(PlainTowerOutputs {
            e_q_ho: out.e_q_ho.map(|v| t.value(v).clone()),
            e_q_f: out.e_q_f.map(|v| t.value(v).clone()),
            vit_tokens: t.value(out.vit_tokens).clone(),
        })
    }

    /// Per-query reference: C and P_img run alone, and every duplicated token
    /// or Q-Former query gets its own attention call restricted to its legal
    /// receptive field.
    pub fn reference_forward(
        &self,
        store: &ParamStore,
        patches: &Mat,
        layout: &TokenLayout,
        q_ho: Option<&Mat>,
        q_f: Option<&Mat>,
        bias: &TowerBias<Mat>,
    ) -> Result<PlainTowerOutputs> {
        let x0 = self.embed_plain(store, patches, layout)?;
        let n_p = layout.n_p;
        let zero_row = |i: usize, m: &Option<Mat>| -> Mat {
            match m {
                Some(m) => m.slice_rows(i, 1),
                None => Mat::zeros(1, n_p),
            }
        };
        let with_self = |row: &Mat| Mat::concat_cols(&[&Mat::zeros(1, 1), row]);

        let mut stream = Mat::concat_rows(&[&x0.slice_rows(0, 1), &x0.slice_rows(layout.patches().start, n_p)]);
        let mut dup: Vec<Mat> = (0..layout.n_q + layout.n_f).map(|i| x0.slice_rows(1 + i, 1)).collect();
        let stream_bias = Mat::zeros(1 + n_p, 1 + n_p);
        for layer in &self.vit {
            let p_in = stream.slice_rows(1, n_p);
            for (i, tok) in dup.iter_mut().enumerate() {
                let b = if i < layout.n_q { zero_row(i, &bias.vit_ho) } else { zero_row(i - layout.n_q, &bias.vit_f) };
                let kv = Mat::concat_rows(&[tok, &p_in]);
                *tok = layer.forward_plain(store, tok, &kv, &with_self(&b))?;
            }
            stream = layer.forward_plain(store, &stream, &stream, &stream_bias)?;
        }
        let stream = self.ln_vit.forward_plain(store, &stream);
        let dup: Vec<Mat> = dup.iter().map(|d| self.ln_vit.forward_plain(store, d)).collect();
        let cls = stream.slice_rows(0, 1);
        let p = stream.slice_rows(1, n_p);

        let run_query = |q0: &Mat, own: Option<&Mat>, b: Mat| -> Result<Mat> {
            let mut keys = vec![&cls];
            let mut bias_cols = vec![0.0];
            if let Some(o) = own {
                keys.push(o);
                bias_cols.push(0.0);
            }
            keys.push(&p);
            bias_cols.extend_from_slice(b.as_slice());
            let kv = Mat::concat_rows(&keys);
            let bm = Mat::from_vec(1, bias_cols.len(), bias_cols);
            let mut q = q0.clone();
            for l in &self.qformer {
                let h = l.ln_q.forward_plain(store, &q);
                q.add_assign(&l.cross.forward_plain(store, &h, &kv, &bm)?);
                let h = l.ln_ffn.forward_plain(store, &q);
                q.add_assign(&l.ffn.forward_plain(store, &h));
            }
            Ok(self.ln_query.forward_plain(store, &q))
        };
        let mut e_q_ho = None;
        if let Some(qs) = q_ho {
            let mut rows = Vec::with_capacity(qs.rows());
            for i in 0..qs.rows() {
                let own = (layout.n_q > 0).then(|| &dup[i]);
                rows.push(run_query(&qs.slice_rows(i, 1), own, zero_row(i, &bias.qf_ho))?);
            }
            e_q_ho = Some(Mat::concat_rows(&rows.iter().collect::<Vec<_>>()));
        }
        let mut e_q_f = None;
        if let Some(qs) = q_f {
            let mut rows = Vec::with_capacity(qs.rows());
            for j in 0..qs.rows() {
                let own = (layout.n_f > 0).then(|| &dup[layout.n_q + j]);
                rows.push(run_query(&qs.slice_rows(j, 1), own, zero_row(j, &bias.qf_f))?);
            }
            e_q_f = Some(Mat::concat_rows(&rows.iter().collect::<Vec<_>>()));
        }
        let mut all: Vec<&Mat> = vec![&cls];
        all.extend(dup.iter());
        all.push(&p);
        Ok(PlainTowerOutputs { e_q_ho, e_q_f, vit_tokens: Mat::concat_rows(&all) })
    }
}

fn check_block(t: &Tape, b: Var, rows: usize, n_p: usize) -> Result<()> {
    if t.shape(b) != (rows, n_p) {
        return Err(shape_err("tower bias block", (rows, n_p), t.shape(b)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, VisionTower, Mat) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tower = VisionTower::new(&mut store, "tower", TowerConfig::default(), &mut rng);
        let patches = Mat::uniform(16, tower.cfg.patch_len(), 0.0, 1.0, &mut rng);
        (store, tower, patches)
    }

    fn random_bias(layout: &TokenLayout, rng: &mut ChaCha8Rng) -> TowerBias<Mat> {
        TowerBias {
            vit_ho: Some(Mat::randn(layout.n_q, layout.n_p, 1.0, rng)),
            vit_f: Some(Mat::randn(layout.n_f, layout.n_p, 1.0, rng)),
            qf_ho: Some(Mat::randn(layout.n_q, layout.n_p, 1.0, rng)),
            qf_f: Some(Mat::randn(layout.n_f, layout.n_p, 1.0, rng)),
        }
    }

    #[test]
    fn unified_matches_per_query_reference() {
        let (store, tower, patches) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = TokenLayout::new(5, 3, 16);
        let q_ho = Mat::randn(5, 24, 1.0, &mut rng);
        let q_f = Mat::randn(3, 24, 1.0, &mut rng);
        let bias = random_bias(&layout, &mut rng);
        let fast = tower.forward_plain(&store, &patches, &layout, Some(&q_ho), Some(&q_f), &bias).unwrap();
        let slow = tower.reference_forward(&store, &patches, &layout, Some(&q_ho), Some(&q_f), &bias).unwrap();
        assert!(fast.vit_tokens.max_abs_diff(&slow.vit_tokens) <= 1e-9);
        assert!(fast.e_q_ho.unwrap().max_abs_diff(&slow.e_q_ho.unwrap()) <= 1e-9);
        assert!(fast.e_q_f.unwrap().max_abs_diff(&slow.e_q_f.unwrap()) <= 1e-9);
    }

    #[test]
    fn shapes() {
        let (store, tower, patches) = setup(0);
        let layout = TokenLayout::new(8, 4, 16);
        let q_ho = Mat::zeros(8, 24);
        let q_f = Mat::zeros(4, 24);
        let out = tower.forward_plain(&store, &patches, &layout, Some(&q_ho), Some(&q_f), &TowerBias::default()).unwrap();
        assert_eq!(out.e_q_ho.unwrap().shape(), (8, 24));
        assert_eq!(out.e_q_f.unwrap().shape(), (4, 24));
        assert_eq!(out.vit_tokens.shape(), (29, 48));
    }

    #[test]
    fn zero_bias_duplicates_match_vanilla_cls() {
        let (store, tower, patches) = setup(5);
        let layout = TokenLayout::new(4, 2, 16);
        let full = tower.forward_plain(&store, &patches, &layout, None, None, &TowerBias::default()).unwrap();
        let vanilla = tower.forward_plain(&store, &patches, &TokenLayout::vanilla(16), None, None, &TowerBias::default()).unwrap();
        let cls = vanilla.vit_tokens.slice_rows(0, 1);
        for r in 1..1 + 4 + 2 {
            assert!(full.vit_tokens.slice_rows(r, 1).max_abs_diff(&cls) <= 1e-6);
        }
    }

    #[test]
    fn tower_is_frozen() {
        let (store, _, _) = setup(0);
        assert_eq!(store.trainable_count(), 0);
    }
}
