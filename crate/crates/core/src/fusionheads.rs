//! Late fusion of detector and tower interaction embeddings, the Fusion
//! Adapter, and the compositional phrase classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nncore::layers::{Init, LayerNorm, Linear, MultiHeadAttention};
use crate::nncore::{Mat, ParamStore, Tape, Var};
use crate::synthworld::{Catalog, Combo};

pub const DEFAULT_LOGIT_SCALE: f64 = 1.0 / 0.07;

/// `fused = E_ho + proj(E_q_ho)` with a zero-initialized projection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LateFusion {
    pub proj: Linear,
}

impl LateFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_q: usize, dim: usize, rng: &mut R) -> Self {
        Self { proj: Linear::new(store, name, d_q, dim, Init::Zeros, true, rng) }
    }

    pub fn forward(&self, t: &mut Tape, e_ho: Var, e_q_ho: Var) -> Result<Var> {
        if t.shape(e_ho).0 != t.shape(e_q_ho).0 {
            return Err(shape_err("late fusion rows", t.shape(e_ho).0, t.shape(e_q_ho).0));
        }
        let p = self.proj.forward(t, e_q_ho);
        if t.shape(p) != t.shape(e_ho) {
            return Err(shape_err("late fusion", t.shape(e_ho), t.shape(p)));
        }
        Ok(t.add(e_ho, p))
    }
}

/// One residual cross-attention layer from the fused interaction rows onto
/// the caption-query embeddings. The output projection starts at zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionAdapter {
    pub ln: LayerNorm,
    pub attn: MultiHeadAttention,
}

pub struct AdapterOutput {
    pub refined: Var,
    pub weights: Vec<Var>,
}

impl FusionAdapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, d_kv: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, d_kv, dim, heads, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, fused: Var, kv: Var) -> Result<AdapterOutput> {
        let h = self.ln.forward(t, fused);
        let a = self.attn.forward(t, h, kv, None)?;
        Ok(AdapterOutput { refined: t.add(fused, a.out), weights: a.head_weights })
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Frozen word vector drawn from a generator seeded by the word's hash.
pub fn word_embedding(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Rows are `normalize(emb(verb) + emb(object))` for each label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseClassifier {
    pub dim: usize,
    pub verb_emb: Vec<Vec<f64>>,
    pub object_emb: Vec<Vec<f64>>,
}

impl PhraseClassifier {
    pub fn new(catalog: &Catalog, dim: usize) -> Self {
        Self {
            dim,
            verb_emb: catalog.verbs.iter().map(|v| word_embedding(v, dim)).collect(),
            object_emb: catalog.objects.iter().map(|o| word_embedding(o, dim)).collect(),
        }
    }

    pub fn phrase(&self, (v, o): Combo) -> Vec<f64> {
        let s: Vec<f64> = self.verb_emb[v].iter().zip(&self.object_emb[o]).map(|(a, b)| a + b).collect();
        let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        s.into_iter().map(|x| x / n).collect()
    }

    pub fn matrix(&self, labels: &[Combo]) -> Result<Mat> {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        Ok(Mat::from_rows(&labels.iter().map(|&c| self.phrase(c)).collect::<Vec<_>>()))
    }
}

/// Initial value of the shared logit offset.
pub const DEFAULT_LOGIT_BIAS: f64 = -10.0;

/// `scale · cos(proj(refined_i), phrase_l) + b` for every query and label.
/// The offset `b` is one scalar shared by all labels, seen or not.
pub fn classify_interactions(
    t: &mut Tape,
    refined: Var,
    proj: &Linear,
    classifier: &Mat,
    scale: f64,
    bias: Option<Var>,
) -> Result<Var> {
    if classifier.rows() == 0 {
        return Err(Error::EmptyLabelSet);
    }
    let z = proj.forward(t, refined);
    if t.shape(z).1 != classifier.cols() {
        return Err(shape_err("classifier width", classifier.cols(), t.shape(z).1));
    }
    let zn = t.l2_normalize_rows(z)?;
    let w = t.constant(classifier.clone());
    let s = t.matmul_nt(zn, w);
    let s = t.scale(s, scale);
    Ok(match bias {
        Some(b) => {
            if t.shape(b) != (1, 1) {
                return Err(shape_err("logit bias", (1, 1), t.shape(b)));
            }
            let (n, l) = t.shape(s);
            let col = t.constant(Mat::filled(n, 1, 1.0));
            let row = t.constant(Mat::filled(1, l, 1.0));
            let bc = t.matmul(col, b);
            let full = t.matmul(bc, row);
            t.add(s, full)
        }
        None => s,
    })
}

/// `L = L_hoi + L_lsg`; the LSG term already carries its weight.
pub fn total_loss(t: &mut Tape, l_hoi: Var, l_lsg: Option<Var>) -> Result<Var> {
    let total = match l_lsg {
        Some(l) => t.add(l_hoi, l),
        None => l_hoi,
    };
    let v = t.scalar(total);
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("total loss {v}")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_projection_keeps_e_ho() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lf = LateFusion::new(&mut store, "lf", 24, 32, &mut rng);
        let mut t = Tape::new(&store);
        let e = Mat::randn(8, 32, 1.0, &mut rng);
        let ev = t.input(e.clone());
        let q = t.input(Mat::randn(8, 24, 1.0, &mut rng));
        let f = lf.forward(&mut t, ev, q).unwrap();
        assert_eq!(t.value(f), &e);
    }

    #[test]
    fn late_fusion_matches_manual_addition() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lf = LateFusion::new(&mut store, "lf", 3, 2, &mut rng);
        store.set_values(lf.proj.w, Mat::randn(3, 2, 1.0, &mut rng)).unwrap();
        let e = Mat::randn(4, 2, 1.0, &mut rng);
        let q = Mat::randn(4, 3, 1.0, &mut rng);
        let mut t = Tape::new(&store);
        let (ev, qv) = (t.input(e.clone()), t.input(q.clone()));
        let f = lf.forward(&mut t, ev, qv).unwrap();
        let w = store.value(lf.proj.w);
        for i in 0..4 {
            for j in 0..2 {
                let want = e[(i, j)] + (0..3).map(|k| q[(i, k)] * w[(k, j)]).sum::<f64>();
                assert!((t.value(f)[(i, j)] - want).abs() < 1e-12);
            }
        }
        let short = t.input(Mat::zeros(3, 3));
        assert!(lf.forward(&mut t, ev, short).is_err());
    }

    #[test]
    fn adapter_starts_as_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fa = FusionAdapter::new(&mut store, "fa", 32, 24, 4, &mut rng);
        let mut t = Tape::new(&store);
        let f = Mat::randn(8, 32, 1.0, &mut rng);
        let fv = t.input(f.clone());
        let kv = t.input(Mat::randn(4, 24, 1.0, &mut rng));
        let out = fa.forward(&mut t, fv, kv).unwrap();
        assert_eq!(t.value(out.refined), &f);
        for w in out.weights {
            for r in 0..8 {
                let s: f64 = t.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unseen_rows_are_compositional_and_stable() {
        let cat = Catalog::toy(0);
        let a = PhraseClassifier::new(&cat, 32);
        let b = PhraseClassifier::new(&cat, 32);
        let row = a.phrase((3, 5));
        let raw: Vec<f64> = word_embedding("throws", 32).iter().zip(word_embedding("horse", 32)).map(|(x, y)| x + y).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (r, x) in row.iter().zip(&raw) {
            assert_eq!(*r, x / n);
        }
        assert_eq!(a.matrix(&cat.valid_combos()).unwrap(), b.matrix(&cat.valid_combos()).unwrap());
        assert!(matches!(a.matrix(&[]), Err(Error::EmptyLabelSet)));
    }

    #[test]
    fn scores_are_scaled_cosines() {
        let cat = Catalog::toy(0);
        let pc = PhraseClassifier::new(&cat, 4);
        let labels = [(0, 0), (1, 2), (3, 5)];
        let w = pc.matrix(&labels).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = Linear::new(&mut store, "p", 4, 4, Init::Zeros, false, &mut rng);
        store.set_values(proj.w, Mat::identity(4)).unwrap();
        let mut t = Tape::new(&store);
        let mut r = Mat::randn(2, 4, 1.0, &mut rng);
        r.row_mut(1).copy_from_slice(&pc.phrase((1, 2)));
        let rv = t.input(r.clone());
        let s = classify_interactions(&mut t, rv, &proj, &w, DEFAULT_LOGIT_SCALE, None).unwrap();
        let sm = t.value(s).clone();
        for i in 0..2 {
            let n = r.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            for l in 0..3 {
                let cos: f64 = r.row(i).iter().zip(w.row(l)).map(|(a, b)| a * b).sum::<f64>() / n;
                assert!((sm[(i, l)] - DEFAULT_LOGIT_SCALE * cos).abs() < 1e-10);
            }
        }
        let best = (0..3).max_by(|&a, &b| sm[(1, a)].total_cmp(&sm[(1, b)])).unwrap();
        assert_eq!(best, 1);
        let b = t.input(Mat::scalar(-2.5));
        let sb = classify_interactions(&mut t, rv, &proj, &w, DEFAULT_LOGIT_SCALE, Some(b)).unwrap();
        let sbm = t.value(sb);
        for i in 0..2 {
            for l in 0..3 {
                assert!((sbm[(i, l)] - sm[(i, l)] + 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_is_the_sum() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.input(Mat::scalar(1.0));
        let b = t.input(Mat::scalar(0.2311));
        let l = total_loss(&mut t, a, Some(b)).unwrap();
        assert!((t.scalar(l) - 1.2311).abs() < 1e-12);
        let l = total_loss(&mut t, a, None).unwrap();
        assert_eq!(t.scalar(l), 1.0);
    }
}
