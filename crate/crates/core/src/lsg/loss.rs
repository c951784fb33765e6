use serde::{Deserialize, Serialize};

use super::lm::ToyLM;
use crate::error::{Error, Result};
use crate::nncore::layers::Linear;
use crate::nncore::{Mat, Tape, Var};
use crate::synthworld::{CaptionRecord, CaptionVocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsgLossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LsgLossConfig {
    fn default() -> Self {
        Self { gamma: 0.1, alpha: 1.5, beta: 2.0 }
    }
}

impl LsgLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma > 0.0 && self.alpha > 0.0 && self.beta > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("LSG weights must be positive, got {self:?}")))
        }
    }
}

/// `(γ / N_t) · Σ_n w_n · CE(logits_n, g_n)` for one caption.
pub fn weighted_token_loss(t: &mut Tape, logits: Var, caption: &CaptionRecord, gamma: f64) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let ce = t.cross_entropy(logits, &caption.tokens, &caption.weights);
    let loss = t.scale(ce, gamma / caption.len() as f64);
    let v = t.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("LSG loss {v}")));
    }
    Ok(loss)
}

/// Projects `E^q_f` into the LM width and scores the caption under teacher
/// forcing. Token weights are recomputed from the POS tags with `cfg.alpha`
/// and `cfg.beta`.
pub fn lsg_loss(
    t: &mut Tape,
    e_q_f: Var,
    caption: &CaptionRecord,
    lm: &ToyLM,
    prefix_proj: &Linear,
    vocab: &CaptionVocab,
    cfg: &LsgLossConfig,
) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let weighted = caption.reweighted(&crate::synthworld::TokenWeights { noun: cfg.alpha, verb: cfg.beta, other: 1.0 });
    let prefix = prefix_proj.forward(t, e_q_f);
    let logits = lm.logits(t, Some(prefix), &ToyLM::shifted_input(vocab.bos(), caption))?;
    weighted_token_loss(t, logits, &weighted, cfg.gamma)
}

/// Same as [`lsg_loss`] with explicit per-token weights taken from `caption`.
pub fn lsg_loss_with_weights(
    t: &mut Tape,
    e_q_f: Var,
    caption: &CaptionRecord,
    lm: &ToyLM,
    prefix_proj: &Linear,
    vocab: &CaptionVocab,
    gamma: f64,
) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let prefix = prefix_proj.forward(t, e_q_f);
    let logits = lm.logits(t, Some(prefix), &ToyLM::shifted_input(vocab.bos(), caption))?;
    weighted_token_loss(t, logits, caption, gamma)
}

/// `1 − cos(a, b)` for two row vectors.
pub fn cosine_distance(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = t.l2_normalize_rows(a)?;
    let bn = t.l2_normalize_rows(b)?;
    let p = t.mul(an, bn);
    let s = t.sum(p);
    let neg = t.scale(s, -1.0);
    Ok(t.add_const(neg, 1.0))
}

/// Caption-level alternative: cosine distance between the mean projected
/// caption query and the mean frozen LM embedding of the caption tokens.
pub fn caption_level_loss_variant(t: &mut Tape, e_q_f: Var, caption: &CaptionRecord, lm: &ToyLM, prefix_proj: &Linear) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let prefix = prefix_proj.forward(t, e_q_f);
    let a = t.mean_rows(prefix);
    let emb = t.param(lm.embed);
    let toks = t.gather_rows(emb, &caption.tokens);
    let b = t.mean_rows(toks);
    cosine_distance(t, a, b)
}

/// Plain cosine distance used as an oracle.
pub fn cosine_distance_plain(a: &Mat, b: &Mat) -> Result<f64> {
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    let na = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(1.0 - dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::layers::Init;
    use crate::nncore::ParamStore;
    use crate::synthworld::{Catalog, Pos, TokenWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noun_verb_noun(alpha: f64, beta: f64) -> CaptionRecord {
        let pos_tags = vec![Pos::Noun, Pos::Verb, Pos::Noun];
        let w = TokenWeights { noun: alpha, verb: beta, other: 1.0 };
        CaptionRecord { tokens: vec![1, 2, 3], weights: pos_tags.iter().map(|&p| w.weight(p)).collect(), pos_tags }
    }

    #[test]
    fn uniform_logits_hand_value() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = t.input(Mat::zeros(3, 4));
        let l = weighted_token_loss(&mut t, logits, &noun_verb_noun(1.5, 2.0), 0.1).unwrap();
        let want = 0.1 * (1.5 + 2.0 + 1.5) / 3.0 * 4f64.ln();
        assert!((t.scalar(l) - want).abs() < 1e-12);
        assert!((want - 0.23104906018664845).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_give_mean_cross_entropy() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lm = Mat::randn(3, 5, 1.0, &mut rng);
        let logits = t.input(lm.clone());
        let l = weighted_token_loss(&mut t, logits, &noun_verb_noun(1.0, 1.0), 1.0).unwrap();
        let mut want = 0.0;
        for (r, &g) in [1usize, 2, 3].iter().enumerate() {
            let row = lm.row(r);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            want += (lse - row[g]) / 3.0;
        }
        assert!((t.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn empty_caption() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = t.input(Mat::zeros(0, 4));
        let c = CaptionRecord { tokens: vec![], pos_tags: vec![], weights: vec![] };
        assert!(matches!(weighted_token_loss(&mut t, logits, &c, 0.1), Err(Error::EmptyCaption)));
    }

    #[test]
    fn cosine_cases() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.input(Mat::from_rows(&[vec![1.0, 2.0, 0.0]]));
        let b = t.input(Mat::from_rows(&[vec![0.0, 0.0, 3.0]]));
        let same = cosine_distance(&mut t, a, a).unwrap();
        let orth = cosine_distance(&mut t, a, b).unwrap();
        assert!(t.scalar(same).abs() < 1e-12);
        assert!((t.scalar(orth) - 1.0).abs() < 1e-12);
        let z = t.input(Mat::zeros(1, 3));
        assert!(matches!(cosine_distance(&mut t, a, z), Err(Error::ZeroNorm)));
    }

    #[test]
    fn raising_beta_raises_loss() {
        let vocab = CaptionVocab::from_catalog(&Catalog::toy(0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let lm = ToyLM::new(&mut store, super::super::lm::LmConfig::toy(vocab.len()), &mut rng);
        let proj = Linear::new(&mut store, "proj", 24, 32, Init::Xavier(1.0), true, &mut rng);
        let e = Mat::randn(4, 24, 1.0, &mut rng);
        let cap = CaptionRecord {
            tokens: vec![9, 2, 3, 4, 10, 18],
            pos_tags: vec![Pos::Noun, Pos::Other, Pos::Other, Pos::Other, Pos::Verb, Pos::Noun],
            weights: vec![1.0; 6],
        };
        let run = |beta: f64| {
            let mut t = Tape::new(&store);
            let ev = t.input(e.clone());
            let l = lsg_loss(&mut t, ev, &cap, &lm, &proj, &vocab, &LsgLossConfig { gamma: 0.1, alpha: 1.5, beta }).unwrap();
            t.scalar(l)
        };
        assert!(run(3.0) > run(2.0));
    }
}
