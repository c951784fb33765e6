use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::layers::{EncoderLayer, Init, LayerNorm, Linear};
use crate::nncore::{AdamW, Mat, ParamId, ParamStore, Tape, Var};
use crate::synthworld::{CaptionRecord, CaptionVocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self { vocab_size, width: 32, heads: 4, hidden: 64, layers: 2, max_len: 32 }
    }
}

/// Small causal transformer over caption tokens. Optional prefix rows are
/// prepended without position embeddings; text positions always start at 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyLM {
    pub cfg: LmConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln: LayerNorm,
    pub head: Linear,
}

/// `n × n` additive mask: 0 on and below the diagonal, −inf above.
pub fn causal_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m[(r, c)] = f64::NEG_INFINITY;
        }
    }
    m
}

impl ToyLM {
    pub const PREFIX: &'static str = "lm";

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: LmConfig, rng: &mut R) -> Self {
        let p = Self::PREFIX;
        let w = cfg.width;
        let embed = store.add(format!("{p}.embed"), Mat::randn(cfg.vocab_size, w, 0.5, rng), true);
        let pos = store.add(format!("{p}.pos"), Mat::randn(cfg.max_len, w, 0.1, rng), true);
        let layers = (0..cfg.layers).map(|i| EncoderLayer::new(store, &format!("{p}.layer.{i}"), w, cfg.heads, cfg.hidden, rng)).collect();
        let ln = LayerNorm::new(store, &format!("{p}.ln"), w);
        let head = Linear::new(store, &format!("{p}.head"), w, cfg.vocab_size, Init::Xavier(1.0), true, rng);
        Self { cfg, embed, pos, layers, ln, head }
    }

    pub fn params(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(&format!("{}.", Self::PREFIX))
    }

    /// Teacher-forced input for `caption`: `<bos>, g_1, …, g_{N−1}`.
    pub fn shifted_input(bos: usize, caption: &CaptionRecord) -> Vec<usize> {
        std::iter::once(bos).chain(caption.tokens[..caption.tokens.len() - 1].iter().copied()).collect()
    }

    /// Logits for every text position (one row per input token).
    pub fn logits(&self, t: &mut Tape, prefix: Option<Var>, input: &[usize]) -> Result<Var> {
        if input.len() > self.cfg.max_len {
            return Err(Error::Config(format!("caption of {} tokens exceeds LM length {}", input.len(), self.cfg.max_len)));
        }
        let emb = t.param(self.embed);
        let tok = t.gather_rows(emb, input);
        let pos = t.param(self.pos);
        let pos = t.slice_rows(pos, 0, input.len());
        let text = t.add(tok, pos);
        let (mut x, n_prefix) = match prefix {
            Some(p) => (t.concat_rows(&[p, text]), t.shape(p).0),
            None => (text, 0),
        };
        let mask = t.constant(causal_mask(n_prefix + input.len()));
        for l in &self.layers {
            x = l.forward(t, x, Some(mask))?.0;
        }
        let x = t.slice_rows(x, n_prefix, input.len());
        let x = self.ln.forward(t, x);
        Ok(self.head.forward(t, x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, lr: 3e-3, seed: 0 }
    }
}

/// Mean per-token cross-entropy (unweighted, no prefix) over a corpus.
pub fn corpus_nll(store: &ParamStore, lm: &ToyLM, bos: usize, corpus: &[CaptionRecord]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for c in corpus {
        let mut t = Tape::new(store);
        let logits = lm.logits(&mut t, None, &ToyLM::shifted_input(bos, c))?;
        let ce = t.cross_entropy(logits, &c.tokens, &vec![1.0; c.len()]);
        total += t.scalar(ce);
        count += c.len();
    }
    Ok(total / count.max(1) as f64)
}

pub struct Pretrained {
    pub store: ParamStore,
    pub lm: ToyLM,
    pub losses: Vec<f64>,
}

/// Next-token training on captions alone, then every LM weight is frozen.
pub fn pretrain_lm(corpus: &[CaptionRecord], vocab: &CaptionVocab, cfg: &PretrainConfig) -> Result<Pretrained> {
    if corpus.is_empty() || corpus.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyCaption);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let lm = ToyLM::new(&mut store, LmConfig::toy(vocab.len()), &mut rng);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut t = Tape::new(&store);
        let mut terms = Vec::with_capacity(cfg.batch);
        let mut n_tok = 0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let c = &corpus[order[cursor]];
            cursor += 1;
            let logits = lm.logits(&mut t, None, &ToyLM::shifted_input(vocab.bos(), c))?;
            terms.push(t.cross_entropy(logits, &c.tokens, &vec![1.0; c.len()]));
            n_tok += c.len();
        }
        let mut loss = terms[0];
        for &x in &terms[1..] {
            loss = t.add(loss, x);
        }
        let loss = t.scale(loss, 1.0 / n_tok as f64);
        let lv = t.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss(format!("LM pretraining step {step}: {lv}")));
        }
        losses.push(lv);
        let grads = t.backward(loss).into_params();
        drop(t);
        opt.step(&mut store, &grads);
    }
    let ids = lm.params(&store);
    store.freeze(&ids);
    Ok(Pretrained { store, lm, losses })
}

/// LM checkpoint: named arrays plus the vocabulary they were trained on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub config: LmConfig,
    pub vocab: CaptionVocab,
    pub params: Vec<(String, Mat)>,
}

impl LmCheckpoint {
    pub fn from_store(store: &ParamStore, lm: &ToyLM, vocab: &CaptionVocab) -> Self {
        let params = lm.params(store).into_iter().map(|id| (store.get(id).name().to_string(), store.value(id).clone())).collect();
        Self { config: lm.cfg.clone(), vocab: vocab.clone(), params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Registers the LM in `store` with these frozen weights.
    pub fn install(&self, store: &mut ParamStore) -> Result<ToyLM> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lm = ToyLM::new(store, self.config.clone(), &mut rng);
        for (name, values) in &self.params {
            let id = store.id(name)?;
            store.set_values(id, values.clone())?;
        }
        let ids = lm.params(store);
        store.freeze(&ids);
        Ok(lm)
    }
}
