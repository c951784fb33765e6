use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Mat, ParamStore};
use crate::visiontower::{TokenLayout, TowerBias, TowerConfig, VisionTower};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSize {
    pub n_q: usize,
    pub n_f: usize,
    pub n_p: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_q: usize,
    pub n_f: usize,
    pub n_p: usize,
    pub max_abs_diff: f64,
    pub fast_seconds: f64,
    pub reference_seconds: f64,
    pub speedup: f64,
}

pub const EQUIVALENCE_TOL: f64 = 1e-9;

/// A tower with random weights, inputs, queries and biases for one size.
pub struct BenchCase {
    pub store: ParamStore,
    pub tower: VisionTower,
    pub patches: Mat,
    pub layout: TokenLayout,
    pub q_ho: Option<Mat>,
    pub q_f: Option<Mat>,
    pub bias: TowerBias<Mat>,
}

impl BenchCase {
    pub fn new(size: BenchSize, seed: u64) -> Result<Self> {
        let grid = (size.n_p as f64).sqrt().round() as usize;
        if grid * grid != size.n_p || grid == 0 {
            return Err(Error::GridMismatch { grid, patches: size.n_p });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = TowerConfig::default();
        let cfg = TowerConfig { image_size: grid * base.patch, ..base };
        let mut store = ParamStore::new();
        let tower = VisionTower::new(&mut store, "tower", cfg.clone(), &mut rng);
        let patches = Mat::uniform(size.n_p, cfg.patch_len(), 0.0, 1.0, &mut rng);
        let layout = TokenLayout::new(size.n_q, size.n_f, size.n_p);
        let opt = |n: usize, cols: usize, rng: &mut ChaCha8Rng| (n > 0).then(|| Mat::randn(n, cols, 1.0, rng));
        let q_ho = opt(size.n_q, cfg.query_dim, &mut rng);
        let q_f = opt(size.n_f, cfg.query_dim, &mut rng);
        let bias = TowerBias {
            vit_ho: opt(size.n_q, size.n_p, &mut rng),
            vit_f: opt(size.n_f, size.n_p, &mut rng),
            qf_ho: opt(size.n_q, size.n_p, &mut rng),
            qf_f: opt(size.n_f, size.n_p, &mut rng),
        };
        Ok(Self { store, tower, patches, layout, q_ho, q_f, bias })
    }

    pub fn fast(&self) -> Result<crate::visiontower::PlainTowerOutputs> {
        self.tower.forward_plain(&self.store, &self.patches, &self.layout, self.q_ho.as_ref(), self.q_f.as_ref(), &self.bias)
    }

    pub fn reference(&self) -> Result<crate::visiontower::PlainTowerOutputs> {
        self.tower.reference_forward(&self.store, &self.patches, &self.layout, self.q_ho.as_ref(), self.q_f.as_ref(), &self.bias)
    }

    /// Largest elementwise gap over the ViT tokens and both query outputs.
    pub fn max_abs_diff(&self) -> Result<f64> {
        let (a, b) = (self.fast()?, self.reference()?);
        let mut d = a.vit_tokens.max_abs_diff(&b.vit_tokens);
        for (x, y) in [(&a.e_q_ho, &b.e_q_ho), (&a.e_q_f, &b.e_q_f)] {
            match (x, y) {
                (Some(x), Some(y)) => d = d.max(x.max_abs_diff(y)),
                (None, None) => {}
                _ => return Ok(f64::INFINITY),
            }
        }
        Ok(d)
    }
}

fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// Unified tower pass against the per-query reference. Equivalence is
/// checked before anything is timed; both paths run on the calling thread.
pub fn run_bench(sizes: &[BenchSize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let reps = reps.max(1);
    sizes
        .iter()
        .map(|&size| {
            let case = BenchCase::new(size, seed)?;
            let diff = case.max_abs_diff()?;
            if !(diff <= EQUIVALENCE_TOL) {
                return Err(Error::OracleMismatch(diff));
            }
            let fast = time(reps, || case.fast().map(|_| ()))?;
            let reference = time(reps, || case.reference().map(|_| ()))?;
            Ok(BenchRow {
                n_q: size.n_q,
                n_f: size.n_f,
                n_p: size.n_p,
                max_abs_diff: diff,
                fast_seconds: fast,
                reference_seconds: reference,
                speedup: reference / fast,
            })
        })
        .collect()
}

pub fn default_sizes() -> Vec<BenchSize> {
    [(4, 2), (8, 4), (64, 32)].iter().map(|&(n_q, n_f)| BenchSize { n_q, n_f, n_p: 16 }).collect()
}
