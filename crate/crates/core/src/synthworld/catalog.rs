use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Verb and object vocabularies plus the relative frequency of every
/// (verb, object) combination in the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    /// Row-major `verbs × objects` sampling weights; zero marks an invalid pair.
    pub combo_weights: Vec<f64>,
}

pub type Combo = (usize, usize);

pub const DEFAULT_VERBS: [&str; 8] = ["rides", "holds", "kicks", "throws", "reads", "carries", "feeds", "flies"];
pub const DEFAULT_OBJECTS: [&str; 6] = ["bike", "ball", "cup", "kite", "book", "horse"];

impl Catalog {
    /// Every combination is valid; weights follow a long tail over a
    /// seeded ranking so rare-first and non-rare-first removal differ.
    pub fn new(verbs: Vec<String>, objects: Vec<String>, seed: u64) -> Result<Self> {
        if verbs.is_empty() || objects.is_empty() {
            return Err(Error::EmptyVocab);
        }
        let n = verbs.len() * objects.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut combo_weights = vec![0.0; n];
        for (rank, &c) in order.iter().enumerate() {
            combo_weights[c] = 1.0 / (1.0 + rank as f64).powf(0.8);
        }
        Ok(Self { verbs, objects, combo_weights })
    }

    pub fn toy(seed: u64) -> Self {
        Self::new(
            DEFAULT_VERBS.iter().map(|s| s.to_string()).collect(),
            DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
            seed,
        )
        .expect("default vocabulary is nonempty")
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// Class id used for human entities (one past the last object class).
    pub fn person_class(&self) -> usize {
        self.objects.len()
    }

    pub fn weight(&self, (v, o): Combo) -> f64 {
        self.combo_weights[v * self.objects.len() + o]
    }

    pub fn valid_combos(&self) -> Vec<Combo> {
        let mut out = Vec::new();
        for v in 0..self.num_verbs() {
            for o in 0..self.num_objects() {
                if self.weight((v, o)) > 0.0 {
                    out.push((v, o));
                }
            }
        }
        out
    }
}
