use serde::{Deserialize, Serialize};

use super::catalog::Catalog;
use super::scene::{Scene, IMAGE_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Verb,
    Other,
}

pub const BOS: &str = "<bos>";
const FUNCTION_WORDS: [&str; 8] = ["and", "on", "the", "left", "right", "top", "bottom", "center"];
pub const PERSON: &str = "person";

/// Caption vocabulary: `<bos>`, function and locality words, "person", then
/// the catalog's verbs and objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionVocab {
    pub words: Vec<String>,
    pub pos: Vec<Pos>,
}

impl CaptionVocab {
    pub fn from_catalog(catalog: &Catalog) -> Self {
        let mut words = vec![BOS.to_string()];
        let mut pos = vec![Pos::Other];
        for w in FUNCTION_WORDS {
            words.push(w.to_string());
            pos.push(Pos::Other);
        }
        words.push(PERSON.to_string());
        pos.push(Pos::Noun);
        for v in &catalog.verbs {
            words.push(v.clone());
            pos.push(Pos::Verb);
        }
        for o in &catalog.objects {
            words.push(o.clone());
            pos.push(Pos::Noun);
        }
        Self { words, pos }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    fn id_of(&self, word: &str) -> usize {
        self.id(word).unwrap_or_else(|| panic!("`{word}` missing from caption vocabulary"))
    }

    pub fn verb_token(&self, verb: usize) -> usize {
        1 + FUNCTION_WORDS.len() + 1 + verb
    }

    pub fn object_token(&self, n_verbs: usize, object: usize) -> usize {
        1 + FUNCTION_WORDS.len() + 1 + n_verbs + object
    }
}

/// Per-token loss weights by part of speech.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub noun: f64,
    pub verb: f64,
    pub other: f64,
}

impl Default for TokenWeights {
    fn default() -> Self {
        Self { noun: 1.5, verb: 2.0, other: 1.0 }
    }
}

impl TokenWeights {
    pub fn weight(&self, pos: Pos) -> f64 {
        match pos {
            Pos::Noun => self.noun,
            Pos::Verb => self.verb,
            Pos::Other => self.other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub tokens: Vec<usize>,
    pub pos_tags: Vec<Pos>,
    pub weights: Vec<f64>,
}

impl CaptionRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reweighted(&self, w: &TokenWeights) -> Self {
        Self { tokens: self.tokens.clone(), pos_tags: self.pos_tags.clone(), weights: self.pos_tags.iter().map(|&p| w.weight(p)).collect() }
    }

    pub fn words<'a>(&self, vocab: &'a CaptionVocab) -> Vec<&'a str> {
        self.tokens.iter().map(|&t| vocab.words[t].as_str()).collect()
    }
}

/// "left"/"right" when the center falls in the outer horizontal thirds,
/// otherwise "top"/"bottom"/"center" by vertical third.
pub fn locality_word(cx: f64, cy: f64, size: f64) -> &'static str {
    let third = size / 3.0;
    if cx < third {
        "left"
    } else if cx >= 2.0 * third {
        "right"
    } else if cy < third {
        "top"
    } else if cy >= 2.0 * third {
        "bottom"
    } else {
        "center"
    }
}

/// One clause per triplet, `person on the <where> <verb> <object>`, joined by
/// "and" in triplet order. Locality comes from the human's box center.
pub fn caption_scene(scene: &Scene, catalog: &Catalog, vocab: &CaptionVocab, weights: &TokenWeights) -> Result<CaptionRecord> {
    if scene.triplets.is_empty() {
        return Err(Error::NoInteraction);
    }
    let mut tokens = Vec::new();
    for (i, t) in scene.triplets.iter().enumerate() {
        if i > 0 {
            tokens.push(vocab.id_of("and"));
        }
        let (cx, cy) = scene.entities[t.human].bbox.center();
        tokens.push(vocab.id_of(PERSON));
        tokens.push(vocab.id_of("on"));
        tokens.push(vocab.id_of("the"));
        tokens.push(vocab.id_of(locality_word(cx, cy, IMAGE_SIZE as f64)));
        tokens.push(vocab.verb_token(t.verb));
        tokens.push(vocab.object_token(catalog.num_verbs(), scene.entities[t.object].class));
    }
    let pos_tags: Vec<Pos> = tokens.iter().map(|&t| vocab.pos[t]).collect();
    let weights = pos_tags.iter().map(|&p| weights.weight(p)).collect();
    Ok(CaptionRecord { tokens, pos_tags, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::scene::{render, BBox, Entity, Triplet};

    fn scene_with(pairs: &[(BBox, usize, BBox, usize)]) -> Scene {
        let mut entities = Vec::new();
        let mut triplets = Vec::new();
        for &(hb, verb, ob, class) in pairs {
            let h = entities.len();
            entities.push(Entity { bbox: hb, class: 6, is_human: true });
            entities.push(Entity { bbox: ob, class, is_human: false });
            triplets.push(Triplet { human: h, verb, object: h + 1 });
        }
        let image = render(&entities, &triplets, 64, 64);
        Scene { id: 0, image, entities, triplets }
    }

    #[test]
    fn person_on_the_left_rides_bike() {
        let cat = Catalog::toy(0);
        let vocab = CaptionVocab::from_catalog(&cat);
        let s = scene_with(&[(BBox::new(2.0, 10.0, 14.0, 40.0), 0, BBox::new(16.0, 12.0, 28.0, 24.0), 0)]);
        let c = caption_scene(&s, &cat, &vocab, &TokenWeights { noun: 1.5, verb: 2.0, other: 1.0 }).unwrap();
        assert_eq!(c.words(&vocab), vec!["person", "on", "the", "left", "rides", "bike"]);
        assert_eq!(c.pos_tags[0], Pos::Noun);
        assert_eq!(c.pos_tags[4], Pos::Verb);
        assert_eq!(c.weights, vec![1.5, 1.0, 1.0, 1.0, 2.0, 1.5]);
    }

    #[test]
    fn two_triplets_join_with_and() {
        let cat = Catalog::toy(0);
        let vocab = CaptionVocab::from_catalog(&cat);
        let s = scene_with(&[
            (BBox::new(2.0, 10.0, 14.0, 40.0), 0, BBox::new(16.0, 12.0, 28.0, 24.0), 0),
            (BBox::new(48.0, 30.0, 60.0, 60.0), 1, BBox::new(30.0, 40.0, 44.0, 52.0), 2),
        ]);
        let c = caption_scene(&s, &cat, &vocab, &TokenWeights::default()).unwrap();
        assert_eq!(
            c.words(&vocab).join(" "),
            "person on the left rides bike and person on the right holds cup"
        );
    }

    #[test]
    fn no_triplet_is_an_error() {
        let cat = Catalog::toy(0);
        let vocab = CaptionVocab::from_catalog(&cat);
        let s = scene_with(&[]);
        assert!(matches!(caption_scene(&s, &cat, &vocab, &TokenWeights::default()), Err(Error::NoInteraction)));
    }
}
