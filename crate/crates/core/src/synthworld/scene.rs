use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, Combo};
use super::split::SplitSpec;
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels, half-open on the far edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self([x1, y1, x2, y2])
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    pub fn y1(&self) -> f64 {
        self.0[1]
    }
    pub fn x2(&self) -> f64 {
        self.0[2]
    }
    pub fn y2(&self) -> f64 {
        self.0[3]
    }

    pub fn width(&self) -> f64 {
        self.x2() - self.x1()
    }

    pub fn height(&self) -> f64 {
        self.y2() - self.y1()
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1() + self.x2()) / 2.0, (self.y1() + self.y2()) / 2.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x1() < other.x2() && other.x1() < self.x2() && self.y1() < other.y2() && other.y1() < self.y2()
    }

    pub fn is_valid_within(&self, w: f64, h: f64) -> bool {
        self.x1() >= 0.0 && self.y1() >= 0.0 && self.x2() <= w && self.y2() <= h && self.x1() < self.x2() && self.y1() < self.y2()
    }

    /// `(cx, cy, w, h)` normalized by the image size.
    pub fn to_cxcywh_norm(&self, size: f64) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx / size, cy / size, self.width() / size, self.height() / size]
    }

    pub fn from_cxcywh_norm(b: [f64; 4], size: f64) -> Self {
        let [cx, cy, w, h] = b;
        Self::new((cx - w / 2.0) * size, (cy - h / 2.0) * size, (cx + w / 2.0) * size, (cy + h / 2.0) * size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Object-category id; humans carry [`Catalog::person_class`].
    pub class: usize,
    pub is_human: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub human: usize,
    pub verb: usize,
    pub object: usize,
}

/// `H × W × C` pixel grid, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * CHANNELS] }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * CHANNELS;
        &self.data[i..i + CHANNELS]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub image: Image,
    pub entities: Vec<Entity>,
    pub triplets: Vec<Triplet>,
}

impl Scene {
    pub fn combos(&self) -> impl Iterator<Item = Combo> + '_ {
        self.triplets.iter().map(|t| (t.verb, self.entities[t.object].class))
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        for e in &self.entities {
            if !e.bbox.is_valid_within(w, h) {
                return Err(Error::Format(format!("box {:?} outside {w}x{h}", e.bbox)));
            }
        }
        for t in &self.triplets {
            let (hu, ob) = (self.entities.get(t.human), self.entities.get(t.object));
            match (hu, ob) {
                (Some(hu), Some(ob)) if hu.is_human && !ob.is_human => {}
                _ => return Err(Error::Format(format!("triplet {t:?} must link a human to an object"))),
            }
        }
        Ok(())
    }
}

pub const HUMAN_COLOR: [f64; 3] = [1.0, 0.8, 0.6];

pub const OBJECT_COLORS: [[f64; 3]; 6] = [
    [0.2, 0.4, 1.0],
    [1.0, 0.2, 0.2],
    [0.2, 0.9, 0.3],
    [0.9, 0.9, 0.1],
    [0.7, 0.3, 0.9],
    [0.5, 0.3, 0.1],
];

pub const VERB_COLORS: [[f64; 3]; 8] = [
    [0.1, 0.1, 0.6],
    [0.6, 0.1, 0.1],
    [0.1, 0.5, 0.1],
    [0.5, 0.5, 0.0],
    [0.4, 0.0, 0.5],
    [0.0, 0.5, 0.5],
    [0.3, 0.3, 0.3],
    [0.6, 0.3, 0.0],
];

fn palette(colors: &[[f64; 3]], i: usize) -> [f64; 3] {
    let base = colors[i % colors.len()];
    // wrap-around classes get a dimmed variant so they stay distinguishable
    let dim = 1.0 / (1 + i / colors.len()) as f64;
    [base[0] * dim, base[1] * dim, base[2] * dim]
}

/// Rasterizes entities as filled rectangles on a zero background. A human's
/// lower band carries a checkered pattern in the color of its verb.
pub fn render(entities: &[Entity], triplets: &[Triplet], height: usize, width: usize) -> Image {
    let mut img = Image::blank(height, width);
    for (idx, e) in entities.iter().enumerate() {
        let [x1, y1, x2, y2] = e.bbox.0.map(|v| v.round() as i64);
        let (x1, y1) = (x1.max(0) as usize, y1.max(0) as usize);
        let (x2, y2) = ((x2.max(0) as usize).min(width), (y2.max(0) as usize).min(height));
        if e.is_human {
            let verb = triplets.iter().find(|t| t.human == idx).map(|t| t.verb);
            let band = y1 + (y2 - y1) * 3 / 5;
            for y in y1..y2 {
                for x in x1..x2 {
                    let rgb = match verb {
                        Some(v) if y >= band => {
                            if (x + y) % 2 == 0 {
                                palette(&VERB_COLORS, v)
                            } else {
                                [1.0, 1.0, 1.0]
                            }
                        }
                        _ => HUMAN_COLOR,
                    };
                    img.set(y, x, rgb);
                }
            }
        } else {
            let rgb = palette(&OBJECT_COLORS, e.class);
            for y in y1..y2 {
                for x in x1..x2 {
                    img.set(y, x, rgb);
                }
            }
        }
    }
    img
}

fn place_pair<R: Rng>(rng: &mut R, taken: &[BBox], size: f64) -> Option<(BBox, BBox)> {
    for _ in 0..200 {
        let hw = rng.gen_range(10..=18) as f64;
        let hh = rng.gen_range(20..=30) as f64;
        let hx = rng.gen_range(0..=(size - hw) as i64) as f64;
        let hy = rng.gen_range(0..=(size - hh) as i64) as f64;
        let human = BBox::new(hx, hy, hx + hw, hy + hh);
        let ow = rng.gen_range(10..=18) as f64;
        let oh = rng.gen_range(10..=18) as f64;
        let gap = rng.gen_range(0..=4) as f64;
        let ox = if rng.gen_bool(0.5) { hx - gap - ow } else { hx + hw + gap };
        let oy = hy + rng.gen_range(0..=((hh - oh).max(0.0) as i64)) as f64;
        let object = BBox::new(ox, oy, ox + ow, oy + oh);
        let ok = object.is_valid_within(size, size)
            && !taken.iter().any(|b| b.overlaps(&human) || b.overlaps(&object));
        if ok {
            return Some((human, object));
        }
    }
    None
}

/// Deterministic scene from `seed`. Training scenes draw only seen
/// combinations (weighted by catalog frequency); test scenes draw uniformly
/// over every valid combination so each category has support.
pub fn generate_scene(seed: u64, catalog: &Catalog, split: &SplitSpec, train: bool) -> Result<Scene> {
    if catalog.verbs.is_empty() || catalog.objects.is_empty() {
        return Err(Error::EmptyVocab);
    }
    let pool: Vec<Combo> = if train {
        catalog
            .valid_combos()
            .into_iter()
            .filter(|c| {
                split.is_seen(*c) && !split.unseen_objects.contains(&c.1) && !split.unseen_verbs.contains(&c.0)
            })
            .collect()
    } else {
        catalog.valid_combos()
    };
    if pool.is_empty() {
        return Err(Error::InfeasibleSplit("no combination available to sample".into()));
    }
    let weights: Vec<f64> = if train { pool.iter().map(|c| catalog.weight(*c)).collect() } else { vec![1.0; pool.len()] };
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InfeasibleSplit(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = IMAGE_SIZE as f64;
    let n_pairs = if rng.gen_bool(0.5) { 1 } else { 2 };
    let mut entities = Vec::new();
    let mut triplets = Vec::new();
    let mut taken = Vec::new();
    for _ in 0..n_pairs {
        let (v, o) = pool[dist.sample(&mut rng)];
        let Some((hb, ob)) = place_pair(&mut rng, &taken, size) else { break };
        taken.push(hb);
        taken.push(ob);
        let h_idx = entities.len();
        entities.push(Entity { bbox: hb, class: catalog.person_class(), is_human: true });
        entities.push(Entity { bbox: ob, class: o, is_human: false });
        triplets.push(Triplet { human: h_idx, verb: v, object: h_idx + 1 });
    }
    let image = render(&entities, &triplets, IMAGE_SIZE, IMAGE_SIZE);
    Ok(Scene { id: seed, image, entities, triplets })
}
