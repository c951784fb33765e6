use serde::{Deserialize, Serialize};

use super::boxes::{giou_loss, iou_giou, l1, l1_loss};
use super::matching::hungarian;
use super::net::Heads;
use crate::error::{Error, Result};
use crate::nncore::mat::sigmoid;
use crate::nncore::{Mat, Tape, Var};

/// One ground-truth interaction in normalized `(cx, cy, w, h)` boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiTarget {
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub object_class: usize,
    /// Column of the (verb, object) label in the interaction scores.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub verb: f64,
    /// Relative weight of the "no object" class in the cross-entropy.
    pub eos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, l1: 2.5, iou: 1.0, verb: 1.0, eos: 0.1 }
    }
}

/// Current predictions, read off the tape for matching.
pub struct PredictionValues<'a> {
    pub human_boxes: &'a Mat,
    pub object_boxes: &'a Mat,
    pub object_logits: &'a Mat,
    pub interaction_logits: &'a Mat,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Query × target matching cost.
pub fn match_cost(pred: &PredictionValues, targets: &[HoiTarget], w: &LossWeights) -> Mat {
    let n = pred.human_boxes.rows();
    let mut cost = Mat::zeros(n, targets.len());
    for i in 0..n {
        let p = softmax_row(pred.object_logits.row(i));
        let hb = pred.human_boxes.row(i);
        let ob = pred.object_boxes.row(i);
        for (j, tg) in targets.iter().enumerate() {
            let (ih, _) = iou_giou(hb, &tg.human_box);
            let (io, _) = iou_giou(ob, &tg.object_box);
            let verb = sigmoid(pred.interaction_logits[(i, tg.slot)]);
            cost[(i, j)] = w.cls * (1.0 - p[tg.object_class])
                + w.l1 * (l1(hb, &tg.human_box) + l1(ob, &tg.object_box))
                + w.iou * ((1.0 - ih) + (1.0 - io))
                + w.verb * (1.0 - verb);
        }
    }
    cost
}

/// Matched `(query, target)` pairs under the minimum-cost assignment.
pub fn hungarian_match(pred: &PredictionValues, targets: &[HoiTarget], w: &LossWeights) -> Vec<(usize, usize)> {
    hungarian(&match_cost(pred, targets, w))
}

pub struct DetectionLoss {
    pub total: Var,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub bce: f64,
    pub matches: Vec<(usize, usize)>,
}

/// Box L1 and GIoU over matched pairs, weighted object cross-entropy over
/// every query, and binary cross-entropy summed over every query × label
/// slot. Box and interaction terms are divided by the number of targets.
pub fn detection_loss(
    t: &mut Tape,
    heads: &Heads,
    interaction_logits: Var,
    targets: &[HoiTarget],
    w: &LossWeights,
) -> Result<DetectionLoss> {
    let matches = {
        let pv = PredictionValues {
            human_boxes: t.value(heads.human_boxes),
            object_boxes: t.value(heads.object_boxes),
            object_logits: t.value(heads.object_logits),
            interaction_logits: t.value(interaction_logits),
        };
        hungarian_match(&pv, targets, w)
    };
    let (n, no_object) = {
        let l = t.value(heads.object_logits);
        (l.rows(), l.cols() - 1)
    };
    let slots = t.shape(interaction_logits).1;
    let norm = targets.len().max(1) as f64;

    let mut terms = Vec::new();
    let (mut l1v, mut giouv) = (0.0, 0.0);
    if !matches.is_empty() {
        let qi: Vec<usize> = matches.iter().map(|m| m.0).collect();
        let tg_h = Mat::from_rows(&matches.iter().map(|m| targets[m.1].human_box.to_vec()).collect::<Vec<_>>());
        let tg_o = Mat::from_rows(&matches.iter().map(|m| targets[m.1].object_box.to_vec()).collect::<Vec<_>>());
        let ph = t.gather_rows(heads.human_boxes, &qi);
        let po = t.gather_rows(heads.object_boxes, &qi);
        let lh = l1_loss(t, ph, &tg_h);
        let lo = l1_loss(t, po, &tg_o);
        let l1s = t.add(lh, lo);
        let l1s = t.scale(l1s, 1.0 / norm);
        let gh = giou_loss(t, ph, &tg_h);
        let go = giou_loss(t, po, &tg_o);
        let gs = t.add(gh, go);
        let gs = t.scale(gs, 1.0 / norm);
        l1v = t.scalar(l1s);
        giouv = t.scalar(gs);
        terms.push(t.scale(l1s, w.l1));
        terms.push(t.scale(gs, w.iou));
    }

    let mut cls_targets = vec![no_object; n];
    let mut cls_weights = vec![w.eos; n];
    let mut verb_targets = Mat::zeros(n, slots);
    for &(q, j) in &matches {
        cls_targets[q] = targets[j].object_class;
        cls_weights[q] = 1.0;
        verb_targets[(q, targets[j].slot)] = 1.0;
    }
    let wsum: f64 = cls_weights.iter().sum();
    let ce = t.cross_entropy(heads.object_logits, &cls_targets, &cls_weights);
    let ce = t.scale(ce, 1.0 / wsum);
    let bce = t.bce_with_logits(interaction_logits, verb_targets);
    let bce = t.scale(bce, 1.0 / norm);
    let (cev, bcev) = (t.scalar(ce), t.scalar(bce));
    terms.push(t.scale(ce, w.cls));
    terms.push(t.scale(bce, w.verb));

    let mut total = terms[0];
    for &x in &terms[1..] {
        total = t.add(total, x);
    }
    let tv = t.scalar(total);
    if !tv.is_finite() {
        return Err(Error::NonFiniteLoss(format!("detection loss {tv} (l1 {l1v}, giou {giouv}, ce {cev}, bce {bcev})")));
    }
    Ok(DetectionLoss { total, l1: l1v, giou: giouv, ce: cev, bce: bcev, matches })
}
