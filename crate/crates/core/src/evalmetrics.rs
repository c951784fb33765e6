//! Triplet mAP with open-vocabulary split reporting.
//!
//! Prediction dumps are JSON lines with `image_id`, `human_box` and
//! `object_box` (`[x1, y1, x2, y2]` pixels), `object_class`, `verb` and
//! `score`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{BBox, Combo, Scene, SplitMode, SplitSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub image_id: u64,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
    pub score: f64,
}

impl TripletPrediction {
    pub fn category(&self) -> Combo {
        (self.verb, self.object_class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
}

impl GroundTruth {
    pub fn category(&self) -> Combo {
        (self.verb, self.object_class)
    }

    pub fn from_scenes(scenes: &[Scene]) -> Vec<GroundTruth> {
        scenes
            .iter()
            .flat_map(|s| {
                s.triplets.iter().map(move |t| GroundTruth {
                    image_id: s.id,
                    human_box: s.entities[t.human].bbox,
                    object_box: s.entities[t.object].bbox,
                    object_class: s.entities[t.object].class,
                    verb: t.verb,
                })
            })
            .collect()
    }
}

/// All-point interpolated AP from a ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            ctp += 1;
        } else {
            cfp += 1;
        }
        rec.push(ctp as f64 / n_gt as f64);
        prec.push(ctp as f64 / (ctp + cfp) as f64);
    }
    // precision envelope, right to left
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in rec.iter().zip(&prec) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

/// Greedy HICO-style matching in descending score order. Equal scores are
/// ordered by image id, then by input position.
pub fn match_category(preds: &[(usize, &TripletPrediction)], gts: &[&GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<&(usize, &TripletPrediction)> = preds.iter().collect();
    order.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.1.image_id.cmp(&b.1.image_id)).then(a.0.cmp(&b.0)));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|(_, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image_id != p.image_id {
                    continue;
                }
                let (ih, io) = (p.human_box.iou(&gt.human_box), p.object_box.iou(&gt.object_box));
                if ih >= iou_threshold && io >= iou_threshold {
                    let overlap = ih.min(io);
                    if best.map_or(true, |(_, b)| overlap > b) {
                        best = Some((g, overlap));
                    }
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP per (verb, object) category that has at least one ground truth.
pub fn triplet_map(preds: &[TripletPrediction], gts: &[GroundTruth], iou_threshold: f64) -> BTreeMap<Combo, f64> {
    let mut gt_by: BTreeMap<Combo, Vec<&GroundTruth>> = BTreeMap::new();
    for g in gts {
        gt_by.entry(g.category()).or_default().push(g);
    }
    let mut pred_by: BTreeMap<Combo, Vec<(usize, &TripletPrediction)>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        pred_by.entry(p.category()).or_default().push((i, p));
    }
    gt_by
        .iter()
        .map(|(c, g)| {
            let ps = pred_by.get(c).map(|v| v.as_slice()).unwrap_or(&[]);
            (*c, average_precision(&match_category(ps, g, iou_threshold), g.len()))
        })
        .collect()
}

/// Known-object analogue: a category is scored only on images whose ground
/// truth contains its object class.
pub fn known_object_map(preds: &[TripletPrediction], gts: &[GroundTruth], iou_threshold: f64) -> BTreeMap<Combo, f64> {
    let mut images_with: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for g in gts {
        images_with.entry(g.object_class).or_default().insert(g.image_id);
    }
    let mut out = BTreeMap::new();
    let cats: BTreeSet<Combo> = gts.iter().map(|g| g.category()).collect();
    for c in cats {
        let imgs = &images_with[&c.1];
        let p: Vec<TripletPrediction> = preds.iter().filter(|p| p.category() == c && imgs.contains(&p.image_id)).cloned().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|g| g.category() == c).cloned().collect();
        out.extend(triplet_map(&p, &g, iou_threshold));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub verb: usize,
    pub object: usize,
    pub ap: f64,
}

/// Aggregates are plain means; `null` marks an empty group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub mode: SplitMode,
    pub full: Option<f64>,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub per_category: Vec<CategoryAp>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Unseen/Seen/Full for open-vocabulary splits. The closed split reports
/// Full/Rare/Non-rare, where rare means strictly below the median training
/// frequency over the evaluated categories.
pub fn split_report(ap: &BTreeMap<Combo, f64>, split: &SplitSpec, train_freq: Option<&BTreeMap<Combo, usize>>) -> Result<MapReport> {
    let per_category: Vec<CategoryAp> = ap.iter().map(|(&(v, o), &a)| CategoryAp { verb: v, object: o, ap: a }).collect();
    let all: Vec<f64> = ap.values().copied().collect();
    let mut report = MapReport { mode: split.mode, full: mean(&all), seen: None, unseen: None, rare: None, non_rare: None, per_category };
    if split.mode == SplitMode::Closed {
        if let Some(freq) = train_freq {
            let mut fs: Vec<usize> = ap.keys().map(|c| freq.get(c).copied().unwrap_or(0)).collect();
            fs.sort_unstable();
            let median = if fs.is_empty() {
                0.0
            } else if fs.len() % 2 == 1 {
                fs[fs.len() / 2] as f64
            } else {
                (fs[fs.len() / 2 - 1] + fs[fs.len() / 2]) as f64 / 2.0
            };
            let (mut rare, mut common) = (Vec::new(), Vec::new());
            for (c, &a) in ap {
                if (freq.get(c).copied().unwrap_or(0) as f64) < median {
                    rare.push(a);
                } else {
                    common.push(a);
                }
            }
            report.rare = mean(&rare);
            report.non_rare = mean(&common);
        }
        return Ok(report);
    }
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (&c, &a) in ap {
        if split.is_seen(c) {
            seen.push(a);
        } else if split.is_unseen(c) {
            unseen.push(a);
        } else {
            return Err(Error::UnclassifiedCategory { verb: c.0, object: c.1 });
        }
    }
    report.seen = mean(&seen);
    report.unseen = mean(&unseen);
    Ok(report)
}

pub fn write_predictions(path: &Path, preds: &[TripletPrediction]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<TripletPrediction>> {
    let mut out = Vec::new();
    for line in std::io::BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::Catalog;

    fn gt(image_id: u64, h: BBox, o: BBox) -> GroundTruth {
        GroundTruth { image_id, human_box: h, object_box: o, object_class: 1, verb: 2 }
    }

    fn pred(image_id: u64, h: BBox, o: BBox, score: f64) -> TripletPrediction {
        TripletPrediction { image_id, human_box: h, object_box: o, object_class: 1, verb: 2, score }
    }

    fn hb() -> BBox {
        BBox::new(10.0, 10.0, 20.0, 30.0)
    }

    fn ob() -> BBox {
        BBox::new(22.0, 12.0, 32.0, 22.0)
    }

    #[test]
    fn exact_detection_is_perfect() {
        let ap = triplet_map(&[pred(0, hb(), ob(), 0.9)], &[gt(0, hb(), ob())], 0.5);
        assert_eq!(ap[&(2, 1)], 1.0);
    }

    #[test]
    fn low_overlap_scores_zero() {
        // object box shifted so IoU = 0.3
        let shifted = BBox::new(22.0 + 10.0 * (1.0 - 2.0 * 0.3 / 1.3), 12.0, 32.0 + 10.0 * (1.0 - 2.0 * 0.3 / 1.3), 22.0);
        assert!((shifted.iou(&ob()) - 0.3).abs() < 1e-9);
        let ap = triplet_map(&[pred(0, hb(), shifted, 0.9)], &[gt(0, hb(), ob())], 0.5);
        assert_eq!(ap[&(2, 1)], 0.0);
    }

    #[test]
    fn tp_fp_tp_by_hand() {
        // ranked TP, FP, TP over 2 GT: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        let far = BBox::new(40.0, 40.0, 50.0, 50.0);
        let preds = [pred(0, hb(), ob(), 0.9), pred(0, far, far, 0.8), pred(1, hb(), ob(), 0.7)];
        let ap = triplet_map(&preds, &[gt(0, hb(), ob()), gt(1, hb(), ob())], 0.5);
        assert!((ap[&(2, 1)] - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let preds = [pred(0, hb(), ob(), 0.9), pred(0, hb(), ob(), 0.8)];
        let tp = match_category(&preds.iter().enumerate().collect::<Vec<_>>(), &[&gt(0, hb(), ob())], 0.5);
        assert_eq!(tp, vec![true, false]);
    }

    #[test]
    fn split_aggregates() {
        let cat = Catalog::toy(0);
        let mut split = SplitSpec::closed(&cat);
        split.mode = SplitMode::NfUc;
        split.seen_combinations.remove(&(0, 0));
        split.unseen_combinations.insert((0, 0));
        let ap: BTreeMap<Combo, f64> = [((0, 0), 0.0), ((1, 1), 1.0)].into_iter().collect();
        let r = split_report(&ap, &split, None).unwrap();
        assert_eq!(r.full, Some(0.5));
        assert_eq!(r.seen, Some(1.0));
        assert_eq!(r.unseen, Some(0.0));

        let all_seen: BTreeMap<Combo, f64> = [((1, 1), 0.25), ((2, 1), 0.75)].into_iter().collect();
        let r = split_report(&all_seen, &split, None).unwrap();
        assert_eq!(r.unseen, None);
        assert_eq!(r.full, r.seen);

        split.seen_combinations.remove(&(1, 1));
        assert!(matches!(split_report(&all_seen, &split, None), Err(Error::UnclassifiedCategory { verb: 1, object: 1 })));
    }

    #[test]
    fn closed_rarity_uses_median() {
        let cat = Catalog::toy(0);
        let split = SplitSpec::closed(&cat);
        let ap: BTreeMap<Combo, f64> = [((0, 0), 0.2), ((0, 1), 0.4), ((0, 2), 0.9)].into_iter().collect();
        let freq: BTreeMap<Combo, usize> = [((0, 0), 1), ((0, 1), 5), ((0, 2), 9)].into_iter().collect();
        let r = split_report(&ap, &split, Some(&freq)).unwrap();
        assert_eq!(r.rare, Some(0.2));
        assert!((r.non_rare.unwrap() - 0.65).abs() < 1e-12);
    }

    #[test]
    fn known_object_ignores_images_without_the_object() {
        let far = BBox::new(40.0, 40.0, 50.0, 50.0);
        let mut other = pred(7, far, far, 0.95);
        other.image_id = 7;
        let preds = [other, pred(0, hb(), ob(), 0.5)];
        let gts = [gt(0, hb(), ob())];
        assert!(triplet_map(&preds, &gts, 0.5)[&(2, 1)] < 1.0);
        assert_eq!(known_object_map(&preds, &gts, 0.5)[&(2, 1)], 1.0);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let preds = vec![pred(0, hb(), ob(), 0.25), pred(3, ob(), hb(), 0.75)];
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }
}
