//! Box arithmetic in normalized `(cx, cy, w, h)` form, on plain values and
//! on the tape.

use crate::nncore::{Mat, Tape, Var};

pub fn cxcywh_to_xyxy(b: &[f64]) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Returns `(iou, giou)`.
pub fn iou_giou(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (a, b) = (cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
    let inter = area(&[a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(&a) + area(&b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = area(&[a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    let giou = if hull > 0.0 { iou - (hull - union) / hull } else { iou };
    (iou, giou)
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

struct Corners {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
}

fn corners(t: &mut Tape, b: Var) -> Corners {
    let cx = t.slice_cols(b, 0, 1);
    let cy = t.slice_cols(b, 1, 1);
    let w = t.slice_cols(b, 2, 1);
    let h = t.slice_cols(b, 3, 1);
    let hw = t.scale(w, 0.5);
    let hh = t.scale(h, 0.5);
    Corners { x1: t.sub(cx, hw), y1: t.sub(cy, hh), x2: t.add(cx, hw), y2: t.add(cy, hh) }
}

fn extent(t: &mut Tape, lo: Var, hi: Var) -> Var {
    let d = t.sub(hi, lo);
    t.relu(d)
}

/// `Σ (1 − GIoU)` over row pairs of `pred` and `target` (both k × 4).
pub fn giou_loss(t: &mut Tape, pred: Var, target: &Mat) -> Var {
    let tg = t.constant(target.clone());
    let a = corners(t, pred);
    let b = corners(t, tg);
    let aw = extent(t, a.x1, a.x2);
    let ah = extent(t, a.y1, a.y2);
    let bw = extent(t, b.x1, b.x2);
    let bh = extent(t, b.y1, b.y2);
    let area_a = t.mul(aw, ah);
    let area_b = t.mul(bw, bh);

    let ix1 = t.maximum(a.x1, b.x1);
    let iy1 = t.maximum(a.y1, b.y1);
    let ix2 = t.minimum(a.x2, b.x2);
    let iy2 = t.minimum(a.y2, b.y2);
    let iw = extent(t, ix1, ix2);
    let ih = extent(t, iy1, iy2);
    let inter = t.mul(iw, ih);
    let sum = t.add(area_a, area_b);
    let union = t.sub(sum, inter);
    let union = t.add_const(union, 1e-9);
    let iou = t.div(inter, union);

    let hx1 = t.minimum(a.x1, b.x1);
    let hy1 = t.minimum(a.y1, b.y1);
    let hx2 = t.maximum(a.x2, b.x2);
    let hy2 = t.maximum(a.y2, b.y2);
    let hw = extent(t, hx1, hx2);
    let hh = extent(t, hy1, hy2);
    let hull = t.mul(hw, hh);
    let hull = t.add_const(hull, 1e-9);
    let gap = t.sub(hull, union);
    let frac = t.div(gap, hull);
    let giou = t.sub(iou, frac);
    let s = t.sum(giou);
    let k = target.rows() as f64;
    let neg = t.scale(s, -1.0);
    t.add_const(neg, k)
}

/// `Σ |pred − target|`.
pub fn l1_loss(t: &mut Tape, pred: Var, target: &Mat) -> Var {
    let tg = t.constant(target.clone());
    let d = t.sub(pred, tg);
    let a = t.abs(d);
    t.sum(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ParamStore;

    #[test]
    fn identical_boxes() {
        let b = [0.5, 0.5, 0.2, 0.4];
        let (iou, giou) = iou_giou(&b, &b);
        assert!((iou - 1.0).abs() < 1e-12 && (giou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        let (iou, giou) = iou_giou(&[0.2, 0.5, 0.2, 0.2], &[0.8, 0.5, 0.2, 0.2]);
        assert_eq!(iou, 0.0);
        // hull is 0.8 × 0.2, union 0.08
        assert!((giou - (0.0 - (0.16 - 0.08) / 0.16)).abs() < 1e-12);
    }

    #[test]
    fn tape_giou_matches_plain() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = Mat::from_rows(&[vec![0.4, 0.5, 0.3, 0.2], vec![0.2, 0.2, 0.1, 0.1]]);
        let g = Mat::from_rows(&[vec![0.5, 0.5, 0.2, 0.3], vec![0.7, 0.7, 0.2, 0.2]]);
        let pv = t.input(p.clone());
        let loss = giou_loss(&mut t, pv, &g);
        let want: f64 = (0..2).map(|r| 1.0 - iou_giou(p.row(r), g.row(r)).1).sum();
        assert!((t.scalar(loss) - want).abs() < 1e-7);
    }
}
