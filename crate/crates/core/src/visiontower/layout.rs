use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nncore::Mat;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Positions of the `[C; C_ho; C_f; P_img]` segments in the stacked sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_q: usize,
    pub n_f: usize,
    pub n_p: usize,
}

impl TokenLayout {
    pub fn new(n_q: usize, n_f: usize, n_p: usize) -> Self {
        Self { n_q, n_f, n_p }
    }

    /// Only the original cls token and the patches.
    pub fn vanilla(n_p: usize) -> Self {
        Self::new(0, 0, n_p)
    }

    pub fn cls(&self) -> Range<usize> {
        0..1
    }

    pub fn c_ho(&self) -> Range<usize> {
        1..1 + self.n_q
    }

    pub fn c_f(&self) -> Range<usize> {
        1 + self.n_q..1 + self.n_q + self.n_f
    }

    pub fn patches(&self) -> Range<usize> {
        1 + self.n_q + self.n_f..self.total()
    }

    pub fn total(&self) -> usize {
        1 + self.n_q + self.n_f + self.n_p
    }

    pub fn has_duplicates(&self) -> bool {
        self.n_q + self.n_f > 0
    }
}

/// Dense additive-logit matrices for the unified attention calls.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockBiasMatrix {
    /// total × total, shared by every ViT self-attention layer.
    pub vit: Mat,
    /// (n_q + n_f) × total, shared by every Q-Former cross-attention layer.
    pub qformer: Mat,
}

fn fill(m: &mut Mat, rows: Range<usize>, cols: Range<usize>, v: f64) {
    for r in rows {
        for c in cols.clone() {
            m[(r, c)] = v;
        }
    }
}

/// Diagonal mask over a square segment block: 0 on the diagonal, −inf elsewhere.
fn diag_mask(m: &mut Mat, rows: Range<usize>, cols: Range<usize>) {
    for (i, r) in rows.enumerate() {
        for (j, c) in cols.clone().enumerate() {
            m[(r, c)] = if i == j { 0.0 } else { NEG_INF };
        }
    }
}

fn check_adapted(name: &'static str, m: Option<&Mat>, rows: usize, n_p: usize) -> Result<()> {
    match m {
        Some(m) if m.shape() != (rows, n_p) => Err(shape_err(name, (rows, n_p), m.shape())),
        _ => Ok(()),
    }
}

fn place(m: &mut Mat, r0: usize, c0: usize, part: &Mat) {
    for r in 0..part.rows() {
        m.row_mut(r0 + r)[c0..c0 + part.cols()].copy_from_slice(part.row(r));
    }
}

/// ViT self-attention bias.
///
/// C and P_img see only C and P_img. Each C_ho[i] and C_f[j] sees itself and
/// P_img, the latter through its adapted bias row.
pub fn vit_bias(layout: &TokenLayout, adapted_ho: Option<&Mat>, adapted_f: Option<&Mat>) -> Result<Mat> {
    check_adapted("vit adapted_ho", adapted_ho, layout.n_q, layout.n_p)?;
    check_adapted("vit adapted_f", adapted_f, layout.n_f, layout.n_p)?;
    let n = layout.total();
    let mut m = Mat::zeros(n, n);
    let (c, ho, f, p) = (layout.cls(), layout.c_ho(), layout.c_f(), layout.patches());
    for rows in [c.clone(), p.clone()] {
        fill(&mut m, rows.clone(), ho.clone(), NEG_INF);
        fill(&mut m, rows, f.clone(), NEG_INF);
    }
    fill(&mut m, ho.clone(), c.clone(), NEG_INF);
    diag_mask(&mut m, ho.clone(), ho.clone());
    fill(&mut m, ho.clone(), f.clone(), NEG_INF);
    fill(&mut m, f.clone(), c, NEG_INF);
    fill(&mut m, f.clone(), ho, NEG_INF);
    diag_mask(&mut m, f.clone(), f.clone());
    if let Some(a) = adapted_ho {
        place(&mut m, layout.c_ho().start, p.start, a);
    }
    if let Some(a) = adapted_f {
        place(&mut m, f.start, p.start, a);
    }
    Ok(m)
}

/// Q-Former cross-attention bias for `n_qho` interaction queries followed by
/// `n_qf` caption queries.
///
/// An interaction query sees C, its own C_ho row (when the layout has C_ho)
/// and P_img through its adapted row; caption queries mirror this with C_f.
pub fn qformer_bias(
    layout: &TokenLayout,
    n_qho: usize,
    n_qf: usize,
    adapted_ho: Option<&Mat>,
    adapted_f: Option<&Mat>,
) -> Result<Mat> {
    if layout.n_q > 0 && layout.n_q != n_qho {
        return Err(shape_err("qformer interaction queries", layout.n_q, n_qho));
    }
    if layout.n_f > 0 && layout.n_f != n_qf {
        return Err(shape_err("qformer caption queries", layout.n_f, n_qf));
    }
    check_adapted("qformer adapted_ho", adapted_ho, n_qho, layout.n_p)?;
    check_adapted("qformer adapted_f", adapted_f, n_qf, layout.n_p)?;
    let mut m = Mat::zeros(n_qho + n_qf, layout.total());
    let rows_ho = 0..n_qho;
    let rows_f = n_qho..n_qho + n_qf;
    if layout.n_q > 0 {
        diag_mask(&mut m, rows_ho.clone(), layout.c_ho());
    }
    fill(&mut m, rows_ho, layout.c_f(), NEG_INF);
    fill(&mut m, rows_f.clone(), layout.c_ho(), NEG_INF);
    if layout.n_f > 0 {
        diag_mask(&mut m, rows_f, layout.c_f());
    }
    if let Some(a) = adapted_ho {
        place(&mut m, 0, layout.patches().start, a);
    }
    if let Some(a) = adapted_f {
        place(&mut m, n_qho, layout.patches().start, a);
    }
    Ok(m)
}

/// Both matrices, with the same adapted maps used for the ViT and the Q-Former.
pub fn build_block_bias(layout: &TokenLayout, adapted_ho: &Mat, adapted_f: &Mat) -> Result<BlockBiasMatrix> {
    Ok(BlockBiasMatrix {
        vit: vit_bias(layout, Some(adapted_ho), Some(adapted_f))?,
        qformer: qformer_bias(layout, layout.n_q, layout.n_f, Some(adapted_ho), Some(adapted_f))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adapted(rows: usize, n_p: usize, base: f64) -> Mat {
        Mat::from_vec(rows, n_p, (0..rows * n_p).map(|i| base + i as f64 * 0.01).collect())
    }

    #[test]
    fn segments_tile_the_sequence() {
        let l = TokenLayout::new(8, 4, 16);
        assert_eq!(l.cls(), 0..1);
        assert_eq!(l.c_ho(), 1..9);
        assert_eq!(l.c_f(), 9..13);
        assert_eq!(l.patches(), 13..29);
        assert_eq!(l.total(), 29);
    }

    #[test]
    fn named_entries() {
        let l = TokenLayout::new(8, 4, 16);
        let (aho, af) = (adapted(8, 16, 0.5), adapted(4, 16, -0.3));
        let b = build_block_bias(&l, &aho, &af).unwrap();
        let ho = |i: usize| l.c_ho().start + i;
        assert_eq!(b.vit[(0, ho(3))], f64::NEG_INFINITY);
        assert_eq!(b.vit[(ho(2), ho(2))], 0.0);
        assert_eq!(b.vit[(ho(2), ho(5))], f64::NEG_INFINITY);
        for i in 0..8 {
            for p in 0..16 {
                assert_eq!(b.vit[(ho(i), l.patches().start + p)], aho[(i, p)]);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let l = TokenLayout::new(2, 1, 4);
        assert!(vit_bias(&l, Some(&Mat::zeros(3, 4)), None).is_err());
        assert!(qformer_bias(&l, 3, 1, None, None).is_err());
    }

    #[test]
    fn vanilla_layout_has_no_mask() {
        let l = TokenLayout::vanilla(4);
        let b = vit_bias(&l, None, None).unwrap();
        assert!(b.as_slice().iter().all(|&x| x == 0.0));
        let q = qformer_bias(&l, 3, 0, None, None).unwrap();
        assert_eq!(q.shape(), (3, 5));
        assert!(q.as_slice().iter().all(|&x| x == 0.0));
    }
}
