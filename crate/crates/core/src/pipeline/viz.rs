use serde::{Deserialize, Serialize};

use crate::detector::average_maps;
use crate::error::{Error, Result};
use crate::model::{HoiModel, PreparedImage};
use crate::nncore::{ParamStore, Tape};

/// Attention of one pair query, each map flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAttention {
    pub query: usize,
    /// Interaction-decoder cross-attention over the detector grid.
    pub a_ho: Vec<f64>,
    pub detector_grid: (usize, usize),
    /// Adapted bias added to the `C_ho` row, over the tower grid.
    pub bias: Option<Vec<f64>>,
    /// `C_ho[i]` self-attention over `P_img`, mean over layers and heads.
    pub c_ho: Vec<f64>,
    /// Vanilla `C` self-attention over `P_img`.
    pub c: Vec<f64>,
    pub tower_grid: usize,
}

/// Requires ABG, since otherwise no `C_ho` token exists.
pub fn query_attention(store: &ParamStore, model: &HoiModel, image: &PreparedImage, queries: &[usize]) -> Result<Vec<QueryAttention>> {
    if !model.cfg.toggles.abg {
        return Err(Error::Config("attention maps need a model trained with ABG".into()));
    }
    let n_q = model.cfg.detector.n_q;
    if let Some(&q) = queries.iter().find(|&&q| q >= n_q) {
        return Err(Error::Config(format!("query {q} out of range (N_q = {n_q})")));
    }
    let mut t = Tape::new(store);
    let fp = model.forward(&mut t, image, true)?;
    let maps = fp.vit_maps.expect("tower runs on tape whenever C_ho exists");
    let vit = average_maps(&mut t, &maps);
    let vit = t.value(vit);
    let a_ho = t.value(fp.a_ho);
    let bias = fp.bias_ho.map(|b| t.value(b).clone());
    let p = fp.layout.patches();
    let row_over_patches = |r: usize| vit.row(r)[p.clone()].to_vec();
    Ok(queries
        .iter()
        .map(|&i| QueryAttention {
            query: i,
            a_ho: a_ho.row(i).to_vec(),
            detector_grid: model.cfg.detector.grid(),
            bias: bias.as_ref().map(|b| b.row(i).to_vec()),
            c_ho: row_over_patches(fp.layout.c_ho().start + i),
            c: row_over_patches(fp.layout.cls().start),
            tower_grid: model.cfg.tower.grid(),
        })
        .collect())
}

/// Min-max scaling into `[0, 1]`; a constant map becomes all zeros.
pub fn normalize01(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
