use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nncore::layers::{Init, Linear};
use crate::nncore::{Mat, ParamStore, Tape, Var};

/// Weights of a separable bilinear resize from `n_in` to `n_out` samples with
/// half-pixel centers: output `i` samples input coordinate
/// `(i + 0.5)·n_in/n_out − 0.5`, clamped to the input range.
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Mat {
    let mut w = Mat::zeros(n_out, n_in);
    let ratio = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        w[(i, lo)] += 1.0 - frac;
        w[(i, hi)] += frac;
    }
    w
}

/// `(h·w) × (g·g)` matrix `U` such that `flatten(up(A)) = flatten(A) · U`.
pub fn upsample_matrix(h: usize, w: usize, g: usize) -> Mat {
    let wy = bilinear_weights(h, g);
    let wx = bilinear_weights(w, g);
    let mut u = Mat::zeros(h * w, g * g);
    for oy in 0..g {
        for ox in 0..g {
            for iy in 0..h {
                let a = wy[(oy, iy)];
                if a == 0.0 {
                    continue;
                }
                for ix in 0..w {
                    u[(iy * w + ix, oy * g + ox)] += a * wx[(ox, ix)];
                }
            }
        }
    }
    u
}

/// Resamples one `h × w` map to `g × g`.
pub fn upsample(map: &Mat, g: usize) -> Mat {
    let (h, w) = map.shape();
    map.clone().reshape(1, h * w).matmul(&upsample_matrix(h, w, g)).reshape(g, g)
}

/// Turns attention maps into logit bias over the patch tokens: bilinear
/// resize to the patch grid, flatten, then a learned `N_p → N_p` affine map
/// whose weights and offsets start at zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasAdapter {
    pub grid: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub fc: Linear,
    upsample: Mat,
}

impl BiasAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (src_h, src_w): (usize, usize),
        grid: usize,
        n_p: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if grid * grid != n_p {
            return Err(Error::GridMismatch { grid, patches: n_p });
        }
        let fc = Linear::new(store, name, n_p, n_p, Init::Zeros, true, rng);
        Ok(Self { grid, src_h, src_w, fc, upsample: upsample_matrix(src_h, src_w, grid) })
    }

    /// `maps` holds one flattened `h·w` map per row.
    pub fn forward(&self, t: &mut Tape, maps: Var) -> Result<Var> {
        let cols = t.shape(maps).1;
        if cols != self.src_h * self.src_w {
            return Err(shape_err("bias adapter maps", self.src_h * self.src_w, cols));
        }
        let u = t.constant(self.upsample.clone());
        let up = t.matmul(maps, u);
        Ok(self.fc.forward(t, up))
    }

    pub fn forward_plain(&self, store: &ParamStore, maps: &Mat) -> Result<Mat> {
        if maps.cols() != self.src_h * self.src_w {
            return Err(shape_err("bias adapter maps", self.src_h * self.src_w, maps.cols()));
        }
        Ok(self.fc.forward_plain(store, &maps.matmul(&self.upsample)))
    }

    pub fn params(&self) -> Vec<crate::nncore::ParamId> {
        self.fc.params()
    }
}
