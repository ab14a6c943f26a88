//! Representation alignment: a frozen patch encoder of the clean image and
//! the cosine loss pulling projected hidden tokens toward its features.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::model::patchify_grids;
use crate::nn::{linear, ParamVars};
use crate::tensor::Tensor;

const PATCH_GAIN: f64 = 2.0;

/// Frozen two-layer random convolutional encoder with stride `patch_size`:
/// a patch projection followed by a residual 3×3 convolution over the
/// token grid. Both kernels are orthogonally initialized from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEncoder {
    patch: usize,
    side: usize,
    feat_dim: usize,
    w_patch: Tensor,
    w_ctx: Tensor,
}

/// `rows × cols` with orthonormal rows (if `rows ≤ cols`) or columns.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (tall_r, tall_c) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::<f64>::from_fn(tall_r, tall_c, |_, _| StandardNormal.sample(rng));
    let q = gauss.qr().q();
    if rows >= cols {
        Tensor::from_fn(rows, cols, |r, c| q[(r, c)])
    } else {
        Tensor::from_fn(rows, cols, |r, c| q[(c, r)])
    }
}

impl TargetEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.frozen_seed ^ 0x7a_2d_e7);
        let w_patch = orthogonal(cfg.patch_dim(), cfg.feat_dim, &mut rng);
        let w_ctx = orthogonal(9 * cfg.feat_dim, cfg.feat_dim, &mut rng);
        Self { patch: cfg.patch_size, side: cfg.tokens_per_side(), feat_dim: cfg.feat_dim, w_patch, w_ctx }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// Per-patch features of a clean image, `num_tokens × feat_dim`, rows in
    /// token order.
    pub fn target_features(&self, x_hat: &ImageGrid) -> Result<Tensor> {
        let (h, w, _) = x_hat.shape();
        if h != self.side * self.patch || w != self.side * self.patch {
            return Err(Error::Shape(format!("{h}x{w} image for a {0}x{0} token grid", self.side)));
        }
        let patches = patchify_grids(&[x_hat], self.patch)?;
        if patches.cols() != self.w_patch.rows() {
            return Err(Error::Shape(format!("{} channels-per-patch vs encoder {}", patches.cols(), self.w_patch.rows())));
        }
        let f1 = patches.matmul(&self.w_patch).map(|v| (PATCH_GAIN * v).tanh());
        let side = self.side as isize;
        let fd = self.feat_dim;
        let mut cols = Tensor::zeros(f1.rows(), 9 * fd);
        for j in 0..f1.rows() {
            let (x, y) = ((j % self.side) as isize, (j / self.side) as isize);
            let row = cols.row_mut(j);
            for (k, (dy, dx)) in (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).enumerate() {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < side && ny < side {
                    let src = (ny * side + nx) as usize;
                    row[k * fd..(k + 1) * fd].copy_from_slice(f1.row(src));
                }
            }
        }
        let mut out = cols.matmul(&self.w_ctx).map(f64::tanh);
        out.add_assign(&f1);
        Ok(out)
    }

    /// Token-mean of [`Self::target_features`].
    pub fn pooled_features(&self, x_hat: &ImageGrid) -> Result<Vec<f64>> {
        let f = self.target_features(x_hat)?;
        let n = f.rows() as f64;
        Ok((0..f.cols()).map(|c| (0..f.rows()).map(|r| f.get(r, c)).sum::<f64>() / n).collect())
    }
}

/// Mean over tokens of `1 − cos(proj(hidden_j), target_j)` as a graph node.
pub fn alignment_loss(g: &mut Graph, pv: &ParamVars, hidden: Var, target: &Tensor) -> Result<Var> {
    let proj = linear(g, pv, "align.proj", hidden);
    if g.shape(proj) != target.shape() {
        return Err(Error::Shape(format!("projected hidden {:?} vs target {:?}", g.shape(proj), target.shape())));
    }
    Ok(g.cosine_loss(proj, target))
}

pub fn total_loss(v_loss: f64, a_loss: f64, align_weight: f64) -> Result<f64> {
    if align_weight < 0.0 {
        return Err(Error::OutOfRange(format!("negative alignment weight {align_weight}")));
    }
    Ok(v_loss + align_weight * a_loss)
}
