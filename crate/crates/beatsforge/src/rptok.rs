//! Random-projection tokenizer: a frozen linear projection followed by
//! nearest-neighbour lookup in a frozen random codebook.
//!
//! Both matrices are drawn i.i.d. standard normal from the deterministic
//! generator and never change afterwards. Draw order: projection W
//! row-major, then codebook V row-major. Distances are unnormalised
//! squared Euclidean; ties break to the smallest index.

use crate::error::{Error, Result};
use crate::features::{PatchSequence, PATCH_DIM};
use numcore::{Rng, Tensor};

pub const DEFAULT_K: usize = 1024;
pub const DEFAULT_CODE_DIM: usize = 256;

/// Per-patch discrete labels for one clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub labels: Vec<u32>,
    pub k: usize,
    pub clip_id: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RandomProjectionTokenizer {
    /// 256 x d_c projection, applied as x^T W.
    pub w: Tensor,
    /// K x d_c codebook.
    pub v: Tensor,
    pub seed: u64,
}

impl RandomProjectionTokenizer {
    pub fn new_seeded(seed: u64, k: usize, code_dim: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("codebook size {k} must be at least 2")));
        }
        if code_dim < 1 {
            return Err(Error::Config("code dimension must be at least 1".into()));
        }
        let mut rng = Rng::new(seed);
        let w = Tensor::randn(vec![PATCH_DIM, code_dim], 1.0, &mut rng);
        let v = Tensor::randn(vec![k, code_dim], 1.0, &mut rng);
        Ok(RandomProjectionTokenizer { w, v, seed })
    }

    pub fn k(&self) -> usize {
        self.v.shape[0]
    }

    pub fn code_dim(&self) -> usize {
        self.v.shape[1]
    }

    /// Label every patch with the index of the nearest codebook vector
    /// after projection.
    pub fn tokenize(&self, x: &PatchSequence) -> Result<TokenSequence> {
        self.tokenize_with_id(x, "")
    }

    pub fn tokenize_with_id(&self, x: &PatchSequence, clip_id: &str) -> Result<TokenSequence> {
        let d = self.code_dim();
        if x.patches.len() != x.n_patches * PATCH_DIM {
            return Err(Error::Shape {
                op: "rptok.tokenize",
                what: format!("patch width must be {PATCH_DIM}"),
            });
        }
        let mut projected = vec![0.0; x.n_patches * d];
        numcore::tape::matmul_acc(&x.patches, &self.w.data, x.n_patches, PATCH_DIM, d, &mut projected);

        let labels = nearest_codes(&projected, &self.v.data, x.n_patches, self.k(), d);
        Ok(TokenSequence {
            labels,
            k: self.k(),
            clip_id: clip_id.to_string(),
        })
    }
}

/// Argmin over squared distances, smallest index on ties.
pub fn nearest_codes(points: &[f64], codes: &[f64], n: usize, k: usize, d: usize) -> Vec<u32> {
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let p = &points[t * d..(t + 1) * d];
        let mut best = (f64::INFINITY, 0u32);
        for i in 0..k {
            let c = &codes[i * d..(i + 1) * d];
            let mut dist = 0.0;
            for (a, b) in c.iter().zip(p.iter()) {
                let diff = a - b;
                dist += diff * diff;
            }
            if dist < best.0 {
                best = (dist, i as u32);
            }
        }
        labels.push(best.1);
    }
    labels
}
