use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Affine map from the VLM embedding space into the generator's guidance
/// space: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMap {
    pub weight: Mat,
    pub bias: Mat,
}

impl AdapterMap {
    pub fn new(weight: Mat, bias: Mat) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Shape(format!(
                "adapter bias {:?} for weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(AdapterMap { weight, bias })
    }

    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AdapterMap {
            weight: Mat::randn(in_dim, out_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng),
            bias: Mat::zeros(1, out_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Mat::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        AdapterMap {
            weight,
            bias: Mat::zeros(1, dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, tokens: &Mat) -> Result<Mat> {
        let mut out = tokens.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.bias.row(0)) {
                *o += b;
            }
        }
        Ok(out)
    }
}
