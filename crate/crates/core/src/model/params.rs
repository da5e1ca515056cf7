use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::contrastive::ProjectionParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Embedding (and latent) dimension.
    pub d: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub context_window: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 16,
            d_img: 16,
            vocab_size: 64,
            context_window: 3,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_img == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary size must be >= 2".into()));
        }
        if self.context_window == 0 {
            return Err(Error::Config("context window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters of the conditional generator. The next-token distribution is
/// `softmax(output_head * [mean context embedding; image_projection * f])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    /// d x V, one column per token.
    pub token_embeddings: Array2<f64>,
    /// d x d_img.
    pub image_projection: Array2<f64>,
    /// Stands in for the image when it is withheld.
    pub null_image_feature: Array1<f64>,
    /// V x 2d.
    pub output_head: Array2<f64>,
    pub context_window: usize,
    pub learning_rate: f64,
    pub step: u64,
    pub seed: u64,
}

impl ToyModelParams {
    pub fn init(dims: &ModelDims, learning_rate: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelDims {
            d,
            d_img,
            vocab_size: v,
            context_window,
        } = *dims;
        let emb = 1.0 / (d as f64).sqrt();
        let img = 1.0 / (d_img as f64).sqrt();
        let head = 1.0 / ((2 * d) as f64).sqrt();
        Ok(ToyModelParams {
            token_embeddings: Array2::from_shape_fn((d, v), |_| rng.random_range(-emb..=emb)),
            image_projection: Array2::from_shape_fn((d, d_img), |_| rng.random_range(-img..=img)),
            null_image_feature: Array1::from_shape_fn(d_img, |_| rng.random_range(-0.1..=0.1)),
            output_head: Array2::from_shape_fn((v, 2 * d), |_| rng.random_range(-head..=head)),
            context_window,
            learning_rate,
            step: 0,
            seed,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.token_embeddings.nrows(),
            d_img: self.image_projection.ncols(),
            vocab_size: self.token_embeddings.ncols(),
            context_window: self.context_window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims {
            d,
            d_img,
            vocab_size: v,
            context_window,
        } = self.dims();
        if v < 2 || context_window == 0 || d == 0 || d_img == 0 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        if self.image_projection.nrows() != d
            || self.null_image_feature.len() != d_img
            || self.output_head.dim() != (v, 2 * d)
        {
            return Err(Error::ShapeMismatch("toy model parameter shapes disagree".into()));
        }
        let all = self
            .token_embeddings
            .iter()
            .chain(self.image_projection.iter())
            .chain(self.null_image_feature.iter())
            .chain(self.output_head.iter());
        if all.into_iter().any(|v| !v.is_finite()) || !self.learning_rate.is_finite() {
            return Err(Error::NonFinite("toy model parameters".into()));
        }
        Ok(())
    }
}

/// Gradient buffers laid out like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub token_embeddings: Array2<f64>,
    pub image_projection: Array2<f64>,
    pub null_image_feature: Array1<f64>,
    pub output_head: Array2<f64>,
    pub projection_weight: Array2<f64>,
    pub projection_bias: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros(model: &ToyModelParams, projection: &ProjectionParams) -> Self {
        ParamGrads {
            token_embeddings: Array2::zeros(model.token_embeddings.raw_dim()),
            image_projection: Array2::zeros(model.image_projection.raw_dim()),
            null_image_feature: Array1::zeros(model.null_image_feature.raw_dim()),
            output_head: Array2::zeros(model.output_head.raw_dim()),
            projection_weight: Array2::zeros(projection.weight.raw_dim()),
            projection_bias: Array1::zeros(projection.bias.raw_dim()),
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &ParamGrads) {
        self.token_embeddings.scaled_add(alpha, &other.token_embeddings);
        self.image_projection.scaled_add(alpha, &other.image_projection);
        self.null_image_feature.scaled_add(alpha, &other.null_image_feature);
        self.output_head.scaled_add(alpha, &other.output_head);
        self.projection_weight.scaled_add(alpha, &other.projection_weight);
        self.projection_bias.scaled_add(alpha, &other.projection_bias);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.token_embeddings
            .iter()
            .chain(self.image_projection.iter())
            .chain(self.null_image_feature.iter())
            .chain(self.output_head.iter())
            .chain(self.projection_weight.iter())
            .chain(self.projection_bias.iter())
            .copied()
            .collect()
    }
}

/// Flatten in the same order as [`ParamGrads::to_flat`].
pub fn flatten_params(model: &ToyModelParams, projection: &ProjectionParams) -> Vec<f64> {
    model
        .token_embeddings
        .iter()
        .chain(model.image_projection.iter())
        .chain(model.null_image_feature.iter())
        .chain(model.output_head.iter())
        .chain(projection.weight.iter())
        .chain(projection.bias.iter())
        .copied()
        .collect()
}

/// Inverse of [`flatten_params`]; shapes come from the templates.
pub fn unflatten_params(
    flat: &[f64],
    model: &ToyModelParams,
    projection: &ProjectionParams,
) -> Result<(ToyModelParams, ProjectionParams)> {
    let mut m = model.clone();
    let mut p = projection.clone();
    let expected = flatten_params(model, projection).len();
    if flat.len() != expected {
        return Err(Error::LengthMismatch {
            left: flat.len(),
            right: expected,
        });
    }
    let mut it = flat.iter().copied();
    let targets = m
        .token_embeddings
        .iter_mut()
        .chain(m.image_projection.iter_mut())
        .chain(m.null_image_feature.iter_mut())
        .chain(m.output_head.iter_mut())
        .chain(p.weight.iter_mut())
        .chain(p.bias.iter_mut());
    for slot in targets {
        *slot = it.next().expect("length checked");
    }
    Ok((m, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_determinism() {
        let dims = ModelDims::default();
        let a = ToyModelParams::init(&dims, 0.05, 3).unwrap();
        let b = ToyModelParams::init(&dims, 0.05, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), dims);
        a.validate().unwrap();
        assert_ne!(a, ToyModelParams::init(&dims, 0.05, 4).unwrap());
    }

    #[test]
    fn rejects_bad_dims() {
        let dims = ModelDims {
            vocab_size: 1,
            ..ModelDims::default()
        };
        assert!(ToyModelParams::init(&dims, 0.05, 0).is_err());
        let dims = ModelDims {
            context_window: 0,
            ..ModelDims::default()
        };
        assert!(dims.validate().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let dims = ModelDims {
            d: 3,
            d_img: 2,
            vocab_size: 5,
            context_window: 2,
        };
        let m = ToyModelParams::init(&dims, 0.1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ProjectionParams::init(3, &mut rng);
        let flat = flatten_params(&m, &p);
        assert_eq!(flat.len(), 15 + 6 + 2 + 30 + 9 + 3);
        let (m2, p2) = unflatten_params(&flat, &m, &p).unwrap();
        assert_eq!((m2, p2), (m, p.clone()));
        assert!(unflatten_params(&flat[1..], &m2_template(), &p).is_err());

        fn m2_template() -> ToyModelParams {
            ToyModelParams::init(
                &ModelDims {
                    d: 3,
                    d_img: 2,
                    vocab_size: 5,
                    context_window: 2,
                },
                0.1,
                1,
            )
            .unwrap()
        }
    }
}
