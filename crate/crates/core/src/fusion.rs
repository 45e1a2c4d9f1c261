//! Multi-scale convolution branches and adaptive weighted fusion.
//!
//! The input volume is convolved with several kernel sizes in parallel and
//! the per-scale feature maps are combined as a softmax-weighted sum
//! `out = Σ w_i · F_i`, with the weights reparameterized through trainable
//! logits so they stay positive and sum to one.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::scaled_uniform;
use crate::ops::{conv3d, conv3d_backward, softmax, softmax_backward};
use crate::tensor::{ParamId, ParameterStore, Tensor};
use crate::threading;

/// Geometry of the multi-scale branch bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// One odd kernel size per branch.
    pub kernel_sizes: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::config("fusion needs at least one kernel size"));
        }
        for &k in &self.kernel_sizes {
            if k % 2 == 0 {
                return Err(Error::config(format!(
                    "fusion kernel sizes must be odd for same-padding, got {k}"
                )));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("fusion channel counts must be positive"));
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        self.kernel_sizes.len()
    }
}

/// Trainable fusion logits; effective weights are `softmax(logits)`.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub logits: Tensor,
}

impl FusionWeights {
    pub fn uniform(n: usize) -> FusionWeights {
        FusionWeights {
            logits: Tensor::zeros(&[n]),
        }
    }

    /// Softmax of the logits: positive, sums to 1.
    pub fn effective(&self) -> Result<Tensor> {
        softmax(&self.logits, 0)
    }
}

/// `out = Σ softmax(logits)_i · F_i`; all features must share one shape.
pub fn adaptive_fuse(features: &[Tensor], weights: &FusionWeights) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::shape("adaptive_fuse needs at least one feature"));
    }
    if weights.logits.numel() != features.len() {
        return Err(Error::shape(format!(
            "{} features but {} logits",
            features.len(),
            weights.logits.numel()
        )));
    }
    let shape = features[0].shape();
    for f in features {
        if f.shape() != shape {
            return Err(Error::shape(format!(
                "fusion features disagree: {:?} vs {:?}",
                shape,
                f.shape()
            )));
        }
    }
    let w = weights.effective()?;
    let mut out = Tensor::zeros(shape);
    for (i, f) in features.iter().enumerate() {
        out.add_assign_scaled(f, w.data()[i])?;
    }
    Ok(out)
}

/// Gradients of [`adaptive_fuse`]: per-feature grads and the logit grads.
pub fn adaptive_fuse_backward(
    features: &[Tensor],
    weights: &FusionWeights,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, Tensor)> {
    let w = weights.effective()?;
    let mut grad_features = Vec::with_capacity(features.len());
    let mut grad_w = Tensor::zeros(&[features.len()]);
    for (i, f) in features.iter().enumerate() {
        grad_features.push(grad_out.scale(w.data()[i]));
        grad_w.data_mut()[i] = f
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&a, &b)| a * b)
            .sum();
    }
    let grad_logits = softmax_backward(&w, &grad_w, 0)?;
    Ok((grad_features, grad_logits))
}

struct FusionCache {
    input: Tensor,
    features: Vec<Tensor>,
}

/// The fusion stem as a trainable layer: branch convolutions plus logits.
pub struct FusionBlock {
    cfg: FusionConfig,
    kernels: Vec<ParamId>,
    biases: Vec<ParamId>,
    logits: ParamId,
    cache: Option<FusionCache>,
}

impl FusionBlock {
    /// Register branch kernels (scaled-uniform), biases and logits (zeros).
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<FusionBlock> {
        cfg.validate()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
            let fan_in = cfg.in_channels * k * k * k;
            let fan_out = cfg.out_channels * k * k * k;
            let w = scaled_uniform(
                rng,
                &[cfg.out_channels, cfg.in_channels, k, k, k],
                fan_in,
                fan_out,
            );
            kernels.push(store.register(format!("{prefix}.branch{i}.weight"), w)?);
            biases.push(store.register(
                format!("{prefix}.branch{i}.bias"),
                Tensor::zeros(&[cfg.out_channels]),
            )?);
        }
        let logits = store.register(
            format!("{prefix}.logits"),
            Tensor::zeros(&[cfg.num_branches()]),
        )?;
        Ok(FusionBlock {
            cfg,
            kernels,
            biases,
            logits,
            cache: None,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Current effective fusion weights (softmax of the logits).
    pub fn weights(&self, store: &ParameterStore) -> Result<Tensor> {
        softmax(store.value(self.logits), 0)
    }

    /// Run every branch: `F_i = conv3d(input, K_i, stride 1, same padding)`.
    pub fn extract(&self, store: &ParameterStore, input: &Tensor) -> Result<Vec<Tensor>> {
        if input.rank() != 4 || input.shape()[0] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "fusion input must be [{}, H, W, D], got {:?}",
                self.cfg.in_channels,
                input.shape()
            )));
        }
        let results = threading::indexed_map(self.cfg.num_branches(), |i| {
            let k = self.cfg.kernel_sizes[i];
            conv3d(
                input,
                store.value(self.kernels[i]),
                store.value(self.biases[i]),
                1,
                (k - 1) / 2,
            )
        });
        results.into_iter().collect()
    }

    pub fn forward(&mut self, store: &ParameterStore, input: &Tensor) -> Result<Tensor> {
        let features = self.extract(store, input)?;
        let weights = FusionWeights {
            logits: store.value(self.logits).clone(),
        };
        let out = adaptive_fuse(&features, &weights)?;
        self.cache = Some(FusionCache {
            input: input.clone(),
            features,
        });
        Ok(out)
    }

    pub fn backward(&mut self, store: &mut ParameterStore, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("fusion backward before forward".into()))?;
        let weights = FusionWeights {
            logits: store.value(self.logits).clone(),
        };
        let (grad_features, grad_logits) =
            adaptive_fuse_backward(&cache.features, &weights, grad_out)?;
        store.add_to_grad(self.logits, &grad_logits)?;

        let branch_grads = threading::indexed_map(self.cfg.num_branches(), |i| {
            let k = self.cfg.kernel_sizes[i];
            conv3d_backward(
                &cache.input,
                store.value(self.kernels[i]),
                1,
                (k - 1) / 2,
                &grad_features[i],
            )
        });
        let mut grad_input = Tensor::zeros(cache.input.shape());
        for (i, res) in branch_grads.into_iter().enumerate() {
            let (dx, dk, db) = res?;
            grad_input.add_assign_scaled(&dx, 1.0)?;
            store.add_to_grad(self.kernels[i], &dk)?;
            store.add_to_grad(self.biases[i], &db)?;
        }
        Ok(grad_input)
    }
}
