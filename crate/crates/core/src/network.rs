//! The full segmentation model: multi-scale fusion stem, patch embedding,
//! windowed-attention encoder stages with strided downsampling, and a
//! U-Net style decoder with skip projections and transposed-conv
//! upsampling, ending in a 1×1×1 class head.
//!
//! Parameters are a pure function of (config, seed); forward/backward are
//! deterministic. The two ablation flags remove the fusion stem and the
//! adaptive attention gates respectively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{SwinBlock, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionConfig};
use crate::init::scaled_uniform;
use crate::ops::{
    conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, from_token_matrix,
    gelu, gelu_backward, layer_norm, layer_norm_backward, to_token_matrix, LayerNormCache,
};
use crate::tensor::{ParamId, ParameterStore, Tensor};

/// Architectural and training hyperparameters, including ablation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub fusion: FusionConfig,
    pub lambda: f64,
    pub use_multiscale: bool,
    pub use_adaptive: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            num_classes: 4,
            patch_size: 2,
            embed_dim: 24,
            depths: vec![2, 2],
            heads: vec![3, 3],
            window: 2,
            fusion: FusionConfig {
                kernel_sizes: vec![1, 3, 5],
                in_channels: 1,
                out_channels: 8,
            },
            lambda: 1.0,
            use_multiscale: true,
            use_adaptive: true,
            seed: 42,
        }
    }

    /// Minimal configuration for gradient checking and smoke tests.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            num_classes: 3,
            patch_size: 2,
            embed_dim: 8,
            depths: vec![2],
            heads: vec![2],
            window: 2,
            fusion: FusionConfig {
                kernel_sizes: vec![1, 3],
                in_channels: 1,
                out_channels: 4,
            },
            lambda: 1.0,
            use_multiscale: true,
            use_adaptive: true,
            seed: 7,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Every input extent must be divisible by this.
    pub fn extent_divisor(&self) -> usize {
        self.patch_size << (self.stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| {
            Err(Error::config(format!("{field}: {why}")))
        };
        if self.in_channels == 0 {
            return fail("model.in_channels", "must be positive".into());
        }
        if self.num_classes < 2 {
            return fail("model.num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.patch_size == 0 {
            return fail("model.patch_size", "must be positive".into());
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return fail("model.embed_dim", format!("must be even and >= 2, got {}", self.embed_dim));
        }
        if self.depths.is_empty() {
            return fail("model.depths", "need at least one stage".into());
        }
        if self.depths.len() != self.heads.len() {
            return fail(
                "model.heads",
                format!("{} stages but {} head counts", self.depths.len(), self.heads.len()),
            );
        }
        for (s, &depth) in self.depths.iter().enumerate() {
            if depth == 0 {
                return fail("model.depths", format!("stage {s} has depth 0"));
            }
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_dim(s) % h != 0 {
                return fail(
                    "model.heads",
                    format!("stage {s} dim {} is not divisible by {h} heads", self.stage_dim(s)),
                );
            }
        }
        if self.window == 0 {
            return fail("model.window", "must be positive".into());
        }
        if self.lambda < 0.0 {
            return fail("model.lambda", format!("must be >= 0, got {}", self.lambda));
        }
        if self.use_multiscale {
            self.fusion.validate()?;
            if self.fusion.in_channels != self.in_channels {
                return fail(
                    "fusion.in_channels",
                    format!("{} does not match model.in_channels {}", self.fusion.in_channels, self.in_channels),
                );
            }
        }
        Ok(())
    }

    /// Check a volume's spatial extents against patch, stage and window
    /// divisibility; names the first offending axis.
    pub fn validate_extents(&self, extents: [usize; 3]) -> Result<()> {
        const AXES: [&str; 3] = ["H", "W", "D"];
        let div = self.extent_divisor();
        for (i, &e) in extents.iter().enumerate() {
            if e == 0 || e % div != 0 {
                return Err(Error::geometry(format!(
                    "axis {}: extent {e} is not divisible by patch_size × 2^(stages−1) = {div}",
                    AXES[i]
                )));
            }
        }
        for s in 0..self.stages() {
            for (i, &e) in extents.iter().enumerate() {
                let tokens = e / (self.patch_size << s);
                if tokens % self.window != 0 {
                    return Err(Error::geometry(format!(
                        "axis {}: stage {s} token grid {tokens} is not divisible by window {}",
                        AXES[i], self.window
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which architectural component(s) to remove.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTarget {
    Multiscale,
    Adaptive,
    Both,
}

/// Return `config` with the corresponding ablation flag(s) cleared;
/// `Both` yields the baseline variant.
pub fn ablate(config: &ModelConfig, which: AblationTarget) -> ModelConfig {
    let mut out = config.clone();
    match which {
        AblationTarget::Multiscale => out.use_multiscale = false,
        AblationTarget::Adaptive => out.use_adaptive = false,
        AblationTarget::Both => {
            out.use_multiscale = false;
            out.use_adaptive = false;
        }
    }
    out
}

/// Plain conv layer with cached input for the backward pass.
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
    input: Option<Tensor>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParameterStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvLayer> {
        let fan = k * k * k;
        let weight = store.register(
            format!("{prefix}.weight"),
            scaled_uniform(rng, &[c_out, c_in, k, k, k], c_in * fan, c_out * fan),
        )?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding,
            input: None,
        })
    }

    fn forward(&mut self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let y = conv3d(
            x,
            store.value(self.weight),
            store.value(self.bias),
            self.stride,
            self.padding,
        )?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, store: &mut ParameterStore, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("conv backward before forward".into()))?;
        let (dx, dw, db) =
            conv3d_backward(&x, store.value(self.weight), self.stride, self.padding, dy)?;
        store.add_to_grad(self.weight, &dw)?;
        store.add_to_grad(self.bias, &db)?;
        Ok(dx)
    }
}

/// Transposed conv layer (kernel size = stride) with cached input.
struct TConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    input: Option<Tensor>,
}

impl TConvLayer {
    fn init(
        store: &mut ParameterStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TConvLayer> {
        let fan = k * k * k;
        let weight = store.register(
            format!("{prefix}.weight"),
            scaled_uniform(rng, &[c_in, c_out, k, k, k], c_in * fan, c_out * fan),
        )?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(TConvLayer {
            weight,
            bias,
            stride: k,
            input: None,
        })
    }

    fn forward(&mut self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose3d(x, store.value(self.weight), store.value(self.bias), self.stride)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, store: &mut ParameterStore, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("transposed conv backward before forward".into()))?;
        let (dx, dw, db) =
            conv_transpose3d_backward(&x, store.value(self.weight), self.stride, dy)?;
        store.add_to_grad(self.weight, &dw)?;
        store.add_to_grad(self.bias, &db)?;
        Ok(dx)
    }
}

/// Patch embedding: non-overlapping conv then token layer norm.
struct PatchEmbed {
    conv: ConvLayer,
    gamma: ParamId,
    beta: ParamId,
    cache: Option<([usize; 3], LayerNormCache)>,
}

impl PatchEmbed {
    fn init(
        store: &mut ParameterStore,
        c_in: usize,
        embed_dim: usize,
        patch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PatchEmbed> {
        let conv = ConvLayer::init(store, "patch_embed", c_in, embed_dim, patch, patch, 0, rng)?;
        let gamma = store.register("patch_embed.norm.gamma", Tensor::full(&[embed_dim], 1.0))?;
        let beta = store.register("patch_embed.norm.beta", Tensor::zeros(&[embed_dim]))?;
        Ok(PatchEmbed {
            conv,
            gamma,
            beta,
            cache: None,
        })
    }

    fn forward(&mut self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let emb = self.conv.forward(store, x)?;
        let extents = [emb.shape()[1], emb.shape()[2], emb.shape()[3]];
        let tokens = to_token_matrix(&emb)?;
        let (normed, cache) = layer_norm(&tokens, store.value(self.gamma), store.value(self.beta))?;
        self.cache = Some((extents, cache));
        from_token_matrix(&normed, extents)
    }

    fn backward(&mut self, store: &mut ParameterStore, dy: &Tensor) -> Result<Tensor> {
        let (extents, cache) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("patch embed backward before forward".into()))?;
        let dtokens = to_token_matrix(dy)?;
        let (dx_tokens, dgamma, dbeta) =
            layer_norm_backward(&cache, store.value(self.gamma), &dtokens)?;
        store.add_to_grad(self.gamma, &dgamma)?;
        store.add_to_grad(self.beta, &dbeta)?;
        let demb = from_token_matrix(&dx_tokens, extents)?;
        self.conv.backward(store, &demb)
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape(format!(
            "channel concat on {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(
        &[
            a.shape()[0] + b.shape()[0],
            a.shape()[1],
            a.shape()[2],
            a.shape()[3],
        ],
        data,
    )
}

fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (c, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let per = h * w * d;
    let a = Tensor::from_vec(&[first, h, w, d], x.data()[..first * per].to_vec());
    let b = Tensor::from_vec(&[c - first, h, w, d], x.data()[first * per..].to_vec());
    (a.expect("split shape"), b.expect("split shape"))
}

/// One decoder step: upsample, project and concatenate the skip, then two
/// 3×3×3 conv + GELU layers.
struct DecoderStage {
    up: TConvLayer,
    skip_proj: ConvLayer,
    conv1: ConvLayer,
    conv2: ConvLayer,
    up_channels: usize,
    acts: Option<(Tensor, Tensor)>,
}

impl DecoderStage {
    fn init(
        store: &mut ParameterStore,
        prefix: &str,
        c_below: usize,
        c_skip: usize,
        c_out: usize,
        up_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecoderStage> {
        let up = TConvLayer::init(store, &format!("{prefix}.up"), c_below, c_out, up_k, rng)?;
        let skip_proj = ConvLayer::init(
            store,
            &format!("{prefix}.skip"),
            c_skip,
            c_out,
            1,
            1,
            0,
            rng,
        )?;
        let conv1 = ConvLayer::init(
            store,
            &format!("{prefix}.conv1"),
            2 * c_out,
            c_out,
            3,
            1,
            1,
            rng,
        )?;
        let conv2 = ConvLayer::init(store, &format!("{prefix}.conv2"), c_out, c_out, 3, 1, 1, rng)?;
        Ok(DecoderStage {
            up,
            skip_proj,
            conv1,
            conv2,
            up_channels: c_out,
            acts: None,
        })
    }

    fn forward(&mut self, store: &ParameterStore, below: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = self.up.forward(store, below)?;
        let sp = self.skip_proj.forward(store, skip)?;
        let cat = concat_channels(&up, &sp)?;
        let c1 = self.conv1.forward(store, &cat)?;
        let a1 = gelu(&c1);
        let c2 = self.conv2.forward(store, &a1)?;
        let out = gelu(&c2);
        self.acts = Some((c1, c2));
        Ok(out)
    }

    fn backward(
        &mut self,
        store: &mut ParameterStore,
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (c1, c2) = self
            .acts
            .take()
            .ok_or_else(|| Error::State("decoder backward before forward".into()))?;
        let dc2 = gelu_backward(&c2, dy)?;
        let da1 = self.conv2.backward(store, &dc2)?;
        let dc1 = gelu_backward(&c1, &da1)?;
        let dcat = self.conv1.backward(store, &dc1)?;
        let (dup, dsp) = split_channels(&dcat, self.up_channels);
        let dbelow = self.up.backward(store, &dup)?;
        let dskip = self.skip_proj.backward(store, &dsp)?;
        Ok((dbelow, dskip))
    }
}

/// The assembled model. Forward caches activations; backward consumes them
/// and accumulates parameter gradients in the store.
pub struct SegmentationModel {
    config: ModelConfig,
    pub params: ParameterStore,
    stem: Option<FusionBlock>,
    patch_embed: PatchEmbed,
    stages: Vec<Vec<SwinBlock>>,
    downs: Vec<ConvLayer>,
    decoder: Vec<DecoderStage>,
    final_stage: DecoderStage,
    head: ConvLayer,
    stem_out: Option<Tensor>,
    forward_ready: bool,
}

/// Build a model with deterministically initialized parameters
/// (scaled-uniform weights, zero biases and fusion logits).
pub fn init_model(config: ModelConfig) -> Result<SegmentationModel> {
    SegmentationModel::init(config)
}

impl SegmentationModel {
    pub fn init(config: ModelConfig) -> Result<SegmentationModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();

        let stem = if config.use_multiscale {
            Some(FusionBlock::init(
                &mut store,
                "stem",
                config.fusion.clone(),
                &mut rng,
            )?)
        } else {
            None
        };
        let stem_channels = if config.use_multiscale {
            config.fusion.out_channels
        } else {
            config.in_channels
        };
        let patch_embed = PatchEmbed::init(
            &mut store,
            stem_channels,
            config.embed_dim,
            config.patch_size,
            &mut rng,
        )?;

        let s_count = config.stages();
        let mut stages = Vec::with_capacity(s_count);
        let mut downs = Vec::with_capacity(s_count.saturating_sub(1));
        for s in 0..s_count {
            let dim = config.stage_dim(s);
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let shift = if b % 2 == 0 { 0 } else { config.window / 2 };
                let spec = WindowSpec::new(config.window, shift)?;
                blocks.push(SwinBlock::init(
                    &mut store,
                    &format!("enc{s}.block{b}"),
                    dim,
                    config.heads[s],
                    spec,
                    config.use_adaptive,
                    &mut rng,
                )?);
            }
            stages.push(blocks);
            if s + 1 < s_count {
                downs.push(ConvLayer::init(
                    &mut store,
                    &format!("down{s}"),
                    dim,
                    config.stage_dim(s + 1),
                    2,
                    2,
                    0,
                    &mut rng,
                )?);
            }
        }

        let mut decoder = Vec::with_capacity(s_count.saturating_sub(1));
        for s in 0..s_count.saturating_sub(1) {
            decoder.push(DecoderStage::init(
                &mut store,
                &format!("dec{s}"),
                config.stage_dim(s + 1),
                config.stage_dim(s),
                config.stage_dim(s),
                2,
                &mut rng,
            )?);
        }
        let head_dim = config.embed_dim / 2;
        let final_stage = DecoderStage::init(
            &mut store,
            "final",
            config.embed_dim,
            stem_channels,
            head_dim,
            config.patch_size,
            &mut rng,
        )?;
        let head = ConvLayer::init(
            &mut store,
            "head",
            head_dim,
            config.num_classes,
            1,
            1,
            0,
            &mut rng,
        )?;

        Ok(SegmentationModel {
            config,
            params: store,
            stem,
            patch_embed,
            stages,
            downs,
            decoder,
            final_stage,
            head,
            stem_out: None,
            forward_ready: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Effective fusion weights, when the stem is present.
    pub fn fusion_weights(&self) -> Option<Tensor> {
        self.stem
            .as_ref()
            .and_then(|s| s.weights(&self.params).ok())
    }

    /// Attention blocks of every stage, for invariant inspection.
    pub fn blocks(&self) -> impl Iterator<Item = &SwinBlock> {
        self.stages.iter().flatten()
    }

    /// `[C,H,W,D] → [K,H,W,D]` logits. Caches activations for backward.
    pub fn forward(&mut self, volume: &Tensor) -> Result<Tensor> {
        if volume.rank() != 4 || volume.shape()[0] != self.config.in_channels {
            return Err(Error::shape(format!(
                "input must be [{}, H, W, D], got {:?}",
                self.config.in_channels,
                volume.shape()
            )));
        }
        let extents = [volume.shape()[1], volume.shape()[2], volume.shape()[3]];
        self.config.validate_extents(extents)?;

        let stem_out = match &mut self.stem {
            Some(fusion) => fusion.forward(&self.params, volume)?,
            None => volume.clone(),
        };
        let mut x = self.patch_embed.forward(&self.params, &stem_out)?;
        let mut skips: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            if s > 0 {
                x = self.downs[s - 1].forward(&self.params, &x)?;
            }
            for block in &mut self.stages[s] {
                x = block.forward(&self.params, &x)?;
            }
            skips.push(x.clone());
        }
        for s in (0..self.decoder.len()).rev() {
            x = self.decoder[s].forward(&self.params, &x, &skips[s])?;
        }
        x = self.final_stage.forward(&self.params, &x, &stem_out)?;
        let logits = self.head.forward(&self.params, &x)?;
        self.stem_out = Some(stem_out);
        self.forward_ready = true;
        Ok(logits)
    }

    /// Accumulate parameter gradients for the cached forward pass.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        self.backward_with_input_grad(grad_logits).map(|_| ())
    }

    /// As [`SegmentationModel::backward`], also returning ∂loss/∂input.
    pub fn backward_with_input_grad(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        if !self.forward_ready {
            return Err(Error::State(
                "backward called without a preceding forward".into(),
            ));
        }
        self.forward_ready = false;
        let _stem_out = self.stem_out.take();

        let store = &mut self.params;
        let mut dx = self.head.backward(store, grad_logits)?;
        let (d_dec, mut dstem) = self.final_stage.backward(store, &dx)?;
        dx = d_dec;
        let s_count = self.stages.len();
        let mut dskips: Vec<Option<Tensor>> = vec![None; s_count];
        for s in 0..self.decoder.len() {
            let (dbelow, dskip) = self.decoder[s].backward(store, &dx)?;
            dskips[s] = Some(dskip);
            dx = dbelow;
        }
        // dx now holds the gradient of the bottom stage output.
        for s in (0..s_count).rev() {
            let mut g = dx;
            for block in self.stages[s].iter_mut().rev() {
                g = block.backward(store, &g)?;
            }
            if s > 0 {
                let from_down = self.downs[s - 1].backward(store, &g)?;
                dx = match dskips[s - 1].take() {
                    Some(dskip) => from_down.add(&dskip)?,
                    None => from_down,
                };
            } else {
                dx = g;
            }
        }
        let dstem_from_pe = self.patch_embed.backward(store, &dx)?;
        dstem.add_assign_scaled(&dstem_from_pe, 1.0)?;
        match &mut self.stem {
            Some(fusion) => fusion.backward(store, &dstem),
            None => Ok(dstem),
        }
    }
}

/// The training objective `combined_loss ∘ softmax ∘ forward` as a
/// differentiable scalar of the model parameters, for gradient checking.
pub struct ModelObjective {
    pub model: SegmentationModel,
    pub input: Tensor,
    pub truth: crate::volume::LabelVolume,
    pub lambda: f64,
}

impl crate::gradcheck::DifferentiableScalar for ModelObjective {
    fn params(&self) -> &ParameterStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.model.params
    }

    fn eval(&mut self) -> Result<f64> {
        let logits = self.model.forward(&self.input)?;
        let pred = crate::loss::ProbVolume::from_logits(&logits)?;
        Ok(crate::loss::combined_loss(&pred, &self.truth, self.lambda)?.total)
    }

    fn eval_with_grads(&mut self) -> Result<f64> {
        self.model.params.zero_grads();
        let logits = self.model.forward(&self.input)?;
        let (breakdown, dlogits) =
            crate::loss::combined_loss_grad(&logits, &self.truth, self.lambda)?;
        self.model.backward(&dlogits)?;
        Ok(breakdown.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ProbVolume;
    use crate::testutil::rng_tensor;

    fn tiny_input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng_tensor(&mut rng, &[1, 8, 8, 8])
    }

    #[test]
    fn init_is_deterministic_in_config_and_seed() {
        let a = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let b = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (ea, eb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value.data(), eb.value.data());
        }
        let mut cfg = ModelConfig::tiny();
        cfg.seed = 8;
        let c = SegmentationModel::init(cfg).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(ea, ec)| ea.value.data() != ec.value.data());
        assert!(differs);
    }

    #[test]
    fn ablations_strictly_shrink_parameter_counts() {
        let full = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let no_ms =
            SegmentationModel::init(ablate(&ModelConfig::tiny(), AblationTarget::Multiscale))
                .unwrap();
        let no_ad =
            SegmentationModel::init(ablate(&ModelConfig::tiny(), AblationTarget::Adaptive))
                .unwrap();
        let base =
            SegmentationModel::init(ablate(&ModelConfig::tiny(), AblationTarget::Both)).unwrap();
        assert!(base.parameter_count() < no_ms.parameter_count());
        assert!(base.parameter_count() < no_ad.parameter_count());
        assert!(no_ms.parameter_count() < full.parameter_count());
        assert!(no_ad.parameter_count() < full.parameter_count());
        // Fusion parameters exist exactly when multiscale is on.
        assert!(full.params.find("stem.logits").is_some());
        assert!(no_ms.params.find("stem.logits").is_none());
        // Gate parameters exist exactly when adaptive is on.
        assert!(full.params.find("enc0.block0.gate.fc1.weight").is_some());
        assert!(no_ad.params.find("enc0.block0.gate.fc1.weight").is_none());
    }

    #[test]
    fn ablate_composes() {
        let cfg = ModelConfig::tiny();
        let both = ablate(&cfg, AblationTarget::Both);
        let chained = ablate(&ablate(&cfg, AblationTarget::Multiscale), AblationTarget::Adaptive);
        assert_eq!(both, chained);
        let ms = ablate(&cfg, AblationTarget::Multiscale);
        assert!(!ms.use_multiscale && ms.use_adaptive);
    }

    #[test]
    fn forward_preserves_spatial_extents() {
        let mut model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let x = tiny_input(1);
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[3, 8, 8, 8]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let x = tiny_input(2);
        let mut m1 = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let mut m2 = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let l1 = m1.forward(&x).unwrap();
        let l2 = m2.forward(&x).unwrap();
        assert_eq!(l1.data(), l2.data());
        let l3 = m1.forward(&x).unwrap();
        assert_eq!(l1.data(), l3.data());
    }

    #[test]
    fn softmax_of_logits_is_a_distribution() {
        let mut model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let logits = model.forward(&tiny_input(3)).unwrap();
        let probs = ProbVolume::from_logits(&logits).unwrap();
        let n = 8 * 8 * 8;
        for v in 0..n {
            let sum: f64 = (0..3).map(|c| probs.probs().data()[c * n + v]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_violations_name_the_axis() {
        let mut model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let x = Tensor::zeros(&[1, 8, 10, 8]);
        let err = model.forward(&x).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)));
        assert!(err.to_string().contains("axis W"), "{err}");
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_grads() {
        let mut model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let logits = model.forward(&tiny_input(4)).unwrap();
        model.params.zero_grads();
        model.backward(&Tensor::zeros(logits.shape())).unwrap();
        for entry in model.params.iter() {
            assert!(entry.grad.data().iter().all(|&g| g == 0.0), "{}", entry.name);
        }
    }

    #[test]
    fn backward_twice_without_forward_is_state_error() {
        let mut model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let logits = model.forward(&tiny_input(5)).unwrap();
        let dl = Tensor::full(logits.shape(), 1.0);
        model.backward(&dl).unwrap();
        assert!(matches!(model.backward(&dl), Err(Error::State(_))));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
        let x = Tensor::zeros(&[2, 8, 8, 8]);
        assert!(matches!(model.forward(&x), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn invalid_config_is_rejected_with_field_name() {
        let mut cfg = ModelConfig::tiny();
        cfg.heads = vec![3];
        match SegmentationModel::init(cfg) {
            Err(err) => assert!(err.to_string().contains("model.heads"), "{err}"),
            Ok(_) => panic!("expected a config error"),
        }
    }
}
