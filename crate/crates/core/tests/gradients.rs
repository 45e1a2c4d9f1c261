//! Finite-difference verification of every differentiable primitive and of
//! composed layers up to the full model. Each objective is a weighted sum
//! of the op's output over registered parameter tensors; the analytic
//! gradient must match central differences (h = 1e-4) to better than 1e-5
//! relative error.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spineseg_core::attention::{
    adaptive_gate, adaptive_gate_backward, scaled_dot_attention, scaled_dot_attention_backward,
    GateParams, SwinBlock, WindowSpec,
};
use spineseg_core::fusion::{
    adaptive_fuse, adaptive_fuse_backward, FusionBlock, FusionConfig, FusionWeights,
};
use spineseg_core::gradcheck::{gradcheck, DifferentiableScalar, FnScalar};
use spineseg_core::network::{ModelConfig, ModelObjective, SegmentationModel};
use spineseg_core::ops;
use spineseg_core::volume::LabelVolume;
use spineseg_core::{ParameterStore, Result, Tensor};

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn rng_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn weighted_sum(y: &Tensor, weights: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

#[test]
fn conv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for &(c_in, c_out, dims, k, stride, padding) in &[
        (1usize, 1usize, 2usize, 2usize, 1usize, 0usize),
        (2, 3, 4, 3, 1, 1),
        (2, 2, 4, 2, 2, 0),
    ] {
        let mut store = ParameterStore::new();
        let x = store
            .register("x", rng_tensor(&mut rng, &[c_in, dims, dims, dims]))
            .unwrap();
        let kern = store
            .register("kernel", rng_tensor(&mut rng, &[c_out, c_in, k, k, k]))
            .unwrap();
        let bias = store.register("bias", rng_tensor(&mut rng, &[c_out])).unwrap();
        let out_e = (dims + 2 * padding - k) / stride + 1;
        let w = rng_tensor(&mut rng, &[c_out, out_e, out_e, out_e]);
        let w2 = w.clone();
        let mut target = FnScalar {
            store,
            eval_fn: move |s: &ParameterStore| -> Result<f64> {
                let y = ops::conv3d(s.value(x), s.value(kern), s.value(bias), stride, padding)?;
                Ok(weighted_sum(&y, &w))
            },
            grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
                let y = ops::conv3d(s.value(x), s.value(kern), s.value(bias), stride, padding)?;
                let (dx, dk, db) =
                    ops::conv3d_backward(s.value(x), s.value(kern), stride, padding, &w2)?;
                s.add_to_grad(x, &dx)?;
                s.add_to_grad(kern, &dk)?;
                s.add_to_grad(bias, &db)?;
                Ok(weighted_sum(&y, &w2))
            },
        };
        let report = gradcheck(&mut target, 6, H, 1).unwrap();
        assert!(report.worst < TOL, "conv k{k} s{stride}: {}", report.worst);
    }
}

#[test]
fn small_conv_layer_meets_tight_tolerance() {
    // A 2³ conv plus sum must agree to better than 1e-6.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut store = ParameterStore::new();
    let x = store.register("x", rng_tensor(&mut rng, &[1, 2, 2, 2])).unwrap();
    let kern = store
        .register("kernel", rng_tensor(&mut rng, &[1, 1, 2, 2, 2]))
        .unwrap();
    let bias = store.register("bias", rng_tensor(&mut rng, &[1])).unwrap();
    let mut target = FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            Ok(ops::conv3d(s.value(x), s.value(kern), s.value(bias), 1, 0)?.sum())
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let y = ops::conv3d(s.value(x), s.value(kern), s.value(bias), 1, 0)?;
            let ones = Tensor::full(y.shape(), 1.0);
            let (dx, dk, db) = ops::conv3d_backward(s.value(x), s.value(kern), 1, 0, &ones)?;
            s.add_to_grad(x, &dx)?;
            s.add_to_grad(kern, &dk)?;
            s.add_to_grad(bias, &db)?;
            Ok(y.sum())
        },
    };
    let report = gradcheck(&mut target, 8, H, 2).unwrap();
    assert!(report.worst < 1e-6, "worst = {}", report.worst);
}

#[test]
fn conv_transpose3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for &(c_in, c_out, dims, k, stride) in &[(2usize, 2usize, 3usize, 2usize, 2usize), (1, 2, 3, 3, 2)] {
        let mut store = ParameterStore::new();
        let x = store
            .register("x", rng_tensor(&mut rng, &[c_in, dims, dims, dims]))
            .unwrap();
        let kern = store
            .register("kernel", rng_tensor(&mut rng, &[c_in, c_out, k, k, k]))
            .unwrap();
        let bias = store.register("bias", rng_tensor(&mut rng, &[c_out])).unwrap();
        let out_e = (dims - 1) * stride + k;
        let w = rng_tensor(&mut rng, &[c_out, out_e, out_e, out_e]);
        let w2 = w.clone();
        let mut target = FnScalar {
            store,
            eval_fn: move |s: &ParameterStore| -> Result<f64> {
                let y = ops::conv_transpose3d(s.value(x), s.value(kern), s.value(bias), stride)?;
                Ok(weighted_sum(&y, &w))
            },
            grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
                let y = ops::conv_transpose3d(s.value(x), s.value(kern), s.value(bias), stride)?;
                let (dx, dk, db) =
                    ops::conv_transpose3d_backward(s.value(x), s.value(kern), stride, &w2)?;
                s.add_to_grad(x, &dx)?;
                s.add_to_grad(kern, &dk)?;
                s.add_to_grad(bias, &db)?;
                Ok(weighted_sum(&y, &w2))
            },
        };
        let report = gradcheck(&mut target, 6, H, 3).unwrap();
        assert!(report.worst < TOL, "tconv k{k}: {}", report.worst);
    }
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for axis in 0..3 {
        let mut store = ParameterStore::new();
        let x = store.register("x", rng_tensor(&mut rng, &[3, 4, 2])).unwrap();
        let w = rng_tensor(&mut rng, &[3, 4, 2]);
        let w2 = w.clone();
        let mut target = FnScalar {
            store,
            eval_fn: move |s: &ParameterStore| -> Result<f64> {
                Ok(weighted_sum(&ops::softmax(s.value(x), axis)?, &w))
            },
            grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
                let p = ops::softmax(s.value(x), axis)?;
                let dx = ops::softmax_backward(&p, &w2, axis)?;
                s.add_to_grad(x, &dx)?;
                Ok(weighted_sum(&p, &w2))
            },
        };
        let report = gradcheck(&mut target, 8, H, 4).unwrap();
        assert!(report.worst < TOL, "softmax axis {axis}: {}", report.worst);
    }
}

#[test]
fn linear_layernorm_activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut store = ParameterStore::new();
    let x = store.register("x", rng_tensor(&mut rng, &[5, 4])).unwrap();
    let w = store.register("w", rng_tensor(&mut rng, &[4, 3])).unwrap();
    let b = store.register("b", rng_tensor(&mut rng, &[3])).unwrap();
    let gamma = store.register("gamma", rng_tensor(&mut rng, &[3])).unwrap();
    let beta = store.register("beta", rng_tensor(&mut rng, &[3])).unwrap();
    let weights = rng_tensor(&mut rng, &[5, 3]);
    let weights2 = weights.clone();
    // gelu(LN(linear(x)))
    let mut target = FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            let y = ops::linear(s.value(x), s.value(w), Some(s.value(b)))?;
            let (n, _) = ops::layer_norm(&y, s.value(gamma), s.value(beta))?;
            Ok(weighted_sum(&ops::gelu(&n), &weights))
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let y = ops::linear(s.value(x), s.value(w), Some(s.value(b)))?;
            let (n, cache) = ops::layer_norm(&y, s.value(gamma), s.value(beta))?;
            let out = ops::gelu(&n);
            let dn = ops::gelu_backward(&n, &weights2)?;
            let (dy, dgamma, dbeta) = ops::layer_norm_backward(&cache, s.value(gamma), &dn)?;
            let (dx, dw, db) = ops::linear_backward(s.value(x), s.value(w), true, &dy)?;
            s.add_to_grad(x, &dx)?;
            s.add_to_grad(w, &dw)?;
            s.add_to_grad(b, &db.unwrap())?;
            s.add_to_grad(gamma, &dgamma)?;
            s.add_to_grad(beta, &dbeta)?;
            Ok(weighted_sum(&out, &weights2))
        },
    };
    let report = gradcheck(&mut target, 8, H, 5).unwrap();
    assert!(report.worst < TOL, "worst = {}", report.worst);
}

#[test]
fn resample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for target_dims in [[5usize, 2, 4], [2, 2, 2], [3, 3, 3]] {
        let mut store = ParameterStore::new();
        let x = store.register("x", rng_tensor(&mut rng, &[2, 3, 3, 3])).unwrap();
        let w = rng_tensor(&mut rng, &[2, target_dims[0], target_dims[1], target_dims[2]]);
        let w2 = w.clone();
        let mut target = FnScalar {
            store,
            eval_fn: move |s: &ParameterStore| -> Result<f64> {
                Ok(weighted_sum(
                    &ops::trilinear_resample(s.value(x), target_dims)?,
                    &w,
                ))
            },
            grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
                let y = ops::trilinear_resample(s.value(x), target_dims)?;
                let dx = ops::trilinear_resample_backward(s.value(x).shape(), &w2)?;
                s.add_to_grad(x, &dx)?;
                Ok(weighted_sum(&y, &w2))
            },
        };
        let report = gradcheck(&mut target, 8, H, 6).unwrap();
        assert!(report.worst < TOL, "resample {target_dims:?}: {}", report.worst);
    }
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut store = ParameterStore::new();
    let q = store.register("q", rng_tensor(&mut rng, &[5, 3])).unwrap();
    let k = store.register("k", rng_tensor(&mut rng, &[5, 3])).unwrap();
    let v = store.register("v", rng_tensor(&mut rng, &[5, 3])).unwrap();
    let w = rng_tensor(&mut rng, &[5, 3]);
    let w2 = w.clone();
    let mut target = FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            let (out, _) = scaled_dot_attention(s.value(q), s.value(k), s.value(v))?;
            Ok(weighted_sum(&out, &w))
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let (out, attn) = scaled_dot_attention(s.value(q), s.value(k), s.value(v))?;
            let (dq, dk, dv) =
                scaled_dot_attention_backward(s.value(q), s.value(k), s.value(v), &attn, &w2)?;
            s.add_to_grad(q, &dq)?;
            s.add_to_grad(k, &dk)?;
            s.add_to_grad(v, &dv)?;
            Ok(weighted_sum(&out, &w2))
        },
    };
    let report = gradcheck(&mut target, 10, H, 7).unwrap();
    assert!(report.worst < TOL, "worst = {}", report.worst);
}

#[test]
fn gate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let dim = 6;
    let heads = 3;
    let mut store = ParameterStore::new();
    let tokens = store.register("tokens", rng_tensor(&mut rng, &[4, dim])).unwrap();
    let fc1w = store.register("fc1w", rng_tensor(&mut rng, &[dim, dim / 2])).unwrap();
    let fc1b = store.register("fc1b", rng_tensor(&mut rng, &[dim / 2])).unwrap();
    let fc2w = store.register("fc2w", rng_tensor(&mut rng, &[dim / 2, heads])).unwrap();
    let fc2b = store.register("fc2b", rng_tensor(&mut rng, &[heads])).unwrap();
    let w = rng_tensor(&mut rng, &[heads]);
    let w2 = w.clone();
    let mut target = FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            let params = GateParams {
                fc1_w: s.value(fc1w),
                fc1_b: s.value(fc1b),
                fc2_w: s.value(fc2w),
                fc2_b: s.value(fc2b),
            };
            let (g, _) = adaptive_gate(s.value(tokens), &params)?;
            Ok(weighted_sum(&g, &w))
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let params = GateParams {
                fc1_w: s.value(fc1w),
                fc1_b: s.value(fc1b),
                fc2_w: s.value(fc2w),
                fc2_b: s.value(fc2b),
            };
            let (g, cache) = adaptive_gate(s.value(tokens), &params)?;
            let (dtokens, dmlp) = adaptive_gate_backward(&cache, &params, &w2)?;
            s.add_to_grad(tokens, &dtokens)?;
            s.add_to_grad(fc1w, &dmlp[0])?;
            s.add_to_grad(fc1b, &dmlp[1])?;
            s.add_to_grad(fc2w, &dmlp[2])?;
            s.add_to_grad(fc2b, &dmlp[3])?;
            Ok(weighted_sum(&g, &w2))
        },
    };
    let report = gradcheck(&mut target, 8, H, 8).unwrap();
    assert!(report.worst < TOL, "worst = {}", report.worst);
}

#[test]
fn fuse_gradients_flow_to_features_and_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut store = ParameterStore::new();
    let f1 = store.register("f1", rng_tensor(&mut rng, &[2, 2, 2, 2])).unwrap();
    let f2 = store.register("f2", rng_tensor(&mut rng, &[2, 2, 2, 2])).unwrap();
    let logits = store.register("logits", rng_tensor(&mut rng, &[2])).unwrap();
    let w = rng_tensor(&mut rng, &[2, 2, 2, 2]);
    let w2 = w.clone();
    let mut target = FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            let weights = FusionWeights {
                logits: s.value(logits).clone(),
            };
            let out = adaptive_fuse(&[s.value(f1).clone(), s.value(f2).clone()], &weights)?;
            Ok(weighted_sum(&out, &w))
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let weights = FusionWeights {
                logits: s.value(logits).clone(),
            };
            let features = [s.value(f1).clone(), s.value(f2).clone()];
            let out = adaptive_fuse(&features, &weights)?;
            let (dfs, dlogits) = adaptive_fuse_backward(&features, &weights, &w2)?;
            s.add_to_grad(f1, &dfs[0])?;
            s.add_to_grad(f2, &dfs[1])?;
            s.add_to_grad(logits, &dlogits)?;
            Ok(weighted_sum(&out, &w2))
        },
    };
    let report = gradcheck(&mut target, 8, H, 9).unwrap();
    assert!(report.worst < TOL, "worst = {}", report.worst);
}

fn block_objective(gated: bool, ablate: bool, shift: usize, seed: u64) -> impl DifferentiableScalar {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = WindowSpec::new(2, shift).unwrap();
    let mut block = SwinBlock::init(&mut store, "blk", 4, 2, spec, gated, &mut rng).unwrap();
    block.set_ablate_adaptive(ablate);
    let x = rng_tensor(&mut rng, &[4, 4, 4, 4]);
    let w = rng_tensor(&mut rng, &[4, 4, 4, 4]);
    let w2 = w.clone();
    let block = Rc::new(RefCell::new(block));
    let block2 = Rc::clone(&block);
    let x2 = x.clone();
    FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            let y = block.borrow_mut().forward(s, &x)?;
            Ok(weighted_sum(&y, &w))
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let y = block2.borrow_mut().forward(s, &x2)?;
            block2.borrow_mut().backward(s, &w2)?;
            Ok(weighted_sum(&y, &w2))
        },
    }
}

#[test]
fn swin_block_gradients_gated_and_shifted() {
    for (gated, ablate, shift) in [(true, false, 0), (true, false, 1), (false, true, 1)] {
        let mut target = block_objective(gated, ablate, shift, 109);
        let report = gradcheck(&mut target, 5, H, 10).unwrap();
        assert!(
            report.worst < TOL,
            "block gated={gated} shift={shift}: worst {} at {}",
            report.worst,
            report.worst_tensor
        );
    }
}

#[test]
fn fusion_block_gradients() {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let cfg = FusionConfig {
        kernel_sizes: vec![1, 3],
        in_channels: 1,
        out_channels: 3,
    };
    let block = FusionBlock::init(&mut store, "stem", cfg, &mut rng).unwrap();
    let x = rng_tensor(&mut rng, &[1, 4, 4, 4]);
    let w = rng_tensor(&mut rng, &[3, 4, 4, 4]);
    let w2 = w.clone();
    let block = Rc::new(RefCell::new(block));
    let block2 = Rc::clone(&block);
    let x2 = x.clone();
    let mut target = FnScalar {
        store,
        eval_fn: move |s: &ParameterStore| -> Result<f64> {
            let y = block.borrow_mut().forward(s, &x)?;
            Ok(weighted_sum(&y, &w))
        },
        grad_fn: move |s: &mut ParameterStore| -> Result<f64> {
            let y = block2.borrow_mut().forward(s, &x2)?;
            block2.borrow_mut().backward(s, &w2)?;
            Ok(weighted_sum(&y, &w2))
        },
    };
    let report = gradcheck(&mut target, 6, H, 11).unwrap();
    assert!(report.worst < TOL, "worst = {}", report.worst);
}

#[test]
fn full_model_end_to_end_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let model = SegmentationModel::init(ModelConfig::tiny()).unwrap();
    let input = rng_tensor(&mut rng, &[1, 8, 8, 8]);
    let labels: Vec<u8> = (0..512).map(|_| rng.gen_range(0..3)).collect();
    let truth = LabelVolume::new([8, 8, 8], labels).unwrap();
    let mut objective = ModelObjective {
        model,
        input,
        truth,
        lambda: 1.0,
    };
    let report = gradcheck(&mut objective, 5, H, 12).unwrap();
    assert!(
        report.worst < TOL,
        "worst {} at {}",
        report.worst,
        report.worst_tensor
    );
}
