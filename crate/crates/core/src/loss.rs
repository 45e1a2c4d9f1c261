//! Compound training loss: cross entropy plus weighted soft Dice.
//!
//! `L = L_CE + λ·L_Dice` with `L_CE` averaged over voxels and `L_Dice` the
//! per-class soft Dice complement averaged over classes present in the
//! truth. Gradients are taken w.r.t. logits through the class softmax.

use crate::error::{Error, Result};
use crate::ops::{softmax, softmax_backward};
use crate::tensor::Tensor;
use crate::volume::LabelVolume;

/// Clamp floor applied to probabilities before the CE log.
pub const CE_EPS: f64 = 1e-12;
/// Smoothing term in the soft Dice denominator.
pub const DICE_EPS: f64 = 1e-7;

/// Per-voxel class distribution `[K,H,W,D]`; slices over the class axis
/// sum to 1.
#[derive(Clone, Debug)]
pub struct ProbVolume {
    probs: Tensor,
}

impl ProbVolume {
    /// Softmax of logits over the class axis.
    pub fn from_logits(logits: &Tensor) -> Result<ProbVolume> {
        if logits.rank() != 4 {
            return Err(Error::shape(format!(
                "logits must be [K,H,W,D], got {:?}",
                logits.shape()
            )));
        }
        Ok(ProbVolume {
            probs: softmax(logits, 0)?,
        })
    }

    /// Wrap explicit probabilities, validating the distribution invariant.
    pub fn new(probs: Tensor) -> Result<ProbVolume> {
        if probs.rank() != 4 {
            return Err(Error::shape(format!(
                "probabilities must be [K,H,W,D], got {:?}",
                probs.shape()
            )));
        }
        let k = probs.shape()[0];
        let n: usize = probs.shape()[1..].iter().product();
        for v in 0..n {
            let mut sum = 0.0;
            for c in 0..k {
                let p = probs.data()[c * n + v];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "probability {p} at class {c}, voxel {v} outside [0,1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "voxel {v} probabilities sum to {sum}"
                )));
            }
        }
        Ok(ProbVolume { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [
            self.probs.shape()[1],
            self.probs.shape()[2],
            self.probs.shape()[3],
        ]
    }

    /// Hard per-voxel argmax prediction.
    pub fn argmax_labels(&self) -> LabelVolume {
        let k = self.num_classes();
        let dims = self.spatial_dims();
        let n: usize = dims.iter().product();
        let mut labels = vec![0u8; n];
        for v in 0..n {
            let mut best = 0usize;
            let mut best_p = self.probs.data()[v];
            for c in 1..k {
                let p = self.probs.data()[c * n + v];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            labels[v] = best as u8;
        }
        LabelVolume::new(dims, labels).expect("dims match")
    }
}

fn check_pair(pred: &ProbVolume, truth: &LabelVolume) -> Result<usize> {
    if pred.spatial_dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction dims {:?} vs truth dims {:?}",
            pred.spatial_dims(),
            truth.dims()
        )));
    }
    truth.validate_classes(pred.num_classes())?;
    Ok(truth.voxels())
}

/// Voxel-averaged negative log likelihood of the true class.
pub fn cross_entropy(pred: &ProbVolume, truth: &LabelVolume) -> Result<f64> {
    let n = check_pair(pred, truth)?;
    let probs = pred.probs.data();
    let mut total = 0.0;
    for (v, &label) in truth.labels().iter().enumerate() {
        let p = probs[label as usize * n + v].max(CE_EPS);
        total -= p.ln();
    }
    Ok(total / n as f64)
}

/// Soft Dice coefficient for each class, `None` for classes absent from
/// the truth.
pub fn soft_dice_per_class(pred: &ProbVolume, truth: &LabelVolume) -> Result<Vec<Option<f64>>> {
    let n = check_pair(pred, truth)?;
    let k = pred.num_classes();
    let probs = pred.probs.data();
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut truth_count = 0.0;
        let mut intersect = 0.0;
        let mut pred_sum = 0.0;
        for v in 0..n {
            let p = probs[c * n + v];
            pred_sum += p;
            if truth.labels()[v] as usize == c {
                truth_count += 1.0;
                intersect += p;
            }
        }
        if truth_count == 0.0 {
            out.push(None);
        } else {
            out.push(Some(2.0 * intersect / (truth_count + pred_sum + DICE_EPS)));
        }
    }
    Ok(out)
}

/// How the Dice loss aggregates classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiceMode {
    /// `1 − Dice_c` averaged over classes present in the truth (default).
    PerClassMean,
    /// One global Dice over the merged foreground (classes ≥ 1).
    GlobalBinary,
}

/// Soft Dice loss in [0, 1].
pub fn dice_loss(pred: &ProbVolume, truth: &LabelVolume) -> Result<f64> {
    dice_loss_with_mode(pred, truth, DiceMode::PerClassMean)
}

pub fn dice_loss_with_mode(
    pred: &ProbVolume,
    truth: &LabelVolume,
    mode: DiceMode,
) -> Result<f64> {
    match mode {
        DiceMode::PerClassMean => {
            let dices = soft_dice_per_class(pred, truth)?;
            let present: Vec<f64> = dices.into_iter().flatten().collect();
            if present.is_empty() {
                return Err(Error::InvalidLabel("truth has no voxels of any class".into()));
            }
            Ok(1.0 - present.iter().sum::<f64>() / present.len() as f64)
        }
        DiceMode::GlobalBinary => {
            let n = check_pair(pred, truth)?;
            let k = pred.num_classes();
            let probs = pred.probs.data();
            let mut truth_count = 0.0;
            let mut intersect = 0.0;
            let mut pred_sum = 0.0;
            for v in 0..n {
                let p_fg: f64 = (1..k).map(|c| probs[c * n + v]).sum();
                pred_sum += p_fg;
                if truth.labels()[v] > 0 {
                    truth_count += 1.0;
                    intersect += p_fg;
                }
            }
            Ok(1.0 - 2.0 * intersect / (truth_count + pred_sum + DICE_EPS))
        }
    }
}

/// The combined loss and its two components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

/// `L = L_CE + λ·L_Dice`, exactly.
pub fn combined_loss(
    pred: &ProbVolume,
    truth: &LabelVolume,
    lambda: f64,
) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    let ce = cross_entropy(pred, truth)?;
    let dice = dice_loss(pred, truth)?;
    Ok(LossBreakdown {
        total: ce + lambda * dice,
        ce,
        dice,
    })
}

/// Combined loss plus its exact gradient w.r.t. the logits.
pub fn combined_loss_grad(
    logits: &Tensor,
    truth: &LabelVolume,
    lambda: f64,
) -> Result<(LossBreakdown, Tensor)> {
    let pred = ProbVolume::from_logits(logits)?;
    let breakdown = combined_loss(&pred, truth, lambda)?;

    let k = pred.num_classes();
    let n = truth.voxels();
    let probs = pred.probs.data();
    let nf = n as f64;
    let mut dprobs = vec![0.0; k * n];

    // Cross entropy: d/dp_true = −1/(N·p), zero where the clamp is active.
    for (v, &label) in truth.labels().iter().enumerate() {
        let c = label as usize;
        let p = probs[c * n + v];
        if p >= CE_EPS {
            dprobs[c * n + v] -= 1.0 / (nf * p);
        }
    }

    // Soft Dice, per present class: L_c = 1 − 2I_c/U_c,
    // dL_c/dp_c(v) = −2·(y_c(v)·U_c − I_c)/U_c².
    let mut stats = Vec::with_capacity(k);
    let mut present = 0usize;
    for c in 0..k {
        let mut truth_count = 0.0;
        let mut intersect = 0.0;
        let mut pred_sum = 0.0;
        for v in 0..n {
            let p = probs[c * n + v];
            pred_sum += p;
            if truth.labels()[v] as usize == c {
                truth_count += 1.0;
                intersect += p;
            }
        }
        if truth_count > 0.0 {
            present += 1;
        }
        stats.push((truth_count, intersect, truth_count + pred_sum + DICE_EPS));
    }
    if present > 0 && lambda > 0.0 {
        let class_weight = lambda / present as f64;
        for (c, &(truth_count, intersect, u)) in stats.iter().enumerate() {
            if truth_count == 0.0 {
                continue;
            }
            let u2 = u * u;
            for v in 0..n {
                let y = if truth.labels()[v] as usize == c { 1.0 } else { 0.0 };
                dprobs[c * n + v] -= class_weight * 2.0 * (y * u - intersect) / u2;
            }
        }
    }

    let dprobs = Tensor::from_vec(logits.shape(), dprobs)?;
    let dlogits = softmax_backward(&pred.probs, &dprobs, 0)?;
    Ok((breakdown, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_probs(labels: &LabelVolume, k: usize) -> ProbVolume {
        let n = labels.voxels();
        let [h, w, d] = labels.dims();
        let mut data = vec![0.0; k * n];
        for (v, &l) in labels.labels().iter().enumerate() {
            data[l as usize * n + v] = 1.0;
        }
        ProbVolume::new(Tensor::from_vec(&[k, h, w, d], data).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_ce() {
        let truth = LabelVolume::new([1, 2, 2], vec![0, 1, 2, 1]).unwrap();
        let pred = one_hot_probs(&truth, 3);
        assert_eq!(cross_entropy(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn uniform_binary_prediction_costs_ln2() {
        let truth = LabelVolume::new([1, 1, 4], vec![0, 1, 0, 1]).unwrap();
        let probs = Tensor::full(&[2, 1, 1, 4], 0.5);
        let pred = ProbVolume::new(probs).unwrap();
        let ce = cross_entropy(&pred, &truth).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_finite() {
        let truth = LabelVolume::new([1, 1, 2], vec![0, 1]).unwrap();
        // Predict the wrong class with certainty.
        let flipped = LabelVolume::new([1, 1, 2], vec![1, 0]).unwrap();
        let pred = one_hot_probs(&flipped, 2);
        let ce = cross_entropy(&pred, &truth).unwrap();
        assert!(ce.is_finite());
        assert!((ce + CE_EPS.ln()).abs() < 1e-9, "ce = {ce}");
    }

    #[test]
    fn perfect_hard_prediction_has_near_zero_dice() {
        let truth = LabelVolume::new([2, 2, 1], vec![0, 1, 1, 0]).unwrap();
        let pred = one_hot_probs(&truth, 2);
        let d = dice_loss(&pred, &truth).unwrap();
        assert!(d.abs() < 1e-6, "dice = {d}");
    }

    #[test]
    fn disjoint_binary_prediction_has_dice_one() {
        let truth = LabelVolume::new([1, 1, 2], vec![1, 0]).unwrap();
        let flipped = LabelVolume::new([1, 1, 2], vec![0, 1]).unwrap();
        let pred = one_hot_probs(&flipped, 2);
        let d = dice_loss(&pred, &truth).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "dice = {d}");
    }

    #[test]
    fn foreground_dice_matches_direct_substitution() {
        // Truth mask 1100, prediction 1000: Dice = 2·1/(2+1), loss 1/3.
        let truth = LabelVolume::new([1, 1, 4], vec![1, 1, 0, 0]).unwrap();
        let hard = LabelVolume::new([1, 1, 4], vec![1, 0, 0, 0]).unwrap();
        let pred = one_hot_probs(&hard, 2);
        let per_class = soft_dice_per_class(&pred, &truth).unwrap();
        let fg = per_class[1].unwrap();
        assert!(((1.0 - fg) - 1.0 / 3.0).abs() < 1e-7, "loss = {}", 1.0 - fg);
    }

    #[test]
    fn combined_is_ce_plus_lambda_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..25 {
            let logits = rng_tensor(&mut rng, &[3, 2, 2, 2]);
            let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..3)).collect();
            let truth = LabelVolume::new([2, 2, 2], labels).unwrap();
            let pred = ProbVolume::from_logits(&logits).unwrap();
            for lambda in [0.0, 0.5, 1.0, 2.0] {
                let l = combined_loss(&pred, &truth, lambda).unwrap();
                assert!((l.total - (l.ce + lambda * l.dice)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn worked_component_sum() {
        // ln 2 from the uniform CE case plus 1/3 from the Dice case.
        let l = std::f64::consts::LN_2 + 1.0 / 3.0;
        assert!((l - 1.0265).abs() < 5e-4, "sum = {l}");
    }

    #[test]
    fn lambda_zero_reduces_to_ce() {
        let truth = LabelVolume::new([1, 1, 4], vec![0, 1, 1, 0]).unwrap();
        let logits = Tensor::from_vec(
            &[2, 1, 1, 4],
            vec![0.3, -0.2, 0.9, 0.0, -0.3, 0.7, 0.1, 0.5],
        )
        .unwrap();
        let pred = ProbVolume::from_logits(&logits).unwrap();
        let l = combined_loss(&pred, &truth, 0.0).unwrap();
        assert_eq!(l.total, l.ce);
    }

    #[test]
    fn negative_lambda_is_config_error() {
        let truth = LabelVolume::new([1, 1, 1], vec![0]).unwrap();
        let pred = ProbVolume::new(Tensor::full(&[2, 1, 1, 1], 0.5)).unwrap();
        assert!(matches!(
            combined_loss(&pred, &truth, -1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut logits = rng_tensor(&mut rng, &[3, 2, 2, 1]);
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let truth = LabelVolume::new([2, 2, 1], labels).unwrap();
        let lambda = 0.7;
        let (_, grad) = combined_loss_grad(&logits, &truth, lambda).unwrap();
        let h = 1e-6;
        for i in 0..logits.numel() {
            let orig = logits.data()[i];
            logits.data_mut()[i] = orig + h;
            let lp = combined_loss(
                &ProbVolume::from_logits(&logits).unwrap(),
                &truth,
                lambda,
            )
            .unwrap()
            .total;
            logits.data_mut()[i] = orig - h;
            let lm = combined_loss(
                &ProbVolume::from_logits(&logits).unwrap(),
                &truth,
                lambda,
            )
            .unwrap()
            .total;
            logits.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-6,
                "logit {i}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let truth = LabelVolume::new([2, 2, 2], vec![0; 8]).unwrap();
        let pred = ProbVolume::new(Tensor::full(&[2, 1, 2, 2], 0.5)).unwrap();
        assert!(matches!(
            cross_entropy(&pred, &truth),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn argmax_picks_the_largest_class() {
        let probs = Tensor::from_vec(
            &[3, 1, 1, 2],
            vec![0.2, 0.5, 0.3, 0.2, 0.5, 0.3],
        )
        .unwrap();
        let pred = ProbVolume::new(probs).unwrap();
        let labels = pred.argmax_labels();
        assert_eq!(labels.labels(), &[2, 0]);
    }
}
