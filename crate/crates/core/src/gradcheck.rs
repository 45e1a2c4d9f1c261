//! Finite-difference verification of analytic gradients.
//!
//! Compares every parameter's analytic gradient against central differences
//! `(f(θ+h) − f(θ−h)) / 2h` at randomly probed coordinates and reports the
//! worst relative error, overall and per tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

/// A scalar-valued function of a parameter store.
///
/// `eval_with_grads` must recompute gradients from scratch (zeroing any
/// previous accumulation) so the store's grads equal ∂f/∂θ afterwards.
pub trait DifferentiableScalar {
    fn params(&self) -> &ParameterStore;
    fn params_mut(&mut self) -> &mut ParameterStore;
    fn eval(&mut self) -> Result<f64>;
    fn eval_with_grads(&mut self) -> Result<f64>;
}

/// Adapter turning a pair of closures into a [`DifferentiableScalar`].
pub struct FnScalar<E, G>
where
    E: FnMut(&ParameterStore) -> Result<f64>,
    G: FnMut(&mut ParameterStore) -> Result<f64>,
{
    pub store: ParameterStore,
    pub eval_fn: E,
    pub grad_fn: G,
}

impl<E, G> DifferentiableScalar for FnScalar<E, G>
where
    E: FnMut(&ParameterStore) -> Result<f64>,
    G: FnMut(&mut ParameterStore) -> Result<f64>,
{
    fn params(&self) -> &ParameterStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }
    fn eval(&mut self) -> Result<f64> {
        (self.eval_fn)(&self.store)
    }
    fn eval_with_grads(&mut self) -> Result<f64> {
        self.store.zero_grads();
        (self.grad_fn)(&mut self.store)
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub worst: f64,
    pub worst_tensor: String,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

/// Relative error with a small absolute floor so that exact zeros and
/// finite-difference roundoff below ~1e-6 do not register as disagreement.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Probe `probes` random coordinates of every parameter tensor.
///
/// Returns the worst relative error seen; errors out on non-finite values
/// of `f` or when `probes == 0`.
pub fn gradcheck(
    target: &mut dyn DifferentiableScalar,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    if probes == 0 {
        return Err(Error::InvalidArgument("no probes".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let base = target.eval_with_grads()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck objective is {base}")));
    }
    let analytic: Vec<Tensor> = target.params().iter().map(|e| e.grad.clone()).collect();
    let names: Vec<String> = target.params().iter().map(|e| e.name.clone()).collect();
    let sizes: Vec<usize> = target.params().iter().map(|e| e.value.numel()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    let mut worst_tensor = String::new();

    for (ti, (name, &n)) in names.iter().zip(sizes.iter()).enumerate() {
        let coords: Vec<usize> = if probes >= n {
            (0..n).collect()
        } else {
            let mut chosen = Vec::with_capacity(probes);
            while chosen.len() < probes {
                let c = rng.gen_range(0..n);
                if !chosen.contains(&c) {
                    chosen.push(c);
                }
            }
            chosen
        };
        let mut tensor_worst = 0.0f64;
        for &c in &coords {
            let id = target.params().ids().nth(ti).expect("tensor index");
            let original = target.params().value(id).data()[c];

            target.params_mut().value_mut(id).data_mut()[c] = original + h;
            let plus = target.eval()?;
            target.params_mut().value_mut(id).data_mut()[c] = original - h;
            let minus = target.eval()?;
            target.params_mut().value_mut(id).data_mut()[c] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck probe of {name}[{c}] produced non-finite objective"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[ti].data()[c], numeric);
            tensor_worst = tensor_worst.max(err);
        }
        if tensor_worst >= worst {
            worst = tensor_worst;
            worst_tensor = name.clone();
        }
        per_tensor.push(TensorCheck {
            name: name.clone(),
            max_rel_err: tensor_worst,
            probes: coords.len(),
        });
    }
    Ok(GradcheckReport {
        per_tensor,
        worst,
        worst_tensor,
    })
}
