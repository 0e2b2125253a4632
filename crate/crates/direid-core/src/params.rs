//! Named parameter storage with Adam optimization state.
//!
//! Every learnable tensor in the system lives in a [`ParamStore`] under a
//! dotted name whose first segment identifies the owning network
//! (`ec.`, `g.`, `dd.`, ...). Prefixes are how trainers express policy:
//! which parameters join a tape as trainable leaves, and which learning
//! rate each one receives. The store is ordered by name, so iteration,
//! serialization, and update application are all deterministic.
//!
//! Adam state (first/second moments and the per-parameter step count) is
//! kept beside each value so checkpoints capture the optimizer mid-run and
//! resumed training continues bit-for-bit.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// One learnable tensor plus its Adam state.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    /// First-moment estimate.
    pub m: ArrayD<f64>,
    /// Second-moment estimate.
    pub v: ArrayD<f64>,
    /// Number of Adam updates applied to this tensor. Bias correction uses
    /// this per-parameter count, so tensors that sit out some steps (e.g.
    /// the self-degradation encoder during cross-phase updates) are not
    /// under-corrected.
    pub steps: u64,
}

impl Param {
    fn fresh(value: ArrayD<f64>) -> Self {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            m,
            v,
            steps: 0,
        }
    }
}

/// Adam hyperparameters (learning rates are supplied per step, per name).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered map of named parameters.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a new tensor. Names are unique; re-registering is a bug.
    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name: {name}")));
        }
        self.params.insert(name.to_string(), Param::fresh(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter: {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&ArrayD<f64>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a tensor's value; the shape must match the registered one.
    pub fn set_value(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let param = self.get_mut(name)?;
        if param.value.shape() != value.shape() {
            return Err(Error::State(format!(
                "parameter {name}: shape {:?} cannot replace {:?}",
                value.shape(),
                param.value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, p)| (k.as_str(), p))
    }

    /// Names under a dotted prefix (e.g. `"ec."`).
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// Total element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Enters every parameter into `tape` — as a trainable leaf when
    /// `trainable(name)` holds, as a constant otherwise. Constants cost no
    /// backward bookkeeping, so freezing a network is also a speed-up.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, param) in &self.params {
            let var = if trainable(name) {
                tape.leaf(param.value.clone())
            } else {
                tape.constant(param.value.clone())
            };
            vars.insert(name.clone(), var);
        }
        Bound { vars }
    }

    /// Applies one Adam update per entry of `grads`. Parameters without a
    /// gradient are untouched (their step counts do not advance). Returns
    /// the number of tensors updated.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, ArrayD<f64>>,
        adam: &AdamConfig,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<usize> {
        for (name, grad) in grads {
            let param = self.get(name)?;
            if param.value.shape() != grad.shape() {
                return Err(Error::State(format!(
                    "gradient for {name}: shape {:?} does not match parameter {:?}",
                    grad.shape(),
                    param.value.shape()
                )));
            }
        }
        let mut updated = 0;
        for (name, grad) in grads {
            let lr = lr_for(name);
            let param = self.params.get_mut(name).expect("validated above");
            param.steps += 1;
            let t = param.steps as i32;
            let bc1 = 1.0 - adam.beta1.powi(t);
            let bc2 = 1.0 - adam.beta2.powi(t);
            ndarray::Zip::from(&mut param.value)
                .and(&mut param.m)
                .and(&mut param.v)
                .and(grad)
                .for_each(|value, m, v, &g| {
                    *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
                    *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *value -= lr * m_hat / (v_hat.sqrt() + adam.eps);
                });
            updated += 1;
        }
        Ok(updated)
    }
}

/// Tape handles for one binding of a [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for a parameter. Panics on an unknown name: lookups use
    /// compile-time name constants, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
    }

    /// Collects named gradients from a completed backward sweep. Only
    /// parameters that actually received a gradient appear.
    pub fn gradients(
        &self,
        tape: &Tape,
        grads: &[Option<ArrayD<f64>>],
    ) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if tape.requires_grad(*var) {
                if let Some(g) = grads.get(var.0).and_then(Option::as_ref) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// He-style normal initialization: std = √(gain / fan_in).
pub fn scaled_normal(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> ArrayD<f64> {
    assert!(fan_in > 0, "fan_in must be positive");
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng))
        .collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product agreement")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::IxDyn;

    fn arr(values: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap()
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("a.w", arr(&[1.0])).unwrap();
        assert!(store.insert("a.w", arr(&[2.0])).is_err());
    }

    #[test]
    fn set_value_checks_shape() {
        let mut store = ParamStore::new();
        store.insert("a.w", arr(&[1.0, 2.0])).unwrap();
        assert!(store.set_value("a.w", arr(&[1.0])).is_err());
        store.set_value("a.w", arr(&[3.0, 4.0])).unwrap();
        assert_eq!(store.value("a.w").unwrap()[[0]], 3.0);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // With a single gradient g: m̂ = g, v̂ = g², so the step is
        // lr · g / (|g| + eps) ≈ lr · sign(g).
        let mut store = ParamStore::new();
        store.insert("p", arr(&[2.0, -1.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), arr(&[3.0, -0.5]));
        let adam = AdamConfig::default();
        let n = store.adam_step(&grads, &adam, |_| 0.1).unwrap();
        assert_eq!(n, 1);
        let p = store.get("p").unwrap();
        assert!((p.value[[0]] - 1.9).abs() < 1e-8);
        assert!((p.value[[1]] - (-0.9)).abs() < 1e-8);
        assert_eq!(p.steps, 1);
    }

    #[test]
    fn missing_gradients_leave_parameters_untouched() {
        let mut store = ParamStore::new();
        store.insert("a", arr(&[1.0])).unwrap();
        store.insert("b", arr(&[5.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), arr(&[1.0]));
        store
            .adam_step(&grads, &AdamConfig::default(), |_| 0.1)
            .unwrap();
        let b = store.get("b").unwrap();
        assert_eq!(b.value[[0]], 5.0);
        assert_eq!(b.steps, 0);
    }

    #[test]
    fn step_counts_are_per_parameter() {
        // Update "a" twice and "b" once; b's single update must equal a's
        // first (same bias correction at t = 1).
        let mut store = ParamStore::new();
        store.insert("a", arr(&[0.0])).unwrap();
        store.insert("b", arr(&[0.0])).unwrap();
        let adam = AdamConfig::default();
        let mut ga = BTreeMap::new();
        ga.insert("a".to_string(), arr(&[1.0]));
        store.adam_step(&ga, &adam, |_| 0.1).unwrap();
        let after_first_a = store.get("a").unwrap().value[[0]];
        store.adam_step(&ga, &adam, |_| 0.1).unwrap();
        let mut gb = BTreeMap::new();
        gb.insert("b".to_string(), arr(&[1.0]));
        store.adam_step(&gb, &adam, |_| 0.1).unwrap();
        assert_eq!(store.get("a").unwrap().steps, 2);
        assert_eq!(store.get("b").unwrap().steps, 1);
        assert_eq!(store.get("b").unwrap().value[[0]], after_first_a);
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("p", arr(&[1.0, 2.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), arr(&[1.0]));
        assert!(store
            .adam_step(&grads, &AdamConfig::default(), |_| 0.1)
            .is_err());
    }

    #[test]
    fn bind_respects_trainability_and_collects_only_live_gradients() {
        let mut store = ParamStore::new();
        store.insert("hot.w", arr(&[1.0, 2.0])).unwrap();
        store.insert("cold.w", arr(&[3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |name| name.starts_with("hot."));
        let h = bound.var("hot.w");
        let c = bound.var("cold.w");
        let s = tape.add(h, c);
        let sq = tape.mul(s, s);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let named = bound.gradients(&tape, &grads);
        assert!(named.contains_key("hot.w"));
        assert!(!named.contains_key("cold.w"));
    }

    #[test]
    fn per_name_learning_rates_apply() {
        let mut store = ParamStore::new();
        store.insert("fast.w", arr(&[0.0])).unwrap();
        store.insert("slow.w", arr(&[0.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("fast.w".to_string(), arr(&[1.0]));
        grads.insert("slow.w".to_string(), arr(&[1.0]));
        store
            .adam_step(&grads, &AdamConfig::default(), |name| {
                if name.starts_with("slow.") {
                    0.01
                } else {
                    0.1
                }
            })
            .unwrap();
        let fast = store.get("fast.w").unwrap().value[[0]];
        let slow = store.get("slow.w").unwrap().value[[0]];
        assert!((fast / slow - 10.0).abs() < 1e-6);
    }

    #[test]
    fn scaled_normal_is_deterministic_per_seed() {
        let mut r1 = derive_rng(7, "init", &[]);
        let mut r2 = derive_rng(7, "init", &[]);
        let a = scaled_normal(&mut r1, &[4, 3], 3, 2.0);
        let b = scaled_normal(&mut r2, &[4, 3], 3, 2.0);
        assert_eq!(a, b);
        let mut r3 = derive_rng(8, "init", &[]);
        let c = scaled_normal(&mut r3, &[4, 3], 3, 2.0);
        assert_ne!(a, c);
    }
}
