//! AdamW with decoupled weight decay and the polynomial learning-rate
//! schedule that drives it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::WeightStore;
use crate::tensor::Tensor;

/// Polynomial decay from `lr_init` at step 0 to `lr_final` at `total_steps`:
/// `lr_final + (lr_init - lr_final) * (1 - step/total)^power`.
pub fn poly_lr(
    step: usize,
    total_steps: usize,
    lr_init: f64,
    lr_final: f64,
    power: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig("poly_lr: total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "poly_lr: step {step} past the schedule end {total_steps}"
        )));
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok(lr_final + (lr_init - lr_final) * frac.powf(power))
}

/// Parameters whose names mark them as normalization scales/shifts or biases
/// are excluded from weight decay.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias")
}

/// AdamW state: first/second moment estimates per tensor plus the step count
/// for bias correction. Decay is decoupled from the adaptive update.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every tensor in the store. Gradients are looked up by
    /// name; a missing entry counts as a zero gradient (the moments still
    /// decay and exempt-free tensors are still weight-decayed).
    pub fn step(
        &mut self,
        params: &mut WeightStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let zero: Vec<f32> = Vec::new();
        for (name, tensor) in params.iter_mut() {
            let g: &[f32] = match grads.get(name) {
                Some(t) => {
                    if t.shape() != tensor.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "gradient of {name}: {:?} vs parameter {:?}",
                            t.shape(),
                            tensor.shape()
                        )));
                    }
                    t.data()
                }
                None => &zero,
            };
            let n = tensor.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let decay = if decay_exempt(name) { 0.0 } else { self.weight_decay };
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g.get(i).copied().unwrap_or(0.0) as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut pi = *p as f64;
                pi -= lr * mhat / (vhat.sqrt() + self.eps);
                pi -= lr * decay * pi;
                *p = pi as f32;
            }
            if !tensor.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name} after update")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: Vec<f32>) -> WeightStore<f32> {
        let mut s = WeightStore::new();
        let n = vals.len();
        s.insert(name, Tensor::new(vec![n], vals));
        s
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 1e-2, 1e-4, 1.0).unwrap(), 1e-2);
        assert_eq!(poly_lr(100, 100, 1e-2, 1e-4, 1.0).unwrap(), 1e-4);
        let mid = poly_lr(50, 100, 1e-2, 1e-4, 1.0).unwrap();
        assert!((mid - (1e-4 + (1e-2 - 1e-4) * 0.5)).abs() <= 1e-15);
    }

    #[test]
    fn poly_monotone_nonincreasing() {
        for power in [0.5, 1.0, 2.0] {
            let mut prev = f64::INFINITY;
            for step in 0..=37 {
                let lr = poly_lr(step, 37, 3e-4, 1e-6, power).unwrap();
                assert!(lr <= prev);
                assert!(lr >= 1e-6 && lr <= 3e-4);
                prev = lr;
            }
        }
    }

    #[test]
    fn poly_rejects_step_past_end() {
        assert!(poly_lr(101, 100, 1e-2, 1e-4, 1.0).is_err());
        assert!(poly_lr(0, 0, 1e-2, 1e-4, 1.0).is_err());
    }

    #[test]
    fn zero_gradient_pure_decay() {
        // lr 1e-4, decay 0.01, param 1.0, zero grad: moments stay zero and
        // the update reduces the weight by exactly lr * decay.
        let mut store = store_with("enc.w.weight", vec![1.0]);
        let mut opt = AdamW::new(0.01);
        let grads =
            BTreeMap::from([("enc.w.weight".to_string(), Tensor::new(vec![1], vec![0.0f32]))]);
        opt.step(&mut store, &grads, 1e-4).unwrap();
        let got = store.get("enc.w.weight").unwrap().data()[0] as f64;
        // the parameter itself is stored in f32
        assert!((got - (1.0 - 1e-4 * 0.01)).abs() <= 1e-7, "got {got}");
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // no decay, constant gradient: bias-corrected first step is
        // lr * g / (|g| + eps) ~= lr, independent of |g|
        for g in [0.001f32, 1.0, 50.0] {
            let mut store = store_with("enc.w.weight", vec![0.0]);
            let mut opt = AdamW::new(0.0);
            let grads =
                BTreeMap::from([("enc.w.weight".to_string(), Tensor::new(vec![1], vec![g]))]);
            opt.step(&mut store, &grads, 1e-3).unwrap();
            let got = store.get("enc.w.weight").unwrap().data()[0] as f64;
            assert!((got + 1e-3).abs() <= 1e-6, "g {g}: got {got}");
        }
    }

    #[test]
    fn norm_params_and_biases_skip_decay() {
        for name in ["enc.stage0.norm.gamma", "enc.stage0.norm.beta", "dec.fuse.bias"] {
            let mut store = store_with(name, vec![1.0]);
            let mut opt = AdamW::new(0.5);
            let grads = BTreeMap::from([(name.to_string(), Tensor::new(vec![1], vec![0.0f32]))]);
            opt.step(&mut store, &grads, 1e-2).unwrap();
            assert_eq!(store.get(name).unwrap().data()[0], 1.0, "{name} was decayed");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_tensor_name() {
        let mut store = store_with("dec.fuse.weight", vec![1.0]);
        let mut opt = AdamW::new(0.0);
        let grads = BTreeMap::from([(
            "dec.fuse.weight".to_string(),
            Tensor::new(vec![1], vec![f32::NAN]),
        )]);
        let err = opt.step(&mut store, &grads, 1e-3).unwrap_err();
        assert!(err.to_string().contains("dec.fuse.weight"), "{err}");
        // parameters untouched on abort
        assert_eq!(store.get("dec.fuse.weight").unwrap().data()[0], 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (w - 3)^2; gradient 2(w - 3)
        let mut store = store_with("enc.w.weight", vec![0.0]);
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let w = store.get("enc.w.weight").unwrap().data()[0];
            let grads = BTreeMap::from([(
                "enc.w.weight".to_string(),
                Tensor::new(vec![1], vec![2.0 * (w - 3.0)]),
            )]);
            opt.step(&mut store, &grads, 1e-2).unwrap();
        }
        let w = store.get("enc.w.weight").unwrap().data()[0];
        assert!((w - 3.0).abs() <= 1e-2, "w {w}");
    }
}
