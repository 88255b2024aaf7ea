use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients to this global L2 norm when larger.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: None,
        }
    }
}

/// First and second moments per parameter, plus the number of applied steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, params: &Params<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .ids()
                .all(|id| self.m[id.index()].len() == params.get(id).len() && self.v[id.index()].len() == params.get(id).len())
    }
}

pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// One AdamW update. Decay is decoupled (`w -= lr·wd·w`) and applies only to
/// weight matrices. A non-finite gradient rejects the whole step and leaves
/// parameters and state untouched.
pub fn adamw_step<T: Real>(
    params: &mut Params<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::shape("gradients and optimizer state must mirror the parameters"));
    }
    for id in params.ids() {
        let g = &grads[id.index()];
        if g.len() != params.get(id).len() {
            return Err(Error::shape(format!("gradient size mismatch for {}", params.name(id))));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in {} at element {i}; step rejected",
                params.name(id)
            )));
        }
    }
    let clip = match cfg.grad_clip {
        Some(c) => {
            let n = global_norm(grads);
            if n > c && n > 0.0 {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let decay = params.kind(id).decays() && cfg.weight_decay != 0.0;
        let i = id.index();
        let w = params.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..w.len() {
            let gk = grads[i][k].f64() * clip;
            let mut wk = w[k].f64();
            if decay {
                wk -= lr * cfg.weight_decay * wk;
            }
            let mk = b1 * m[k].f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].f64() + (1.0 - b2) * gk * gk;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            wk -= lr * (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
            w[k] = T::of(wk);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;
    use crate::numerics::Tensor;

    fn one(kind: ParamKind, w: f64) -> Params<f64> {
        let mut p = Params::default();
        p.push("w", kind, Tensor::from_f64(&[w], &[1]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = one(ParamKind::Weight, 0.7);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut p, &[vec![0.0]], &mut s, 0.1, &cfg).unwrap();
        }
        assert_eq!(p.get(p.ids().next().unwrap()).data(), &[0.7]);
    }

    #[test]
    fn single_scalar_matches_hand_computation() {
        let mut p = one(ParamKind::Weight, 1.0);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &[vec![0.5]], &mut s, 0.1, &cfg).unwrap();
        // decay: 1 − 0.1·0.1·1 = 0.99; m = 0.05, v = 0.0125;
        // m̂ = 0.5, v̂ = 0.25; step = 0.1·0.5/(0.5 + 1e-8)
        let want = (1.0 - 0.1 * 0.1) - 0.1 * 0.5 / (0.5 + 1e-8);
        let got = p.get(p.ids().next().unwrap()).data()[0];
        assert_eq!(got, want);
        assert!((s.m[0][0] - 0.05).abs() < 1e-15);
        assert!((s.v[0][0] - 0.0125).abs() < 1e-15);

        adamw_step(&mut p, &[vec![-0.25]], &mut s, 0.05, &cfg).unwrap();
        let w1 = want * (1.0 - 0.05 * 0.1);
        let m2 = 0.9 * 0.05 + 0.1 * -0.25;
        let v2: f64 = 0.95 * 0.0125 + 0.05 * 0.0625;
        let step = 0.05 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9025)).sqrt() + 1e-8);
        assert!((p.get(p.ids().next().unwrap()).data()[0] - (w1 - step)).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_weights_not_norms_or_biases() {
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        for (kind, want) in [(ParamKind::Weight, 2.0 * (1.0 - 0.01)), (ParamKind::Norm, 2.0), (ParamKind::Bias, 2.0)] {
            let mut p = one(kind, 2.0);
            let mut s = OptimizerState::new(&p);
            adamw_step(&mut p, &[vec![0.0]], &mut s, 0.1, &cfg).unwrap();
            assert!((p.get(p.ids().next().unwrap()).data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let mut p = one(ParamKind::Weight, 1.0);
        let mut s = OptimizerState::new(&p);
        let r = adamw_step(&mut p, &[vec![f64::NAN]], &mut s, 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Training(_))));
        assert_eq!(s.step, 0);
        assert_eq!(p.get(p.ids().next().unwrap()).data(), &[1.0]);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut a = one(ParamKind::Bias, 0.0);
        let mut b = one(ParamKind::Bias, 0.0);
        let (mut sa, mut sb) = (OptimizerState::new(&a), OptimizerState::new(&b));
        let clipped = AdamWConfig { grad_clip: Some(1.0), ..Default::default() };
        adamw_step(&mut a, &[vec![100.0]], &mut sa, 0.1, &clipped).unwrap();
        adamw_step(&mut b, &[vec![100.0]], &mut sb, 0.1, &AdamWConfig::default()).unwrap();
        // Adam's first step is scale-free; the moments show the clip
        assert!((sa.m[0][0] - 0.1).abs() < 1e-12);
        assert!((sb.m[0][0] - 10.0).abs() < 1e-12);
    }
}
