//! Parameter update rules: Adam and SGD with momentum.

use crate::tensor::{ParamSet, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(crate::Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Per-parameter moment buffers.
pub struct OptimizerState<F = f32> {
    kind: OptimizerKind,
    step: u64,
    /// First moment (Adam) or velocity (SGD momentum).
    m: ParamSet<F>,
    /// Second moment; unused by SGD.
    v: Option<ParamSet<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(kind: OptimizerKind, params: &ParamSet<F>) -> Self {
        OptimizerState {
            kind,
            step: 0,
            m: params.zeros_like(),
            v: (kind == OptimizerKind::Adam).then(|| params.zeros_like()),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update in place. `momentum` only affects SGD.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64, momentum: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                let v = self.v.as_mut().expect("adam state");
                for (((_, p), (_, m)), ((_, vv), (_, g))) in params
                    .iter_mut()
                    .zip(self.m.iter_mut())
                    .zip(v.iter_mut().zip(grads.iter()))
                {
                    ndarray::Zip::from(p).and(m).and(vv).and(g).for_each(|p, m, vv, g| {
                        let gf = g.into_f64();
                        let mf = ADAM_BETA1 * m.into_f64() + (1.0 - ADAM_BETA1) * gf;
                        let vf = ADAM_BETA2 * vv.into_f64() + (1.0 - ADAM_BETA2) * gf * gf;
                        *m = F::from_f64(mf);
                        *vv = F::from_f64(vf);
                        let update = (mf / bc1) / ((vf / bc2).sqrt() + ADAM_EPS);
                        *p = F::from_f64(p.into_f64() - lr * update);
                    });
                }
            }
            OptimizerKind::Sgd => {
                for ((_, p), ((_, m), (_, g))) in
                    params.iter_mut().zip(self.m.iter_mut().zip(grads.iter()))
                {
                    ndarray::Zip::from(p).and(m).and(g).for_each(|p, m, g| {
                        let vel = momentum * m.into_f64() + g.into_f64();
                        *m = F::from_f64(vel);
                        *p = F::from_f64(p.into_f64() - lr * vel);
                    });
                }
            }
        }
    }
}

/// Scales gradients so their global norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = grads.norm2();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn one_param(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", ndarray::ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = one_param(&[0.0]);
        let g = one_param(&[1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, &p);
        opt.step(&mut p, &g, 0.1, 0.9);
        assert!((p.get("w").unwrap()[0] + 0.1).abs() < 1e-12); // v=1
        opt.step(&mut p, &g, 0.1, 0.9);
        // v = 0.9*1 + 1 = 1.9; w = -0.1 - 0.19
        assert!((p.get("w").unwrap()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // With bias correction, the first Adam step is lr * g/(|g| + eps').
        let mut p = one_param(&[0.0, 0.0]);
        let g = one_param(&[1.0, -3.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &g, 0.01, 0.0);
        let w = p.get("w").unwrap();
        assert!((w[0] + 0.01).abs() < 1e-6, "{}", w[0]);
        assert!((w[1] - 0.01).abs() < 1e-6, "{}", w[1]);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // minimize (w-3)^2: gradient 2(w-3)
        let mut p = one_param(&[0.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &p);
        for _ in 0..2000 {
            let w = p.get("w").unwrap()[0];
            let g = one_param(&[2.0 * (w - 3.0)]);
            opt.step(&mut p, &g, 0.05, 0.0);
        }
        assert!((p.get("w").unwrap()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn clip_rescales_only_when_needed() {
        let mut g = one_param(&[3.0, 4.0]);
        let pre = clip_global_norm(&mut g, 10.0);
        assert_eq!(pre, 5.0);
        assert_eq!(g.get("w").unwrap()[0], 3.0);
        let pre = clip_global_norm(&mut g, 0.1);
        assert_eq!(pre, 5.0);
        assert!((g.norm2() - 0.1).abs() < 1e-12);
    }
}
