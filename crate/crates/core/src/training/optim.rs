//! Parameter-update rules. Optimizer state is kept in a flat vector matched
//! to the model's parameter visitation order, which is stable for a given
//! architecture.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierModel;
use crate::nn::{Param, Sequential};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

enum State {
    Sgd { velocity: Vec<ArrayD<f32>> },
    Adam { m: Vec<ArrayD<f32>>, v: Vec<ArrayD<f32>>, t: u64 },
}

pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    weight_decay: f32,
    betas: (f32, f32),
    eps: f32,
    state: Option<State>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f32, weight_decay: f32) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            state: None,
        }
    }

    pub fn with_betas(mut self, betas: (f32, f32)) -> Self {
        self.betas = betas;
        self
    }

    pub fn step(&mut self, model: &mut ClassifierModel, lr: f32) {
        self.step_visit(lr, &mut |f| model.visit_params(f));
    }

    /// Step over a bare network (GAN generator/discriminator training).
    pub fn step_net(&mut self, net: &mut Sequential, lr: f32) {
        self.step_visit(lr, &mut |f| net.visit_params_seq(f));
    }

    /// Step over any stable parameter visitation.
    pub fn step_visit(
        &mut self,
        lr: f32,
        visit: &mut dyn FnMut(&mut dyn FnMut(&mut Param)),
    ) {
        let mut idx = 0usize;
        if self.state.is_none() {
            let mut shapes = Vec::new();
            visit(&mut |p: &mut Param| shapes.push(p.value.raw_dim()));
            self.state = Some(match self.kind {
                OptimizerKind::SgdMomentum => State::Sgd {
                    velocity: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
                },
                OptimizerKind::Adam => State::Adam {
                    m: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
                    v: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
                    t: 0,
                },
            });
        }
        let state = self.state.as_mut().unwrap();
        let (momentum, wd, betas, eps) = (self.momentum, self.weight_decay, self.betas, self.eps);
        if let State::Adam { t, .. } = state {
            *t += 1;
        }
        visit(&mut |p| {
            apply(state, &mut idx, p, lr, momentum, wd, betas, eps);
        });
    }

}

#[allow(clippy::too_many_arguments)]
fn apply(
    state: &mut State,
    idx: &mut usize,
    p: &mut Param,
    lr: f32,
    momentum: f32,
    wd: f32,
    betas: (f32, f32),
    eps: f32,
) {
    match state {
        State::Sgd { velocity } => {
            let vel = &mut velocity[*idx];
            ndarray::Zip::from(vel)
                .and(&mut p.value)
                .and(&p.grad)
                .for_each(|v, w, &g| {
                    let g = g + wd * *w;
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                });
        }
        State::Adam { m, v, t } => {
            let (b1, b2) = betas;
            let bc1 = 1.0 - b1.powi(*t as i32);
            let bc2 = 1.0 - b2.powi(*t as i32);
            let mi = &mut m[*idx];
            let vi = &mut v[*idx];
            ndarray::Zip::from(mi)
                .and(vi)
                .and(&mut p.value)
                .and(&p.grad)
                .for_each(|m, v, w, &g| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
    *idx += 1;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{build_model, ArchitectureConfig};
    use crate::data::NormalizationSpec;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            0,
        )
        .unwrap();
        let before = model.snapshot_params();
        model.visit_params(&mut |p| p.grad.fill(1.0));
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.0, 0.0);
        opt.step(&mut model, 0.1);
        let after = model.snapshot_params();
        let n_params: usize = {
            let mut n = 0;
            model.visit_params(&mut |p| n += p.len());
            n
        };
        for i in 0..n_params {
            assert!((before[i] - 0.1 - after[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut model = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            0,
        )
        .unwrap();
        let before = model.snapshot_params();
        model.visit_params(&mut |p| p.grad.fill(0.5));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0);
        opt.step(&mut model, 0.01);
        let after = model.snapshot_params();
        // with constant gradient, the bias-corrected first Adam step is ~lr
        let n_params: usize = {
            let mut n = 0;
            model.visit_params(&mut |p| n += p.len());
            n
        };
        for i in 0..n_params {
            assert!((before[i] - after[i] - 0.01).abs() < 1e-4);
        }
    }
}
