use std::collections::BTreeSet;

use super::forward::ModelState;
use super::params::Params;
use crate::error::{Error, Result};

fn check_grads(model: &ModelState, grads: &Params) -> Result<()> {
    let a = model.params.named();
    let b = grads.named();
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch("gradient structure".into()));
    }
    for (p, g) in a.iter().zip(b.iter()) {
        if p.tensor.shape() != g.tensor.shape() {
            return Err(Error::DimensionMismatch(format!("gradient for {}", p.name)));
        }
        if !g.tensor.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for {}", p.name)));
        }
    }
    Ok(())
}

fn selected(layer: Option<usize>, filter: Option<&BTreeSet<usize>>) -> bool {
    match (filter, layer) {
        (None, _) => true,
        (Some(f), Some(l)) => f.contains(&l),
        (Some(_), None) => false,
    }
}

/// `params <- params - lr * grad`, restricted to `layer_filter` when given.
pub fn sgd_step(
    model: &ModelState,
    grads: &Params,
    lr: f64,
    layer_filter: Option<&BTreeSet<usize>>,
) -> Result<ModelState> {
    check_grads(model, grads)?;
    let mut out = model.clone();
    if lr == 0.0 {
        return Ok(out);
    }
    out.params.zip_mut(grads, |layer, p, g| {
        if selected(layer, layer_filter) {
            p.zip_apply(g, |w, gi| *w -= lr * gi);
        }
    });
    Ok(out)
}

/// Adam moments for every tensor. Used for pretraining and the fine-tuning attacks.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(like: &Params) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(
        &mut self,
        model: &mut ModelState,
        grads: &Params,
        lr: f64,
        layer_filter: Option<&BTreeSet<usize>>,
    ) -> Result<()> {
        check_grads(model, grads)?;
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        self.m.zip_mut(grads, |layer, m, g| {
            if selected(layer, layer_filter) {
                m.zip_apply(g, |mi, gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            }
        });
        self.v.zip_mut(grads, |layer, v, g| {
            if selected(layer, layer_filter) {
                v.zip_apply(g, |vi, gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            }
        });
        let m_all = self.m.named();
        let v_all = self.v.named();
        let mut it = m_all.iter().zip(v_all.iter());
        model.params.visit_mut(|p| {
            let (m, v) = it.next().expect("same structure");
            if selected(p.layer, layer_filter) {
                for ((w, mi), vi) in p.tensor.iter_mut().zip(m.tensor.iter()).zip(v.tensor.iter()) {
                    *w -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                }
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::config::ModelConfig;
    use crate::substrate::grad::{loss_and_grad, TokenNll, Wrt};

    fn small() -> ModelState {
        ModelState::new(ModelConfig { vocab_size: 16, d_model: 8, n_layers: 6, n_heads: 2, d_ff: 8, max_seq: 4, seed: 9 })
            .unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        let m = small();
        let g = m.params.clone();
        assert_eq!(sgd_step(&m, &g, 0.0, None).unwrap(), m);
    }

    #[test]
    fn layer_filter_leaves_other_tensors_bitwise() {
        let m = small();
        let mut g = m.params.clone();
        g.visit_mut(|t| t.tensor.fill(1.0));
        let f: BTreeSet<usize> = [5].into();
        let out = sgd_step(&m, &g, 0.1, Some(&f)).unwrap();
        for (a, b) in m.params.named().iter().zip(out.params.named().iter()) {
            if a.layer == Some(5) {
                assert_ne!(a.tensor, b.tensor, "{}", a.name);
            } else {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let m = small();
        let mut g = m.params.zeros_like();
        g.head[(0, 0)] = f64::NAN;
        assert!(matches!(sgd_step(&m, &g, 0.1, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn small_step_decreases_loss() {
        let m = small();
        let toks: &[usize] = &[1, 2, 3];
        let obj = TokenNll { position: 2, targets: vec![4] };
        let (l0, g) = loss_and_grad(&m, &[toks], &obj, &Wrt::Params(None)).unwrap();
        let next = sgd_step(&m, g.params().unwrap(), 1e-2, None).unwrap();
        let (l1, _) = loss_and_grad(&next, &[toks], &obj, &Wrt::Params(None)).unwrap();
        assert!(l1 < l0);
    }
}
