use std::collections::HashMap;

use crate::{Gradients, NumError, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Ordered, uniquely named parameter tensors plus optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    adam: Option<Adam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::Invalid {
                op: "param_store",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.adam = None;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn optimizer(&self) -> Option<&Adam> {
        self.adam.as_ref()
    }

    /// Record every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Record every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Bound { store: self, vars }
    }

    /// Address existing tape variables by parameter name; `vars` follows
    /// the store's insertion order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(NumError::Invalid {
                op: "bind_vars",
                msg: format!("{} vars for {} params", vars.len(), self.tensors.len()),
            });
        }
        Ok(Bound { store: self, vars })
    }

    /// Tensors in insertion order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// One Adam update with bias correction. `grads` is aligned with the
    /// store's insertion order.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(NumError::Invalid {
                op: "adam_step",
                msg: format!("{} grads for {} params", grads.len(), self.tensors.len()),
            });
        }
        for (t, g) in self.tensors.iter().zip(grads) {
            if t.shape() != g.shape() {
                return Err(NumError::Shape {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let adam = self.adam.get_or_insert_with(|| Adam {
            m: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        });
        adam.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(adam.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(adam.t as i32);
        for ((t, g), (m, v)) in self
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
        {
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Replace every tensor by its nearest `f32` value.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Total number of scalar parameters.
pub fn count_params(store: &ParamStore) -> usize {
    store.tensors.iter().map(Tensor::len).sum()
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    /// Gradients in store order; parameters that did not influence the loss
    /// get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.store.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_params_sums_elements() {
        let mut s = ParamStore::new();
        assert_eq!(count_params(&s), 0);
        s.insert("a", Tensor::zeros(&[3, 4])).unwrap();
        s.insert("b", Tensor::zeros(&[5])).unwrap();
        assert_eq!(count_params(&s), 17);
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![0.5, -1.5, 2.0]))
            .unwrap();
        let before = s.get("w").unwrap().clone();
        for _ in 0..5 {
            s.adam_step(&[Tensor::zeros(&[3])], &AdamConfig::with_lr(0.1))
                .unwrap();
        }
        assert_eq!(s.get("w").unwrap(), &before);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        s.adam_step(&[Tensor::scalar(1.0)], &AdamConfig::with_lr(0.1))
            .unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert!((s.get("w").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::from_vec(vec![0.1, 0.2])).unwrap();
            for i in 0..10 {
                let g = Tensor::from_vec(vec![(i as f64).sin(), (i as f64).cos()]);
                s.adam_step(&[g], &AdamConfig::default()).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
