use std::collections::BTreeMap;

use crate::partition::ParamStore;

/// SGD with Nesterov momentum and L2 weight decay:
///
/// ```text
/// v' = mu * v + (g + wd * w)
/// w' = w - lr * (g + mu * v')
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nesterov {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Nesterov {
    pub fn step_slice(&self, w: &mut [f32], g: &[f32], v: &mut [f32]) {
        debug_assert!(w.len() == g.len() && w.len() == v.len());
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = self.momentum * *v + (g + self.weight_decay * *w);
            *w -= self.lr * (g + self.momentum * *v);
        }
    }
}

/// Per-parameter velocity buffers, created as zeros on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumBuffers {
    buffers: BTreeMap<String, Vec<f32>>,
}

impl MomentumBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    /// Applies one step to every parameter of `store`; `grad` yields the
    /// gradient of each parameter by name.
    pub fn step<'a>(&mut self, opt: &Nesterov, store: &mut ParamStore, mut grad: impl FnMut(&str) -> &'a [f32]) {
        for (name, p) in store.iter_mut() {
            let v = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.tensor.numel()]);
            opt.step_slice(p.tensor.data_mut(), grad(name), v);
        }
    }
}
