use super::{Gradients, Tape, Tensor, TensorError, Var};

/// Per-parameter gradients detached from a tape; `None` where nothing flowed.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters recorded as leaves on one tape, aligned with their [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable tensor.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Freezes or unfreezes one tensor.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.tensors[id.0].set_requires_grad(on);
    }

    /// Records every tensor on `tape`. With `trainable = false` all leaves
    /// are constants (no gradients flow into them).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable && t.requires_grad() {
                    tape.param(t)
                } else {
                    let mut c = t.clone();
                    c.set_requires_grad(false);
                    tape.leaf(&c)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds `scale * grad` for every bound tensor into its gradient slot.
    pub fn accumulate(
        &mut self,
        bound: &Bound,
        grads: &Gradients,
        scale: f64,
    ) -> Result<(), TensorError> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if !t.requires_grad() {
                continue;
            }
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g, scale)?,
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros, 0.0)?;
                }
            }
        }
        Ok(())
    }

    /// Detaches the gradients of every bound tensor from a tape.
    pub fn grads_of(&self, bound: &Bound, grads: &Gradients) -> ParamGrads {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| if t.requires_grad() { grads.get(v).map(<[f64]>::to_vec) } else { None })
            .collect()
    }

    /// Adds `scale * g` into the gradient slots, in parameter order.
    pub fn accumulate_flat(&mut self, g: &ParamGrads, scale: f64) -> Result<(), TensorError> {
        for (t, g) in self.tensors.iter_mut().zip(g) {
            if let (true, Some(g)) = (t.requires_grad(), g) {
                t.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Flat copy of all gradient slots (zeros where unset).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub(crate) fn push_raw(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }
}
