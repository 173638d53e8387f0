use std::collections::HashMap;

use rand::Rng;

use super::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        let grad = Mat::zeros(value.dim());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    /// Weight matrix `fan_in × fan_out`, uniform in ±1/√fan_in.
    pub fn add_fan_in<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), fill))
    }

    /// Small random values, used for embeddings and mask tokens.
    pub fn add_normalish<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Replaces the stored gradients with the contents of `buffer`.
    pub fn set_grads(&mut self, buffer: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&buffer.grads) {
            match g {
                Some(g) => p.grad.assign(g),
                None => p.grad.fill(0.0),
            }
        }
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: vec![None; self.params.len()],
        }
    }
}

/// Sparse per-parameter gradient accumulator, one per worker.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    grads: Vec<Option<Mat>>,
}

impl GradBuffer {
    pub fn add(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.as_standard_layout().into_owned()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Adds another buffer into this one.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    /// Gradient of parameter `id` as a dense matrix shaped like `store`'s value.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Mat {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(store.value(id).dim()))
    }
}
