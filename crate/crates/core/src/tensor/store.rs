use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Scalar, Tape, Var};

/// Stable index of a parameter inside a [`ParamStore`]. Assigned in
/// registration order, which is fixed for a given model config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Owns every learnable array of the model plus per-parameter momentum
/// buffers. Names are unique and stable across runs of the same config.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    arrays: Vec<Array<F>>,
    momentum: Vec<Array<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            arrays: Vec::new(),
            momentum: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, array: Array<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let shape = array.shape().to_vec();
        self.names.push(name);
        self.arrays.push(array);
        self.momentum.push(Array::zeros(shape));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array<F> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<F> {
        &mut self.arrays[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn momentum(&self, id: ParamId) -> &Array<F> {
        &self.momentum[id.0]
    }

    pub fn momentum_mut(&mut self, id: ParamId) -> &mut Array<F> {
        &mut self.momentum[id.0]
    }

    pub fn param_and_momentum_mut(&mut self, id: ParamId) -> (&mut Array<F>, &mut Array<F>) {
        (&mut self.arrays[id.0], &mut self.momentum[id.0])
    }

    /// Register every parameter as a `requires_grad` leaf on a fresh tape.
    /// The returned vector is indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.arrays
            .iter()
            .map(|a| tape.leaf(a.clone(), true))
            .collect()
    }

    /// Same binding but with gradients disabled (evaluation passes).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.arrays
            .iter()
            .map(|a| tape.leaf(a.clone(), false))
            .collect()
    }
}

/// Deterministic parameter initializer: truncated normal (|z| <= 2 std) for
/// weights, zeros for biases, gains at one.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn trunc_normal<F: Scalar>(&mut self, shape: Vec<usize>) -> Array<F> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller, resampled past 2 sigma.
            let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = self.rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(F::from_f64(z * self.std));
            }
        }
        Array::new(shape, data).unwrap()
    }

    pub fn zeros<F: Scalar>(&mut self, shape: Vec<usize>) -> Array<F> {
        Array::zeros(shape)
    }

    pub fn ones<F: Scalar>(&mut self, shape: Vec<usize>) -> Array<F> {
        Array::full(shape, F::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_truncated() {
        let a: Array<f32> = Init::new(9, 0.02).trunc_normal(vec![64, 64]);
        let b: Array<f32> = Init::new(9, 0.02).trunc_normal(vec![64, 64]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-6));
    }

    #[test]
    fn names_resolve_back_to_ids() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("vit.R.cls", Array::zeros(vec![1, 4]));
        assert_eq!(s.by_name("vit.R.cls"), Some(id));
        assert_eq!(s.by_name("nope"), None);
    }
}
