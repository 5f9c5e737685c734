//! Persistent named parameters.
//!
//! Parameters live outside any [`super::Graph`]: each training step leases
//! them into a fresh graph with [`super::Graph::param`], and backward flushes
//! gradients into `Param::grad`. The optimizer reads and zeroes those
//! accumulators between steps.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Additive gradient accumulator, same length as `values`.
    pub grad: Vec<f64>,
    pub trainable: bool,
    /// Whether the optimizer applies weight decay to this parameter.
    pub weight_decay: bool,
}

pub type ParamRef = Rc<RefCell<Param>>;

impl Param {
    pub fn new(name: &str, values: Vec<f64>, rows: usize, cols: usize, trainable: bool) -> Self {
        assert_eq!(values.len(), rows * cols, "param {name}: bad value count");
        let n = values.len();
        Param {
            name: name.to_string(),
            values,
            rows,
            cols,
            grad: vec![0.0; n],
            trainable,
            weight_decay: trainable,
        }
    }

    pub fn zeros(name: &str, rows: usize, cols: usize, trainable: bool) -> Self {
        Param::new(name, vec![0.0; rows * cols], rows, cols, trainable)
    }

    pub fn ones(name: &str, rows: usize, cols: usize, trainable: bool) -> Self {
        Param::new(name, vec![1.0; rows * cols], rows, cols, trainable)
    }

    /// Standard-normal draws scaled by `std`, in a fixed element order so a
    /// given RNG state always produces identical parameters.
    pub fn gaussian(
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Self {
        let values = (0..rows * cols).map(|_| std * normal(rng)).collect();
        Param::new(name, values, rows, cols, trainable)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Box-Muller standard normal draw. Uses a fixed transform so sampled
/// parameters are reproducible bit-for-bit from the RNG seed.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Ordered registry of parameters with unique names. Iteration order is
/// registration order, which fixes checkpoint layout and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<ParamRef>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, param: Param) -> ParamRef {
        assert!(
            self.get(&param.name).is_none(),
            "duplicate parameter name {}",
            param.name
        );
        let r = Rc::new(RefCell::new(param));
        self.params.push(Rc::clone(&r));
        r
    }

    pub fn get(&self, name: &str) -> Option<ParamRef> {
        self.params
            .iter()
            .find(|p| p.borrow().name == name)
            .map(Rc::clone)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamRef> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.borrow_mut().zero_grad();
        }
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.borrow().trainable)
            .map(|p| p.borrow().len())
            .sum()
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamRef> {
        self.params
            .iter()
            .filter(|p| {
                let b = p.borrow();
                b.trainable && b.name.starts_with(prefix)
            })
            .map(Rc::clone)
            .collect()
    }
}
