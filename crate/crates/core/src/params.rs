//! Named parameter storage.
//!
//! Parameters are stored as `f32` (the checkpoint precision) and widened to
//! `f64` for every forward/backward pass; optimizer updates are computed in
//! `f64` and rounded back.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Array2<f32>>,
}

impl Params {
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f32>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn to_f64(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| t.mapv(f64::from)).collect()
    }

    /// True when every entry is bitwise identical.
    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Loads parameter values as graph leaves, in storage order.
pub fn load_into(g: &mut Graph, values: &[Mat]) -> Vec<Var> {
    values.iter().map(|v| g.leaf(v.clone())).collect()
}

/// Seeded initializer handing out tensors in a fixed order.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f32> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng) as f32)
    }

    pub fn zeros(rows: usize, cols: usize) -> Array2<f32> {
        Array2::zeros((rows, cols))
    }

    pub fn ones(rows: usize, cols: usize) -> Array2<f32> {
        Array2::ones((rows, cols))
    }
}
