use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Power iterations run per training-mode forward pass (state is warm-started).
pub const TRAIN_POWER_ITERS: usize = 1;

/// Persistent singular-vector estimates for one weight.
///
/// The weight is viewed as a matrix with its leading dimension as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub power_iters: usize,
}

fn normalized<T: Scalar>(mut x: Vec<T>) -> Result<Vec<T>> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::invalid("spectral normalization of a zero (or non-finite) weight"));
    }
    x.iter_mut().for_each(|v| *v /= norm);
    Ok(x)
}

fn matrix_dims<T: Scalar>(w: &[T], rows: usize) -> usize {
    w.len() / rows
}

impl<T: Scalar> SpectralState<T> {
    /// Starts from the left vector `u0` (normalized here) and derives `v`.
    pub fn new(w: &Tensor<T>, u0: Vec<T>, power_iters: usize) -> Result<Self> {
        let rows = w.shape()[0];
        if u0.len() != rows || power_iters == 0 {
            return Err(Error::invalid("spectral state needs one u entry per weight row and at least one iteration"));
        }
        let u = normalized(u0)?;
        let v = normalized(mat_t_vec(w.values(), rows, &u))?;
        Ok(SpectralState { u, v, power_iters })
    }

    /// `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖`.
    pub fn iterate(&mut self, w: &[T]) -> Result<()> {
        let rows = self.u.len();
        self.v = normalized(mat_t_vec(w, rows, &self.u))?;
        self.u = normalized(mat_vec(w, rows, &self.v))?;
        Ok(())
    }

    /// `uᵀ W v`.
    pub fn sigma(&self, w: &[T]) -> T {
        let wv = mat_vec(w, self.u.len(), &self.v);
        self.u.iter().zip(&wv).map(|(&a, &b)| a * b).sum()
    }

    /// `u vᵀ` flattened row-major; `σ = sum(W ⊙ u vᵀ)`.
    pub fn outer(&self) -> Vec<T> {
        self.u.iter().flat_map(|&a| self.v.iter().map(move |&b| a * b)).collect()
    }

    /// Normalized weight inside a graph. Runs `power_iters` iterations first when `iterate`.
    /// Gradient flows through σ with `u`, `v` held constant.
    pub fn bind(&mut self, g: &mut Graph<T>, w: Var, iterate: bool) -> Result<Var> {
        if iterate {
            let values = g.value(w)?.to_vec();
            for _ in 0..self.power_iters {
                self.iterate(&values)?;
            }
        }
        let sigma = g.dot_const(w, self.outer())?;
        if !(g.scalar(sigma)? > T::zero()) {
            return Err(Error::invalid("spectral estimate is not positive"));
        }
        g.div_scalar(w, sigma)
    }
}

fn mat_vec<T: Scalar>(w: &[T], rows: usize, v: &[T]) -> Vec<T> {
    let cols = matrix_dims(w, rows);
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum()).collect()
}

fn mat_t_vec<T: Scalar>(w: &[T], rows: usize, u: &[T]) -> Vec<T> {
    let cols = matrix_dims(w, rows);
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        let ur = u[r];
        out.iter_mut().zip(&w[r * cols..(r + 1) * cols]).for_each(|(o, &a)| *o += ur * a);
    }
    out
}

/// Runs `s.power_iters` power iterations and returns `(W / σ̂, updated state)`.
pub fn spectral_normalize<T: Scalar>(w: &Tensor<T>, s: &SpectralState<T>) -> Result<(Tensor<T>, SpectralState<T>)> {
    let mut next = s.clone();
    for _ in 0..s.power_iters {
        next.iterate(w.values())?;
    }
    let sigma = next.sigma(w.values());
    Ok((w.map(|v| v / sigma), next))
}
