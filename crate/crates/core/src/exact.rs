//! Dense quadratic models for networks whose layers are all linear.
//!
//! With `LinearG` generators every divergence is `|z_k - a_k|^2 / 2`, so the
//! potential, the Euclidean losses and linear perturbations are all quadratic
//! in the stacked state `v = (z_1, ..., z_L)` of one sample. Joint inference
//! then reduces to one symmetric positive definite solve, which serves as the
//! exact reference for the block-coordinate solver and for the inequality
//! checks in [`crate::diagnostics`].

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::network::{ActivationState, NetworkParams};
use crate::potential::PotentialSpec;

/// `f(v) = v^T H v / 2 - q^T v + c`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl Quadratic {
    pub fn zeros(n: usize) -> Self {
        Self {
            hess: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            constant: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    /// `self + scale * other`.
    pub fn plus(mut self, scale: f64, other: &Quadratic) -> Self {
        self.hess += &other.hess * scale;
        self.lin += &other.lin * scale;
        self.constant += scale * other.constant;
        self
    }

    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.hess * v)) - self.lin.dot(v) + self.constant
    }

    /// Unique minimizer and minimum. Fails with `NonPositiveCurvature` (carrying
    /// the smallest Hessian eigenvalue) when the quadratic is not strongly convex.
    pub fn minimize(&self) -> Result<(DVector<f64>, f64)> {
        let sym = (&self.hess + self.hess.transpose()) * 0.5;
        match Cholesky::new(sym.clone()) {
            Some(chol) => {
                let v = chol.solve(&self.lin);
                let value = self.eval(&v);
                Ok((v, value))
            }
            None => {
                let eig = SymmetricEigen::new(sym);
                Err(Error::NonPositiveCurvature {
                    curvature: eig.eigenvalues.min(),
                })
            }
        }
    }

    /// Embeds a quadratic over `n` variables into a larger space at `offset`.
    pub fn embed(&self, total: usize, offset: usize) -> Quadratic {
        let n = self.dim();
        let mut out = Quadratic::zeros(total);
        out.hess.view_mut((offset, offset), (n, n)).copy_from(&self.hess);
        out.lin.rows_mut(offset, n).copy_from(&self.lin);
        out.constant = self.constant;
        out
    }
}

/// Layout of the stacked state for a network with linear layers only.
#[derive(Clone, Debug)]
pub struct LinearModel<'a> {
    params: &'a NetworkParams,
    spec: &'a PotentialSpec,
    offsets: Vec<usize>,
}

impl<'a> LinearModel<'a> {
    pub fn new(params: &'a NetworkParams, spec: &'a PotentialSpec) -> Result<Self> {
        spec.validate(params.arch())?;
        if !spec.is_linear() {
            return Err(Error::InvalidSpec(
                "exact joint inference requires linear generators in every layer".into(),
            ));
        }
        let dims = params.arch().layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in &dims[1..] {
            offsets.push(acc);
            acc += d;
        }
        offsets.push(acc);
        Ok(Self { params, spec, offsets })
    }

    pub fn num_units(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Offset of layer `k` in `1..=L` inside the stacked state.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k - 1]
    }

    fn dim(&self, k: usize) -> usize {
        self.offsets[k] - self.offsets[k - 1]
    }

    /// Potential of one sample as a quadratic in the stacked state.
    ///
    /// `U = sum_k gamma_k |z_k - W_{k-1} z_{k-1} - c_k|^2 / 2`, assembled as
    /// `(Mv - c)^T Gamma (Mv - c) / 2` with `M` block lower bidiagonal.
    pub fn potential(&self, x: ArrayView1<f64>) -> Quadratic {
        let n = self.num_units();
        let l = self.params.num_layers();
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut c = DVector::<f64>::zeros(n);
        let mut weight = DVector::<f64>::zeros(n);
        for k in 1..=l {
            let off = self.offset(k);
            let d = self.dim(k);
            let w = self.params.weight_into(k);
            for i in 0..d {
                m[(off + i, off + i)] = 1.0;
                weight[off + i] = self.spec.gamma_of(k);
            }
            if k == 1 {
                let a = w.dot(&x);
                for i in 0..d {
                    c[off + i] = a[i];
                }
            } else {
                let prev = self.offset(k - 1);
                for i in 0..d {
                    for j in 0..w.ncols() {
                        m[(off + i, prev + j)] = -w[(i, j)];
                    }
                }
            }
            if let Some(b) = self.params.bias_into(k) {
                for i in 0..d {
                    c[off + i] += b[i];
                }
            }
        }
        let gm = DMatrix::from_diagonal(&weight) * &m;
        let gc = weight.component_mul(&c);
        Quadratic {
            hess: m.transpose() * &gm,
            lin: m.transpose() * &gc,
            constant: 0.5 * c.dot(&gc),
        }
    }

    /// Euclidean loss `|z_L - t|^2 / 2` as a quadratic in the stacked state.
    pub fn output_loss(&self, target: ArrayView1<f64>) -> Quadratic {
        let n = self.num_units();
        let l = self.params.num_layers();
        let off = self.offset(l);
        let mut q = Quadratic::zeros(n);
        for (i, &t) in target.iter().enumerate() {
            q.hess[(off + i, off + i)] = 1.0;
            q.lin[off + i] = t;
        }
        q.constant = 0.5 * target.dot(&target);
        q
    }

    /// Linear term `sum_k g_k^T z_k`.
    pub fn linear(&self, g: &[ArrayView1<f64>]) -> Quadratic {
        let mut q = Quadratic::zeros(self.num_units());
        for (k, gk) in g.iter().enumerate() {
            let off = self.offset(k + 1);
            for (i, &v) in gk.iter().enumerate() {
                q.lin[off + i] = -v;
            }
        }
        q
    }

    pub fn pack(&self, layers: &[ArrayView1<f64>]) -> DVector<f64> {
        let mut v = DVector::zeros(self.num_units());
        for (k, z) in layers.iter().enumerate() {
            let off = self.offset(k + 1);
            for (i, &zi) in z.iter().enumerate() {
                v[off + i] = zi;
            }
        }
        v
    }

    pub fn unpack(&self, v: &DVector<f64>) -> Vec<Array1<f64>> {
        (1..=self.params.num_layers())
            .map(|k| Array1::from_iter(v.rows(self.offset(k), self.dim(k)).iter().copied()))
            .collect()
    }

    /// Stacks per-sample solutions into a batch state.
    pub fn assemble(&self, input: Array2<f64>, rows: &[Vec<Array1<f64>>]) -> ActivationState {
        let dims = self.params.arch().layer_dims();
        let layers = (0..self.params.num_layers())
            .map(|k| {
                let mut z = Array2::zeros((rows.len(), dims[k + 1]));
                for (i, r) in rows.iter().enumerate() {
                    z.row_mut(i).assign(&r[k]);
                }
                z
            })
            .collect();
        ActivationState { input, layers }
    }
}
