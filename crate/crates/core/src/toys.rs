//! Closed-form losses and games used to validate the differentiation and game code.
//!
//! Each type implements [`TwoBlockLoss`] with a hand-written reverse pass, so
//! the second-order machinery can be checked against analytic answers.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::diff::{backward, forward_tape, NetSpec, Scalar, Tape, TwoBlockLoss};
use crate::diff::Block;
use crate::rng::Rng;

fn lift<S: Scalar>(x: &[f64]) -> Vec<S> {
    x.iter().map(|&v| S::cst(v)).collect()
}

/// `½‖a‖² + ½‖b‖²`.
pub struct HalfSquaredNorm {
    pub len_a: usize,
    pub len_b: usize,
}

impl TwoBlockLoss for HalfSquaredNorm {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.len_a,
            Block::B => self.len_b,
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let mut total = S::zero();
        for (x, g) in a.iter().zip(ga.iter_mut()).chain(b.iter().zip(gb.iter_mut())) {
            total += (*x * *x).scale(0.5);
            *g = *x;
        }
        total
    }
}

/// `aᵀ M b` with `M` row-major `rows × cols`.
pub struct Bilinear {
    pub m: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl TwoBlockLoss for Bilinear {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.rows,
            Block::B => self.cols,
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let mut total = S::zero();
        for (i, row) in self.m.chunks_exact(self.cols).enumerate() {
            for (j, &mij) in row.iter().enumerate() {
                total += (a[i] * b[j]).scale(mij);
                ga[i] += b[j].scale(mij);
                gb[j] += a[i].scale(mij);
            }
        }
        total
    }
}

/// `Σ tanh(a_i)² + Σ exp(b_j / 2)`, with no cross terms.
pub struct Separable {
    pub len_a: usize,
    pub len_b: usize,
}

impl TwoBlockLoss for Separable {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.len_a,
            Block::B => self.len_b,
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let mut total = S::zero();
        for (x, g) in a.iter().zip(ga.iter_mut()) {
            let t = x.tanh();
            total += t * t;
            *g = (t * (S::cst(1.0) - t * t)).scale(2.0);
        }
        for (x, g) in b.iter().zip(gb.iter_mut()) {
            let e = x.scale(0.5).exp();
            total += e;
            *g = e.scale(0.5);
        }
        total
    }
}

/// `½ aᵀ Q a − cᵀ a` on block A (block B is empty).
pub struct Quadratic {
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    pub n: usize,
}

impl Quadratic {
    /// `Q = MᵀM + I`, which is symmetric positive definite.
    pub fn from_factor(m: &[f64], n: usize, c: &[f64]) -> Self {
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    s += m[k * n + i] * m[k * n + j];
                }
                q[i * n + j] = s;
            }
        }
        Self { q, c: c.to_vec(), n }
    }
}

impl TwoBlockLoss for Quadratic {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.n,
            Block::B => 0,
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], _b: &[S], ga: &mut [S], _gb: &mut [S]) -> S {
        let mut total = S::zero();
        for i in 0..self.n {
            let mut qa = S::zero();
            for j in 0..self.n {
                qa += a[j].scale(self.q[i * self.n + j]);
            }
            total += (a[i] * qa).scale(0.5) - a[i].scale(self.c[i]);
            ga[i] = qa - S::cst(self.c[i]);
        }
        total
    }
}

/// Dense solve of `A x = rhs` by Gaussian elimination with partial pivoting.
///
/// # Panics
/// If `A` is numerically singular.
pub fn solve_dense(a: &[f64], rhs: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut x = rhs.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        assert!(m[pivot * n + col].abs() > 1e-300, "singular matrix");
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
            x.swap(pivot, col);
        }
        for row in (col + 1)..n {
            let f = m[row * n + col] / m[col * n + col];
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            x[row] -= f * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = x[row];
        for k in (row + 1)..n {
            s -= m[row * n + k] * x[k];
        }
        x[row] = s / m[row * n + row];
    }
    x
}

/// Scalar two-player quadratic `½·aa·a² + ab·a·b + ½·bb·b² + la·a + lb·b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarQuadratic {
    pub aa: f64,
    pub ab: f64,
    pub bb: f64,
    pub la: f64,
    pub lb: f64,
}

impl TwoBlockLoss for ScalarQuadratic {
    fn block_len(&self, _block: Block) -> usize {
        1
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let (x, y) = (a[0], b[0]);
        ga[0] = x.scale(self.aa) + y.scale(self.ab) + S::cst(self.la);
        gb[0] = y.scale(self.bb) + x.scale(self.ab) + S::cst(self.lb);
        (x * x).scale(0.5 * self.aa) + (x * y).scale(self.ab) + (y * y).scale(0.5 * self.bb)
            + x.scale(self.la)
            + y.scale(self.lb)
    }
}

/// Two stacked MLPs, `f_a` then `g_b`, under a mean squared-error loss.
///
/// Every parameter of `a` couples to every parameter of `b`, so all second-order
/// blocks are dense.
pub struct ComposedMlpLoss {
    pub spec_a: NetSpec,
    pub spec_b: NetSpec,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl ComposedMlpLoss {
    pub fn random(rng: &mut Rng, input: usize, mid: usize, output: usize, samples: usize) -> Self {
        let spec_a = NetSpec::new(input, &[5], mid);
        let spec_b = NetSpec::new(mid, &[5], output);
        Self::random_with_specs(rng, spec_a, spec_b, samples)
    }

    pub fn random_with_specs(rng: &mut Rng, spec_a: NetSpec, spec_b: NetSpec, samples: usize) -> Self {
        let draw = |rng: &mut Rng, n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let inputs = (0..samples).map(|_| draw(rng, spec_a.input_dim)).collect();
        let targets = (0..samples).map(|_| draw(rng, spec_b.output_dim)).collect();
        Self { spec_a, spec_b, inputs, targets }
    }
}

impl TwoBlockLoss for ComposedMlpLoss {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.spec_a.param_count(),
            Block::B => self.spec_b.param_count(),
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let inv_n = 1.0 / self.inputs.len() as f64;
        let mut tape_a = Tape::default();
        let mut tape_b = Tape::default();
        let mut total = S::zero();
        let mut g_mid = vec![S::zero(); self.spec_b.input_dim];
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            forward_tape(&self.spec_a, a, &lift::<S>(x), &mut tape_a);
            let mid = tape_a.output(&self.spec_a).to_vec();
            forward_tape(&self.spec_b, b, &mid, &mut tape_b);
            let out = tape_b.output(&self.spec_b);
            let resid: Vec<S> = out.iter().zip(y).map(|(&o, &t)| o - S::cst(t)).collect();
            for &r in &resid {
                total += (r * r).scale(0.5 * inv_n);
            }
            let g_out: Vec<S> = resid.iter().map(|r| r.scale(inv_n)).collect();
            backward(&self.spec_b, b, &tape_b, &g_out, Some(gb), Some(&mut g_mid));
            backward(&self.spec_a, a, &tape_a, &g_mid, Some(ga), None);
        }
        total
    }
}

/// Bilevel ridge regression on learned tanh features.
///
/// Block `a` parameterizes the features `tanh(W x + c)` (a linear [`NetSpec`]
/// followed by `tanh`); block `b` is the read-out weight vector. The loss is
/// `mean ½(bᵀφ_a(x) − y)² + ½·ridge_b‖b‖² + ½·ridge_a‖a‖²`, which is strongly
/// convex in `b` for `ridge_b > 0`.
pub struct RidgeFeatures {
    pub feature_spec: NetSpec,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub ridge_a: f64,
    pub ridge_b: f64,
}

impl RidgeFeatures {
    pub fn random(rng: &mut Rng, input: usize, features: usize, samples: usize, ridge_a: f64, ridge_b: f64) -> Self {
        let inputs: Vec<Vec<f64>> =
            (0..samples).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets = inputs.iter().map(|x| libm::sin(2.0 * x[0]) + 0.3 * rng.random_range(-1.0..1.0)).collect();
        Self { feature_spec: NetSpec::new(input, &[], features), inputs, targets, ridge_a, ridge_b }
    }

    /// Same features and data size, fresh samples.
    pub fn resample(&self, rng: &mut Rng, ridge_a: f64, ridge_b: f64) -> Self {
        let mut out = Self::random(rng, self.feature_spec.input_dim, self.feature_spec.output_dim, self.inputs.len(), ridge_a, ridge_b);
        out.feature_spec = self.feature_spec.clone();
        out
    }
}

impl TwoBlockLoss for RidgeFeatures {
    fn block_len(&self, block: Block) -> usize {
        match block {
            Block::A => self.feature_spec.param_count(),
            Block::B => self.feature_spec.output_dim,
        }
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], ga: &mut [S], gb: &mut [S]) -> S {
        let inv_n = 1.0 / self.inputs.len() as f64;
        let k = self.feature_spec.output_dim;
        let mut tape = Tape::default();
        let mut total = S::zero();
        let mut g_pre = vec![S::zero(); k];
        for (x, &y) in self.inputs.iter().zip(&self.targets) {
            forward_tape(&self.feature_spec, a, &lift::<S>(x), &mut tape);
            let phi: Vec<S> = tape.output(&self.feature_spec).iter().map(|z| z.tanh()).collect();
            let mut pred = S::zero();
            for (&bj, &pj) in b.iter().zip(&phi) {
                pred += bj * pj;
            }
            let r = pred - S::cst(y);
            total += (r * r).scale(0.5 * inv_n);
            let gr = r.scale(inv_n);
            for j in 0..k {
                gb[j] += gr * phi[j];
                g_pre[j] = gr * b[j] * (S::cst(1.0) - phi[j] * phi[j]);
            }
            backward(&self.feature_spec, a, &tape, &g_pre, Some(ga), None);
        }
        for (x, g) in a.iter().zip(ga.iter_mut()) {
            total += (*x * *x).scale(0.5 * self.ridge_a);
            *g += x.scale(self.ridge_a);
        }
        for (x, g) in b.iter().zip(gb.iter_mut()) {
            total += (*x * *x).scale(0.5 * self.ridge_b);
            *g += x.scale(self.ridge_b);
        }
        total
    }
}
