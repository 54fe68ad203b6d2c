//! Small fully connected networks and the derivative products the game dynamics need.
//!
//! Losses are written once against [`Scalar`] and return their own reverse-mode
//! gradient (see [`TwoBlockLoss`]). Running them on `f64` gives first-order
//! quantities; running them on [`Dual`] numbers seeded with a direction gives the
//! derivative of the gradient along that direction (forward-over-reverse). That
//! one primitive yields Hessian-vector products and mixed second-derivative
//! products without ever materializing a Hessian.

mod mlp;
mod optim;
mod scalar;

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use thiserror::Error;

pub use mlp::{backward, forward, forward_tape, Activation, LayerShape, NetSpec, ParamCheckpoint, ShapeError, Tape};
pub use optim::{Adam, Optimizer, Sgd};
pub use scalar::{Dual, Scalar};

/// Flat parameter storage for one network or one player's block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(self, other)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += k * x`
    pub fn axpy(&mut self, k: f64, x: &[f64]) {
        for (s, &xi) in self.0.iter_mut().zip(x) {
            *s += k * xi;
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One of the two parameter blocks of a [`TwoBlockLoss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    A,
    B,
}

impl Block {
    pub fn other(self) -> Block {
        match self {
            Block::A => Block::B,
            Block::B => Block::A,
        }
    }
}

/// Scalar loss over two parameter blocks, evaluated on data it owns.
///
/// Implementations compute the value and its exact reverse-mode gradient in one
/// pass, generically over the scalar type. `grad_a` and `grad_b` arrive zeroed.
pub trait TwoBlockLoss {
    fn block_len(&self, block: Block) -> usize;

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], grad_a: &mut [S], grad_b: &mut [S]) -> S;

    /// Identifier of the evaluation batch, reported in numerical errors.
    fn batch_id(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffError {
    #[error("non-finite {what} on batch {batch_id}")]
    NonFinite { what: &'static str, batch_id: u64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DiffError> {
    if expected == got {
        Ok(())
    } else {
        Err(DiffError::Dimension { what, expected, got })
    }
}

fn check_finite(what: &'static str, batch_id: u64, values: &[f64]) -> Result<(), DiffError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { what, batch_id })
    }
}

/// Loss value and gradients with respect to both blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub value: f64,
    pub a: ParamVector,
    pub b: ParamVector,
}

impl Gradients {
    pub fn block(&self, block: Block) -> &ParamVector {
        match block {
            Block::A => &self.a,
            Block::B => &self.b,
        }
    }
}

fn check_blocks<L: TwoBlockLoss>(loss: &L, a: &[f64], b: &[f64]) -> Result<(), DiffError> {
    check_len("block A parameters", loss.block_len(Block::A), a.len())?;
    check_len("block B parameters", loss.block_len(Block::B), b.len())
}

pub fn value<L: TwoBlockLoss>(loss: &L, a: &[f64], b: &[f64]) -> Result<f64, DiffError> {
    Ok(value_and_grads(loss, a, b)?.value)
}

pub fn value_and_grads<L: TwoBlockLoss>(loss: &L, a: &[f64], b: &[f64]) -> Result<Gradients, DiffError> {
    check_blocks(loss, a, b)?;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let value = loss.eval(a, b, &mut ga, &mut gb);
    let id = loss.batch_id();
    check_finite("loss", id, &[value])?;
    check_finite("gradient", id, &ga)?;
    check_finite("gradient", id, &gb)?;
    Ok(Gradients { value, a: ga.into(), b: gb.into() })
}

/// Exact gradient of `loss` with respect to block `wrt`.
pub fn grad<L: TwoBlockLoss>(loss: &L, wrt: Block, a: &[f64], b: &[f64]) -> Result<ParamVector, DiffError> {
    let g = value_and_grads(loss, a, b)?;
    Ok(match wrt {
        Block::A => g.a,
        Block::B => g.b,
    })
}

/// Derivative of both block gradients along direction `v` placed in block `dir`.
///
/// Returns `(H_{A,dir} v, H_{B,dir} v)`, i.e. the rows of the joint Hessian
/// product for each block.
pub fn second_order<L: TwoBlockLoss>(
    loss: &L,
    dir: Block,
    a: &[f64],
    b: &[f64],
    v: &[f64],
) -> Result<(ParamVector, ParamVector), DiffError> {
    check_blocks(loss, a, b)?;
    check_len("direction", loss.block_len(dir), v.len())?;
    let lift = |x: &[f64], seeded: bool| -> Vec<Dual> {
        if seeded {
            x.iter().zip(v).map(|(&re, &du)| Dual::new(re, du)).collect()
        } else {
            x.iter().map(|&re| Dual::cst(re)).collect()
        }
    };
    let ad = lift(a, dir == Block::A);
    let bd = lift(b, dir == Block::B);
    let mut ga = vec![Dual::default(); a.len()];
    let mut gb = vec![Dual::default(); b.len()];
    let value = loss.eval(&ad, &bd, &mut ga, &mut gb);
    let id = loss.batch_id();
    check_finite("loss", id, &[value.re])?;
    let ta: Vec<f64> = ga.iter().map(|d| d.du).collect();
    let tb: Vec<f64> = gb.iter().map(|d| d.du).collect();
    check_finite("second-order product", id, &ta)?;
    check_finite("second-order product", id, &tb)?;
    Ok((ta.into(), tb.into()))
}

/// Hessian-vector product `∇²_{wrt} L · v`.
pub fn hvp<L: TwoBlockLoss>(loss: &L, wrt: Block, a: &[f64], b: &[f64], v: &[f64]) -> Result<ParamVector, DiffError> {
    let (ha, hb) = second_order(loss, wrt, a, b, v)?;
    Ok(match wrt {
        Block::A => ha,
        Block::B => hb,
    })
}

/// Mixed product `(∇_outer ∇_inner L) · v`: the gradient in `outer` of `<∇_inner L, v>`.
pub fn mixed_vjp<L: TwoBlockLoss>(
    loss: &L,
    outer: Block,
    a: &[f64],
    b: &[f64],
    v: &[f64],
) -> Result<ParamVector, DiffError> {
    let (ha, hb) = second_order(loss, outer.other(), a, b, v)?;
    Ok(match outer {
        Block::A => ha,
        Block::B => hb,
    })
}

/// `k1 * L1 + k2 * L2` over the same blocks.
pub struct Weighted<'a, L1, L2> {
    pub first: (&'a L1, f64),
    pub second: (&'a L2, f64),
}

impl<L1: TwoBlockLoss, L2: TwoBlockLoss> TwoBlockLoss for Weighted<'_, L1, L2> {
    fn block_len(&self, block: Block) -> usize {
        self.first.0.block_len(block)
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], grad_a: &mut [S], grad_b: &mut [S]) -> S {
        let (l1, k1) = self.first;
        let (l2, k2) = self.second;
        let mut ga = vec![S::zero(); a.len()];
        let mut gb = vec![S::zero(); b.len()];
        let v1 = l1.eval(a, b, &mut ga, &mut gb);
        for (g, x) in grad_a.iter_mut().zip(&ga) {
            *g += x.scale(k1);
        }
        for (g, x) in grad_b.iter_mut().zip(&gb) {
            *g += x.scale(k1);
        }
        ga.iter_mut().for_each(|g| *g = S::zero());
        gb.iter_mut().for_each(|g| *g = S::zero());
        let v2 = l2.eval(a, b, &mut ga, &mut gb);
        for (g, x) in grad_a.iter_mut().zip(&ga) {
            *g += x.scale(k2);
        }
        for (g, x) in grad_b.iter_mut().zip(&gb) {
            *g += x.scale(k2);
        }
        v1.scale(k1) + v2.scale(k2)
    }
}

/// Exchanges the roles of the two blocks of a loss.
pub struct Swapped<'a, L>(pub &'a L);

impl<L: TwoBlockLoss> TwoBlockLoss for Swapped<'_, L> {
    fn block_len(&self, block: Block) -> usize {
        self.0.block_len(block.other())
    }

    fn eval<S: Scalar>(&self, a: &[S], b: &[S], grad_a: &mut [S], grad_b: &mut [S]) -> S {
        self.0.eval(b, a, grad_b, grad_a)
    }

    fn batch_id(&self) -> u64 {
        self.0.batch_id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toys::{Bilinear, ComposedMlpLoss, HalfSquaredNorm, Separable};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_vec(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn quadratic_gradient_and_hvp() {
        let loss = HalfSquaredNorm { len_a: 4, len_b: 2 };
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [0.25, 0.75];
        assert_eq!(&*grad(&loss, Block::A, &a, &b).unwrap(), &a);
        let v = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(&*hvp(&loss, Block::A, &a, &b, &v).unwrap(), &v);
        // Block B enters only through a constant here: its gradient is b, cross terms vanish.
        assert_eq!(&*mixed_vjp(&loss, Block::A, &a, &b, &[1.0, 1.0]).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn linear_and_constant_blocks_have_zero_curvature() {
        let m = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]];
        let loss = Bilinear { m: m.iter().flatten().copied().collect(), rows: 3, cols: 2 };
        let a = [0.3, -0.2, 0.9];
        let b = [1.5, -0.5];
        // L = a^T M b is linear in each block separately.
        assert_eq!(&*hvp(&loss, Block::A, &a, &b, &[1.0, 1.0, 1.0]).unwrap(), &[0.0; 3]);
        let v = [0.7, -1.1];
        let mixed = mixed_vjp(&loss, Block::A, &a, &b, &v).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert!((mixed[i] - (row[0] * v[0] + row[1] * v[1])).abs() < 1e-15);
        }
        let sep = Separable { len_a: 3, len_b: 2 };
        assert_eq!(&*mixed_vjp(&sep, Block::A, &a, &b, &v).unwrap(), &[0.0; 3]);
        let const_in_b = HalfSquaredNorm { len_a: 3, len_b: 0 };
        assert_eq!(grad(&const_in_b, Block::B, &a, &[]).unwrap().len(), 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let loss = HalfSquaredNorm { len_a: 2, len_b: 1 };
        assert!(matches!(grad(&loss, Block::A, &[1.0], &[0.0]), Err(DiffError::Dimension { .. })));
        assert!(matches!(hvp(&loss, Block::A, &[1.0, 2.0], &[0.0], &[1.0]), Err(DiffError::Dimension { .. })));
    }

    #[test]
    fn non_finite_loss_is_reported_with_batch_id() {
        let loss = HalfSquaredNorm { len_a: 1, len_b: 0 };
        let err = grad(&loss, Block::A, &[f64::INFINITY], &[]).unwrap_err();
        assert_eq!(err, DiffError::NonFinite { what: "loss", batch_id: 0 });
    }

    #[test]
    fn newton_step_is_exact_on_quadratics() {
        // L(a) = 1/2 a^T Q a - c^T a with Q = M^T M + I, assembled from HVPs.
        let mut r = rng::stream(4, "newton");
        let n = 5;
        let m: Vec<f64> = random_vec(&mut r, n * n);
        let c = random_vec(&mut r, n);
        let loss = crate::toys::Quadratic::from_factor(&m, n, &c);
        let a0 = random_vec(&mut r, n);
        let g = grad(&loss, Block::A, &a0, &[]).unwrap();
        let mut h = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = hvp(&loss, Block::A, &a0, &[], &e).unwrap();
            for i in 0..n {
                h[i * n + j] = col[i];
            }
        }
        let step = crate::toys::solve_dense(&h, &g, n);
        let next: Vec<f64> = a0.iter().zip(&step).map(|(x, s)| x - s).collect();
        let exact = crate::toys::solve_dense(&loss.q, &c, n);
        for (x, e) in next.iter().zip(&exact) {
            assert!((x - e).abs() < 1e-10, "{x} vs {e}");
        }
    }

    fn mlp_fixture(seed: u64) -> (ComposedMlpLoss, Vec<f64>, Vec<f64>) {
        let mut r = rng::stream(seed, "mlp-fixture");
        let loss = ComposedMlpLoss::random(&mut r, 3, 4, 2, 6);
        let a = loss.spec_a.init(&mut r).into_inner();
        let b = loss.spec_b.init(&mut r).into_inner();
        (loss, a, b)
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let (l1, a, b) = mlp_fixture(1);
        let (l2, _, _) = {
            let mut r = rng::stream(2, "mlp-fixture-2");
            let l = ComposedMlpLoss::random_with_specs(&mut r, l1.spec_a.clone(), l1.spec_b.clone(), 6);
            (l, (), ())
        };
        let (k1, k2) = (0.7, -1.9);
        let combo = Weighted { first: (&l1, k1), second: (&l2, k2) };
        let g = value_and_grads(&combo, &a, &b).unwrap();
        let g1 = value_and_grads(&l1, &a, &b).unwrap();
        let g2 = value_and_grads(&l2, &a, &b).unwrap();
        for i in 0..a.len() {
            let expect = k1 * g1.a[i] + k2 * g2.a[i];
            assert!((g.a[i] - expect).abs() <= 1e-14 * (1.0 + expect.abs()));
        }
        for i in 0..b.len() {
            let expect = k1 * g1.b[i] + k2 * g2.b[i];
            assert!((g.b[i] - expect).abs() <= 1e-14 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn swapped_exchanges_blocks() {
        let (l, a, b) = mlp_fixture(3);
        let g = value_and_grads(&l, &a, &b).unwrap();
        let gs = value_and_grads(&Swapped(&l), &b, &a).unwrap();
        assert_eq!(g.a, gs.b);
        assert_eq!(g.b, gs.a);
        assert_eq!(g.value, gs.value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn hessian_products_are_symmetric(seed in 0u64..1000) {
            let (l, a, b) = mlp_fixture(seed);
            let mut r = rng::stream(seed, "directions");
            let u = random_vec(&mut r, b.len());
            let w = random_vec(&mut r, b.len());
            let hu = hvp(&l, Block::B, &a, &b, &u).unwrap();
            let hw = hvp(&l, Block::B, &a, &b, &w).unwrap();
            let (x, y) = (dot(&hu, &w), dot(&hw, &u));
            prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(y.abs()).max(1e-12));
            // Cross blocks: <H_ab v_b, v_a> = <H_ba v_a, v_b>.
            let va = random_vec(&mut r, a.len());
            let m_ab = mixed_vjp(&l, Block::A, &a, &b, &u).unwrap();
            let m_ba = mixed_vjp(&l, Block::B, &a, &b, &va).unwrap();
            let (p, q) = (dot(&m_ab, &va), dot(&m_ba, &u));
            prop_assert!((p - q).abs() <= 1e-8 * p.abs().max(q.abs()).max(1e-12));
        }
    }
}
