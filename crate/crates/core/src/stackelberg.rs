//! Leader/follower gradient dynamics.
//!
//! The leader descends its total derivative
//! `∇_l L_l − (∇_l ∇_f L_f) (∇²_f L_f + λI)⁻¹ ∇_f L_l`, where the inverse is
//! applied by matrix-free conjugate gradient on Hessian-vector products. The
//! follower descends its own (optionally regularized) loss.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::diff::{self, dot, Block, DiffError, ParamVector, TwoBlockLoss};
use crate::sac::{Agent, BvActor, GaussianPolicy, PolicyObjective, SacConfig, SacError, TwinCritics};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameConfig {
    pub beta: f64,
    pub f_av: u32,
    pub f_bv: u32,
    pub leader: Agent,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub damping: f64,
    pub rounds: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self { beta: 0.0, f_av: 1, f_bv: 1, leader: Agent::Av, cg_max_iters: 20, cg_tol: 1e-4, damping: 1e-3, rounds: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GameConfigError {
    #[error("invalid game setting `{0}`")]
    Invalid(&'static str),
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), GameConfigError> {
        let bad = |c: bool, f: &'static str| if c { Err(GameConfigError::Invalid(f)) } else { Ok(()) };
        bad(!(self.beta >= 0.0 && self.beta.is_finite()), "beta")?;
        bad(self.f_av == 0, "f_av")?;
        bad(self.f_bv == 0, "f_bv")?;
        bad(!(self.cg_tol > 0.0), "cg_tol")?;
        bad(!(self.damping >= 0.0 && self.damping.is_finite()), "damping")
    }

    pub fn follower(&self) -> Agent {
        self.leader.other()
    }

    /// Policy updates per round for `agent`.
    pub fn updates_for(&self, agent: Agent) -> u32 {
        match agent {
            Agent::Av => self.f_av,
            Agent::Bv => self.f_bv,
        }
    }

    /// Regularization weight actually applied to the follower.
    pub fn effective_beta(&self) -> f64 {
        if self.follower() == Agent::Bv {
            self.beta
        } else {
            0.0
        }
    }
}

/// BV leads, AV follows, no regularization, one update each per round.
pub fn configure_isdm(cfg: &GameConfig) -> GameConfig {
    GameConfig { leader: Agent::Bv, beta: 0.0, f_av: 1, f_bv: 1, ..*cfg }
}

/// Exchanges leader and follower.
pub fn swapped_roles(cfg: &GameConfig) -> GameConfig {
    GameConfig { leader: cfg.leader.other(), ..*cfg }
}

pub fn agent_block(agent: Agent) -> Block {
    match agent {
        Agent::Av => Block::A,
        Agent::Bv => Block::B,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderUpdateReport {
    pub plain_grad_norm: f64,
    pub implicit_term_norm: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub fell_back_to_first_order: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StackelbergError {
    #[error("numerical failure in leader update: {source}")]
    Numerical { source: DiffError, report: Option<LeaderUpdateReport> },
    #[error(transparent)]
    Sac(#[from] SacError),
}

impl From<DiffError> for StackelbergError {
    fn from(source: DiffError) -> Self {
        StackelbergError::Numerical { source, report: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A search direction with `pᵀAp ≤ 0` was met.
    pub negative_curvature: bool,
}

/// Solves `A x = rhs` for symmetric `A` given only `x ↦ A x`, stopping when
/// `‖r‖ ≤ tol·‖rhs‖`.
pub fn conjugate_gradient<E>(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    rhs: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgSolution, E> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let threshold = tol * libm::sqrt(rr);
    if libm::sqrt(rr) <= threshold || rr == 0.0 {
        return Ok(CgSolution { x, iterations: 0, converged: true, negative_curvature: false });
    }
    for it in 1..=max_iters {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Ok(CgSolution { x, iterations: it, converged: false, negative_curvature: true });
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_next = dot(&r, &r);
        if libm::sqrt(rr_next) <= threshold {
            return Ok(CgSolution { x, iterations: it, converged: true, negative_curvature: false });
        }
        let k = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + k * p[i];
        }
        rr = rr_next;
    }
    Ok(CgSolution { x, iterations: max_iters, converged: false, negative_curvature: false })
}

/// Total derivative of the leader loss for the leader's block.
///
/// Both losses take blocks in the same `(A, B)` order; `leader` names the
/// leader's block. Falls back to the plain gradient when the damped follower
/// Hessian solve does not converge.
pub fn leader_total_gradient<Ll: TwoBlockLoss, Lf: TwoBlockLoss>(
    leader_loss: &Ll,
    follower_loss: &Lf,
    leader: Block,
    a: &[f64],
    b: &[f64],
    cfg: &GameConfig,
) -> Result<(ParamVector, LeaderUpdateReport), StackelbergError> {
    let follower = leader.other();
    let grads = diff::value_and_grads(leader_loss, a, b)?;
    let g = grads.block(leader).clone();
    let rhs = grads.block(follower);
    let mut report = LeaderUpdateReport {
        plain_grad_norm: g.norm(),
        implicit_term_norm: 0.0,
        cg_iterations: 0,
        cg_converged: false,
        fell_back_to_first_order: false,
    };
    let fail = |source: DiffError, report: LeaderUpdateReport| StackelbergError::Numerical { source, report: Some(report) };

    let solve = conjugate_gradient(
        |v| {
            let mut hv = diff::hvp(follower_loss, follower, a, b, v)?.into_inner();
            for (h, x) in hv.iter_mut().zip(v) {
                *h += cfg.damping * x;
            }
            Ok(hv)
        },
        rhs,
        cfg.cg_max_iters,
        cfg.cg_tol,
    )
    .map_err(|e| fail(e, report))?;
    report.cg_iterations = solve.iterations;
    report.cg_converged = solve.converged;
    if !solve.converged {
        report.fell_back_to_first_order = true;
        return Ok((g, report));
    }
    if solve.x.iter().all(|&w| w == 0.0) {
        return Ok((g, report));
    }
    let implicit = diff::mixed_vjp(follower_loss, leader, a, b, &solve.x).map_err(|e| fail(e, report))?;
    report.implicit_term_norm = implicit.norm();
    let mut total = g;
    total.axpy(-1.0, &implicit);
    if !total.is_finite() {
        return Err(fail(DiffError::NonFinite { what: "total gradient", batch_id: leader_loss.batch_id() }, report));
    }
    Ok((total, report))
}

/// One leader-first Stackelberg step with plain gradient descent on both blocks.
pub fn stackelberg_sgd_step<Ll: TwoBlockLoss, Lf: TwoBlockLoss>(
    leader_loss: &Ll,
    follower_loss: &Lf,
    leader: Block,
    a: &mut [f64],
    b: &mut [f64],
    lr: (f64, f64),
    cfg: &GameConfig,
) -> Result<LeaderUpdateReport, StackelbergError> {
    let (total, report) = leader_total_gradient(leader_loss, follower_loss, leader, a, b, cfg)?;
    let lp = match leader {
        Block::A => &mut *a,
        Block::B => &mut *b,
    };
    for (p, g) in lp.iter_mut().zip(total.iter()) {
        *p -= lr.0 * g;
    }
    let gf = diff::grad(follower_loss, leader.other(), a, b)?;
    let fp = match leader {
        Block::A => b,
        Block::B => a,
    };
    for (p, g) in fp.iter_mut().zip(gf.iter()) {
        *p -= lr.1 * g;
    }
    Ok(report)
}

/// One simultaneous step: both players descend their own loss from the same snapshot.
pub fn simultaneous_sgd_step<La: TwoBlockLoss, Lb: TwoBlockLoss>(
    loss_a: &La,
    loss_b: &Lb,
    a: &mut [f64],
    b: &mut [f64],
    lr: (f64, f64),
) -> Result<(), DiffError> {
    let ga = diff::grad(loss_a, Block::A, a, b)?;
    let gb = diff::grad(loss_b, Block::B, a, b)?;
    for (p, g) in a.iter_mut().zip(ga.iter()) {
        *p -= lr.0 * g;
    }
    for (p, g) in b.iter_mut().zip(gb.iter()) {
        *p -= lr.1 * g;
    }
    Ok(())
}

/// The follower's policy objective, regularized by the leader's critics when the follower is the BV.
pub fn follower_objective<'a>(
    av: &'a GaussianPolicy,
    bv: &'a GaussianPolicy,
    follower_critics: &'a TwinCritics,
    leader_critics: &'a TwinCritics,
    batch: &'a crate::sac::Batch,
    sac: &SacConfig,
    game: &GameConfig,
) -> PolicyObjective<'a> {
    let obj = PolicyObjective::new(game.follower(), av, BvActor::Learned(bv), follower_critics, batch, sac);
    let beta = game.effective_beta();
    if beta > 0.0 {
        obj.with_regularizer(beta, leader_critics)
    } else {
        obj
    }
}

/// Value of the follower objective at the current parameters.
pub fn follower_loss(
    av: &GaussianPolicy,
    bv: &GaussianPolicy,
    follower_critics: &TwinCritics,
    leader_critics: &TwinCritics,
    batch: &crate::sac::Batch,
    sac: &SacConfig,
    game: &GameConfig,
) -> Result<f64, StackelbergError> {
    if batch.items.is_empty() {
        return Err(SacError::EmptyBatch.into());
    }
    let obj = follower_objective(av, bv, follower_critics, leader_critics, batch, sac, game);
    Ok(diff::value(&obj, &av.params, &bv.params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::toys::{solve_dense, Bilinear, HalfSquaredNorm, RidgeFeatures, ScalarQuadratic, Separable};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn exact(cfg: GameConfig) -> GameConfig {
        GameConfig { damping: 0.0, cg_tol: 1e-12, cg_max_iters: 200, ..cfg }
    }

    fn spd(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "spd");
        let m: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            }
        }
        a
    }

    fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
    }

    #[test]
    fn cg_matches_direct_solve() {
        let n = 50;
        let a = spd(n, 1);
        let rhs: Vec<f64> = (0..n).map(|i| libm::sin(i as f64)).collect();
        let sol = conjugate_gradient(|v| Ok::<_, ()>(matvec(&a, v)), &rhs, 500, 1e-14).unwrap();
        assert!(sol.converged);
        let direct = solve_dense(&a, &rhs, n);
        let err: f64 = sol.x.iter().zip(&direct).map(|(x, d)| (x - d) * (x - d)).sum::<f64>();
        let scale: f64 = direct.iter().map(|d| d * d).sum();
        assert!(libm::sqrt(err / scale) < 1e-8);
    }

    #[test]
    fn cg_flags_negative_curvature_and_zero_rhs() {
        let a = [-1.0, 0.0, 0.0, 2.0];
        let sol = conjugate_gradient(|v| Ok::<_, ()>(matvec(&a, v)), &[1.0, 0.0], 10, 1e-8).unwrap();
        assert!(sol.negative_curvature && !sol.converged);
        let zero = conjugate_gradient(|v| Ok::<_, ()>(matvec(&a, v)), &[0.0, 0.0], 10, 1e-8).unwrap();
        assert!(zero.converged && zero.iterations == 0 && zero.x == [0.0, 0.0]);
    }

    #[test]
    fn damping_shrinks_the_solution() {
        let n = 12;
        let a = spd(n, 2);
        let rhs: Vec<f64> = (0..n).map(|i| 1.0 - 0.1 * i as f64).collect();
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0] {
            let sol = conjugate_gradient(
                |v| Ok::<_, ()>(matvec(&a, v).iter().zip(v).map(|(h, x)| h + lambda * x).collect()),
                &rhs,
                200,
                1e-13,
            )
            .unwrap();
            let norm = libm::sqrt(dot(&sol.x, &sol.x));
            assert!(norm <= prev + 1e-12, "lambda {lambda}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn degenerate_quadratic_game_has_zero_total_gradient() {
        let ll = ScalarQuadratic { aa: 1.0, ab: 1.0, bb: 1.0, la: 0.0, lb: 0.0 };
        let lf = ScalarQuadratic { aa: 0.0, ab: 1.0, bb: 1.0, la: 0.0, lb: 0.0 };
        let cfg = exact(GameConfig::default());
        for (a, b) in [(0.3, -1.2), (2.0, 0.5), (-4.0, 3.0)] {
            let (g, report) = leader_total_gradient(&ll, &lf, Block::A, &[a], &[b], &cfg).unwrap();
            assert!(report.cg_converged);
            // Plain gradient is a + b; the implicit term cancels it.
            assert!(g[0].abs() < 1e-10, "{}", g[0]);
        }
    }

    #[test]
    fn independent_follower_leaves_plain_gradient() {
        let ll = Bilinear { m: vec![0.5, -1.0, 2.0, 0.25], rows: 2, cols: 2 };
        let lf = Separable { len_a: 2, len_b: 2 };
        let (a, b) = ([0.3, -0.7], [1.1, 0.4]);
        let (g, report) = leader_total_gradient(&ll, &lf, Block::A, &a, &b, &GameConfig::default()).unwrap();
        assert_eq!(g, diff::grad(&ll, Block::A, &a, &b).unwrap());
        assert_eq!(report.implicit_term_norm, 0.0);
    }

    /// `½‖a‖²`, ignoring block B.
    struct LeaderOnly(usize, usize);

    impl TwoBlockLoss for LeaderOnly {
        fn block_len(&self, block: Block) -> usize {
            match block {
                Block::A => self.0,
                Block::B => self.1,
            }
        }

        fn eval<S: crate::diff::Scalar>(&self, a: &[S], _b: &[S], ga: &mut [S], _gb: &mut [S]) -> S {
            let mut total = S::zero();
            for (x, g) in a.iter().zip(ga.iter_mut()) {
                total += (*x * *x).scale(0.5);
                *g = *x;
            }
            total
        }
    }

    #[test]
    fn leader_loss_free_of_follower_has_zero_rhs() {
        let ll = LeaderOnly(2, 1);
        let lf = Bilinear { m: vec![1.0, 2.0], rows: 2, cols: 1 };
        let lf = crate::diff::Weighted { first: (&lf, 1.0), second: (&HalfSquaredNorm { len_a: 2, len_b: 1 }, 1.0) };
        let (a, b) = ([0.4, -0.2], [0.9]);
        let (g, report) = leader_total_gradient(&ll, &lf, Block::A, &a, &b, &GameConfig::default()).unwrap();
        assert_eq!(g, diff::grad(&ll, Block::A, &a, &b).unwrap());
        assert_eq!(report.cg_iterations, 0);
    }

    /// Stackelberg point (1/4, 1/4), Nash point (1/2, 1/2).
    fn toy() -> (ScalarQuadratic, ScalarQuadratic) {
        (
            ScalarQuadratic { aa: 1.0, ab: 1.0, bb: 1.0, la: -1.0, lb: 0.0 },
            ScalarQuadratic { aa: 0.0, ab: -1.0, bb: 1.0, la: 0.0, lb: 0.0 },
        )
    }

    #[test]
    fn dynamics_separate_stackelberg_from_nash() {
        let (ll, lf) = toy();
        let cfg = exact(GameConfig::default());
        let (mut a, mut b) = ([2.0], [-1.0]);
        for _ in 0..2000 {
            stackelberg_sgd_step(&ll, &lf, Block::A, &mut a, &mut b, (0.1, 0.1), &cfg).unwrap();
        }
        assert!((a[0] - 0.25).abs() < 1e-6 && (b[0] - 0.25).abs() < 1e-6, "{a:?} {b:?}");
        let (mut a, mut b) = ([2.0], [-1.0]);
        for _ in 0..2000 {
            simultaneous_sgd_step(&ll, &lf, &mut a, &mut b, (0.1, 0.1)).unwrap();
        }
        assert!((a[0] - 0.5).abs() < 1e-6 && (b[0] - 0.5).abs() < 1e-6, "{a:?} {b:?}");
    }

    #[test]
    fn block_b_leader_matches_swapped_losses() {
        let (ll, lf) = toy();
        let cfg = exact(GameConfig::default());
        let (g1, _) = leader_total_gradient(&ll, &lf, Block::A, &[0.3], &[0.8], &cfg).unwrap();
        let (g2, _) =
            leader_total_gradient(&diff::Swapped(&ll), &diff::Swapped(&lf), Block::B, &[0.8], &[0.3], &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn hyper_gradient_matches_finite_differences() {
        let mut r = rng::stream(3, "ridge");
        let lf = RidgeFeatures::random(&mut r, 2, 4, 24, 0.0, 0.1);
        let ll = lf.resample(&mut r, 0.0, 0.0);
        let a: Vec<f64> = lf.feature_spec.init(&mut r).into_inner();
        let inner = |a: &[f64]| -> Vec<f64> {
            let mut b = vec![0.0; 4];
            for _ in 0..200_000 {
                let g = diff::grad(&lf, Block::B, a, &b).unwrap();
                if g.norm() < 1e-10 {
                    break;
                }
                for (x, gx) in b.iter_mut().zip(g.iter()) {
                    *x -= 1.0 * gx;
                }
            }
            assert!(diff::grad(&lf, Block::B, a, &b).unwrap().norm() < 1e-10);
            b
        };
        let b_star = inner(&a);
        let cfg = GameConfig { damping: 0.0, cg_tol: 1e-10, cg_max_iters: 100, ..GameConfig::default() };
        let (g, report) = leader_total_gradient(&ll, &lf, Block::A, &a, &b_star, &cfg).unwrap();
        assert!(report.cg_converged);
        let h = 1e-5;
        let mut fd = vec![0.0; a.len()];
        for i in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fp = diff::value(&ll, &ap, &inner(&ap)).unwrap();
            let fm = diff::value(&ll, &am, &inner(&am)).unwrap();
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let err: f64 = g.iter().zip(&fd).map(|(x, y)| (x - y) * (x - y)).sum();
        let scale: f64 = fd.iter().map(|y| y * y).sum();
        assert!(libm::sqrt(err / scale) < 1e-3, "relative error {}", libm::sqrt(err / scale));
        // And the implicit term matters here.
        let plain = diff::grad(&ll, Block::A, &a, &b_star).unwrap();
        assert!(report.implicit_term_norm > 1e-3 * plain.norm());
    }

    #[test]
    fn nonconvergent_solve_falls_back() {
        let (ll, lf) = toy();
        let lf_neg = ScalarQuadratic { bb: -1.0, ..lf };
        let cfg = GameConfig { damping: 0.0, ..GameConfig::default() };
        let (g, report) = leader_total_gradient(&ll, &lf_neg, Block::A, &[0.3], &[0.5], &cfg).unwrap();
        assert!(report.fell_back_to_first_order);
        assert_eq!(g, diff::grad(&ll, Block::A, &[0.3], &[0.5]).unwrap());
    }

    #[test]
    fn isdm_configuration() {
        let base = GameConfig { beta: 10.0, f_av: 5, f_bv: 1, ..GameConfig::default() };
        let isdm = configure_isdm(&base);
        assert_eq!(isdm.beta, 0.0);
        assert_eq!((isdm.f_av, isdm.f_bv), (1, 1));
        assert_eq!(isdm.leader, Agent::Bv);
        assert_eq!(swapped_roles(&swapped_roles(&base)), base);
        assert_eq!(GameConfig { leader: Agent::Bv, beta: 3.0, ..base }.effective_beta(), 0.0);
        assert!(GameConfig { f_av: 0, ..base }.validate().is_err());
    }

    proptest! {
        #[test]
        fn reduction_holds_when_cross_term_vanishes(a in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-2.0f64..2.0, 2)) {
            let ll = Bilinear { m: vec![0.5, -1.0, 2.0, 0.25, 1.0, -0.5], rows: 3, cols: 2 };
            let lf = Separable { len_a: 3, len_b: 2 };
            let (g, _) = leader_total_gradient(&ll, &lf, Block::A, &a, &b, &GameConfig::default()).unwrap();
            prop_assert_eq!(g, diff::grad(&ll, Block::A, &a, &b).unwrap());
        }
    }

    fn game_fixture() -> (GaussianPolicy, GaussianPolicy, crate::sac::Batch) {
        let mut r = rng::stream(40, "fixture");
        let av = GaussianPolicy::init(3, &[6], vec![-0.5; 2], vec![0.5; 2], &mut r);
        let bv = GaussianPolicy::init(3, &[6], vec![-0.5; 2], vec![0.5; 2], &mut r);
        let mut draw = |k: usize| (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let items = (0..5)
            .map(|_| crate::sac::BatchItem {
                obs: draw(3),
                next_obs: draw(3),
                t_av: draw(2),
                t_bv: draw(2),
                r_av: draw(1)[0],
                r_bv: draw(1)[0],
                done: false,
                bv_fixed_next: None,
                eps_av: draw(2),
                eps_bv: draw(2),
                eps_av_next: draw(2),
                eps_bv_next: draw(2),
            })
            .collect();
        (av, bv, crate::sac::Batch { id: 1, items })
    }

    fn const_critics(c: f64) -> TwinCritics {
        let mut q = TwinCritics::init(7, &[4], 0.005, &mut rng::stream(41, "c"));
        let bias = q.spec.layers().last().unwrap().bias().start;
        for p in [&mut q.q1, &mut q.q2, &mut q.q1_targ, &mut q.q2_targ] {
            p.iter_mut().for_each(|v| *v = 0.0);
            p[bias] = c;
        }
        q
    }

    #[test]
    fn follower_loss_subtracts_scaled_leader_value() {
        let (av, bv, batch) = game_fixture();
        let sac = SacConfig { alpha: 0.0, ..SacConfig::default() };
        let (qf, ql) = (const_critics(1.5), const_critics(-2.0));
        for beta in [0.0, 0.5, 10.0] {
            let game = GameConfig { beta, ..GameConfig::default() };
            let got = follower_loss(&av, &bv, &qf, &ql, &batch, &sac, &game).unwrap();
            assert!((got - (-1.5 - beta * -2.0)).abs() < 1e-12, "beta {beta}: {got}");
        }
    }

    #[test]
    fn zero_beta_follower_loss_is_plain_policy_loss() {
        let (av, bv, batch) = game_fixture();
        let sac = SacConfig::default();
        let mut r = rng::stream(42, "critics");
        let qf = TwinCritics::init(7, &[6], 0.005, &mut r);
        let ql = TwinCritics::init(7, &[6], 0.005, &mut r);
        let game = GameConfig::default();
        let got = follower_loss(&av, &bv, &qf, &ql, &batch, &sac, &game).unwrap();
        let plain = crate::sac::policy_loss(Agent::Bv, &av, BvActor::Learned(&bv), &qf, &batch, &sac).unwrap();
        assert_eq!(got, plain);
        let reg = follower_loss(&av, &bv, &qf, &ql, &batch, &sac, &GameConfig { beta: 10.0, ..game }).unwrap();
        assert!((reg - plain).abs() > 1e-6);
    }

    #[test]
    fn leader_bv_ignores_beta() {
        let (av, bv, batch) = game_fixture();
        let sac = SacConfig { alpha: 0.0, ..SacConfig::default() };
        let (qf, ql) = (const_critics(1.0), const_critics(4.0));
        let game = GameConfig { beta: 3.0, leader: Agent::Bv, ..GameConfig::default() };
        assert_eq!(follower_loss(&av, &bv, &qf, &ql, &batch, &sac, &game).unwrap(), -1.0);
    }

}
