//! Fixed-point solvers and implicit backpropagation.
//!
//! Forward: steepest descent `x <- x - gamma*lambda*Q(x) + gamma*lambda*A'b`
//! (with `gamma*lambda = 1` this is `x <- H(x) + A'b`), plus the
//! forward-backward splitting baseline with an inner conjugate-gradient
//! solve. Backward: the adjoint fixed-point iteration of deep-equilibrium
//! models, which only ever needs vector-Jacobian products at the converged
//! point.

use crate::error::{Error, Result};
use crate::mri::{ComplexImage, KSpaceData};
use crate::operators::{CombinedOperator, ScoreGrads, ScoreNetwork};
use crate::tensor::Tensor;

/// Floor used when normalizing iterate changes.
const NORM_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Step size `gamma`; `gamma * lambda <= 1` is required by the
    /// convergence theory.
    pub gamma: f64,
    /// Data weight, mirroring the combined operator's `lambda`.
    pub lambda: f64,
    /// Forward-backward splitting step (that solver only).
    pub alpha: f64,
    /// Relative iterate-change stopping threshold.
    pub tol: f64,
    pub max_iter: usize,
    /// Monotonicity modulus assumed for diagnostics and robustness bounds.
    pub m_assumed: f64,
}

impl SolverConfig {
    pub fn new(gamma: f64, lambda: f64, tol: f64, max_iter: usize) -> Result<Self> {
        let cfg = SolverConfig {
            gamma,
            lambda,
            alpha: 1.0,
            tol,
            max_iter,
            m_assumed: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fastest regime `gamma = 1/lambda`.
    pub fn unit_step(lambda: f64) -> Self {
        SolverConfig {
            gamma: 1.0 / lambda,
            lambda,
            alpha: 1.0,
            tol: 1e-5,
            max_iter: 100,
            m_assumed: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || self.lambda <= 0.0 {
            return Err(Error::invalid("gamma and lambda must be > 0"));
        }
        if self.gamma * self.lambda > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "gamma * lambda = {:.6} exceeds 1",
                self.gamma * self.lambda
            )));
        }
        if self.tol <= 0.0 {
            return Err(Error::invalid("tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::invalid("alpha must be > 0"));
        }
        Ok(())
    }

    /// Effective contraction step `gamma * lambda`.
    pub fn step_product(&self) -> f64 {
        self.gamma * self.lambda
    }
}

/// Converged iterate with its residual trace.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub x_star: ComplexImage,
    /// Relative iterate change per iteration.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_lambda(op: &CombinedOperator, cfg: &SolverConfig) -> Result<()> {
    if (op.lambda - cfg.lambda).abs() > 1e-9 * op.lambda.max(1.0) {
        return Err(Error::invalid(format!(
            "solver lambda {} does not mirror operator lambda {}",
            cfg.lambda, op.lambda
        )));
    }
    Ok(())
}

/// Steepest-descent fixed-point iteration for the combined operator.
/// Initialization is the caller's job; convergence is only guaranteed from
/// inside the basin around the solution.
pub fn steepest_descent_fp(
    op: &CombinedOperator,
    b: &KSpaceData,
    x0: &ComplexImage,
    cfg: &SolverConfig,
) -> Result<FixedPointResult> {
    steepest_descent_fp_observed(op, b, x0, cfg, &mut |_, _| {})
}

/// Same iteration, reporting every iterate to `observe(k, x_k)`.
pub fn steepest_descent_fp_observed(
    op: &CombinedOperator,
    b: &KSpaceData,
    x0: &ComplexImage,
    cfg: &SolverConfig,
    observe: &mut dyn FnMut(usize, &ComplexImage),
) -> Result<FixedPointResult> {
    cfg.validate()?;
    check_lambda(op, cfg)?;
    let s = cfg.step_product();
    let ahb = op.mm.adjoint(b)?;
    let mut x = x0.clone();
    observe(0, &x);
    let mut residuals = Vec::new();
    let mut first_res = f64::NAN;
    let mut converged = false;
    for k in 0..cfg.max_iter {
        let q = op.apply(&x)?;
        let mut next = x.clone();
        next.axpy_mut(-s, &q)?;
        next.axpy_mut(s, &ahb)?;
        let change = next.dist(&x)?;
        let rel = change / x.norm().max(NORM_FLOOR);
        residuals.push(rel);
        if !rel.is_finite() || (k > 0 && rel > 10.0 * first_res && rel > cfg.tol) {
            return Err(Error::Divergence {
                iterations: k + 1,
                growth: rel / first_res,
                residuals,
            });
        }
        if k == 0 {
            first_res = rel.max(NORM_FLOOR);
        }
        x = next;
        observe(k + 1, &x);
        if rel <= cfg.tol {
            converged = true;
            break;
        }
    }
    let iterations = residuals.len();
    Ok(FixedPointResult {
        x_star: x,
        residuals,
        iterations,
        converged,
    })
}

/// Relative residual of the first-order optimality relation at `x`:
/// `|lambda A'(Ax - b) + F(x)| / |lambda A'b|`.
pub fn fixed_point_residual(
    op: &CombinedOperator,
    b: &KSpaceData,
    x: &ComplexImage,
) -> Result<f64> {
    let ax = op.mm.forward(x)?;
    let mut r = op.mm.adjoint(&ax.sub(b)?)?.scale(op.lambda);
    let f = op.score.apply_image(x)?;
    r.axpy_mut(1.0, &f)?;
    let denom = op.mm.adjoint(b)?.norm() * op.lambda;
    Ok(r.norm() / denom.max(NORM_FLOOR))
}

/// Conjugate gradient for symmetric positive definite maps, to relative
/// residual `tol`.
pub fn cg_solve<F>(apply: F, rhs: &Tensor, tol: f64, max_iter: usize) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(Tensor::zeros(rhs.shape()));
    }
    let mut x = Tensor::zeros(rhs.shape());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r)?;
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * rhs_norm {
            return Ok(x);
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?;
        if pap <= 0.0 {
            return Err(Error::NotPositiveDefinite(pap));
        }
        let alpha = rr / pap;
        x.axpy_mut(alpha, &p)?;
        r.axpy_mut(-alpha, &ap)?;
        let rr_next = r.dot(&r)?;
        let beta = rr_next / rr;
        rr = rr_next;
        let mut p_next = r.clone();
        p_next.axpy_mut(beta, &p)?;
        p = p_next;
    }
    if rr.sqrt() <= tol * rhs_norm {
        Ok(x)
    } else {
        Err(Error::CgNoConvergence {
            residual: rr.sqrt() / rhs_norm,
            iters: max_iter,
        })
    }
}

/// Forward-backward splitting baseline: explicit score step, implicit data
/// step `(I + alpha*lambda*A'A)^{-1}` solved by inner conjugate gradient.
/// Its fixed point satisfies the same optimality relation as the steepest
/// descent iteration.
pub fn forward_backward_fp(
    score: &ScoreNetwork,
    mm: &crate::mri::MeasurementModel,
    b: &KSpaceData,
    x0: &ComplexImage,
    cfg: &SolverConfig,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    let al = cfg.alpha * cfg.lambda;
    let ahb = mm.adjoint(b)?;
    let inner = |t: &Tensor| -> Result<Tensor> {
        let img = ComplexImage::new(t.clone())?;
        let mut y = mm.normal(&img)?.scale(al);
        y.axpy_mut(1.0, &img)?;
        Ok(y.into_tensor())
    };
    let mut x = x0.clone();
    let mut residuals = Vec::new();
    let mut first_res = f64::NAN;
    let mut converged = false;
    for k in 0..cfg.max_iter {
        let f = score.apply_image(&x)?;
        let mut rhs = x.clone();
        rhs.axpy_mut(-cfg.alpha, &f)?;
        rhs.axpy_mut(al, &ahb)?;
        let sol = cg_solve(inner, rhs.tensor(), (cfg.tol * 1e-2).max(1e-12), 500)?;
        let next = ComplexImage::new(sol)?;
        let rel = next.dist(&x)? / x.norm().max(NORM_FLOOR);
        residuals.push(rel);
        if !rel.is_finite() || (k > 0 && rel > 10.0 * first_res && rel > cfg.tol) {
            return Err(Error::Divergence {
                iterations: k + 1,
                growth: rel / first_res,
                residuals,
            });
        }
        if k == 0 {
            first_res = rel.max(NORM_FLOOR);
        }
        x = next;
        if rel <= cfg.tol {
            converged = true;
            break;
        }
    }
    let iterations = residuals.len();
    Ok(FixedPointResult {
        x_star: x,
        residuals,
        iterations,
        converged,
    })
}

/// Implicit gradients of a scalar loss through the steepest-descent fixed
/// point.
#[derive(Debug, Clone)]
pub struct DeqGradients {
    pub score: ScoreGrads,
    pub lambda: f64,
    /// Cotangent with respect to the measured data, `[coils, 2, h, w]`.
    pub b: Tensor,
}

/// Adjoint fixed-point solve: iterates `u <- J_x T(x*)' u + cot` until the
/// relative change drops below `tol`, then reads parameter gradients off the
/// converged adjoint state.
///
/// The iteration map is `T(x) = x - s*A'A x - (s/lambda) F(x) + s*A'b` with
/// `s = gamma*lambda` held fixed, so the step keeps `s` when `lambda` moves.
pub fn deq_backward(
    op: &CombinedOperator,
    cfg: &SolverConfig,
    x_star: &ComplexImage,
    cot: &ComplexImage,
    tol: f64,
    max_iter: usize,
) -> Result<DeqGradients> {
    check_lambda(op, cfg)?;
    let s = cfg.step_product();
    let jt = |u: &ComplexImage| -> Result<ComplexImage> {
        let mut out = u.clone();
        out.axpy_mut(-s, &op.mm.normal(u)?)?;
        let fv = op.score.vjp_input(x_star.tensor(), u.tensor())?;
        out.tensor_mut().axpy_mut(-s / op.lambda, &fv)?;
        Ok(out)
    };
    let mut u = cot.clone();
    let mut settled = false;
    let mut last_rel = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = jt(&u)?;
        next.axpy_mut(1.0, cot)?;
        last_rel = next.dist(&u)? / u.norm().max(NORM_FLOOR);
        u = next;
        if last_rel <= tol {
            settled = true;
            break;
        }
    }
    if !settled {
        return Err(Error::AdjointNoConvergence {
            residual: last_rel,
            iters: max_iter,
        });
    }

    // dL/dtheta and dL/dlambda flow through the parameter-dependent part of
    // T, which is -(s/lambda) F_theta(x*).
    let fx = op.score.apply(x_star.tensor())?;
    let score = {
        let mut g = op.score.vjp_params(x_star.tensor(), u.tensor())?;
        for (w, b2) in &mut g.layers {
            w.scale_mut(-s / op.lambda);
            b2.scale_mut(-s / op.lambda);
        }
        g
    };
    let lambda_grad = (s / (op.lambda * op.lambda)) * u.tensor().dot(&fx)?;
    // dL/db: T depends on b through +s*A'b, whose adjoint is s*A.
    let b_grad = op.mm.forward(&u)?.samples().scale(s);

    Ok(DeqGradients {
        score,
        lambda: lambda_grad,
        b: b_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::Graph;
    use crate::mri::{generate_coil_maps, generate_phantom, generate_vd_mask, MeasurementModel};
    use crate::operators::spectral_normalize;
    use crate::testutil::materialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(h: usize, w: usize, coils: usize, accel: f64, seed: u64) -> MeasurementModel {
        let mask = generate_vd_mask(h, w, accel, seed).unwrap();
        let maps = generate_coil_maps(coils, h, w, seed);
        MeasurementModel::new(mask, maps, 0.0).unwrap()
    }

    /// Q = m*I via the linear surrogate F = (m*lambda - lambda) * I on a
    /// fully sampled single coil.
    fn scaled_identity_op(h: usize, w: usize, m: f64, lambda: f64) -> CombinedOperator {
        let mm = MeasurementModel::identity(h, w);
        let net = ScoreNetwork::scalar_gain(m * lambda - lambda);
        CombinedOperator::new(net, mm, lambda).unwrap()
    }

    #[test]
    fn config_rejects_oversized_step() {
        assert!(SolverConfig::new(0.2, 10.0, 1e-5, 10).is_err());
        assert!(SolverConfig::new(0.1, 10.0, 1e-5, 10).is_ok());
    }

    #[test]
    fn linear_iteration_decays_exactly_at_the_predicted_rate() {
        let (m, lambda) = (0.05, 10.0);
        let op = scaled_identity_op(8, 8, m, lambda);
        let mm = &op.mm;
        let x_true = generate_phantom(8, 8, 3);
        let b = mm.forward(&x_true).unwrap();
        // fixed point of m*x = A'b
        let x_star = mm.adjoint(&b).unwrap().scale(1.0 / m);
        for gl in [1.0, 0.5] {
            let cfg = SolverConfig {
                gamma: gl / lambda,
                lambda,
                alpha: 1.0,
                tol: 1e-12,
                max_iter: 40,
                m_assumed: m,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut x0 = x_star.clone();
            x0.axpy_mut(0.3, &ComplexImage::randn(8, 8, &mut rng)).unwrap();
            let e0 = x0.dist(&x_star).unwrap();
            let rate = 1.0 - gl * m;
            let mut errors = Vec::new();
            let _ = steepest_descent_fp_observed(&op, &b, &x0, &cfg, &mut |_, x| {
                errors.push(x.dist(&x_star).unwrap());
            })
            .unwrap();
            for (k, err) in errors.iter().enumerate() {
                let predicted = e0 * rate.powi(k as i32);
                assert!(
                    (err - predicted).abs() <= 1e-10 * predicted.max(1e-12),
                    "gl={gl} k={k}: {err:.3e} vs {predicted:.3e}"
                );
            }
        }
    }

    #[test]
    fn zero_score_full_mask_converges_in_one_step() {
        let mm = MeasurementModel::identity(8, 8);
        let net = ScoreNetwork::zero_init(&[2, 2], 1).unwrap();
        let op = CombinedOperator::new(net, mm.clone(), 10.0).unwrap();
        let x_true = generate_phantom(8, 8, 5);
        let b = mm.forward(&x_true).unwrap();
        let cfg = SolverConfig::unit_step(10.0);
        let res = steepest_descent_fp(&op, &b, &ComplexImage::zeros(8, 8), &cfg).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        let ahb = mm.adjoint(&b).unwrap();
        assert!(res.x_star.dist(&ahb).unwrap() < 1e-12 * ahb.norm());
    }

    #[test]
    fn unit_step_needs_no_more_iterations_than_half_step() {
        let op = scaled_identity_op(8, 8, 0.2, 10.0);
        let x_true = generate_phantom(8, 8, 6);
        let b = op.mm.forward(&x_true).unwrap();
        let x0 = ComplexImage::zeros(8, 8);
        let mut iters = Vec::new();
        for gl in [1.0, 0.5] {
            let cfg = SolverConfig {
                gamma: gl / 10.0,
                lambda: 10.0,
                alpha: 1.0,
                tol: 1e-8,
                max_iter: 400,
                m_assumed: 0.2,
            };
            iters.push(steepest_descent_fp(&op, &b, &x0, &cfg).unwrap().iterations);
        }
        assert!(iters[0] <= iters[1], "unit step {} vs half step {}", iters[0], iters[1]);
    }

    #[test]
    fn converged_flag_implies_final_residual_below_tol() {
        let op = scaled_identity_op(8, 8, 0.1, 10.0);
        let b = op.mm.forward(&generate_phantom(8, 8, 7)).unwrap();
        let cfg = SolverConfig::unit_step(10.0);
        let res = steepest_descent_fp(&op, &b, &ComplexImage::zeros(8, 8), &cfg).unwrap();
        assert!(res.converged);
        assert!(*res.residuals.last().unwrap() <= cfg.tol);
        assert!(fixed_point_residual(&op, &b, &res.x_star).unwrap() < 10.0 * cfg.tol);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        // Q = -0.5 I: the iteration map has slope 1.5 and runs away.
        let op = scaled_identity_op(8, 8, -0.5, 10.0);
        let b = op.mm.forward(&generate_phantom(8, 8, 8)).unwrap();
        let cfg = SolverConfig::unit_step(10.0);
        let mut x0 = ComplexImage::zeros(8, 8);
        x0.tensor_mut().data_mut()[0] = 1e-3;
        match steepest_descent_fp(&op, &b, &x0, &cfg) {
            Err(Error::Divergence { residuals, .. }) => assert!(residuals.len() > 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cg_solves_identity_in_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rhs = Tensor::randn(&[16], &mut rng);
        let x = cg_solve(|t| Ok(t.clone()), &rhs, 1e-12, 2).unwrap();
        assert!(x.dist(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn cg_inverts_a_diagonal() {
        let d = [1.0, 2.0, 4.0];
        let rhs = Tensor::from_vec(&[3], vec![1.0, 2.0, 4.0]).unwrap();
        let x = cg_solve(
            |t| {
                Tensor::from_vec(
                    &[3],
                    t.data().iter().zip(d).map(|(v, di)| v * di).collect(),
                )
            },
            &rhs,
            1e-14,
            10,
        )
        .unwrap();
        for v in x.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_matches_dense_solve_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 32;
        let a = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| {
            use rand::Rng;
            rng.gen::<f64>() - 0.5
        });
        let spd = &a * a.transpose() + nalgebra::DMatrix::identity(n, n);
        let rhs_v = nalgebra::DVector::from_fn(n, |_, _| {
            use rand::Rng;
            rng.gen::<f64>() - 0.5
        });
        let rhs = Tensor::from_vec(&[n], rhs_v.as_slice().to_vec()).unwrap();
        let x = cg_solve(
            |t| {
                let v = &spd * nalgebra::DVector::from_column_slice(t.data());
                Tensor::from_vec(&[n], v.as_slice().to_vec())
            },
            &rhs,
            1e-12,
            200,
        )
        .unwrap();
        let dense = spd.clone().lu().solve(&rhs_v).unwrap();
        for (a2, b2) in x.data().iter().zip(dense.iter()) {
            assert!((a2 - b2).abs() < 1e-8);
        }
    }

    #[test]
    fn cg_rejects_indefinite_maps() {
        let rhs = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let res = cg_solve(|t| Ok(t.scale(-1.0)), &rhs, 1e-10, 10);
        assert!(matches!(res, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn forward_backward_contracts_to_zero_without_data() {
        let mm = MeasurementModel::identity(8, 8);
        let net = ScoreNetwork::zero_init(&[2, 2], 1).unwrap();
        let b = KSpaceData::zeros(&mm);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = ComplexImage::randn(8, 8, &mut rng);
        let cfg = SolverConfig {
            gamma: 0.1,
            lambda: 10.0,
            alpha: 1.0,
            tol: 1e-9,
            max_iter: 500,
            m_assumed: 0.0,
        };
        let res = forward_backward_fp(&net, &mm, &b, &x0, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.x_star.norm() < 1e-6 * x0.norm());
    }

    #[test]
    fn forward_backward_inner_solve_matches_dense() {
        let mm = model(8, 8, 2, 2.0, 12);
        let al = 1.0 * 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rhs_img = ComplexImage::randn(8, 8, &mut rng);
        let sol = cg_solve(
            |t| {
                let img = ComplexImage::new(t.clone())?;
                let mut y = mm.normal(&img)?.scale(al);
                y.axpy_mut(1.0, &img)?;
                Ok(y.into_tensor())
            },
            rhs_img.tensor(),
            1e-12,
            500,
        )
        .unwrap();
        let apply = |t: &Tensor| {
            let img = ComplexImage::new(t.clone()).unwrap();
            let mut y = mm.normal(&img).unwrap().scale(al);
            y.axpy_mut(1.0, &img).unwrap();
            y.into_tensor()
        };
        let mat = materialize(&apply, &[2, 8, 8], &[2, 8, 8]);
        let dense = mat
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(rhs_img.tensor().data()))
            .unwrap();
        for (a, b2) in sol.data().iter().zip(dense.iter()) {
            assert!((a - b2).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_backward_fixed_point_satisfies_optimality() {
        let mm = model(8, 8, 2, 2.0, 14);
        let raw = ScoreNetwork::default_arch(false, 1.0, 15);
        let net = spectral_normalize(&raw, 0.9, 8, 8, 500).unwrap();
        let x_true = generate_phantom(8, 8, 16);
        let b = mm.forward(&x_true).unwrap();
        let lambda = 10.0;
        let cfg = SolverConfig {
            gamma: 0.1,
            lambda,
            alpha: 1.0,
            tol: 1e-9,
            max_iter: 500,
            m_assumed: 0.0,
        };
        let x0 = sense_like_init(&b, &mm);
        let res = forward_backward_fp(&net, &mm, &b, &x0, &cfg).unwrap();
        assert!(res.converged);
        let op = CombinedOperator::new(net, mm, lambda).unwrap();
        let fp_res = fixed_point_residual(&op, &b, &res.x_star).unwrap();
        assert!(fp_res < 10.0 * cfg.tol, "optimality residual {fp_res:.3e}");
    }

    fn sense_like_init(b: &KSpaceData, mm: &MeasurementModel) -> ComplexImage {
        crate::mri::sense_init(b, mm, 1e-2, 1e-8, 300).unwrap()
    }

    #[test]
    fn local_uniqueness_many_starts_agree() {
        let op = scaled_identity_op(8, 8, 0.1, 10.0);
        let b = op.mm.forward(&generate_phantom(8, 8, 17)).unwrap();
        let cfg = SolverConfig {
            tol: 1e-9,
            max_iter: 300,
            ..SolverConfig::unit_step(10.0)
        };
        let x_star = op.mm.adjoint(&b).unwrap().scale(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut finals = Vec::new();
        for _ in 0..20 {
            let mut x0 = x_star.clone();
            x0.axpy_mut(0.2, &ComplexImage::randn(8, 8, &mut rng)).unwrap();
            finals.push(steepest_descent_fp(&op, &b, &x0, &cfg).unwrap().x_star);
        }
        let scale = x_star.norm();
        for i in 0..finals.len() {
            for j in (i + 1)..finals.len() {
                let d = finals[i].dist(&finals[j]).unwrap() / scale;
                assert!(d <= 10.0 * cfg.tol, "starts {i},{j} differ by {d:.3e}");
            }
        }
    }

    #[test]
    fn implicit_b_gradient_matches_linear_closed_form() {
        let (m, lambda) = (0.05, 10.0);
        for gl in [1.0, 0.5] {
            let op = scaled_identity_op(8, 8, m, lambda);
            let b = op.mm.forward(&generate_phantom(8, 8, 19)).unwrap();
            let x_star = op.mm.adjoint(&b).unwrap().scale(1.0 / m);
            let cfg = SolverConfig {
                gamma: gl / lambda,
                lambda,
                alpha: 1.0,
                tol: 1e-12,
                max_iter: 4000,
                m_assumed: m,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let v = ComplexImage::randn(8, 8, &mut rng);
            let g = deq_backward(&op, &cfg, &x_star, &v, 1e-13, 20000).unwrap();
            // dx*/db = A'/m, so the cotangent pullback is A v / m.
            let want = op.mm.forward(&v).unwrap().samples().scale(1.0 / m);
            let err = g.b.dist(&want).unwrap() / want.norm();
            assert!(err < 1e-6, "gl={gl}: b-gradient off by {err:.3e}");
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let op = scaled_identity_op(8, 8, 0.1, 10.0);
        let b = op.mm.forward(&generate_phantom(8, 8, 21)).unwrap();
        let x_star = op.mm.adjoint(&b).unwrap().scale(10.0);
        let cfg = SolverConfig::unit_step(10.0);
        let g = deq_backward(&op, &cfg, &x_star, &ComplexImage::zeros(8, 8), 1e-10, 100).unwrap();
        assert_eq!(g.lambda, 0.0);
        assert_eq!(g.b.norm(), 0.0);
        for (w, bg) in &g.score.layers {
            assert_eq!(w.norm(), 0.0);
            assert_eq!(bg.norm(), 0.0);
        }
    }

    // Oracle: differentiate 200 unrolled forward steps with the graph engine
    // (the masked normal operator enters as an explicit dense matrix) and
    // compare against the implicit gradients.
    #[test]
    fn implicit_gradients_match_unrolled_backprop() {
        let h = 16;
        let mm = model(h, h, 2, 2.0, 22);
        let raw = ScoreNetwork::new(&[2, 4, 2], 3, false, 1.0, 23).unwrap();
        let net = spectral_normalize(&raw, 0.8, h, h, 500).unwrap();
        let lambda = 10.0;
        let op = CombinedOperator::new(net.clone(), mm.clone(), lambda).unwrap();
        let x_true = generate_phantom(h, h, 24);
        let b = mm.forward(&x_true).unwrap();
        let cfg = SolverConfig {
            tol: 1e-13,
            max_iter: 400,
            ..SolverConfig::unit_step(lambda)
        };
        let x0 = sense_like_init(&b, &mm);
        let fwd = steepest_descent_fp(&op, &b, &x0, &cfg).unwrap();
        assert!(fwd.converged);

        // loss L = |x* - x_true|^2, cot = 2 (x* - x_true)
        let cot = fwd.x_star.sub(&x_true).unwrap().scale(2.0);
        let implicit = deq_backward(&op, &cfg, &fwd.x_star, &cot, 1e-12, 5000).unwrap();

        // unrolled oracle
        let napply = |t: &Tensor| {
            mm.normal(&ComplexImage::new(t.clone()).unwrap())
                .unwrap()
                .into_tensor()
                .reshaped(&[2 * h * h])
                .unwrap()
        };
        let nmat_na = materialize(
            &|t| napply(&t.reshaped(&[2, h, h]).unwrap()),
            &[2 * h * h],
            &[2 * h * h],
        );
        let nmat = Tensor::from_vec(
            &[2 * h * h, 2 * h * h],
            nmat_na.transpose().as_slice().to_vec(), // nalgebra is column-major
        )
        .unwrap();

        let mut g = Graph::new();
        let leaves = net.leaves(&mut g);
        let lam = g.leaf(Tensor::scalar(lambda));
        let nmat_id = g.leaf(nmat);
        let ahb = g.leaf(mm.adjoint(&b).unwrap().into_tensor());
        let xref = g.leaf(x_true.tensor().clone());
        let mut x = g.leaf(x0.tensor().clone());
        let inv = g.recip(lam).unwrap();
        for _ in 0..200 {
            let flat = g.reshape(x, &[2 * h * h]).unwrap();
            let nx = g.matvec(nmat_id, flat).unwrap();
            let nx = g.reshape(nx, &[2, h, h]).unwrap();
            let fx = net.forward_graph(&mut g, &leaves, x).unwrap();
            let fx = g.scale_by(fx, inv).unwrap();
            let t1 = g.sub(x, nx).unwrap();
            let t2 = g.sub(t1, fx).unwrap();
            x = g.add(t2, ahb).unwrap();
        }
        let d = g.sub(x, xref).unwrap();
        let loss = g.dot(d, d).unwrap();
        let mut ids = vec![lam];
        for i in 0..net.layers().len() {
            ids.push(leaves.weights[i]);
            ids.push(leaves.biases[i]);
        }
        let grads = g.grad(loss, &ids).unwrap();

        let lam_err = (grads[0].item() - implicit.lambda).abs()
            / implicit.lambda.abs().max(1e-9);
        assert!(lam_err < 1e-5, "lambda gradient off by {lam_err:.3e}");
        for (i, (w, bg)) in implicit.score.layers.iter().enumerate() {
            let we = grads[1 + 2 * i].dist(w).unwrap() / w.norm().max(1e-9);
            let be = grads[2 + 2 * i].dist(bg).unwrap() / bg.norm().max(1e-9);
            assert!(we < 1e-5, "layer {i} weight gradient off by {we:.3e}");
            assert!(be < 1e-5, "layer {i} bias gradient off by {be:.3e}");
        }
    }
}
