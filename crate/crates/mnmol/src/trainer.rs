//! End-to-end deep-equilibrium training with a local Lipschitz penalty,
//! plus basin-radius selection.
//!
//! Per sample: solve the forward fixed point from the least-squares
//! initializer, estimate the local Lipschitz constant of the constrained
//! residual by short projected gradient ascent (operator frozen), form
//! `|x* - x_ref|^2 + beta * relu(L - T)^2` with threshold `T = 1 - m`, pull
//! gradients back through the equilibrium, and update. Batch size is one and
//! the loop is single-threaded, so runs are bit-reproducible under a fixed
//! seed.
//!
//! Three variants share the loop:
//! - `MnmMol`: penalty on the combined residual `I - Q`.
//! - `MolL`: penalty on the score's own residual `I - F`.
//! - `MolSn`: no penalty; the score is kept in residual form and its conv
//!   stack is spectrally renormalized after every update.

use crate::error::{Error, Result};
use crate::lipschitz::{estimate_with_defaults, BallSpec, LipschitzEstimate};
use crate::mri::{sense_init, ComplexImage, KSpaceData, MeasurementModel};
use crate::operators::{
    spectral_normalize, CombinedOperator, CombinedResidual, ScoreGrads, ScoreNetwork,
    ScoreResidual,
};
use crate::solvers::{deq_backward, steepest_descent_fp, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    MnmMol,
    MolL,
    MolSn,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::MnmMol => "mnm-mol",
            Variant::MolL => "mol-l",
            Variant::MolSn => "mol-sn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnm-mol" => Ok(Variant::MnmMol),
            "mol-l" => Ok(Variant::MolL),
            "mol-sn" => Ok(Variant::MolSn),
            other => Err(Error::invalid(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Target monotonicity modulus; the Lipschitz threshold is `1 - m`.
    pub m: f64,
    /// Penalty weight.
    pub beta: f64,
    /// Ball radius in relative units (fraction of the fixed point's norm).
    pub delta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Ascent steps per Lipschitz estimate during training.
    pub pga_steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub lambda_init: f64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub init_scale: f64,
    pub sense_mu: f64,
    pub forward_tol: f64,
    pub forward_max_iter: usize,
    pub backward_tol: f64,
    pub backward_max_iter: usize,
    /// Fraction of per-epoch sample failures tolerated before aborting.
    pub failure_budget: f64,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            m: 0.1,
            beta: 1.0,
            delta: 0.3,
            epochs: 10,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            pga_steps: 15,
            seed: 0,
            variant,
            lambda_init: 10.0,
            channels: vec![2, 16, 16, 2],
            kernel: 3,
            init_scale: 0.5,
            sense_mu: 1e-2,
            forward_tol: 1e-5,
            forward_max_iter: 100,
            backward_tol: 1e-4,
            backward_max_iter: 300,
            failure_budget: 0.1,
        }
    }

    /// `T = 1 - m`, exactly.
    pub fn threshold(&self) -> f64 {
        1.0 - self.m
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m && self.m < 1.0) {
            return Err(Error::invalid("m must lie in (0, 1)"));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid("beta must be >= 0"));
        }
        if self.delta <= 0.0 {
            return Err(Error::invalid("delta must be > 0"));
        }
        if self.epochs == 0 || self.pga_steps == 0 {
            return Err(Error::invalid("epochs and pga_steps must be >= 1"));
        }
        if self.lambda_init <= 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::invalid("lambda_init and learning_rate must be > 0"));
        }
        Ok(())
    }

    pub fn solver(&self, lambda: f64) -> SolverConfig {
        SolverConfig {
            gamma: 1.0 / lambda,
            lambda,
            alpha: 1.0,
            tol: self.forward_tol,
            max_iter: self.forward_max_iter,
            m_assumed: self.m,
        }
    }
}

/// One supervised pair: ground truth, its undersampled measurements, and the
/// model that produced them.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_ref: ComplexImage,
    pub b: KSpaceData,
    pub mm: MeasurementModel,
}

/// Largest relative deviation of the least-squares initializer from the
/// reference, over the dataset. Training with this radius guarantees the
/// initializer starts inside every sample's ball.
pub fn choose_delta(dataset: &[TrainSample], mu: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut worst: f64 = 0.0;
    for s in dataset {
        worst = worst.max(init_deviation(s, mu)?);
    }
    Ok(worst)
}

/// `|x_ls - x_ref| / |x_ref|` for one sample.
pub fn init_deviation(sample: &TrainSample, mu: f64) -> Result<f64> {
    let x_ls = sense_init(&sample.b, &sample.mm, mu, 1e-8, 400)?;
    Ok(x_ls.dist(&sample.x_ref)? / sample.x_ref.norm())
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub data_term: f64,
    pub penalty: f64,
    /// Lipschitz estimate used by the penalty (or diagnostic estimate for
    /// the spectrally normalized variant).
    pub lipschitz: f64,
    pub x_star: ComplexImage,
}

/// Loss and parameter gradients for one sample at the current operator.
/// The certifying pair is found with the operator frozen; the penalty is then
/// differentiated through the two residual evaluations at that pair.
pub fn loss_and_grad(
    sample: &TrainSample,
    score: &ScoreNetwork,
    lambda: f64,
    cfg: &TrainConfig,
    pga_seed: u64,
) -> Result<(LossReport, ScoreGrads, f64)> {
    let op = CombinedOperator::new(score.clone(), sample.mm.clone(), lambda)?;
    let scfg = cfg.solver(lambda);
    let x0 = sense_init(&sample.b, &sample.mm, cfg.sense_mu, 1e-8, 400)?;
    let fwd = steepest_descent_fp(&op, &sample.b, &x0, &scfg)?;
    if !fwd.converged {
        return Err(Error::NoConvergence {
            residual: *fwd.residuals.last().unwrap_or(&f64::NAN),
            tol: scfg.tol,
        });
    }
    let x_star = fwd.x_star;

    let diff = x_star.sub(&sample.x_ref)?;
    let data_term = diff.dot_re(&diff)?;
    let cot = diff.scale(2.0);
    let dg = deq_backward(&op, &scfg, &x_star, &cot, cfg.backward_tol, cfg.backward_max_iter)?;
    let mut grads = dg.score;
    let mut lambda_grad = dg.lambda;

    let ball = BallSpec::from_relative(x_star.tensor().clone(), cfg.delta)?;
    let est = match cfg.variant {
        Variant::MnmMol | Variant::MolSn => {
            estimate_with_defaults(&CombinedResidual(&op), &ball, cfg.pga_steps, pga_seed)?
        }
        Variant::MolL => {
            estimate_with_defaults(&ScoreResidual(score), &ball, cfg.pga_steps, pga_seed)?
        }
    };

    let mut penalty = 0.0;
    let threshold = cfg.threshold();
    let excess = est.l - threshold;
    if cfg.beta > 0.0 && cfg.variant != Variant::MolSn && excess > 0.0 {
        penalty = cfg.beta * excess * excess;
        let (pg, pl) = penalty_gradients(&op, score, lambda, cfg, &est)?;
        grads.axpy_mut(1.0, &pg)?;
        lambda_grad += pl;
    }

    Ok((
        LossReport {
            total: data_term + penalty,
            data_term,
            penalty,
            lipschitz: est.l,
            x_star,
        },
        grads,
        lambda_grad,
    ))
}

/// Gradient of `beta * relu(L - T)^2` with respect to the score parameters
/// and lambda, holding the certifying pair fixed.
///
/// With `N = |H(z2) - H(z1)|^2` and `D = |z2 - z1|^2`, `L = sqrt(N / D)` and
/// `dL = dN / (2 L D)`. Only the score-dependent part of the residual
/// contributes to `dN`.
fn penalty_gradients(
    op: &CombinedOperator,
    score: &ScoreNetwork,
    lambda: f64,
    cfg: &TrainConfig,
    est: &LipschitzEstimate,
) -> Result<(ScoreGrads, f64)> {
    let z1 = &est.z1;
    let z2 = &est.z2;
    let (h_of, lambda_coupled): (Box<dyn Fn(&crate::tensor::Tensor) -> Result<crate::tensor::Tensor>>, bool) =
        match cfg.variant {
            Variant::MnmMol => {
                let op = op.clone();
                (
                    Box::new(move |t| {
                        Ok(op.residual(&ComplexImage::new(t.clone())?)?.into_tensor())
                    }),
                    true,
                )
            }
            Variant::MolL => {
                let net = score.clone();
                (Box::new(move |t| t.sub(&net.apply(t)?)), false)
            }
            Variant::MolSn => unreachable!("no penalty for the spectrally normalized variant"),
        };

    let d = h_of(z2)?.sub(&h_of(z1)?)?;
    let dz = z2.sub(z1)?;
    let den = dz.dot(&dz)?;
    let n = d.dot(&d)?;
    let l = (n / den).sqrt();

    // dN wrt score parameters: the residual depends on F through
    // -(c) F(z), with c = 1/lambda for the combined residual and c = 1 for
    // the score's own residual.
    let c = if lambda_coupled { 1.0 / lambda } else { 1.0 };
    let mut dn = score.vjp_params(z2, &d)?;
    dn.axpy_mut(-1.0, &score.vjp_params(z1, &d)?)?;
    for (w, b) in &mut dn.layers {
        w.scale_mut(-2.0 * c);
        b.scale_mut(-2.0 * c);
    }

    // chain through L and the hinge
    let excess = l - cfg.threshold();
    let outer = 2.0 * cfg.beta * excess.max(0.0) / (2.0 * l * den);
    for (w, b) in &mut dn.layers {
        w.scale_mut(outer);
        b.scale_mut(outer);
    }

    // dN/dlambda = +(2/lambda^2) <d, F(z2) - F(z1)> for the combined residual
    let lambda_grad = if lambda_coupled {
        let df = score.apply(z2.data_as_tensor())?.sub(&score.apply(z1.data_as_tensor())?)?;
        let dn_dl = (2.0 / (lambda * lambda)) * d.dot(&df)?;
        outer * dn_dl
    } else {
        0.0
    };

    Ok((dn, lambda_grad))
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_lipschitz: f64,
    pub violation_rate: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Trained operator parameters plus the settings needed to run it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub score: ScoreNetwork,
    pub lambda: f64,
    pub variant: Variant,
    pub m: f64,
    pub delta: f64,
}

impl TrainedModel {
    pub fn operator(&self, mm: MeasurementModel) -> Result<CombinedOperator> {
        CombinedOperator::new(self.score.clone(), mm, self.lambda)
    }

    pub fn solver_config(&self, tol: f64, max_iter: usize) -> SolverConfig {
        SolverConfig {
            gamma: 1.0 / self.lambda,
            lambda: self.lambda,
            alpha: 1.0,
            tol,
            max_iter,
            m_assumed: self.m,
        }
    }
}

enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: usize,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => Optimizer::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
                beta1,
                beta2,
                eps,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grads[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grads[i] * grads[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    params[i] -= lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}

fn mix_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(epoch as u64)
        .wrapping_mul(0xbf58476d1ce4e5b9)
        .wrapping_add(sample as u64);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 29)
}

/// End-to-end training. Samples that fail to converge (forward or adjoint)
/// are skipped with a warning; more than `failure_budget` of an epoch aborts
/// with the history gathered so far.
pub fn train(dataset: &[TrainSample], cfg: &TrainConfig) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w) = (dataset[0].x_ref.h(), dataset[0].x_ref.w());
    let residual_form = cfg.variant == Variant::MolSn;
    let mut score = ScoreNetwork::new(
        &cfg.channels,
        cfg.kernel,
        residual_form,
        cfg.init_scale,
        cfg.seed,
    )?;
    if residual_form {
        score = spectral_normalize(&score, cfg.threshold(), h, w, 500)?;
    }
    let mut lambda = cfg.lambda_init;
    let dim = score.param_count() + 1;
    let mut opt = Optimizer::new(cfg.optimizer, dim);
    let mut history = TrainHistory::default();
    let allowed = (cfg.failure_budget * dataset.len() as f64).floor() as usize;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lip_sum = 0.0;
        let mut violations = 0usize;
        let mut skipped = 0usize;
        let mut used = 0usize;
        for (idx, sample) in dataset.iter().enumerate() {
            let pga_seed = mix_seed(cfg.seed, epoch, idx);
            let (report, grads, lambda_grad) =
                match loss_and_grad(sample, &score, lambda, cfg, pga_seed) {
                    Ok(out) => out,
                    Err(
                        err @ (Error::NoConvergence { .. }
                        | Error::Divergence { .. }
                        | Error::AdjointNoConvergence { .. }
                        | Error::CgNoConvergence { .. }),
                    ) => {
                        eprintln!(
                            "warning: epoch {epoch} sample {idx} skipped: {err}"
                        );
                        skipped += 1;
                        if skipped > allowed {
                            return Err(Error::TrainingAborted {
                                epoch,
                                failures: skipped,
                                samples: dataset.len(),
                            });
                        }
                        continue;
                    }
                    Err(other) => return Err(other),
                };

            let mut flat = score.flatten_params();
            let mut gflat = Vec::with_capacity(dim);
            grads.flatten_into(&mut gflat);
            flat.push(lambda);
            gflat.push(lambda_grad);
            opt.step(&mut flat, &gflat, cfg.learning_rate);
            lambda = flat.pop().expect("lambda slot").max(1e-3);
            score.set_from_flat(&flat)?;
            if residual_form {
                score = spectral_normalize(&score, cfg.threshold(), h, w, 500)?;
            }

            loss_sum += report.total;
            lip_sum += report.lipschitz;
            if report.lipschitz > cfg.threshold() {
                violations += 1;
            }
            used += 1;
        }
        let denom = used.max(1) as f64;
        history.epochs.push(EpochStats {
            mean_loss: loss_sum / denom,
            mean_lipschitz: lip_sum / denom,
            violation_rate: violations as f64 / denom,
            skipped,
        });
    }

    Ok((
        TrainedModel {
            score,
            lambda,
            variant: cfg.variant,
            m: cfg.m,
            delta: cfg.delta,
        },
        history,
    ))
}
