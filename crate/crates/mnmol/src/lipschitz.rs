//! Local Lipschitz estimation by projected gradient ascent on the ratio
//! `|H(z2) - H(z1)| / |z2 - z1|` over a ball around a reference point.
//!
//! The ascent maximizes the squared ratio (same maximizer, smoother
//! gradients) and reports the square root of the best value seen. The result
//! is a lower bound on the true local Lipschitz constant; certification
//! suites run it with a few hundred steps, the trainer with ~15.

use crate::error::{Error, Result};
use crate::operators::LocalOperator;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Closed ball `{ z : |z - center| <= radius }`.
///
/// Radii are resolved to absolute norm units on construction;
/// [`BallSpec::from_relative`] expresses the radius as a fraction of the
/// center's norm, the convention used for basin selection.
#[derive(Debug, Clone)]
pub struct BallSpec {
    pub center: Tensor,
    pub radius: f64,
}

impl BallSpec {
    pub fn from_radius(center: Tensor, radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::invalid("ball radius must be > 0"));
        }
        Ok(BallSpec { center, radius })
    }

    /// Radius `delta * |center|`.
    pub fn from_relative(center: Tensor, delta: f64) -> Result<Self> {
        let radius = delta * center.norm();
        BallSpec::from_radius(center, radius)
    }

    pub fn contains(&self, z: &Tensor, slack: f64) -> bool {
        match z.dist(&self.center) {
            Ok(d) => d <= self.radius + slack,
            Err(_) => false,
        }
    }
}

/// Radial projection onto the ball: interior points pass through, exterior
/// points land on the sphere.
pub fn project_ball(z: &Tensor, ball: &BallSpec) -> Result<Tensor> {
    let d = z.dist(&ball.center)?;
    if d <= ball.radius {
        return Ok(z.clone());
    }
    let mut out = ball.center.clone();
    out.axpy_mut(ball.radius / d, &z.sub(&ball.center)?)?;
    Ok(out)
}

/// Ascent output: the best ratio seen and the pair achieving it.
#[derive(Debug, Clone)]
pub struct LipschitzEstimate {
    pub l: f64,
    pub z1: Tensor,
    pub z2: Tensor,
    /// Best-so-far ratio after each ascent step (non-decreasing).
    pub ascent_trace: Vec<f64>,
}

fn ratio(op: &dyn LocalOperator, z1: &Tensor, z2: &Tensor) -> Result<f64> {
    let num = op.apply(z2)?.dist(&op.apply(z1)?)?;
    let den = z2.dist(z1)?;
    Ok(num / den)
}

/// Gradients of the squared ratio with respect to both points.
fn squared_ratio_grads(
    op: &dyn LocalOperator,
    z1: &Tensor,
    z2: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let h1 = op.apply(z1)?;
    let h2 = op.apply(z2)?;
    let dh = h2.sub(&h1)?;
    let dz = z2.sub(z1)?;
    let n = dh.dot(&dh)?;
    let d = dz.dot(&dz)?;
    // d/dz2 (N/D) = (2 J(z2)' dh) / D - (N/D^2) 2 dz,  d/dz1 is the mirror.
    let mut g2 = op.vjp(z2, &dh)?.scale(2.0 / d);
    g2.axpy_mut(-2.0 * n / (d * d), &dz)?;
    let mut g1 = op.vjp(z1, &dh)?.scale(-2.0 / d);
    g1.axpy_mut(2.0 * n / (d * d), &dz)?;
    Ok((g1, g2))
}

/// Projected gradient ascent on the local Lipschitz ratio, starting from a
/// seeded random pair inside the ball. Both points move. Step size backtracks
/// (halves) whenever a step would decrease the ratio; if the pair collapses
/// it is re-split by a seeded perturbation, and more than five collapses is
/// an error.
pub fn estimate_local_lipschitz(
    op: &dyn LocalOperator,
    ball: &BallSpec,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if steps == 0 {
        return Err(Error::invalid("ascent needs at least one step"));
    }
    if step_size <= 0.0 {
        return Err(Error::invalid("step_size must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0xa5ce);
    // Raw Gaussian offsets projected into the ball: starts do not depend on
    // the radius, nested balls just project them differently.
    let draw = |rng: &mut ChaCha8Rng, ball: &BallSpec| -> Result<Tensor> {
        let mut z = ball.center.clone();
        z.axpy_mut(1.0, &Tensor::randn(ball.center.shape(), rng))?;
        project_ball(&z, ball)
    };
    let mut z1 = draw(&mut rng, ball)?;
    let mut z2 = draw(&mut rng, ball)?;
    let mut collisions = 0usize;
    let collapse_tol = 1e-9 * ball.radius;
    let mut split = |z1: &Tensor, z2: &mut Tensor, rng: &mut ChaCha8Rng| -> Result<()> {
        loop {
            if z1.dist(z2)? > collapse_tol {
                return Ok(());
            }
            collisions += 1;
            if collisions > 5 {
                return Err(Error::CollisionLimit(5));
            }
            let dir = Tensor::randn(z2.shape(), rng);
            let n = dir.norm();
            z2.axpy_mut(ball.radius / (100.0 * n), &dir)?;
            *z2 = project_ball(z2, ball)?;
        }
    };
    split(&z1, &mut z2, &mut rng)?;

    let mut best = ratio(op, &z1, &z2)?;
    let mut best_pair = (z1.clone(), z2.clone());
    let mut trace = vec![best];
    let mut step = step_size;
    let min_step = 1e-12 * ball.radius;

    for _ in 0..steps {
        let (g1, g2) = squared_ratio_grads(op, &z1, &z2)?;
        let current = ratio(op, &z1, &z2)?;
        loop {
            let mut c1 = z1.clone();
            c1.axpy_mut(step, &g1)?;
            let mut c2 = z2.clone();
            c2.axpy_mut(step, &g2)?;
            let c1 = project_ball(&c1, ball)?;
            let c2 = project_ball(&c2, ball)?;
            // collapse check before evaluating the ratio
            if c1.dist(&c2)? <= collapse_tol {
                let mut c2m = c2.clone();
                split(&c1, &mut c2m, &mut rng)?;
                let cand = ratio(op, &c1, &c2m)?;
                z1 = c1;
                z2 = c2m;
                if cand > best {
                    best = cand;
                    best_pair = (z1.clone(), z2.clone());
                }
                break;
            }
            let cand = ratio(op, &c1, &c2)?;
            if cand + 1e-15 >= current {
                z1 = c1;
                z2 = c2;
                if cand > best {
                    best = cand;
                    best_pair = (z1.clone(), z2.clone());
                }
                break;
            }
            step *= 0.5;
            if step < min_step {
                break;
            }
        }
        trace.push(best);
    }

    Ok(LipschitzEstimate {
        l: best,
        z1: best_pair.0,
        z2: best_pair.1,
        ascent_trace: trace,
    })
}

/// Convenience: ascent with the default step size `0.1 * radius`.
pub fn estimate_with_defaults(
    op: &dyn LocalOperator,
    ball: &BallSpec,
    steps: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    estimate_local_lipschitz(op, ball, steps, 0.1 * ball.radius, seed)
}
