//! Joint Laplace/Gauss dynamics by symmetric operator splitting.
//!
//! One split step is a leapfrog step on the covariance block with the latent
//! block frozen, an exact zigzag leg of length `rs * eps` on the latent block
//! with the covariance block frozen, then another leapfrog step. The
//! composition is reversible under momentum negation, so the usual
//! Metropolis test (or no-U-turn doubling) corrects the leapfrog error.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hmc::{draw_gaussian, nuts_transition, NutsOptions, NutsTransition, Trajectory};
use crate::tmvn::{draw_laplace, run_flow, DenseTarget, GaussianTarget, ZigzagState};
use crate::traits::ConstraintMap;

/// A joint target over a Gaussian-momentum block `theta` and a latent block
/// `x` whose conditional given `theta` is a (truncated) Gaussian.
pub trait JointSystem {
    type Target<'a>: GaussianTarget
    where
        Self: 'a;
    /// Summary of `x` that the `theta` potential depends on.
    type Stats: Clone;

    fn theta_dim(&self) -> usize;

    fn constraints(&self) -> &ConstraintMap;

    /// Conditional target of `x` given `theta`.
    fn latent_target(&self, theta: &[f64]) -> Result<Self::Target<'_>>;

    fn latent_stats(&self, x: &[f64]) -> Self::Stats;

    /// Joint potential `U(theta, x) = -log pi(theta, x)` (up to a constant)
    /// from the latent summary, writing `grad_theta U` into `grad`.
    /// As a function of `x` it must agree with the latent target's potential
    /// up to a term that depends on `theta` only.
    fn potential_and_gradient(&self, theta: &[f64], stats: &Self::Stats, grad: &mut [f64]) -> f64;
}

/// Phase-space point of the joint dynamics with cached potential.
#[derive(Debug, Clone)]
pub struct LgPoint<S> {
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub x: Vec<f64>,
    pub p_l: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
    pub stats: S,
}

impl<S: Clone> LgPoint<S> {
    pub fn new<J: JointSystem<Stats = S> + ?Sized>(theta: Vec<f64>, p_g: Vec<f64>, x: Vec<f64>, p_l: Vec<f64>, system: &J) -> Self {
        let stats = system.latent_stats(&x);
        let mut grad = vec![0.0; theta.len()];
        let potential = system.potential_and_gradient(&theta, &stats, &mut grad);
        Self { theta, p_g, x, p_l, potential, grad, stats }
    }

    pub fn kinetic_gaussian(&self) -> f64 {
        0.5 * self.p_g.iter().map(|p| p * p).sum::<f64>()
    }

    pub fn kinetic_laplace(&self) -> f64 {
        self.p_l.iter().map(|p| p.abs()).sum()
    }

    pub fn hamiltonian(&self) -> f64 {
        self.potential + self.kinetic_gaussian() + self.kinetic_laplace()
    }

    fn leapfrog<J: JointSystem<Stats = S> + ?Sized>(&mut self, eps: f64, system: &J) {
        for (p, g) in self.p_g.iter_mut().zip(&self.grad) {
            *p -= 0.5 * eps * g;
        }
        for (t, p) in self.theta.iter_mut().zip(&self.p_g) {
            *t += eps * p;
        }
        self.potential = system.potential_and_gradient(&self.theta, &self.stats, &mut self.grad);
        for (p, g) in self.p_g.iter_mut().zip(&self.grad) {
            *p -= 0.5 * eps * g;
        }
    }

    fn zigzag_leg<J: JointSystem<Stats = S> + ?Sized>(&mut self, time: f64, system: &J) -> Result<()> {
        if time == 0.0 || self.x.is_empty() {
            return Ok(());
        }
        let backward = time < 0.0;
        let target = system.latent_target(&self.theta)?;
        let mut p = std::mem::take(&mut self.p_l);
        if backward {
            p.iter_mut().for_each(|v| *v = -*v);
        }
        let mut state = ZigzagState::new(std::mem::take(&mut self.x), p, &target, system.constraints())?;
        run_flow(&mut state, &target, system.constraints(), time.abs(), None)?;
        if backward {
            state.p.iter_mut().for_each(|v| *v = -*v);
        }
        self.x = state.x;
        self.p_l = state.p;
        self.stats = system.latent_stats(&self.x);
        self.potential = system.potential_and_gradient(&self.theta, &self.stats, &mut self.grad);
        Ok(())
    }
}

/// One split step of signed size `eps`: leapfrog, zigzag for `rs * eps`, leapfrog.
pub fn lg_step<J: JointSystem + ?Sized>(point: &mut LgPoint<J::Stats>, eps: f64, rs: f64, system: &J) -> Result<()> {
    point.leapfrog(eps, system);
    point.zigzag_leg(rs * eps, system)?;
    point.leapfrog(eps, system);
    Ok(())
}

/// Chain state carried between joint updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitState {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    /// Momenta at the end of the last transition.
    pub p_g: Vec<f64>,
    pub p_l: Vec<f64>,
    pub step_size: f64,
    pub step_ratio: f64,
    pub lstep: usize,
}

impl SplitState {
    pub fn new(theta: Vec<f64>, x: Vec<f64>, step_size: f64, step_ratio: f64, lstep: usize) -> Self {
        let (dg, dl) = (theta.len(), x.len());
        Self { theta, x, p_g: vec![0.0; dg], p_l: vec![0.0; dl], step_size, step_ratio, lstep }
    }
}

/// Result of one joint transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LgOutcome {
    pub accepted: bool,
    /// Metropolis acceptance probability, or the no-U-turn mean acceptance.
    pub accept_stat: f64,
    pub divergent: bool,
    pub n_steps: usize,
    pub depth: usize,
}

fn fresh_point<J: JointSystem + ?Sized, R: Rng + ?Sized>(state: &SplitState, system: &J, rng: &mut R) -> LgPoint<J::Stats> {
    let p_g = draw_gaussian(state.theta.len(), rng);
    let p_l = draw_laplace(system.constraints(), rng);
    LgPoint::new(state.theta.clone(), p_g, state.x.clone(), p_l, system)
}

/// Joint HMC: `lstep` split steps then a Metropolis test.
pub fn lg_hmc_kernel<J: JointSystem + ?Sized, R: Rng + ?Sized>(state: &mut SplitState, system: &J, rng: &mut R) -> Result<LgOutcome> {
    if state.lstep == 0 {
        return Err(Error::InvalidArgument("lstep must be at least 1".into()));
    }
    let start = fresh_point(state, system, rng);
    let h0 = start.hamiltonian();
    let mut point = start.clone();
    for _ in 0..state.lstep {
        lg_step(&mut point, state.step_size, state.step_ratio, system)?;
        if !point.potential.is_finite() {
            break;
        }
    }
    let h1 = point.hamiltonian();
    let divergent = !h1.is_finite() || h1 - h0 > crate::hmc::DIVERGENCE_THRESHOLD;
    let accept_stat = if h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
    let accepted = rng.random::<f64>() < accept_stat;
    let end = if accepted { point } else { start };
    state.theta = end.theta;
    state.x = end.x;
    state.p_g = end.p_g;
    state.p_l = end.p_l;
    Ok(LgOutcome { accepted, accept_stat, divergent, n_steps: state.lstep, depth: 0 })
}

/// Split steps driven by the no-U-turn tree builder.
pub struct LgTrajectory<'a, J: ?Sized> {
    pub system: &'a J,
    pub step_size: f64,
    pub step_ratio: f64,
}

impl<J: JointSystem + ?Sized> Trajectory for LgTrajectory<'_, J> {
    type Point = LgPoint<J::Stats>;

    fn step(&self, point: &Self::Point, forward: bool) -> Result<Self::Point> {
        let mut next = point.clone();
        let eps = if forward { self.step_size } else { -self.step_size };
        lg_step(&mut next, eps, self.step_ratio, self.system)?;
        Ok(next)
    }

    fn hamiltonian(&self, point: &Self::Point) -> f64 {
        point.hamiltonian()
    }

    /// Position is `(theta, x)`; velocity is `(p_g, sign(p_l))`.
    fn no_u_turn(&self, minus: &Self::Point, plus: &Self::Point) -> bool {
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..minus.theta.len() {
            let d = plus.theta[i] - minus.theta[i];
            a += d * minus.p_g[i];
            b += d * plus.p_g[i];
        }
        for i in 0..minus.x.len() {
            let d = plus.x[i] - minus.x[i];
            a += d * sign(minus.p_l[i]);
            b += d * sign(plus.p_l[i]);
        }
        a >= 0.0 && b >= 0.0
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Joint no-U-turn transition.
pub fn lg_nuts_kernel<J: JointSystem + ?Sized, R: Rng + ?Sized>(
    state: &mut SplitState,
    system: &J,
    options: &NutsOptions,
    rng: &mut R,
) -> Result<LgOutcome> {
    let start = fresh_point(state, system, rng);
    let traj = LgTrajectory { system, step_size: state.step_size, step_ratio: state.step_ratio };
    let t: NutsTransition<LgPoint<J::Stats>> = nuts_transition(&traj, start, options, rng)?;
    let accepted = t.point.theta != state.theta || t.point.x != state.x;
    state.theta = t.point.theta;
    state.x = t.point.x;
    state.p_g = t.point.p_g;
    state.p_l = t.point.p_l;
    Ok(LgOutcome { accepted, accept_stat: t.accept_stat, divergent: t.divergent, n_steps: t.n_steps, depth: t.depth })
}

/// Zero-mean joint normal over `(theta, x)`: the first `k` coordinates form
/// the Gaussian-momentum block, the rest the latent block (optionally
/// truncated by `cmap`). Small reference problem for the joint samplers.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    precision: DMatrix<f64>,
    k: usize,
    cmap: ConstraintMap,
}

impl JointGaussian {
    pub fn new(covariance: &DMatrix<f64>, k: usize, cmap: ConstraintMap) -> Result<Self> {
        let n = covariance.nrows();
        if covariance.ncols() != n || k > n || cmap.dim() != n - k {
            return Err(Error::InvalidArgument("joint covariance, block size and constraint map disagree".into()));
        }
        let precision = covariance.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("joint covariance".into()))?.inverse();
        Ok(Self { precision, k, cmap })
    }
}

impl JointSystem for JointGaussian {
    type Target<'a> = DenseTarget;
    type Stats = Vec<f64>;

    fn theta_dim(&self) -> usize {
        self.k
    }

    fn constraints(&self) -> &ConstraintMap {
        &self.cmap
    }

    fn latent_target(&self, theta: &[f64]) -> Result<DenseTarget> {
        let k = self.k;
        let m = self.precision.nrows() - k;
        let pxx = self.precision.view((k, k), (m, m)).into_owned();
        let pxt = self.precision.view((k, 0), (m, k)).into_owned();
        let t = nalgebra::DVector::from_column_slice(theta);
        let chol = pxx.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("latent precision".into()))?;
        let mean = -chol.solve(&(pxt * t));
        DenseTarget::new(mean.iter().copied().collect(), pxx)
    }

    fn latent_stats(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn potential_and_gradient(&self, theta: &[f64], x: &Vec<f64>, grad: &mut [f64]) -> f64 {
        let z = nalgebra::DVector::from_iterator(theta.len() + x.len(), theta.iter().chain(x.iter()).copied());
        let pz = &self.precision * &z;
        grad[..self.k].copy_from_slice(&pz.as_slice()[..self.k]);
        0.5 * z.dot(&pz)
    }
}

/// Smallest eigenvalue of a symmetric matrix after a `1e-10` ridge.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::InvalidArgument("covariance estimate must be a non-empty square matrix".into()));
    }
    let asym = (m - m.transpose()).amax();
    if !(asym <= 1e-8 * m.amax().max(1.0)) {
        return Err(Error::InvalidArgument("covariance estimate is not symmetric".into()));
    }
    let reg = m + DMatrix::identity(n, n) * 1e-10;
    let lambda = reg.symmetric_eigenvalues().min();
    if !(lambda > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("minimal eigenvalue {lambda}")));
    }
    Ok(lambda)
}

/// Step-size ratio `sqrt(lambda_min(L) / lambda_min(G))`.
pub fn tune_rs(sigma_g: &DMatrix<f64>, sigma_l: &DMatrix<f64>) -> Result<f64> {
    Ok((min_eigenvalue(sigma_l)? / min_eigenvalue(sigma_g)?).sqrt())
}

/// Monte Carlo estimate of `E |<v, u>|` for a uniform random unit vector `u`
/// and a uniform sign vector `v` in `d` dimensions.
pub fn mean_speed_laplace<R: Rng + ?Sized>(d: usize, n_mc: usize, rng: &mut R) -> f64 {
    assert!(d >= 1 && n_mc >= 1);
    let mut total = 0.0;
    for _ in 0..n_mc {
        let u = draw_gaussian(d, rng);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = u.iter().map(|&x| if rng.random::<bool>() { x } else { -x }).sum();
        total += (dot / norm).abs();
    }
    total / n_mc as f64
}

/// Same quantity with a standard normal velocity, whose exact value is
/// `sqrt(2 / pi)` in every dimension.
pub fn mean_speed_gaussian<R: Rng + ?Sized>(d: usize, n_mc: usize, rng: &mut R) -> f64 {
    assert!(d >= 1 && n_mc >= 1);
    let mut total = 0.0;
    for _ in 0..n_mc {
        let u = draw_gaussian(d, rng);
        let v = draw_gaussian(d, rng);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += (u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / norm).abs();
    }
    total / n_mc as f64
}

/// Windowed estimator of `rs` from chain history.
#[derive(Debug, Clone)]
pub struct StepRatioAdapter {
    /// Draws between updates.
    pub cadence: usize,
    /// Trailing draws used per update.
    pub window: usize,
    theta: std::collections::VecDeque<Vec<f64>>,
    latent: std::collections::VecDeque<Vec<f64>>,
    seen: usize,
    pub history: Vec<f64>,
}

impl StepRatioAdapter {
    pub fn new(initial: f64) -> Self {
        Self {
            cadence: 200,
            window: 1000,
            theta: Default::default(),
            latent: Default::default(),
            seen: 0,
            history: vec![initial],
        }
    }

    pub fn current(&self) -> f64 {
        *self.history.last().unwrap()
    }

    /// Records one draw (`latent` restricted to moving coordinates) and, on
    /// the cadence, returns a new ratio.
    pub fn observe(&mut self, theta: &[f64], latent: &[f64]) -> Option<f64> {
        self.theta.push_back(theta.to_vec());
        self.latent.push_back(latent.to_vec());
        if self.theta.len() > self.window {
            self.theta.pop_front();
            self.latent.pop_front();
        }
        self.seen += 1;
        if self.seen % self.cadence != 0 {
            return None;
        }
        let n = self.theta.len();
        let lambda_g = if n > 2 * theta.len() { min_eigenvalue(&sample_covariance(&self.theta)).ok() } else { None };
        // Sample-covariance minimal eigenvalues are badly biased once the
        // dimension is a sizeable fraction of the window.
        let lambda_l = if !latent.is_empty() && n >= 10 * latent.len() {
            min_eigenvalue(&sample_covariance(&self.latent)).ok()
        } else {
            None
        };
        match (lambda_g, lambda_l) {
            (Some(g), Some(l)) if g > 0.0 && l > 0.0 => {
                let rs = (l / g).sqrt();
                self.history.push(rs);
                Some(rs)
            }
            _ => {
                log::warn!("step-size ratio estimate is defective; keeping rs = {}", self.current());
                None
            }
        }
    }
}

/// Unbiased sample covariance of row vectors.
pub fn sample_covariance<'a, I>(rows: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a Vec<f64>>,
{
    let rows: Vec<&Vec<f64>> = rows.into_iter().collect();
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n as f64;
        }
    }
    let mut c = DMatrix::zeros(d, d);
    for r in &rows {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..=i {
                c[(i, j)] += a * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            c[(i, j)] /= denom;
            c[(j, i)] = c[(i, j)];
        }
    }
    c
}

/// Adaptation summary written next to chain output.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TuningReport {
    pub step_size: f64,
    pub step_ratio_history: Vec<f64>,
    pub divergences: usize,
    pub mean_tree_depth: f64,
    pub mean_accept_stat: f64,
}
