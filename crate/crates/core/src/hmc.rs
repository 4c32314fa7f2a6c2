//! Gaussian-momentum HMC: leapfrog, no-U-turn tree building and
//! primal-dual step-size adaptation.
//!
//! The tree builder is generic over [`Trajectory`], so the same doubling
//! code drives plain NUTS and the mixed Laplace/Gauss variant.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Energy change that marks a trajectory as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Potential `U = -log pi` and its gradient.
pub trait HamiltonianSystem {
    fn dim(&self) -> usize;

    /// Returns `U(theta)` and writes `grad U(theta)` into `grad`.
    fn potential_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn potential(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; theta.len()];
        self.potential_and_gradient(theta, &mut g)
    }
}

/// Position, momentum and cached potential/gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<S: HamiltonianSystem + ?Sized>(theta: Vec<f64>, p: Vec<f64>, system: &S) -> Self {
        let mut grad = vec![0.0; theta.len()];
        let potential = system.potential_and_gradient(&theta, &mut grad);
        Self { theta, p, potential, grad }
    }

    pub fn kinetic(&self) -> f64 {
        0.5 * self.p.iter().map(|p| p * p).sum::<f64>()
    }

    pub fn hamiltonian(&self) -> f64 {
        self.potential + self.kinetic()
    }

    pub fn is_finite(&self) -> bool {
        self.potential.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }

    /// Half kick, drift, half kick. Negative `eps` integrates backward.
    pub fn leapfrog<S: HamiltonianSystem + ?Sized>(&mut self, eps: f64, system: &S) {
        for (p, g) in self.p.iter_mut().zip(&self.grad) {
            *p -= 0.5 * eps * g;
        }
        for (t, p) in self.theta.iter_mut().zip(&self.p) {
            *t += eps * p;
        }
        self.potential = system.potential_and_gradient(&self.theta, &mut self.grad);
        for (p, g) in self.p.iter_mut().zip(&self.grad) {
            *p -= 0.5 * eps * g;
        }
    }
}

/// Result of one leapfrog step.
#[derive(Debug, Clone, PartialEq)]
pub struct Leapfrog {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    /// Set when the potential or gradient stopped being finite.
    pub divergent: bool,
}

pub fn leapfrog<S: HamiltonianSystem + ?Sized>(theta: &[f64], p: &[f64], eps: f64, system: &S) -> Leapfrog {
    let mut point = PhasePoint::new(theta.to_vec(), p.to_vec(), system);
    point.leapfrog(eps, system);
    let divergent = !point.is_finite();
    Leapfrog { theta: point.theta, p: point.p, divergent }
}

/// Draws standard normal momentum.
pub fn draw_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// A reversible one-step integrator that the tree builder can drive.
pub trait Trajectory {
    type Point: Clone;

    fn step(&self, point: &Self::Point, forward: bool) -> Result<Self::Point>;

    fn hamiltonian(&self, point: &Self::Point) -> f64;

    /// True while the trajectory between `minus` and `plus` keeps expanding.
    fn no_u_turn(&self, minus: &Self::Point, plus: &Self::Point) -> bool;
}

/// Fixed-step leapfrog for a [`HamiltonianSystem`].
pub struct LeapfrogTrajectory<'a, S: ?Sized> {
    pub system: &'a S,
    pub step_size: f64,
}

impl<S: HamiltonianSystem + ?Sized> Trajectory for LeapfrogTrajectory<'_, S> {
    type Point = PhasePoint;

    fn step(&self, point: &PhasePoint, forward: bool) -> Result<PhasePoint> {
        let mut next = point.clone();
        next.leapfrog(if forward { self.step_size } else { -self.step_size }, self.system);
        Ok(next)
    }

    fn hamiltonian(&self, point: &PhasePoint) -> f64 {
        point.hamiltonian()
    }

    fn no_u_turn(&self, minus: &PhasePoint, plus: &PhasePoint) -> bool {
        no_u_turn_euclidean(&minus.theta, &plus.theta, &minus.p, &plus.p)
    }
}

/// `(x+ - x-) . w- >= 0` and `(x+ - x-) . w+ >= 0`.
pub fn no_u_turn_euclidean(x_minus: &[f64], x_plus: &[f64], w_minus: &[f64], w_plus: &[f64]) -> bool {
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..x_minus.len() {
        let d = x_plus[i] - x_minus[i];
        a += d * w_minus[i];
        b += d * w_plus[i];
    }
    a >= 0.0 && b >= 0.0
}

/// How the next state is chosen from the built tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NutsVariant {
    /// Uniform choice among slice-admissible states.
    #[default]
    Slice,
    /// Weights `exp(-H)` with biased progressive selection at the top level.
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NutsOptions {
    pub max_depth: usize,
    pub variant: NutsVariant,
}

impl Default for NutsOptions {
    fn default() -> Self {
        Self { max_depth: 10, variant: NutsVariant::Slice }
    }
}

/// Output of one no-U-turn transition.
#[derive(Debug, Clone)]
pub struct NutsTransition<P> {
    pub point: P,
    pub depth: usize,
    pub n_steps: usize,
    /// Mean Metropolis acceptance over all visited states.
    pub accept_stat: f64,
    pub divergent: bool,
    pub hit_max_depth: bool,
}

struct Subtree<P> {
    minus: P,
    plus: P,
    candidate: P,
    /// Slice: count of admissible states. Multinomial: log total weight.
    weight: f64,
    ok: bool,
    alpha: f64,
    n_alpha: usize,
    divergent: bool,
}

struct Builder<'a, T: Trajectory> {
    traj: &'a T,
    h0: f64,
    log_u: f64,
    variant: NutsVariant,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl<T: Trajectory> Builder<'_, T> {
    fn leaf<R: Rng + ?Sized>(&self, from: &T::Point, forward: bool, _rng: &mut R) -> Result<Subtree<T::Point>> {
        let next = self.traj.step(from, forward)?;
        let h = self.traj.hamiltonian(&next);
        let h = if h.is_nan() { f64::INFINITY } else { h };
        let divergent = h - self.h0 > DIVERGENCE_THRESHOLD;
        let weight = match self.variant {
            NutsVariant::Slice => f64::from(u8::from(self.log_u <= -h)),
            NutsVariant::Multinomial => self.h0 - h,
        };
        let alpha = if h.is_finite() { (self.h0 - h).exp().min(1.0) } else { 0.0 };
        Ok(Subtree { minus: next.clone(), plus: next.clone(), candidate: next, weight, ok: !divergent, alpha, n_alpha: 1, divergent })
    }

    fn build<R: Rng + ?Sized>(&self, from: &T::Point, forward: bool, depth: usize, rng: &mut R) -> Result<Subtree<T::Point>> {
        if depth == 0 {
            return self.leaf(from, forward, rng);
        }
        let mut first = self.build(from, forward, depth - 1, rng)?;
        if !first.ok {
            return Ok(first);
        }
        let edge = if forward { &first.plus } else { &first.minus };
        let second = self.build(&edge.clone(), forward, depth - 1, rng)?;
        if forward {
            first.plus = second.plus;
        } else {
            first.minus = second.minus;
        }
        let take_second = match self.variant {
            NutsVariant::Slice => {
                let total = first.weight + second.weight;
                total > 0.0 && rng.random::<f64>() < second.weight / total
            }
            NutsVariant::Multinomial => {
                let total = log_add(first.weight, second.weight);
                total > f64::NEG_INFINITY && rng.random::<f64>().ln() < second.weight - total
            }
        };
        if take_second {
            first.candidate = second.candidate;
        }
        first.weight = match self.variant {
            NutsVariant::Slice => first.weight + second.weight,
            NutsVariant::Multinomial => log_add(first.weight, second.weight),
        };
        first.alpha += second.alpha;
        first.n_alpha += second.n_alpha;
        first.divergent |= second.divergent;
        first.ok = second.ok && self.traj.no_u_turn(&first.minus, &first.plus);
        Ok(first)
    }
}

/// One no-U-turn transition from `start` (momentum already drawn).
pub fn nuts_transition<T: Trajectory, R: Rng + ?Sized>(
    traj: &T,
    start: T::Point,
    options: &NutsOptions,
    rng: &mut R,
) -> Result<NutsTransition<T::Point>> {
    let h0 = traj.hamiltonian(&start);
    let log_u = -h0 + rng.random::<f64>().ln();
    let builder = Builder { traj, h0, log_u, variant: options.variant };
    let mut minus = start.clone();
    let mut plus = start.clone();
    let mut chosen = start;
    let mut weight = match options.variant {
        NutsVariant::Slice => 1.0,
        NutsVariant::Multinomial => 0.0,
    };
    let (mut alpha, mut n_alpha) = (0.0, 0usize);
    let mut depth = 0;
    let mut divergent = false;
    let mut ok = true;
    while ok && depth < options.max_depth {
        let forward = rng.random::<bool>();
        let from = if forward { &plus } else { &minus };
        let sub = builder.build(&from.clone(), forward, depth, rng)?;
        if forward {
            plus = sub.plus;
        } else {
            minus = sub.minus;
        }
        alpha += sub.alpha;
        n_alpha += sub.n_alpha;
        divergent |= sub.divergent;
        if sub.ok {
            let take = match options.variant {
                NutsVariant::Slice => sub.weight > 0.0 && rng.random::<f64>() < sub.weight / weight,
                NutsVariant::Multinomial => rng.random::<f64>().ln() < sub.weight - weight,
            };
            if take {
                chosen = sub.candidate;
            }
        }
        weight = match options.variant {
            NutsVariant::Slice => weight + sub.weight,
            NutsVariant::Multinomial => log_add(weight, sub.weight),
        };
        ok = sub.ok && traj.no_u_turn(&minus, &plus);
        depth += 1;
    }
    let hit_max_depth = ok && depth >= options.max_depth;
    Ok(NutsTransition {
        point: chosen,
        depth,
        n_steps: n_alpha,
        accept_stat: if n_alpha > 0 { alpha / n_alpha as f64 } else { 0.0 },
        divergent,
        hit_max_depth,
    })
}

/// NUTS transition for a Gaussian-momentum system with fresh momentum.
pub fn nuts_kernel<S: HamiltonianSystem + ?Sized, R: Rng + ?Sized>(
    theta: &[f64],
    system: &S,
    step_size: f64,
    options: &NutsOptions,
    rng: &mut R,
) -> Result<NutsTransition<PhasePoint>> {
    let p = draw_gaussian(theta.len(), rng);
    let start = PhasePoint::new(theta.to_vec(), p, system);
    nuts_transition(&LeapfrogTrajectory { system, step_size }, start, options, rng)
}

/// Plain HMC with `n_steps` leapfrog steps and a Metropolis test.
/// Returns the new position and the acceptance probability.
pub fn hmc_kernel<S: HamiltonianSystem + ?Sized, R: Rng + ?Sized>(
    theta: &[f64],
    system: &S,
    step_size: f64,
    n_steps: usize,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let p = draw_gaussian(theta.len(), rng);
    let start = PhasePoint::new(theta.to_vec(), p, system);
    let mut point = start.clone();
    for _ in 0..n_steps {
        point.leapfrog(step_size, system);
    }
    let accept = if point.is_finite() { (start.hamiltonian() - point.hamiltonian()).exp().min(1.0) } else { 0.0 };
    if rng.random::<f64>() < accept {
        (point.theta, accept)
    } else {
        (start.theta, accept)
    }
}

/// Primal-dual averaging of the log step size toward a target acceptance.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAveraging {
    pub target_accept: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    mu: f64,
    log_step: f64,
    log_step_bar: f64,
    h_bar: f64,
    iteration: usize,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target_accept: f64) -> Self {
        Self {
            target_accept,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_bar: 0.0,
            h_bar: 0.0,
            iteration: 0,
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        self.iteration += 1;
        let m = self.iteration as f64;
        let w = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target_accept - accept_stat.clamp(0.0, 1.0));
        self.log_step = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let eta = m.powf(-self.kappa);
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar;
    }

    /// Step size to use during warmup.
    pub fn step_size(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size, frozen after warmup.
    pub fn final_step_size(&self) -> f64 {
        if self.iteration == 0 { self.log_step.exp() } else { self.log_step_bar.exp() }
    }

    pub fn log_step(&self) -> f64 {
        self.log_step
    }

    pub fn log_step_bar(&self) -> f64 {
        self.log_step_bar
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Restarts the recursion around a new step size.
    pub fn restart(&mut self, step: f64) {
        *self = Self { target_accept: self.target_accept, gamma: self.gamma, t0: self.t0, kappa: self.kappa, ..Self::new(step, self.target_accept) };
    }
}

/// Doubles or halves `initial` until the one-step acceptance probability
/// crosses 1/2. `log_accept(eps)` returns `H0 - H1` for one step of size `eps`.
pub fn find_reasonable_step_size<F: FnMut(f64) -> f64>(initial: f64, mut log_accept: F) -> f64 {
    let mut eps = initial;
    let mut la = log_accept(eps);
    if !la.is_finite() {
        la = f64::NEG_INFINITY;
    }
    let up = la > 0.5f64.ln();
    for _ in 0..100 {
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        let mut l = log_accept(next);
        if !l.is_finite() {
            l = f64::NEG_INFINITY;
        }
        if up && l <= 0.5f64.ln() {
            return eps;
        }
        eps = next;
        if !up && l > 0.5f64.ln() {
            return eps;
        }
    }
    eps
}
