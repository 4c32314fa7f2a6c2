//! Exact Hamiltonian zigzag dynamics on truncated multivariate normals.
//!
//! With Laplace momentum the velocity is `sign(p)` and, for a Gaussian
//! potential, momentum is quadratic in time between events. Gradient events
//! (a momentum component crosses zero), binary walls and categorical walls
//! all have closed-form times, so the flow is simulated without
//! discretization error. The state caches `Phi (x - mu)` and `Phi v`; a
//! velocity flip costs one precision column.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::traits::{CategoricalGroup, ConstraintMap, LatentRole};

/// Hard cap on events per trajectory.
pub const MAX_EVENTS: usize = 1_000_000;

/// Gaussian `N(mu, Phi^-1)` exposed through precision products.
pub trait GaussianTarget {
    fn dim(&self) -> usize;

    fn mean(&self) -> &[f64];

    /// `out = Phi u`.
    fn precision_product(&self, u: &[f64], out: &mut [f64]);

    /// `out += scale * Phi e_i`.
    fn add_precision_column(&self, i: usize, scale: f64, out: &mut [f64]);

    /// `Phi (x - mu)`.
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let r: Vec<f64> = x.iter().zip(self.mean()).map(|(a, b)| a - b).collect();
        self.precision_product(&r, out);
    }

    /// `0.5 (x - mu)^T Phi (x - mu)`.
    fn potential(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.gradient(x, &mut g);
        0.5 * x.iter().zip(self.mean()).zip(&g).map(|((a, m), g)| (a - m) * g).sum::<f64>()
    }
}

/// Dense precision matrix; fine for tests and small problems.
#[derive(Debug, Clone)]
pub struct DenseTarget {
    pub mean: Vec<f64>,
    pub precision: DMatrix<f64>,
}

impl DenseTarget {
    pub fn new(mean: Vec<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mean.len() || precision.ncols() != mean.len() {
            return Err(Error::InvalidArgument("precision and mean dimensions disagree".into()));
        }
        Ok(Self { mean, precision })
    }

    pub fn from_covariance(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cov.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?;
        Self::new(mean, chol.inverse())
    }
}

impl GaussianTarget for DenseTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn precision_product(&self, u: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|j| self.precision[(i, j)] * u[j]).sum();
        }
    }

    fn add_precision_column(&self, i: usize, scale: f64, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(self.precision.column(i).iter()) {
            *o += scale * p;
        }
    }
}

/// Independent coordinates with per-dimension precision.
#[derive(Debug, Clone)]
pub struct DiagonalTarget {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl DiagonalTarget {
    pub fn standard(d: usize) -> Self {
        Self { mean: vec![0.0; d], precision: vec![1.0; d] }
    }
}

impl GaussianTarget for DiagonalTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn precision_product(&self, u: &[f64], out: &mut [f64]) {
        for ((o, a), p) in out.iter_mut().zip(u).zip(&self.precision) {
            *o = a * p;
        }
    }

    fn add_precision_column(&self, i: usize, scale: f64, out: &mut [f64]) {
        out[i] += scale * self.precision[i];
    }
}

/// Smallest strictly positive root of `a t^2 + b t + c = 0`, or `+inf`.
pub fn min_positive_root(a: f64, b: f64, c: f64) -> f64 {
    let pos = |t: f64| if t > 0.0 && t.is_finite() { t } else { f64::INFINITY };
    if a == 0.0 {
        return if b == 0.0 { f64::INFINITY } else { pos(-c / b) };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let qq = -0.5 * (b + b.signum() * disc.sqrt());
    if qq == 0.0 {
        return f64::INFINITY;
    }
    pos(qq / a).min(pos(c / qq))
}

/// Position, velocity, momentum and cached precision products.
#[derive(Debug, Clone, PartialEq)]
pub struct ZigzagState {
    pub x: Vec<f64>,
    /// Entries in {-1, 0, +1}; 0 exactly on fixed coordinates.
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    /// `Phi (x - mu)`.
    pub phi_x: Vec<f64>,
    /// `Phi v`.
    pub phi_v: Vec<f64>,
}

impl ZigzagState {
    /// Builds the state and refreshes both caches exactly.
    pub fn new<T: GaussianTarget + ?Sized>(x: Vec<f64>, mut p: Vec<f64>, target: &T, cmap: &ConstraintMap) -> Result<Self> {
        let d = target.dim();
        if x.len() != d || p.len() != d || cmap.dim() != d {
            return Err(Error::InvalidArgument(format!("state of length {} for a {d}-dimensional target", x.len())));
        }
        let v: Vec<f64> = (0..d)
            .map(|i| {
                if cmap.is_fixed(i) {
                    p[i] = 0.0;
                    0.0
                } else if p[i] < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            })
            .collect();
        let mut s = Self { x, v, p, phi_x: vec![0.0; d], phi_v: vec![0.0; d] };
        s.refresh(target);
        Ok(s)
    }

    pub fn refresh<T: GaussianTarget + ?Sized>(&mut self, target: &T) {
        target.gradient(&self.x, &mut self.phi_x);
        target.precision_product(&self.v, &mut self.phi_v);
    }

    pub fn kinetic(&self) -> f64 {
        self.p.iter().map(|p| p.abs()).sum()
    }

    /// Total energy with a freshly computed potential.
    pub fn energy<T: GaussianTarget + ?Sized>(&self, target: &T) -> f64 {
        target.potential(&self.x) + self.kinetic()
    }
}

/// What stops the straight-line motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Momentum component crosses zero; velocity flips.
    Gradient(usize),
    /// Sign wall of a binary coordinate (or a reference-class categorical slot).
    Binary(usize),
    /// Slot `i` catches up with the winning slot `winner`.
    CategoricalOrder { winner: usize, other: usize },
    /// The winning slot reaches zero.
    CategoricalPositivity(usize),
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Gradient(_) => "gradient",
            Event::Binary(_) => "binary",
            Event::CategoricalOrder { .. } => "categorical-order",
            Event::CategoricalPositivity(_) => "categorical-positivity",
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Event::Gradient(i) | Event::Binary(i) | Event::CategoricalPositivity(i) => i,
            Event::CategoricalOrder { winner, .. } => winner,
        }
    }

    pub fn is_boundary(&self) -> bool {
        !matches!(self, Event::Gradient(_))
    }
}

/// One row of the trajectory debug log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub event: Event,
}

/// Earliest gradient event among free coordinates; ties go to the lowest index.
pub fn gradient_event_time(state: &ZigzagState, cmap: &ConstraintMap) -> (f64, Option<usize>) {
    gradient_event_time_within(state, cmap, f64::INFINITY)
}

/// Like [`gradient_event_time`] but ignores events later than `horizon`.
///
/// A coordinate is skipped without solving its quadratic when
/// `|p| - |phi_x| t - |phi_v| t^2 / 2 > 0` at the current best time `t`,
/// since its momentum cannot reach zero before then.
pub fn gradient_event_time_within(state: &ZigzagState, cmap: &ConstraintMap, horizon: f64) -> (f64, Option<usize>) {
    let mut best_t = horizon;
    let mut best = None;
    let coords = state.v.iter().zip(&state.p).zip(state.phi_x.iter().zip(&state.phi_v)).enumerate();
    for (i, ((&v, &p), (&fx, &fv))) in coords {
        // fixed coordinates are exactly the ones with zero velocity
        if v == 0.0 {
            continue;
        }
        if best_t.is_finite() && p.abs() - fx.abs() * best_t - 0.5 * fv.abs() * best_t * best_t > 0.0 {
            continue;
        }
        debug_assert!(!cmap.is_fixed(i));
        let t = min_positive_root(0.5 * fv, fx, -p);
        if t < best_t || (best.is_none() && t == best_t && t.is_finite()) {
            best_t = t;
            best = Some(i);
        }
    }
    if best.is_none() {
        return (f64::INFINITY, None);
    }
    (best_t, best)
}

/// Earliest sign-wall hit among binary coordinates heading toward zero.
pub fn binary_event_time(x: &[f64], v: &[f64], cmap: &ConstraintMap) -> (f64, Option<usize>) {
    let mut best = (f64::INFINITY, None);
    for (i, r) in cmap.roles().iter().enumerate() {
        if let LatentRole::BinarySign(_) = r {
            let (x, v) = (x[i], v[i]);
            if x * v < 0.0 {
                let t = (x / v).abs();
                if t < best.0 {
                    best = (t, Some(i));
                }
            }
        }
    }
    best
}

/// Earliest categorical wall over all observed categorical values.
///
/// Reference-class groups behave as negative sign walls on every slot. For
/// other classes the winning slot must stay above every other slot and
/// above zero.
pub fn categorical_event_time(x: &[f64], v: &[f64], cmap: &ConstraintMap) -> (f64, Option<Event>) {
    let mut best: (f64, Option<Event>) = (f64::INFINITY, None);
    for g in cmap.groups() {
        let (t, e) = group_event_time(g, x, v);
        if let Some(e) = e {
            consider(t, e, &mut best);
        }
    }
    best
}

fn consider(t: f64, e: Event, best: &mut (f64, Option<Event>)) {
    if t < best.0 || (t == best.0 && best.1.is_some_and(|b| e.dim() < b.dim())) {
        *best = (t, Some(e));
    }
}

/// Earliest wall of one categorical group.
fn group_event_time(g: &CategoricalGroup, x: &[f64], v: &[f64]) -> (f64, Option<Event>) {
    let mut best: (f64, Option<Event>) = (f64::INFINITY, None);
    match g.winner() {
        None => {
            for &i in &g.dims {
                if x[i] * v[i] < 0.0 {
                    consider((x[i] / v[i]).abs(), Event::Binary(i), &mut best);
                }
            }
        }
        Some(w) => {
            for &i in &g.dims {
                if i != w && v[w] < v[i] {
                    consider(((x[w] - x[i]) / (v[w] - v[i])).abs(), Event::CategoricalOrder { winner: w, other: i }, &mut best);
                }
            }
            if v[w] < 0.0 {
                consider((x[w] / v[w]).abs(), Event::CategoricalPositivity(w), &mut best);
            }
        }
    }
    best
}

/// Absolute wall-hit times per binary coordinate and categorical group.
///
/// Walls move linearly, so after an event only the units owning a flipped
/// coordinate need new times.
struct WallCache {
    unit_of: Vec<Option<usize>>,
    units: Vec<WallUnit>,
    times: Vec<f64>,
    events: Vec<Option<Event>>,
}

#[derive(Clone, Copy)]
enum WallUnit {
    Binary(usize),
    Group(usize),
}

impl WallCache {
    fn new(state: &ZigzagState, cmap: &ConstraintMap) -> Self {
        let mut unit_of = vec![None; cmap.dim()];
        let mut units = Vec::new();
        for (i, r) in cmap.roles().iter().enumerate() {
            if let LatentRole::BinarySign(_) = r {
                unit_of[i] = Some(units.len());
                units.push(WallUnit::Binary(i));
            }
        }
        for (k, g) in cmap.groups().iter().enumerate() {
            for &i in &g.dims {
                unit_of[i] = Some(units.len());
            }
            units.push(WallUnit::Group(k));
        }
        let n = units.len();
        let mut cache = Self { unit_of, units, times: vec![f64::INFINITY; n], events: vec![None; n] };
        for u in 0..n {
            cache.update(u, state, cmap, 0.0);
        }
        cache
    }

    fn update(&mut self, u: usize, state: &ZigzagState, cmap: &ConstraintMap, now: f64) {
        let (x, v) = (&state.x, &state.v);
        let (t, e) = match self.units[u] {
            WallUnit::Binary(i) if x[i] * v[i] < 0.0 => ((x[i] / v[i]).abs(), Some(Event::Binary(i))),
            WallUnit::Binary(_) => (f64::INFINITY, None),
            WallUnit::Group(k) => group_event_time(&cmap.groups()[k], x, v),
        };
        self.times[u] = now + t;
        self.events[u] = e;
    }

    fn touch(&mut self, i: usize, state: &ZigzagState, cmap: &ConstraintMap, now: f64) {
        if let Some(u) = self.unit_of[i] {
            self.update(u, state, cmap, now);
        }
    }

    /// Earliest wall as a delay from `now`; lower coordinates win ties.
    fn earliest(&self, now: f64) -> (f64, Option<Event>) {
        let mut best: (f64, Option<Event>) = (f64::INFINITY, None);
        for (&t, e) in self.times.iter().zip(&self.events) {
            if let Some(e) = *e {
                if t <= best.0 {
                    consider(t, e, &mut best);
                }
            }
        }
        match best.1 {
            Some(e) => ((best.0 - now).max(0.0), Some(e)),
            None => best,
        }
    }
}

/// Moves the state along its current line for time `t`.
pub fn advance(state: &mut ZigzagState, t: f64) -> Result<()> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(());
    }
    let half_t2 = 0.5 * t * t;
    let ZigzagState { x, v, p, phi_x, phi_v } = state;
    for ((((x, &v), p), fx), &fv) in x.iter_mut().zip(v.iter()).zip(p.iter_mut()).zip(phi_x.iter_mut()).zip(phi_v.iter()) {
        // fixed coordinates (v = 0) keep x and p; phi_x moves everywhere
        if v != 0.0 {
            *x += t * v;
            *p -= t * *fx + half_t2 * fv;
        }
        *fx += t * fv;
    }
    Ok(())
}

fn flip<T: GaussianTarget + ?Sized>(state: &mut ZigzagState, target: &T, i: usize, momentum_too: bool) {
    state.v[i] = -state.v[i];
    if momentum_too {
        state.p[i] = -state.p[i];
    }
    target.add_precision_column(i, 2.0 * state.v[i], &mut state.phi_v);
}

/// Applies the velocity/momentum flips of `event` at the current position.
pub fn apply_event<T: GaussianTarget + ?Sized>(state: &mut ZigzagState, target: &T, event: Event) {
    match event {
        Event::Gradient(i) => {
            state.p[i] = 0.0;
            flip(state, target, i, false);
        }
        Event::Binary(i) | Event::CategoricalPositivity(i) => {
            state.x[i] = 0.0;
            flip(state, target, i, true);
        }
        Event::CategoricalOrder { winner, other } => {
            let mid = 0.5 * (state.x[winner] + state.x[other]);
            state.x[winner] = mid;
            state.x[other] = mid;
            flip(state, target, winner, true);
            flip(state, target, other, true);
        }
    }
}

/// Earliest wall event of any kind; binary walls win exact ties.
pub fn boundary_event_time(x: &[f64], v: &[f64], cmap: &ConstraintMap) -> (f64, Option<Event>) {
    let (tb, ib) = binary_event_time(x, v, cmap);
    let (tc, ec) = categorical_event_time(x, v, cmap);
    match (ib, ec) {
        (Some(i), Some(e)) => {
            if tb < tc || (tb == tc && i <= e.dim()) {
                (tb, Some(Event::Binary(i)))
            } else {
                (tc, Some(e))
            }
        }
        (Some(i), None) => (tb, Some(Event::Binary(i))),
        (None, e) => (tc, e),
    }
}

/// Next event and its time; boundary events win exact ties.
pub fn next_event(state: &ZigzagState, cmap: &ConstraintMap) -> (f64, Option<Event>) {
    next_event_within(state, cmap, f64::INFINITY)
}

/// Next event no later than `horizon`, or `(inf, None)`.
pub fn next_event_within(state: &ZigzagState, cmap: &ConstraintMap, horizon: f64) -> (f64, Option<Event>) {
    let boundary = boundary_event_time(&state.x, &state.v, cmap);
    let limit = if boundary.1.is_some() { boundary.0.min(horizon) } else { horizon };
    let (tg, ig) = gradient_event_time_within(state, cmap, limit);
    match (boundary, ig) {
        ((tbd, Some(e)), _) if tbd <= tg && tbd <= horizon => (tbd, Some(e)),
        (_, Some(i)) => (tg, Some(Event::Gradient(i))),
        _ => (f64::INFINITY, None),
    }
}

/// Counts produced by one trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrajectoryStats {
    pub gradient_events: usize,
    pub boundary_events: usize,
}

impl TrajectoryStats {
    pub fn total(&self) -> usize {
        self.gradient_events + self.boundary_events
    }
}

/// Runs the zigzag flow for `total_time` starting from an already
/// initialized state. Caches are not refreshed.
pub fn run_flow<T: GaussianTarget + ?Sized>(
    state: &mut ZigzagState,
    target: &T,
    cmap: &ConstraintMap,
    total_time: f64,
    mut log: Option<&mut Vec<EventRecord>>,
) -> Result<TrajectoryStats> {
    let mut stats = TrajectoryStats::default();
    let mut walls = WallCache::new(state, cmap);
    let mut remaining = total_time;
    let mut elapsed = 0.0;
    while remaining > 0.0 {
        let boundary = walls.earliest(elapsed);
        let limit = if boundary.1.is_some() { boundary.0.min(remaining) } else { remaining };
        let (tg, ig) = gradient_event_time_within(state, cmap, limit);
        let (t, event) = match (boundary, ig) {
            ((tb, Some(e)), _) if tb <= tg && tb <= remaining => (tb, e),
            (_, Some(i)) => (tg, Event::Gradient(i)),
            _ => {
                advance(state, remaining)?;
                break;
            }
        };
        if t >= remaining {
            advance(state, remaining)?;
            break;
        }
        advance(state, t)?;
        apply_event(state, target, event);
        remaining -= t;
        elapsed += t;
        match event {
            Event::Gradient(i) | Event::Binary(i) | Event::CategoricalPositivity(i) => walls.touch(i, state, cmap, elapsed),
            Event::CategoricalOrder { winner, .. } => walls.touch(winner, state, cmap, elapsed),
        }
        if event.is_boundary() {
            stats.boundary_events += 1;
        } else {
            stats.gradient_events += 1;
        }
        if let Some(log) = log.as_deref_mut() {
            log.push(EventRecord { time: elapsed, event });
        }
        if stats.total() > MAX_EVENTS {
            return Err(Error::EventCap { cap: MAX_EVENTS });
        }
    }
    Ok(stats)
}

/// Simulates the zigzag flow for time `total_time` from `(x0, p0)`.
pub fn hzz_tmvn<T: GaussianTarget + ?Sized>(
    x0: &[f64],
    p0: &[f64],
    target: &T,
    cmap: &ConstraintMap,
    total_time: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(total_time > 0.0) {
        return Err(Error::InvalidArgument(format!("trajectory time must be positive, got {total_time}")));
    }
    if !cmap.is_consistent(x0) {
        return Err(Error::InconsistentState);
    }
    let mut state = ZigzagState::new(x0.to_vec(), p0.to_vec(), target, cmap)?;
    run_flow(&mut state, target, cmap, total_time, None)?;
    Ok((state.x, state.p))
}

/// Draws iid Laplace(1) momentum on free coordinates, zero on fixed ones.
pub fn draw_laplace<R: Rng + ?Sized>(cmap: &ConstraintMap, rng: &mut R) -> Vec<f64> {
    (0..cmap.dim())
        .map(|i| {
            if cmap.is_fixed(i) {
                0.0
            } else {
                let m: f64 = Exp1.sample(rng);
                if rng.random::<bool>() { m } else { -m }
            }
        })
        .collect()
}

/// Outcome of one Metropolis-corrected zigzag transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOutcome {
    pub accepted: bool,
    pub delta_h: f64,
    pub stats: TrajectoryStats,
}

/// One Zigzag-HMC transition on `x` with travel time `total_time`.
///
/// The flow is exact, so the Metropolis step only guards against
/// floating-point drift.
pub fn zigzag_hmc_kernel<T: GaussianTarget + ?Sized, R: Rng + ?Sized>(
    x: &mut [f64],
    target: &T,
    cmap: &ConstraintMap,
    total_time: f64,
    rng: &mut R,
) -> Result<KernelOutcome> {
    zigzag_hmc_kernel_logged(x, target, cmap, total_time, rng, None)
}

pub fn zigzag_hmc_kernel_logged<T: GaussianTarget + ?Sized, R: Rng + ?Sized>(
    x: &mut [f64],
    target: &T,
    cmap: &ConstraintMap,
    total_time: f64,
    rng: &mut R,
    log: Option<&mut Vec<EventRecord>>,
) -> Result<KernelOutcome> {
    if !cmap.is_consistent(x) {
        return Err(Error::InconsistentState);
    }
    let p = draw_laplace(cmap, rng);
    let mut state = ZigzagState::new(x.to_vec(), p, target, cmap)?;
    let h0 = 0.5 * dot_resid(&state.x, target.mean(), &state.phi_x) + state.kinetic();
    let stats = run_flow(&mut state, target, cmap, total_time, log)?;
    let h1 = state.energy(target);
    let delta_h = h1 - h0;
    let accepted = cmap.is_consistent(&state.x) && (delta_h <= 0.0 || rng.random::<f64>() < (-delta_h).exp());
    if accepted {
        x.copy_from_slice(&state.x);
    }
    Ok(KernelOutcome { accepted, delta_h, stats })
}

fn dot_resid(x: &[f64], mean: &[f64], g: &[f64]) -> f64 {
    x.iter().zip(mean).zip(g).map(|((a, m), g)| (a - m) * g).sum()
}
