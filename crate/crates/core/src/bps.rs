//! Bouncy particle sampler on truncated Gaussians.
//!
//! The particle moves in straight lines. Velocities point uniformly on the
//! sphere and have norm `sqrt(d)` over the `d` free coordinates, the same
//! speed as a zigzag velocity in `{-1, 1}^d`. Bounces
//! off the energy gradient arrive at rate `max(0, <v, Phi (x - mu)>)`, which
//! is linear in time between events and is inverted in closed form. Sign and
//! categorical walls reflect the velocity in the wall normal, and velocity
//! refreshments arrive at a constant rate.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::tmvn::{boundary_event_time, Event, GaussianTarget, MAX_EVENTS};
use crate::traits::ConstraintMap;

/// First arrival of a Poisson process with rate `max(0, a + b t)` given the
/// exponential draw `e = -log u`. `b` must be non-negative.
pub fn bounce_time(a: f64, b: f64, e: f64) -> f64 {
    if b <= 0.0 {
        return if a > 0.0 { e / a } else { f64::INFINITY };
    }
    if a >= 0.0 {
        // (-a + sqrt(a^2 + 2 b e)) / b without cancellation
        2.0 * e / (a + (a * a + 2.0 * b * e).sqrt())
    } else {
        -a / b + (2.0 * e / b).sqrt()
    }
}

/// Position, velocity and cached precision products.
#[derive(Debug, Clone, PartialEq)]
pub struct BpsState {
    pub x: Vec<f64>,
    /// Zero on fixed coordinates.
    pub v: Vec<f64>,
    pub phi_x: Vec<f64>,
    pub phi_v: Vec<f64>,
}

impl BpsState {
    pub fn new<T: GaussianTarget + ?Sized>(x: Vec<f64>, v: Vec<f64>, target: &T) -> Self {
        let d = x.len();
        let mut s = Self { x, v, phi_x: vec![0.0; d], phi_v: vec![0.0; d] };
        target.gradient(&s.x, &mut s.phi_x);
        target.precision_product(&s.v, &mut s.phi_v);
        s
    }

    /// Rate coefficients `(a, b)` of the bounce intensity `a + b t`.
    pub fn rate(&self) -> (f64, f64) {
        let a = self.v.iter().zip(&self.phi_x).map(|(v, g)| v * g).sum();
        let b = self.v.iter().zip(&self.phi_v).map(|(v, g)| v * g).sum();
        (a, b)
    }

    fn advance(&mut self, t: f64) {
        for (x, v) in self.x.iter_mut().zip(&self.v) {
            *x += t * v;
        }
        for (g, w) in self.phi_x.iter_mut().zip(&self.phi_v) {
            *g += t * w;
        }
    }

    fn set_velocity<T: GaussianTarget + ?Sized>(&mut self, v: Vec<f64>, target: &T) {
        self.v = v;
        target.precision_product(&self.v, &mut self.phi_v);
    }

    /// Reflects `v` in the hyperplane orthogonal to the free part of the gradient.
    fn bounce<T: GaussianTarget + ?Sized>(&mut self, target: &T, cmap: &ConstraintMap) {
        let g: Vec<f64> = (0..self.x.len()).map(|i| if cmap.is_fixed(i) { 0.0 } else { self.phi_x[i] }).collect();
        let gg: f64 = g.iter().map(|x| x * x).sum();
        if gg == 0.0 {
            return;
        }
        let vg: f64 = self.v.iter().zip(&g).map(|(a, b)| a * b).sum();
        let v = self.v.iter().zip(&g).map(|(v, g)| v - 2.0 * vg / gg * g).collect();
        self.set_velocity(v, target);
    }

    fn set_component<T: GaussianTarget + ?Sized>(&mut self, target: &T, i: usize, value: f64) {
        let delta = value - self.v[i];
        if delta != 0.0 {
            self.v[i] = value;
            target.add_precision_column(i, delta, &mut self.phi_v);
        }
    }

    fn wall<T: GaussianTarget + ?Sized>(&mut self, target: &T, event: Event) {
        match event {
            Event::Binary(i) | Event::CategoricalPositivity(i) => {
                self.x[i] = 0.0;
                let vi = self.v[i];
                self.set_component(target, i, -vi);
            }
            Event::CategoricalOrder { winner, other } => {
                let mid = 0.5 * (self.x[winner] + self.x[other]);
                self.x[winner] = mid;
                self.x[other] = mid;
                let (vw, vo) = (self.v[winner], self.v[other]);
                self.set_component(target, winner, vo);
                self.set_component(target, other, vw);
            }
            Event::Gradient(_) => unreachable!("gradient events are zigzag-only"),
        }
    }
}

/// Uniform direction on the unit sphere of the free coordinates.
pub fn draw_unit_velocity<R: Rng + ?Sized>(cmap: &ConstraintMap, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..cmap.dim()).map(|i| if cmap.is_fixed(i) { 0.0 } else { StandardNormal.sample(rng) }).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
        if cmap.n_free() == 0 {
            return v;
        }
    }
}

/// Uniform direction on the free coordinates scaled to norm `sqrt(d_free)`.
pub fn draw_velocity<R: Rng + ?Sized>(cmap: &ConstraintMap, rng: &mut R) -> Vec<f64> {
    let speed = (cmap.n_free() as f64).sqrt();
    draw_unit_velocity(cmap, rng).into_iter().map(|v| v * speed).collect()
}

/// First bounce time from the current state.
pub fn bps_bounce_time<R: Rng + ?Sized>(state: &BpsState, rng: &mut R) -> f64 {
    let (a, b) = state.rate();
    bounce_time(a, b, Exp1.sample(rng))
}

/// Event counts of one BPS segment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BpsStats {
    pub bounces: usize,
    pub walls: usize,
    pub refreshes: usize,
}

/// Simulates the BPS for `total_time` from `state`.
pub fn run_bps<T: GaussianTarget + ?Sized, R: Rng + ?Sized>(
    state: &mut BpsState,
    target: &T,
    cmap: &ConstraintMap,
    total_time: f64,
    refresh_rate: f64,
    rng: &mut R,
) -> Result<BpsStats> {
    let mut stats = BpsStats::default();
    let mut remaining = total_time;
    while remaining > 0.0 {
        let t_bounce = bps_bounce_time(state, rng);
        let (t_wall, wall) = boundary_event_time(&state.x, &state.v, cmap);
        let t_refresh = if refresh_rate > 0.0 {
            let e: f64 = Exp1.sample(rng);
            e / refresh_rate
        } else {
            f64::INFINITY
        };
        let t = t_bounce.min(t_wall).min(t_refresh);
        if t >= remaining {
            state.advance(remaining);
            break;
        }
        state.advance(t);
        remaining -= t;
        if t == t_wall && wall.is_some() {
            state.wall(target, wall.unwrap());
            stats.walls += 1;
        } else if t == t_bounce {
            state.bounce(target, cmap);
            stats.bounces += 1;
        } else {
            state.set_velocity(draw_velocity(cmap, rng), target);
            stats.refreshes += 1;
        }
        if stats.bounces + stats.walls + stats.refreshes > MAX_EVENTS {
            return Err(Error::EventCap { cap: MAX_EVENTS });
        }
    }
    Ok(stats)
}

/// One BPS iteration: fresh velocity, then travel for `total_time`.
pub fn bps_kernel<T: GaussianTarget + ?Sized, R: Rng + ?Sized>(
    x: &mut [f64],
    target: &T,
    cmap: &ConstraintMap,
    total_time: f64,
    refresh_rate: f64,
    rng: &mut R,
) -> Result<BpsStats> {
    if !(total_time > 0.0) {
        return Err(Error::InvalidArgument(format!("travel time must be positive, got {total_time}")));
    }
    if !(refresh_rate >= 0.0) {
        return Err(Error::InvalidArgument(format!("refresh rate must be non-negative, got {refresh_rate}")));
    }
    if !cmap.is_consistent(x) {
        return Err(Error::InconsistentState);
    }
    let v = draw_velocity(cmap, rng);
    let mut state = BpsState::new(x.to_vec(), v, target);
    let stats = run_bps(&mut state, target, cmap, total_time, refresh_rate, rng)?;
    if !cmap.is_consistent(&state.x) {
        // wall snapping can land on exactly zero; step back inside
        cmap.project_consistent(&mut state.x);
    }
    x.copy_from_slice(&state.x);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tmvn::{DenseTarget, DiagonalTarget};
    use crate::traits::LatentRole;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_rate_limit() {
        assert!((bounce_time(1.0, 1e-300, 2.0) - 2.0).abs() < 1e-12);
        assert_eq!(bounce_time(1.0, 0.0, 2.0), 2.0);
        assert_eq!(bounce_time(-1.0, 0.0, 2.0), f64::INFINITY);
    }

    fn integrated_rate(a: f64, b: f64, t: f64) -> f64 {
        // exact integral of max(0, a + b s) over [0, t]
        let start = if a >= 0.0 { 0.0 } else { (-a / b).min(t) };
        let f = |s: f64| a * s + 0.5 * b * s * s;
        f(t) - f(start)
    }

    #[test]
    fn inversion_matches_integral() {
        for &(a, b, e) in &[(1.0, 2.0, 0.7), (-3.0, 0.5, 1.2), (0.0, 4.0, 3.0), (-0.1, 10.0, 1e-3), (5.0, 1e-6, 2.0)] {
            let t = bounce_time(a, b, e);
            assert!((integrated_rate(a, b, t) - e).abs() < 1e-8 * e.max(1.0), "{a} {b} {e}");
            if a < 0.0 {
                assert!(t > -a / b);
            }
        }
    }

    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn inversion_matches_thinning() {
        let (a, b) = (-0.8, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let direct: Vec<f64> = (0..n).map(|_| bounce_time(a, b, Exp1.sample(&mut rng))).collect();
        let thinned: Vec<f64> = (0..n)
            .map(|_| {
                let mut t = 0.0;
                loop {
                    // piecewise bound on windows of length 1
                    let w = t - t % 1.0;
                    let bound = (a + b * (w + 1.0)).max(1e-12);
                    let e: f64 = Exp1.sample(&mut rng);
                    let cand = t + e / bound;
                    if cand > w + 1.0 {
                        t = w + 1.0;
                        continue;
                    }
                    t = cand;
                    if rng.random::<f64>() * bound < (a + b * t).max(0.0) {
                        return t;
                    }
                }
            })
            .collect();
        let d = ks_statistic(direct, thinned);
        let crit = 1.628 * (2.0 / n as f64).sqrt();
        assert!(d < crit, "KS {d} >= {crit}");
    }

    #[test]
    fn reflection_preserves_speed() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.1, 0.4, 2.0, -0.3, 0.1, -0.3, 0.5]);
        let target = DenseTarget::from_covariance(vec![0.0; 3], &cov).unwrap();
        let cmap = ConstraintMap::unconstrained(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = BpsState::new(vec![0.5, -1.0, 0.2], draw_unit_velocity(&cmap, &mut rng), &target);
        for _ in 0..50 {
            s.bounce(&target, &cmap);
            let norm: f64 = s.v.iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            s.advance(0.1);
        }
    }

    #[test]
    fn no_refresh_keeps_speed_and_bounded_energy() {
        let target = DiagonalTarget::standard(4);
        let cmap = ConstraintMap::unconstrained(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = BpsState::new(vec![1.0, 0.0, -0.5, 0.3], draw_unit_velocity(&cmap, &mut rng), &target);
        let mut max_energy: f64 = 0.0;
        for _ in 0..200 {
            run_bps(&mut s, &target, &cmap, 0.5, 0.0, &mut rng).unwrap();
            let speed: f64 = s.v.iter().map(|v| v * v).sum();
            assert!((speed - 1.0).abs() < 1e-10);
            max_energy = max_energy.max(target.potential(&s.x));
        }
        assert!(max_energy.is_finite() && max_energy < 50.0);
    }

    #[test]
    fn velocity_norm_matches_zigzag_speed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cmap = ConstraintMap::from_roles(vec![LatentRole::Free, LatentRole::Fixed(0.5), LatentRole::Free, LatentRole::BinarySign(1)], Vec::new());
        for _ in 0..10 {
            let v = draw_velocity(&cmap, &mut rng);
            assert_eq!(v[1], 0.0);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthant_moments() {
        let d = 4;
        let target = DiagonalTarget::standard(d);
        let cmap = ConstraintMap::orthant(d);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut x = vec![1.0; d];
        let (mut m1, mut m2) = (0.0, 0.0);
        let n = 20000;
        for _ in 0..n {
            bps_kernel(&mut x, &target, &cmap, 1.0, 1.4, &mut rng).unwrap();
            assert!(cmap.is_consistent(&x));
            m1 += x.iter().sum::<f64>();
            m2 += x.iter().map(|v| v * v).sum::<f64>();
        }
        let mean = m1 / (n * d) as f64;
        let var = m2 / (n * d) as f64 - mean * mean;
        assert!((mean - 0.7979).abs() < 0.03, "{mean}");
        assert!((var - 0.3634).abs() < 0.03, "{var}");
    }

    #[test]
    fn ordering_wall_swaps_components() {
        use crate::traits::{CategoricalGroup, LatentRole};
        let groups = vec![CategoricalGroup { dims: vec![0, 1], class: 1, trait_index: 0 }];
        let cmap = ConstraintMap::from_roles(vec![LatentRole::Free; 2], groups);
        let target = DiagonalTarget::standard(2);
        let mut s = BpsState::new(vec![1.0, 0.5], vec![-0.6, 0.8], &target);
        let (t, e) = boundary_event_time(&s.x, &s.v, &cmap);
        assert!((t - 0.5 / 1.4).abs() < 1e-12);
        s.advance(t);
        s.wall(&target, e.unwrap());
        assert_eq!(s.v, vec![0.8, -0.6]);
    }
}
