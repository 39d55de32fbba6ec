//! Noise schedule and the deterministic DDIM steppers.
//!
//! Everything here is a pure function over `f64` arrays: forward noising,
//! x0 prediction, reverse/inversion stepping and guidance combination. The
//! learned denoiser only ever enters through the `eps_hat` argument, so these
//! functions are verified exactly against the closed-form score oracle.

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Linear-beta noise schedule with the `alpha_bar[0] = 1` sentinel, so a
/// timestep of zero always means "clean image".
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a linear schedule with `t_train` steps and betas spaced evenly
    /// from `beta_start` to `beta_end` (both inclusive).
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::invalid(format!(
                "t_train must be at least 2, got {t_train}"
            )));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::invalid("beta bounds must be finite"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let denom = (t_train - 1) as f64;
        let betas: Vec<f64> = (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas; `alpha_bars` is their running
    /// product with the leading sentinel.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("schedule needs at least 2 betas"));
        }
        if betas.iter().any(|b| !b.is_finite() || *b <= 0.0 || *b >= 1.0) {
            return Err(Error::invalid("all betas must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            t_train: betas.len(),
            betas,
            alpha_bars,
        })
    }

    /// Standard defaults: 1000 steps, betas from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bars[t]` for `t` in `0..=t_train`; index 0 is the sentinel 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_train {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 0,
                hi: self.t_train,
            });
        }
        Ok(())
    }
}

/// A latent array paired with its timestep index.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: ArrayD<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: ArrayD<f64>, t: usize) -> Self {
        Self { z, t }
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }
}

/// Direction a recorded trajectory ran in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Inversion,
    Reverse,
}

/// An ordered sequence of latent states with strictly monotone timesteps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<LatentState>,
    pub direction: Direction,
}

impl Trajectory {
    pub fn new(direction: Direction) -> Self {
        Self {
            states: Vec::new(),
            direction,
        }
    }

    pub fn push(&mut self, state: LatentState) -> Result<()> {
        if let Some(last) = self.states.last() {
            let ok = match self.direction {
                Direction::Inversion => state.t > last.t,
                Direction::Reverse => state.t < last.t,
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "non-monotone trajectory: {} after {} in {:?} direction",
                    state.t, last.t, self.direction
                )));
            }
        }
        self.states.push(state);
        Ok(())
    }

    /// Timestep grid in recorded order.
    pub fn timesteps(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.t).collect()
    }
}

fn check_shapes(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// `z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise(
    z0: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    check_shapes(z0, eps)?;
    if t < 1 || t > schedule.t_train() {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.t_train(),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0 * sa + eps * sn)
}

/// Inverts the forward closed form: `f = (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(
    z_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    check_shapes(z_t, eps_hat)?;
    let ab = schedule.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok((z_t - &(eps_hat * sn)) / sa)
}

fn ddim_step(
    z_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    t_target: usize,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    let x0 = predict_x0(z_t, eps_hat, t, schedule)?;
    let ab = schedule.alpha_bar(t_target)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(&x0 * sa + eps_hat * sn)
}

/// Deterministic DDIM step toward smaller noise (`t_prev < t`).
pub fn ddim_reverse_step(
    z_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "reverse step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    ddim_step(z_t, eps_hat, t, t_prev, schedule)
}

/// Mirror of [`ddim_reverse_step`] with increasing timestep (`t_next > t`).
pub fn ddim_inversion_step(
    z_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    if t_next <= t {
        return Err(Error::invalid(format!(
            "inversion step needs t_next > t, got {t_next} <= {t}"
        )));
    }
    ddim_step(z_t, eps_hat, t, t_next, schedule)
}

/// Guidance combination `eps_neg + omega * (eps_pos - eps_neg)`.
///
/// `omega = 1` returns `eps_pos` bit-exactly and `omega = 0` returns
/// `eps_neg` bit-exactly.
pub fn cfg_combine(
    eps_neg: &ArrayD<f64>,
    eps_pos: &ArrayD<f64>,
    omega: f64,
) -> Result<ArrayD<f64>> {
    check_shapes(eps_neg, eps_pos)?;
    if !omega.is_finite() {
        return Err(Error::invalid("omega must be finite"));
    }
    if omega < 0.0 {
        return Err(Error::invalid(format!("omega must be >= 0, got {omega}")));
    }
    if omega == 1.0 {
        return Ok(eps_pos.clone());
    }
    if omega == 0.0 {
        return Ok(eps_neg.clone());
    }
    Ok(eps_neg + &((eps_pos - eps_neg) * omega))
}

/// Evenly strided timestep grid: `floor(i * t_train / n_steps)` for
/// `i = 1..=n_steps`. Strictly increasing and ending at `t_train`; used in
/// both directions (prepend the 0 sentinel for inversion starts).
pub fn subsample_timesteps(t_train: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 1 || n_steps > t_train {
        return Err(Error::invalid(format!(
            "n_steps must lie in [1, {t_train}], got {n_steps}"
        )));
    }
    Ok((1..=n_steps).map(|i| i * t_train / n_steps).collect())
}

/// Walks `z0` up the grid `[0, g[0], g[1], ...]`, querying `eps_hat` at each
/// current state and recording every latent along the way.
pub fn invert_trajectory(
    z0: &ArrayD<f64>,
    grid: &[usize],
    schedule: &NoiseSchedule,
    mut eps_hat: impl FnMut(&ArrayD<f64>, usize) -> Result<ArrayD<f64>>,
) -> Result<Trajectory> {
    if grid.is_empty() {
        return Err(Error::invalid("empty timestep grid"));
    }
    let mut traj = Trajectory::new(Direction::Inversion);
    let mut z = z0.clone();
    let mut t = 0usize;
    traj.push(LatentState::new(z.clone(), t))?;
    for &t_next in grid {
        let eps = eps_hat(&z, t)?;
        z = ddim_inversion_step(&z, &eps, t, t_next, schedule)?;
        t = t_next;
        traj.push(LatentState::new(z.clone(), t))?;
    }
    Ok(traj)
}

/// Walks `z_top` (at `grid.last()`) back down through the grid to t = 0,
/// querying `eps_hat` at each current state.
pub fn reverse_trajectory(
    z_top: &ArrayD<f64>,
    grid: &[usize],
    schedule: &NoiseSchedule,
    mut eps_hat: impl FnMut(&ArrayD<f64>, usize) -> Result<ArrayD<f64>>,
) -> Result<Trajectory> {
    if grid.is_empty() {
        return Err(Error::invalid("empty timestep grid"));
    }
    let mut traj = Trajectory::new(Direction::Reverse);
    let mut t = *grid.last().expect("nonempty grid");
    let mut z = z_top.clone();
    traj.push(LatentState::new(z.clone(), t))?;
    for i in (0..grid.len()).rev() {
        let t_prev = if i == 0 { 0 } else { grid[i - 1] };
        let eps = eps_hat(&z, t)?;
        z = ddim_reverse_step(&z, &eps, t, t_prev, schedule)?;
        t = t_prev;
        traj.push(LatentState::new(z.clone(), t))?;
    }
    Ok(traj)
}
