//! The linear random cocycle U(t,ω) = S_A(t)·exp{∫_0^t C(θ_sω) ds} with
//! C(ω) = Σ_i ν_i z_i*(ω) D_i, for A and all D_i diagonal in the eigenbasis.
//!
//! In this commuting case every eigenmode evolves independently:
//!
//! ```text
//! U(t,ω)_m = exp(G_m(t)),   G_m(t) = μ_m t + Σ_i ν_i d_{i,m} ∫_0^t z_i*(θ_sω) ds
//! ```
//!
//! and U(t, θ_τω) = exp(G_m(τ + t) − G_m(τ)), which makes the cocycle law hold
//! exactly on the grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{grid_steps, NoiseRealization, NoiseSettings};
use crate::par::Exec;
use crate::spectral::{Side, SpectralModel, Splitting, StateVector};
use crate::stats::{log_plus, mean, variance};

/// Deterministic data of the linear cocycle: the spectrum of −A, the
/// diagonals d_{i,·} of the noise operators D_i and the OU rates ν_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocycleParams {
    pub model: SpectralModel,
    pub noise_ops: Vec<Vec<f64>>,
    pub nus: Vec<f64>,
}

impl CocycleParams {
    pub fn new(model: SpectralModel, noise_ops: Vec<Vec<f64>>, nus: Vec<f64>) -> Result<Self> {
        if noise_ops.len() != nus.len() {
            return Err(Error::DimensionMismatch {
                expected: nus.len(),
                got: noise_ops.len(),
            });
        }
        if noise_ops.is_empty() {
            return Err(Error::param("at least one noise operator is required"));
        }
        for d in &noise_ops {
            if d.len() != model.modes() {
                return Err(Error::DimensionMismatch {
                    expected: model.modes(),
                    got: d.len(),
                });
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("noise operator entries must be finite"));
            }
        }
        if nus.iter().any(|&nu| !(nu > 0.0)) {
            return Err(Error::param("all nu must be positive"));
        }
        Ok(Self {
            model,
            noise_ops,
            nus,
        })
    }

    pub fn modes(&self) -> usize {
        self.model.modes()
    }

    pub fn components(&self) -> usize {
        self.nus.len()
    }

    /// max_m |d_{i,m}|, the operator norm of the diagonal D_i.
    pub fn op_norm(&self, i: usize) -> f64 {
        self.noise_ops[i].iter().fold(0.0, |a, d| a.max(d.abs()))
    }
}

/// The linear cocycle at a sample point, viewed from time `origin`, so that
/// `U(t, θ_origin ω)` is what this value propagates.
#[derive(Debug, Clone)]
pub struct LinearCocycle {
    params: Arc<CocycleParams>,
    noise: Arc<NoiseRealization>,
    origin: f64,
    origin_idx: usize,
    first_idx: usize,
    last_idx: usize,
    // ν_i d_{i,m}, indexed [i][m]
    coupling: Vec<Vec<f64>>,
}

impl LinearCocycle {
    pub fn new(params: Arc<CocycleParams>, noise: Arc<NoiseRealization>) -> Result<Self> {
        if noise.components() != params.components() {
            return Err(Error::DimensionMismatch {
                expected: params.components(),
                got: noise.components(),
            });
        }
        for (z, &nu) in noise.ou().iter().zip(&params.nus) {
            if z.nu() != nu {
                return Err(Error::param(format!(
                    "OU rate {} does not match cocycle rate {nu}",
                    z.nu()
                )));
            }
        }
        let first_idx = noise.index_of(noise.t_valid_min())?;
        let origin_idx = noise.index_of(0.0)?;
        let last_idx = noise.wiener().len() - 1;
        let coupling = params
            .noise_ops
            .iter()
            .zip(&params.nus)
            .map(|(d, nu)| d.iter().map(|v| nu * v).collect())
            .collect();
        Ok(Self {
            params,
            noise,
            origin: 0.0,
            origin_idx,
            first_idx,
            last_idx,
            coupling,
        })
    }

    pub fn generate(params: Arc<CocycleParams>, seed: u64, settings: &NoiseSettings) -> Result<Self> {
        if settings.nus != params.nus {
            return Err(Error::param("noise settings and cocycle disagree on nu"));
        }
        let noise = NoiseRealization::generate(seed, settings)?;
        Self::new(params, Arc::new(noise))
    }

    /// The same cocycle viewed from θ_τω.
    pub fn shifted(&self, tau: f64) -> Result<Self> {
        let idx = self.index(tau)?;
        Ok(Self {
            origin: self.origin + tau,
            origin_idx: idx,
            ..self.clone()
        })
    }

    pub fn params(&self) -> &CocycleParams {
        &self.params
    }

    pub fn params_arc(&self) -> &Arc<CocycleParams> {
        &self.params
    }

    pub fn noise(&self) -> &NoiseRealization {
        &self.noise
    }

    pub fn noise_arc(&self) -> &Arc<NoiseRealization> {
        &self.noise
    }

    pub fn model(&self) -> &SpectralModel {
        &self.params.model
    }

    pub fn modes(&self) -> usize {
        self.params.modes()
    }

    pub fn dt(&self) -> f64 {
        self.noise.dt()
    }

    /// Absolute noise time of the view's origin.
    pub fn origin(&self) -> f64 {
        self.origin
    }

    /// Times (relative to the origin) available for propagation.
    pub fn window(&self) -> (f64, f64) {
        let dt = self.dt();
        (
            (self.first_idx as f64 - self.origin_idx as f64) * dt,
            (self.last_idx as f64 - self.origin_idx as f64) * dt,
        )
    }

    /// Absolute grid index of relative time `t`.
    pub fn index(&self, t: f64) -> Result<usize> {
        let steps = grid_steps(t, self.dt())?;
        let idx = self.origin_idx as i64 + steps;
        if idx < self.first_idx as i64 || idx > self.last_idx as i64 {
            let (min, max) = self.window();
            return Err(Error::Range { time: t, min, max });
        }
        Ok(idx as usize)
    }

    /// Relative time of an absolute grid index.
    pub fn time_of(&self, idx: usize) -> f64 {
        (idx as f64 - self.origin_idx as f64) * self.dt()
    }

    /// Log-growth of mode `m` between two absolute grid indices.
    #[inline]
    pub fn log_growth_between(&self, m: usize, from: usize, to: usize) -> f64 {
        let span = (to as f64 - from as f64) * self.dt();
        let mut g = self.params.model.mu()[m] * span;
        for (c, z) in self.coupling.iter().zip(self.noise.ou()) {
            g += c[m] * z.integral_between(from, to);
        }
        g
    }

    /// G_m(t) for every mode, relative to the origin.
    pub fn log_growth(&self, t: f64) -> Result<Vec<f64>> {
        let idx = self.index(t)?;
        Ok((0..self.modes())
            .map(|m| self.log_growth_between(m, self.origin_idx, idx))
            .collect())
    }

    /// Log-growth of every mode relative to the origin, for a list of absolute indices.
    pub(crate) fn log_growth_at(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices
            .iter()
            .map(|&i| {
                (0..self.modes())
                    .map(|m| self.log_growth_between(m, self.origin_idx, i))
                    .collect()
            })
            .collect()
    }

    /// ν_i d_{i,m} summed against z_i at an absolute index: the diagonal of C.
    pub fn coefficient_at_index(&self, idx: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (c, z) in self.coupling.iter().zip(self.noise.ou()) {
            let zv = z.z(idx);
            for (o, cm) in out.iter_mut().zip(c) {
                *o += cm * zv;
            }
        }
    }

    /// Sum over i of ν_i |d_{i,m}| ∫|z_i| over the grid cell at `idx`.
    fn cell_excursion(&self, m: usize, idx: usize) -> f64 {
        self.coupling
            .iter()
            .zip(self.noise.ou())
            .map(|(c, z)| c[m].abs() * z.abs_cell_integral(idx))
            .sum()
    }
}

/// The diagonal of a time-dependent coefficient C(θ_tω), for the stepped propagator.
pub trait DiagonalCoefficient {
    fn coefficient(&self, t: f64, out: &mut [f64]) -> Result<()>;
}

impl<F> DiagonalCoefficient for F
where
    F: Fn(f64, &mut [f64]),
{
    fn coefficient(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self(t, out);
        Ok(())
    }
}

impl DiagonalCoefficient for LinearCocycle {
    /// C(θ_tω) with z linearly interpolated between grid nodes.
    fn coefficient(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let dt = self.dt();
        let pos = t / dt;
        let k = pos.floor();
        let frac = pos - k;
        let lo = self.origin_idx as i64 + k as i64;
        if lo < self.first_idx as i64 || lo > self.last_idx as i64 || (frac > 0.0 && lo == self.last_idx as i64) {
            let (min, max) = self.window();
            return Err(Error::Range { time: t, min, max });
        }
        let lo = lo as usize;
        self.coefficient_at_index(lo, out);
        if frac > 0.0 {
            let mut hi = vec![0.0; out.len()];
            self.coefficient_at_index(lo + 1, &mut hi);
            for (o, h) in out.iter_mut().zip(hi) {
                *o = (1.0 - frac) * *o + frac * h;
            }
        }
        Ok(())
    }
}

fn check_dim(expected: usize, x: &StateVector) -> Result<()> {
    if x.dim() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.dim(),
        });
    }
    Ok(())
}

/// Closed-form propagation `U(t,ω)x`; `t` may be negative.
pub fn propagate_linear(spec: &LinearCocycle, t: f64, x: &StateVector) -> Result<StateVector> {
    check_dim(spec.modes(), x)?;
    let g = spec.log_growth(t)?;
    Ok(StateVector(
        x.0.iter().zip(g).map(|(xm, gm)| gm.exp() * xm).collect(),
    ))
}

/// Exponential integrator with midpoint-frozen coefficients:
/// each step multiplies mode m by exp((μ_m + c_m(t_k + dt/2))·dt).
pub fn propagate_linear_stepped(
    model: &SpectralModel,
    coeff: &dyn DiagonalCoefficient,
    t: f64,
    x: &StateVector,
    dt: f64,
) -> Result<StateVector> {
    check_dim(model.modes(), x)?;
    if !(dt > 0.0) {
        return Err(Error::param(format!("dt must be positive, got {dt}")));
    }
    let steps = grid_steps(t, dt)?;
    if steps < 0 {
        return Err(Error::param("stepped propagation runs forward in time only"));
    }
    let mut out = x.clone();
    let mut c = vec![0.0; model.modes()];
    for k in 0..steps {
        coeff.coefficient((k as f64 + 0.5) * dt, &mut c)?;
        for ((o, mu), cm) in out.0.iter_mut().zip(model.mu()).zip(&c) {
            *o *= ((mu + cm) * dt).exp();
        }
    }
    Ok(out)
}

/// Finite-horizon Lyapunov exponents (1/T) log ‖U(T,ω) e_m‖, sorted descending.
pub fn estimate_lyapunov(spec: &LinearCocycle, horizon: f64) -> Result<Vec<f64>> {
    if !(horizon >= 10.0) {
        return Err(Error::param(format!("horizon must be at least 10, got {horizon}")));
    }
    let g = spec.log_growth(horizon)?;
    let mut lambda: Vec<f64> = g.into_iter().map(|v| v / horizon).collect();
    lambda.sort_by(|a, b| b.total_cmp(a));
    Ok(lambda)
}

/// Estimated constants of a nonuniform exponential dichotomy:
/// ‖U(t,ω)Π^s‖ ≤ K e^{βt} and ‖U^u(t,ω)^{-1}‖ ≤ K e^{−αt} for t ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyEstimate {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub epsilon_hat: f64,
    pub horizon: f64,
}

impl DichotomyEstimate {
    pub fn gap(&self) -> f64 {
        self.alpha - self.beta
    }
}

/// Effective (μ_u, μ_s) for the rates: an empty block is mirrored through λ.
fn effective_rates(split: &Splitting) -> Result<(f64, f64)> {
    match (split.alpha_raw.is_finite(), split.beta_raw.is_finite()) {
        (true, true) => Ok((split.alpha_raw, split.beta_raw)),
        (false, true) => Ok((2.0 * split.lambda - split.beta_raw, split.beta_raw)),
        (true, false) => Ok((split.alpha_raw, 2.0 * split.lambda - split.alpha_raw)),
        (false, false) => Err(Error::param("splitting has no modes")),
    }
}

/// Default gap allowance ε̂ = (μ_u − μ_s)/10.
pub fn default_epsilon_hat(split: &Splitting) -> Result<f64> {
    let (mu_u, mu_s) = effective_rates(split)?;
    Ok((mu_u - mu_s) / 10.0)
}

fn dichotomy_rates(split: &Splitting, epsilon_hat: f64) -> Result<(f64, f64)> {
    let (mu_u, mu_s) = effective_rates(split)?;
    if !(epsilon_hat > 0.0 && epsilon_hat < 0.5 * (mu_u - mu_s)) {
        return Err(Error::param(format!(
            "epsilon_hat = {epsilon_hat} must lie in (0, {})",
            0.5 * (mu_u - mu_s)
        )));
    }
    Ok((mu_u - epsilon_hat, mu_s + epsilon_hat))
}

/// Exponent of the rescaled norm of one mode at relative log-growth `g` and time `t`:
/// stable modes are measured against e^{βt}, unstable modes through e^{αt}/|U_m|.
#[inline]
fn scaled_exponent(side: Side, g: f64, t: f64, alpha: f64, beta: f64) -> f64 {
    match side {
        Side::Stable => g - beta * t,
        Side::Unstable => alpha * t - g,
    }
}

/// Estimates (α, β, γ, K) at ω from the probe grid `0, dt_probe, …, horizon`.
///
/// Between consecutive probe times the rescaled norm is bounded by its value
/// at the left probe plus the largest possible excursion across the cell
/// (drift part plus Σ_i ν_i|d_{i,m}|∫|z_i|), so the returned K dominates the
/// rescaled norms at every path-grid time in `[0, horizon]`.
pub fn estimate_dichotomy(
    spec: &LinearCocycle,
    split: &Splitting,
    epsilon_hat: f64,
    horizon: f64,
    dt_probe: f64,
) -> Result<DichotomyEstimate> {
    if split.dim != spec.modes() {
        return Err(Error::DimensionMismatch {
            expected: spec.modes(),
            got: split.dim,
        });
    }
    let (alpha, beta) = dichotomy_rates(split, epsilon_hat)?;
    if !(horizon > 0.0) {
        return Err(Error::param("horizon must be positive"));
    }
    let per_probe = grid_steps(dt_probe, spec.dt())?;
    if per_probe < 1 {
        return Err(Error::param("dt_probe must be at least one grid step"));
    }
    let per_probe = per_probe as usize;
    let cells = grid_steps(horizon, dt_probe)? as usize;
    let start = spec.index(0.0)?;
    spec.index(horizon)?;

    let mu = spec.model().mu();
    let mut log_k: f64 = 0.0;
    for m in 0..spec.modes() {
        let side = split.side_of(m);
        let drift = match side {
            Side::Stable => mu[m] - beta,
            Side::Unstable => alpha - mu[m],
        };
        let mut g = 0.0;
        for cell in 0..=cells {
            let t = (cell * per_probe) as f64 * spec.dt();
            let i0 = start + cell * per_probe;
            let base = scaled_exponent(side, g, t, alpha, beta);
            log_k = log_k.max(base);
            if cell == cells {
                break;
            }
            let excursion: f64 = (i0..i0 + per_probe).map(|i| spec.cell_excursion(m, i)).sum();
            log_k = log_k.max(base + drift.max(0.0) * dt_probe + excursion);
            g += spec.log_growth_between(m, i0, i0 + per_probe);
        }
    }
    Ok(DichotomyEstimate {
        alpha,
        beta,
        gamma: 0.5 * (alpha + beta),
        k: log_k.exp(),
        epsilon_hat,
        horizon,
    })
}

/// K(θ_tω) for each t in `times`, each estimated on the probe grid of [t, t + horizon].
pub fn dichotomy_constants_along_orbit(
    spec: &LinearCocycle,
    split: &Splitting,
    epsilon_hat: f64,
    horizon: f64,
    dt_probe: f64,
    times: &[f64],
    exec: Exec,
) -> Result<Vec<(f64, f64)>> {
    exec.map(times, |&t| {
        let shifted = spec.shifted(t)?;
        estimate_dichotomy(&shifted, split, epsilon_hat, horizon, dt_probe).map(|d| (t, d.k))
    })
    .into_iter()
    .collect()
}

/// Dichotomy constant that holds uniformly along the orbit inside a window:
/// K bounds ‖U^s(t−τ, θ_τω)‖e^{−β(t−τ)} and e^{α(t−τ)}/σ_min(U^u(t−τ, θ_τω))
/// for every pair of grid times `from ≤ τ ≤ t ≤ to` (relative to the origin).
///
/// This is the form the Lyapunov–Perron operators consume, since their
/// integrands evaluate the cocycle at shifted sample points θ_τω.
pub fn estimate_window_dichotomy(
    spec: &LinearCocycle,
    split: &Splitting,
    epsilon_hat: f64,
    from: f64,
    to: f64,
) -> Result<DichotomyEstimate> {
    if split.dim != spec.modes() {
        return Err(Error::DimensionMismatch {
            expected: spec.modes(),
            got: split.dim,
        });
    }
    let (alpha, beta) = dichotomy_rates(split, epsilon_hat)?;
    if !(to > from) {
        return Err(Error::param("window must have positive length"));
    }
    let i0 = spec.index(from)?;
    let i1 = spec.index(to)?;
    let dt = spec.dt();
    let mut log_k: f64 = 0.0;
    for m in 0..spec.modes() {
        let side = split.side_of(m);
        let mut g = 0.0;
        let mut running_min = 0.0_f64;
        for i in i0..=i1 {
            if i > i0 {
                g += spec.log_growth_between(m, i - 1, i);
            }
            let h = scaled_exponent(side, g, (i - i0) as f64 * dt, alpha, beta);
            running_min = running_min.min(h);
            log_k = log_k.max(h - running_min);
        }
    }
    Ok(DichotomyEstimate {
        alpha,
        beta,
        gamma: 0.5 * (alpha + beta),
        k: log_k.exp(),
        epsilon_hat,
        horizon: to - from,
    })
}

/// Largest ratio of the rescaled cocycle norms to K over the probe grid
/// `0, dt_probe, …, dich.horizon`; the dichotomy bounds hold iff this is ≤ 1.
pub fn dichotomy_bound_ratio(
    spec: &LinearCocycle,
    split: &Splitting,
    dich: &DichotomyEstimate,
    dt_probe: f64,
) -> Result<f64> {
    let steps = grid_steps(dich.horizon, dt_probe)?;
    let mut worst: f64 = 0.0;
    for k in 0..=steps {
        let t = k as f64 * dt_probe;
        let g = spec.log_growth(t)?;
        for (m, gm) in g.iter().enumerate() {
            let e = scaled_exponent(split.side_of(m), *gm, t, dich.alpha, dich.beta);
            worst = worst.max((e - dich.k.ln()).exp());
        }
    }
    Ok(worst)
}

/// Monte Carlo estimate of 𝔼 log⁺ sup_{t1,t2 ∈ [0,1]} ‖U(t1, θ_{t2}ω)‖.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
    pub values: Vec<f64>,
}

/// log⁺ sup_{t1,t2 ∈ [0,1]} ‖U(t1, θ_{t2}ω)‖ over grid times at one ω.
pub fn integrability_sample(spec: &LinearCocycle) -> Result<f64> {
    let i0 = spec.index(0.0)?;
    let i1 = spec.index(1.0)?;
    spec.index(2.0)?;
    let n = i1 - i0;
    let mut best: f64 = 0.0;
    for m in 0..spec.modes() {
        for a in i0..=i1 {
            let mut g = 0.0;
            for b in a + 1..=a + n {
                g += spec.log_growth_between(m, b - 1, b);
                best = best.max(g);
            }
        }
    }
    Ok(log_plus(best.exp()))
}

/// Averages [`integrability_sample`] over `samples` fresh sample points
/// with seeds `seed, seed + 1, …`.
pub fn check_integrability(
    params: &Arc<CocycleParams>,
    settings: &NoiseSettings,
    samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<IntegrabilityReport> {
    if samples == 0 {
        return Err(Error::param("samples must be at least 1"));
    }
    let seeds: Vec<u64> = (0..samples as u64).map(|s| seed.wrapping_add(s)).collect();
    let values = exec
        .map(&seeds, |&s| {
            let spec = LinearCocycle::generate(params.clone(), s, settings)?;
            integrability_sample(&spec)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Ok(IntegrabilityReport {
        mean: mean(&values),
        std_err: (variance(&values) / samples as f64).sqrt(),
        samples,
        values,
    })
}

/// Upper bound |μ_1| + 2 Σ_i ν_i ‖D_i‖ 𝔼|z_i*| with 𝔼|z_i*| = (πν_i)^{-1/2}.
pub fn integrability_bound(params: &CocycleParams) -> f64 {
    let mu1 = params.model.mu()[0].abs();
    mu1 + 2.0
        * (0..params.components())
            .map(|i| {
                let nu = params.nus[i];
                nu * params.op_norm(i) * (1.0 / (std::f64::consts::PI * nu)).sqrt()
            })
            .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{make_splitting, shifted_dirichlet_laplacian};

    fn settings(nus: Vec<f64>) -> NoiseSettings {
        NoiseSettings {
            nus,
            dt: 0.01,
            t_min: -30.0,
            t_max: 60.0,
            burn_in: 10.0,
        }
    }

    fn cocycle(d: Vec<Vec<f64>>, seed: u64) -> LinearCocycle {
        let model = shifted_dirichlet_laplacian(4, 2.0).unwrap();
        let nus = vec![1.0; d.len()];
        let params = Arc::new(CocycleParams::new(model, d, nus.clone()).unwrap());
        LinearCocycle::generate(params, seed, &settings(nus)).unwrap()
    }

    #[test]
    fn zero_noise_is_semigroup() {
        let c = cocycle(vec![vec![0.0; 4]], 1);
        let x = StateVector(vec![1.0, 2.0, -1.0, 0.5]);
        let y = propagate_linear(&c, 1.5, &x).unwrap();
        for m in 0..4 {
            let expect = (c.model().mu()[m] * 1.5).exp() * x[m];
            assert!((y[m] - expect).abs() <= 1e-13 * expect.abs());
        }
        let lam = estimate_lyapunov(&c, 20.0).unwrap();
        assert_eq!(lam, vec![1.0, -2.0, -7.0, -14.0]);
    }

    #[test]
    fn integral_matches_half_step_quadrature() {
        // Independent oracle: re-integrate the linear interpolant of z at half
        // the grid step with the midpoint-trapezoid composite rule.
        let c = cocycle(vec![vec![1.0; 4]], 7);
        let z = &c.noise().ou()[0];
        let i0 = c.index(0.0).unwrap();
        let i1 = c.index(2.0).unwrap();
        let h = c.dt() / 2.0;
        let mut oracle = 0.0;
        for i in i0..i1 {
            let mid = 0.5 * (z.z(i) + z.z(i + 1));
            oracle += 0.5 * h * (z.z(i) + mid) + 0.5 * h * (mid + z.z(i + 1));
        }
        let g = c.log_growth(2.0).unwrap();
        for m in 0..4 {
            let expect = c.model().mu()[m] * 2.0 + oracle;
            assert!((g[m] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cocycle_law_and_backward_consistency() {
        let c = cocycle(vec![vec![0.5, -0.3, 0.8, 0.1], vec![-1.0, 0.2, 0.0, 0.4]], 3);
        let x = StateVector(vec![1.0, -2.0, 0.3, 4.0]);
        let (t, tau) = (1.37, 2.05);
        let lhs = propagate_linear(&c, t + tau, &x).unwrap();
        let mid = propagate_linear(&c, tau, &x).unwrap();
        let rhs = propagate_linear(&c.shifted(tau).unwrap(), t, &mid).unwrap();
        assert!(crate::stats::dist(&lhs.0, &rhs.0) <= 1e-8 * x.norm());

        let fwd = propagate_linear(&c, 3.0, &x).unwrap();
        let back = propagate_linear(&c.shifted(3.0).unwrap(), -3.0, &fwd).unwrap();
        assert!(crate::stats::dist(&back.0, &x.0) < 1e-8 * x.norm());
    }

    #[test]
    fn range_errors() {
        let c = cocycle(vec![vec![0.0; 4]], 1);
        let x = StateVector(vec![1.0; 4]);
        assert!(matches!(propagate_linear(&c, 61.0, &x), Err(Error::Range { .. })));
        assert!(matches!(propagate_linear(&c, -25.0, &x), Err(Error::Range { .. })));
        assert!(matches!(estimate_lyapunov(&c, 5.0), Err(Error::Parameter(_))));
        assert!(matches!(estimate_lyapunov(&c, 100.0), Err(Error::Range { .. })));
    }

    #[test]
    fn stepped_with_zero_coefficient_is_semigroup() {
        let model = shifted_dirichlet_laplacian(4, 2.0).unwrap();
        let zero = |_: f64, out: &mut [f64]| out.fill(0.0);
        let x = StateVector(vec![1.0, 1.0, 1.0, 1.0]);
        let y = propagate_linear_stepped(&model, &zero, 1.0, &x, 0.1).unwrap();
        for m in 0..4 {
            let e = model.mu()[m].exp();
            assert!((y[m] - e).abs() <= 1e-13 * e);
        }
        assert!(matches!(
            propagate_linear_stepped(&model, &zero, 1.05, &x, 0.1),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn stepped_constant_coefficient_single_step_is_exact() {
        let model = shifted_dirichlet_laplacian(3, 0.0).unwrap();
        let c = |_: f64, out: &mut [f64]| out.copy_from_slice(&[0.3, -0.2, 1.1]);
        let x = StateVector(vec![1.0, 2.0, 3.0]);
        let y = propagate_linear_stepped(&model, &c, 0.7, &x, 0.7).unwrap();
        for (m, cm) in [0.3, -0.2, 1.1].iter().enumerate() {
            let e = ((model.mu()[m] + cm) * 0.7).exp() * x[m];
            assert!((y[m] - e).abs() <= 1e-14 * e.abs());
        }
    }

    #[test]
    fn stepped_converges_at_second_order_for_smooth_coefficient() {
        // C(t) = sin(t) on every mode; exact log-growth μt + 1 − cos t.
        let model = shifted_dirichlet_laplacian(2, 0.0).unwrap();
        let c = |t: f64, out: &mut [f64]| out.fill(t.sin());
        let x = StateVector(vec![1.0, 1.0]);
        let exact = |m: usize| (model.mu()[m] * 2.0 + 1.0 - 2.0f64.cos()).exp();
        let gap = |dt: f64| {
            let y = propagate_linear_stepped(&model, &c, 2.0, &x, dt).unwrap();
            (y[0] - exact(0)).abs()
        };
        let ratio = gap(0.1) / gap(0.05);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn stepped_on_path_grid_reproduces_closed_form() {
        // midpoint of the linear interpolant equals the trapezoid on each cell
        let c = cocycle(vec![vec![0.7, -0.4, 0.2, 1.0]], 9);
        let x = StateVector(vec![1.0, 1.0, 1.0, 1.0]);
        let a = propagate_linear(&c, 3.0, &x).unwrap();
        let b = propagate_linear_stepped(c.model(), &c, 3.0, &x, c.dt()).unwrap();
        for m in 0..4 {
            assert!((a[m] - b[m]).abs() <= 1e-10 * a[m].abs());
        }
    }

    #[test]
    fn deterministic_dichotomy_has_unit_constant() {
        let c = cocycle(vec![vec![0.0; 4]], 1);
        let s = make_splitting(c.model(), 0.0).unwrap();
        let d = estimate_dichotomy(&c, &s, 1e-9, 50.0, 0.1).unwrap();
        assert_eq!(d.k, 1.0);
        assert!((d.alpha - 1.0).abs() < 1e-8 && (d.beta + 2.0).abs() < 1e-8);
        let w = estimate_window_dichotomy(&c, &s, 0.3, -20.0, 0.0).unwrap();
        assert_eq!(w.k, 1.0);
    }

    #[test]
    fn dichotomy_rejects_degenerate_gap() {
        let c = cocycle(vec![vec![0.0; 4]], 1);
        let s = make_splitting(c.model(), 0.0).unwrap();
        assert!(estimate_dichotomy(&c, &s, 1.5, 50.0, 0.1).is_err());
        assert!(estimate_dichotomy(&c, &s, 0.0, 50.0, 0.1).is_err());
    }

    #[test]
    fn empty_unstable_block() {
        let c = cocycle(vec![vec![0.3, 0.1, -0.2, 0.5]], 2);
        let s = make_splitting(c.model(), 5.0).unwrap();
        assert_eq!(s.cut, 0);
        let eps = default_epsilon_hat(&s).unwrap();
        let d = estimate_dichotomy(&c, &s, eps, 20.0, 0.1).unwrap();
        assert!(d.alpha > d.gamma && d.gamma > d.beta && d.k >= 1.0);
        assert!(dichotomy_bound_ratio(&c, &s, &d, 0.05).unwrap() <= 1.0 + 1e-6);
    }

    #[test]
    fn dichotomy_holds_between_probes() {
        let c = cocycle(vec![vec![0.9, -0.8, 0.5, -0.2], vec![-0.6, 0.7, 0.1, 0.3]], 5);
        let s = make_splitting(c.model(), 0.0).unwrap();
        let eps = default_epsilon_hat(&s).unwrap();
        let d = estimate_dichotomy(&c, &s, eps, 50.0, 0.1).unwrap();
        assert!(d.k >= 1.0);
        assert!(dichotomy_bound_ratio(&c, &s, &d, 0.01).unwrap() <= 1.0 + 1e-6);
    }

    #[test]
    fn window_constant_dominates_shifted_estimates() {
        let c = cocycle(vec![vec![0.9, -0.8, 0.5, -0.2]], 6);
        let s = make_splitting(c.model(), 0.0).unwrap();
        let w = estimate_window_dichotomy(&c, &s, 0.3, -10.0, 10.0).unwrap();
        for tau in [-10.0, -4.0, 0.0, 3.0] {
            let shifted = c.shifted(tau).unwrap();
            let horizon = 10.0 - tau;
            let d = DichotomyEstimate { horizon, ..w };
            assert!(dichotomy_bound_ratio(&shifted, &s, &d, 0.01).unwrap() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn integrability_deterministic_case() {
        let c = cocycle(vec![vec![0.0; 4]], 1);
        assert!((integrability_sample(&c).unwrap() - 1.0).abs() < 1e-12);
        let model = shifted_dirichlet_laplacian(3, 0.0).unwrap();
        let params = Arc::new(CocycleParams::new(model, vec![vec![0.0; 3]], vec![1.0]).unwrap());
        let c = LinearCocycle::generate(params, 1, &settings(vec![1.0])).unwrap();
        assert_eq!(integrability_sample(&c).unwrap(), 0.0);
    }
}
