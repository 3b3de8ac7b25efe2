//! Conjugation between the Stratonovich system
//!
//! ```text
//! dX + AX dt = f(X) dt + Σ_i D_i X ∘ dw_i
//! ```
//!
//! and the random equation du/dt + A(θ_tω)u = T^{-1}(θ_tω) f(T(θ_tω)u) with
//! T(ω) = ∏_i exp(z_i*(ω) D_i). All D_i are diagonal in the eigenbasis, so T
//! is a diagonal scaling and X(t) = T(θ_tω) u(t).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{CocycleParams, LinearCocycle};
use crate::noise::{grid_steps, NoiseSettings};
use crate::nonlinear::{integrate_mild, integrate_mild_trajectory, CutoffField, NonlinearField, Nonlinearity, RandomField};
use crate::par::Exec;
use crate::perron::FieldConstants;
use crate::spectral::StateVector;
use crate::stats::{dist, ls_slope, mean};

/// The Stratonovich system at ω: a linear cocycle plus a globally Lipschitz f.
#[derive(Debug, Clone)]
pub struct SpdeModel {
    cocycle: LinearCocycle,
    f: NonlinearField,
}

impl SpdeModel {
    pub fn new(cocycle: LinearCocycle, f: NonlinearField) -> Result<Self> {
        if f.dim() != cocycle.modes() {
            return Err(Error::DimensionMismatch {
                expected: cocycle.modes(),
                got: f.dim(),
            });
        }
        if f.lipschitz().is_none() {
            return Err(Error::param("the conjugated system needs a globally Lipschitz f"));
        }
        Ok(Self { cocycle, f })
    }

    pub fn generate(params: Arc<CocycleParams>, f: NonlinearField, seed: u64, settings: &NoiseSettings) -> Result<Self> {
        Self::new(LinearCocycle::generate(params, seed, settings)?, f)
    }

    pub fn shifted(&self, tau: f64) -> Result<Self> {
        Ok(Self {
            cocycle: self.cocycle.shifted(tau)?,
            f: self.f.clone(),
        })
    }

    pub fn cocycle(&self) -> &LinearCocycle {
        &self.cocycle
    }

    pub fn field(&self) -> &NonlinearField {
        &self.f
    }

    pub fn modes(&self) -> usize {
        self.cocycle.modes()
    }

    /// Σ_i d_{i,m} z_i at an absolute grid index.
    fn log_scale(&self, idx: usize, m: usize) -> f64 {
        let params = self.cocycle.params();
        params
            .noise_ops
            .iter()
            .zip(self.cocycle.noise().ou())
            .map(|(d, z)| d[m] * z.z(idx))
            .sum()
    }

    fn scales_at(&self, idx: usize) -> Vec<f64> {
        (0..self.modes()).map(|m| self.log_scale(idx, m).exp()).collect()
    }
}

/// The diagonal map T(θ_tω).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugationMap {
    pub scales: Vec<f64>,
}

impl ConjugationMap {
    pub fn apply(&self, x: &StateVector) -> StateVector {
        StateVector(x.0.iter().zip(&self.scales).map(|(v, s)| v * s).collect())
    }

    pub fn inverse(&self, x: &StateVector) -> StateVector {
        StateVector(x.0.iter().zip(&self.scales).map(|(v, s)| v / s).collect())
    }

    pub fn norm(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }

    pub fn inverse_norm(&self) -> f64 {
        self.scales.iter().map(|s| 1.0 / s).fold(0.0, f64::max)
    }
}

/// T(θ_tω) for relative time `t`.
pub fn build_t(model: &SpdeModel, t: f64) -> Result<ConjugationMap> {
    let idx = model.cocycle.index(t)?;
    let scales = model.scales_at(idx);
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::NonFinite(format!("conjugation factors at t = {t}")));
    }
    Ok(ConjugationMap { scales })
}

/// ∏_i exp(max_m |d_{i,m}|·|z_i*(θ_tω)|), which bounds both ‖T‖ and ‖T^{-1}‖.
pub fn norm_bound(model: &SpdeModel, t: f64) -> Result<f64> {
    let idx = model.cocycle.index(t)?;
    let params = model.cocycle.params();
    Ok(params
        .noise_ops
        .iter()
        .zip(model.cocycle.noise().ou())
        .map(|(d, z)| {
            let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (dmax * z.z(idx).abs()).exp()
        })
        .product())
}

/// F(θ_tω, u) = T^{-1}(θ_tω) g(T(θ_tω)u) for a fixed nonlinearity g.
pub struct ConjugatedField<'a> {
    model: &'a SpdeModel,
    base: &'a dyn Nonlinearity,
}

impl<'a> ConjugatedField<'a> {
    pub fn new(model: &'a SpdeModel, base: &'a dyn Nonlinearity) -> Self {
        Self { model, base }
    }

    /// Constants valid on the relative window [from, to], for a cut-off base.
    ///
    /// Lipschitz constant ≤ sup ‖T‖‖T^{-1}‖·B_1ρ^ε and |F| ≤ sup ‖T^{-1}‖·B_0;
    /// F agrees with the uncut field on the ball of radius ρ / sup ‖T‖.
    pub fn cutoff_constants(model: &SpdeModel, cutoff: &CutoffField, from: f64, to: f64) -> Result<FieldConstants> {
        let (a, b) = (model.cocycle.index(from)?, model.cocycle.index(to)?);
        if a > b {
            return Err(Error::param("empty window"));
        }
        let mut cond: f64 = 0.0;
        let mut t_sup: f64 = 0.0;
        let mut inv_sup: f64 = 0.0;
        for idx in a..=b {
            let map = ConjugationMap {
                scales: model.scales_at(idx),
            };
            cond = cond.max(map.norm() * map.inverse_norm());
            t_sup = t_sup.max(map.norm());
            inv_sup = inv_sup.max(map.inverse_norm());
        }
        Ok(FieldConstants {
            b1: cond * cutoff.lipschitz(),
            eps: 0.0,
            rho: cutoff.rho() / t_sup,
            b0: inv_sup * cutoff.b0(),
        })
    }
}

impl RandomField for ConjugatedField<'_> {
    fn apply_at(&self, index: usize, u: &[f64], out: &mut [f64]) {
        let scales = self.model.scales_at(index);
        let v: Vec<f64> = u.iter().zip(&scales).map(|(x, s)| x * s).collect();
        self.base.apply_into(&v, out);
        for (o, s) in out.iter_mut().zip(&scales) {
            *o /= s;
        }
    }
}

/// φ(t, ω, x) = T(θ_tω) ψ(t, ω, T^{-1}(ω)x), with ψ the mild flow of the
/// random equation and the model's own f.
pub fn conjugate_flow(model: &SpdeModel, x: &StateVector, t: f64, dt: f64) -> Result<StateVector> {
    conjugate_flow_with(model, &model.f, x, t, dt)
}

/// [`conjugate_flow`] with another nonlinearity, such as a cut-off field.
pub fn conjugate_flow_with(
    model: &SpdeModel,
    base: &dyn Nonlinearity,
    x: &StateVector,
    t: f64,
    dt: f64,
) -> Result<StateVector> {
    let u0 = build_t(model, 0.0)?.inverse(x);
    let field = ConjugatedField::new(model, base);
    let u = integrate_mild(&model.cocycle, &field, &u0, t, dt)?;
    Ok(build_t(model, t)?.apply(&u))
}

/// Every step of [`conjugate_flow`] as `(t, X(t))`.
pub fn conjugate_flow_trajectory(
    model: &SpdeModel,
    x: &StateVector,
    t: f64,
    dt: f64,
) -> Result<Vec<(f64, StateVector)>> {
    let u0 = build_t(model, 0.0)?.inverse(x);
    let field = ConjugatedField::new(model, &model.f);
    integrate_mild_trajectory(&model.cocycle, &field, &u0, t, dt)?
        .into_iter()
        .map(|(s, u)| Ok((s, build_t(model, s)?.apply(&u))))
        .collect()
}

fn strat_steps(
    model: &SpdeModel,
    x: &StateVector,
    t: f64,
    dt: f64,
    mut visit: impl FnMut(f64, &[f64]),
) -> Result<StateVector> {
    let j = model.modes();
    if x.dim() != j {
        return Err(Error::DimensionMismatch { expected: j, got: x.dim() });
    }
    if !(t >= 0.0) {
        return Err(Error::param("the Stratonovich integrator runs forward in time"));
    }
    let spec = &model.cocycle;
    let step = grid_steps(dt, spec.dt())?;
    if step < 1 {
        return Err(Error::param(format!("dt = {dt} is below the noise grid step")));
    }
    let step = step as usize;
    let (start, end) = (spec.index(0.0)?, spec.index(t)?);
    let mu = spec.model().mu();
    let ops = &spec.params().noise_ops;
    let w = spec.noise().wiener();

    let drift = |u: &[f64], out: &mut [f64]| {
        model.f.apply_into(u, out);
        for ((o, m), v) in out.iter_mut().zip(mu).zip(u) {
            *o += m * v;
        }
    };
    let mut u = x.0.clone();
    let mut a0 = vec![0.0; j];
    let mut a1 = vec![0.0; j];
    let mut pred = vec![0.0; j];
    let mut i = start;
    while i < end {
        let next = (i + step).min(end);
        let h = (next - i) as f64 * spec.dt();
        // Σ_i d_{i,m} Δw_i
        let noise: Vec<f64> = (0..j)
            .map(|m| {
                ops.iter()
                    .enumerate()
                    .map(|(c, d)| d[m] * (w.values(c)[next] - w.values(c)[i]))
                    .sum()
            })
            .collect();
        drift(&u, &mut a0);
        for m in 0..j {
            pred[m] = u[m] + a0[m] * h + u[m] * noise[m];
        }
        drift(&pred, &mut a1);
        for m in 0..j {
            u[m] += 0.5 * (a0[m] + a1[m]) * h + 0.5 * (u[m] + pred[m]) * noise[m];
        }
        i = next;
        visit(spec.time_of(i), &u);
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Stratonovich integration blew up".into()));
    }
    Ok(StateVector(u))
}

/// Heun predictor–corrector for the Stratonovich system, driven by the same
/// Wiener path as the model's OU processes.
pub fn integrate_stratonovich(model: &SpdeModel, x: &StateVector, t: f64, dt: f64) -> Result<StateVector> {
    strat_steps(model, x, t, dt, |_, _| {})
}

pub fn integrate_stratonovich_trajectory(
    model: &SpdeModel,
    x: &StateVector,
    t: f64,
    dt: f64,
) -> Result<Vec<(f64, StateVector)>> {
    let mut traj = vec![(0.0, x.clone())];
    strat_steps(model, x, t, dt, |s, u| traj.push((s, StateVector(u.to_vec()))))?;
    Ok(traj)
}

/// x_m·exp(μ_m t + Σ_i d_{i,m}(w_i(t) − w_i(0))), the solution for f = 0.
pub fn linear_closed_form(model: &SpdeModel, x: &StateVector, t: f64) -> Result<StateVector> {
    let spec = &model.cocycle;
    let (start, end) = (spec.index(0.0)?, spec.index(t)?);
    let w = spec.noise().wiener();
    let ops = &spec.params().noise_ops;
    Ok(StateVector(
        spec.model()
            .mu()
            .iter()
            .enumerate()
            .map(|(m, mu)| {
                let s: f64 = ops
                    .iter()
                    .enumerate()
                    .map(|(c, d)| d[m] * (w.values(c)[end] - w.values(c)[start]))
                    .sum();
                x[m] * (mu * t + s).exp()
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongErrorReport {
    pub dt_levels: Vec<f64>,
    pub mean_errors: Vec<f64>,
    pub fitted_order: f64,
    pub seeds: Vec<u64>,
    /// errors[s][l]: seed s at level l.
    pub errors: Vec<Vec<f64>>,
}

impl StrongErrorReport {
    pub fn passes(&self) -> bool {
        self.fitted_order >= 0.8
    }
}

/// Mean over seeds of ‖conjugate_flow − integrate_stratonovich‖ at time `t`
/// for each step size, with the least-squares order in log–log coordinates.
/// Seed s uses noise seed `base_seed + s`.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_check(
    params: &Arc<CocycleParams>,
    f: &NonlinearField,
    settings: &NoiseSettings,
    x: &StateVector,
    t: f64,
    dt_levels: &[f64],
    seeds: usize,
    base_seed: u64,
    exec: Exec,
) -> Result<StrongErrorReport> {
    if dt_levels.len() < 2 || seeds == 0 {
        return Err(Error::param("need at least two dt levels and one seed"));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| base_seed + s).collect();
    let errors: Vec<Vec<f64>> = exec
        .map(&seed_list, |&seed| -> Result<Vec<f64>> {
            let model = SpdeModel::generate(params.clone(), f.clone(), seed, settings)?;
            dt_levels
                .iter()
                .map(|&dt| {
                    let a = conjugate_flow(&model, x, t, dt)?;
                    let b = integrate_stratonovich(&model, x, t, dt)?;
                    Ok(dist(&a.0, &b.0))
                })
                .collect()
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mean_errors: Vec<f64> = (0..dt_levels.len())
        .map(|l| mean(&errors.iter().map(|e| e[l]).collect::<Vec<_>>()))
        .collect();
    let fitted_order = if mean_errors.iter().all(|e| *e > 0.0) {
        let lx: Vec<f64> = dt_levels.iter().map(|d| d.ln()).collect();
        let ly: Vec<f64> = mean_errors.iter().map(|e| e.ln()).collect();
        ls_slope(&lx, &ly)
    } else {
        f64::NAN
    };
    Ok(StrongErrorReport {
        dt_levels: dt_levels.to_vec(),
        mean_errors,
        fitted_order,
        seeds: seed_list,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{estimate_window_dichotomy, propagate_linear};
    use crate::perron::{LpConfig, LpProblem};
    use crate::spectral::{make_splitting, shifted_dirichlet_laplacian, Side, SpectralModel};
    use crate::stats::norm;

    fn settings(dt: f64) -> NoiseSettings {
        NoiseSettings {
            nus: vec![1.0, 1.0],
            dt,
            t_min: -20.0,
            t_max: 20.0,
            burn_in: 10.0,
        }
    }

    fn params(d: [[f64; 4]; 2]) -> Arc<CocycleParams> {
        let model = shifted_dirichlet_laplacian(4, 2.0).unwrap();
        Arc::new(CocycleParams::new(model, d.iter().map(|r| r.to_vec()).collect(), vec![1.0, 1.0]).unwrap())
    }

    const D: [[f64; 4]; 2] = [[0.5, -0.3, 0.8, 0.1], [-0.4, 0.6, 0.2, -0.7]];

    fn x0() -> StateVector {
        StateVector(vec![0.4, -0.3, 0.2, 0.1])
    }

    #[test]
    fn map_round_trip_and_bound() {
        let m = SpdeModel::generate(params(D), NonlinearField::zero(4), 3, &settings(0.01)).unwrap();
        for t in [-5.0, 0.0, 2.5, 7.0] {
            let map = build_t(&m, t).unwrap();
            let x = x0();
            let back = map.apply(&map.inverse(&x));
            assert!(dist(&back.0, &x.0) <= 1e-15);
            let b = norm_bound(&m, t).unwrap();
            assert!(map.norm() <= b * (1.0 + 1e-14) && map.inverse_norm() <= b * (1.0 + 1e-14));
        }
        assert!(build_t(&m, 100.0).is_err());
        assert!(SpdeModel::new(
            m.cocycle().clone(),
            NonlinearField::hoelder_radial(4, 1.0, 0.5, 1.0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn zero_noise_map_is_identity_and_flow_is_semigroup() {
        let m = SpdeModel::generate(params([[0.0; 4]; 2]), NonlinearField::zero(4), 3, &settings(0.01)).unwrap();
        assert!(build_t(&m, 1.0).unwrap().scales.iter().all(|s| *s == 1.0));
        let y = conjugate_flow(&m, &x0(), 1.0, 0.01).unwrap();
        for (k, mu) in m.cocycle().model().mu().iter().enumerate() {
            assert!((y[k] - x0()[k] * mu.exp()).abs() <= 1e-13);
        }
    }

    #[test]
    fn map_commutes_with_linear_propagator() {
        let m = SpdeModel::generate(params(D), NonlinearField::zero(4), 5, &settings(0.01)).unwrap();
        let map = build_t(&m, 0.0).unwrap();
        let a = map.apply(&propagate_linear(m.cocycle(), 1.3, &x0()).unwrap());
        let b = propagate_linear(m.cocycle(), 1.3, &map.apply(&x0())).unwrap();
        assert!(dist(&a.0, &b.0) <= 1e-15 * (1.0 + norm(&a.0)));
    }

    #[test]
    fn linear_conjugate_flow_is_closed_form() {
        let m = SpdeModel::generate(params(D), NonlinearField::zero(4), 7, &settings(1e-3)).unwrap();
        let a = conjugate_flow(&m, &x0(), 1.0, 1e-3).unwrap();
        let b = linear_closed_form(&m, &x0(), 1.0).unwrap();
        assert!(dist(&a.0, &b.0) <= 1e-12, "{}", dist(&a.0, &b.0));
    }

    #[test]
    fn heun_on_geometric_brownian_motion() {
        // J = 2 carrying the single-mode example in its first coordinate
        let model = SpectralModel::new(vec![0.5, -1.0]).unwrap();
        let p = Arc::new(CocycleParams::new(model, vec![vec![1.0, 0.0]], vec![1.0]).unwrap());
        let s = NoiseSettings {
            nus: vec![1.0],
            ..settings(1e-4)
        };
        let levels = [4e-3, 2e-3, 1e-3, 5e-4];
        let mut errs = [0.0; 4];
        for seed in 0..50 {
            let m = SpdeModel::generate(p.clone(), NonlinearField::zero(2), seed, &s).unwrap();
            let x = StateVector(vec![1.0, 0.0]);
            let exact = linear_closed_form(&m, &x, 1.0).unwrap();
            for (e, dt) in errs.iter_mut().zip(levels) {
                *e += dist(&integrate_stratonovich(&m, &x, 1.0, dt).unwrap().0, &exact.0) / 50.0;
            }
        }
        assert!(errs[2] < 5e-3);
        let lx: Vec<f64> = levels.iter().map(|d| d.ln()).collect();
        let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let order = ls_slope(&lx, &ly);
        assert!((0.8..1.3).contains(&order), "order {order}");
    }

    #[test]
    fn heun_without_noise_is_deterministic_heun() {
        let m = SpdeModel::generate(
            params([[0.0; 4]; 2]),
            NonlinearField::lipschitz_mixed(4, 0.5),
            1,
            &settings(0.01),
        )
        .unwrap();
        let got = integrate_stratonovich(&m, &x0(), 0.5, 0.05).unwrap();
        let mu = m.cocycle().model().mu().to_vec();
        let rhs = |u: &StateVector| {
            let mut f = m.field().apply(u);
            for k in 0..4 {
                f[k] += mu[k] * u[k];
            }
            f
        };
        let mut u = x0();
        for _ in 0..10 {
            let k1 = rhs(&u);
            let pred = &u + &k1.scaled(0.05);
            let k2 = rhs(&pred);
            u = &u + &(&k1 + &k2).scaled(0.025);
        }
        assert!(dist(&got.0, &u.0) <= 1e-14);
    }

    #[test]
    fn conjugate_flow_cocycle_residual() {
        let m = SpdeModel::generate(params(D), NonlinearField::lipschitz_mixed(4, 0.5), 9, &settings(1e-3)).unwrap();
        // τ off the coarse grid, so the split run takes a shortened step
        let tau = 0.705;
        let res = |dt: f64| {
            let whole = conjugate_flow(&m, &x0(), 1.5, dt).unwrap();
            let mid = conjugate_flow(&m, &x0(), tau, dt).unwrap();
            let rest = conjugate_flow(&m.shifted(tau).unwrap(), &mid, 1.5 - tau, dt).unwrap();
            dist(&whole.0, &rest.0)
        };
        let (r1, r2) = (res(0.02), res(0.01));
        assert!(r1 <= 0.1 * 0.02, "{r1}");
        assert!(r2 < r1);
    }

    #[test]
    fn strong_error_order() {
        let f = NonlinearField::lipschitz_mixed(4, 0.5);
        let r = strong_error_check(
            &params(D),
            &f,
            &settings(1.25e-3),
            &x0(),
            1.0,
            &[1e-2, 5e-3, 2.5e-3, 1.25e-3],
            8,
            0,
            Exec::default(),
        )
        .unwrap();
        assert!((0.8..=1.3).contains(&r.fitted_order), "{r:?}");
        assert!(r.passes());
    }

    #[test]
    fn manifold_for_conjugated_equation() {
        let m = SpdeModel::generate(params(D), NonlinearField::zero(4), 11, &settings(0.01)).unwrap();
        let split = make_splitting(m.cocycle().model(), 0.0).unwrap();
        let dich = estimate_window_dichotomy(m.cocycle(), &split, 0.3, -9.0, 9.0).unwrap();
        let base = NonlinearField::lipschitz_mixed(4, 1.0);
        let probe = CutoffField::new(base.clone(), 1.0).unwrap();
        let raw = ConjugatedField::cutoff_constants(&m, &probe, -9.0, 9.0).unwrap();
        // scale c so the certified budget is 1/4
        let c = 0.25 * dich.gap() / (4.0 * dich.k * raw.b1);
        let cutoff = CutoffField::new(NonlinearField::lipschitz_mixed(4, c), 1.0).unwrap();
        let consts = ConjugatedField::cutoff_constants(&m, &cutoff, -9.0, 9.0).unwrap();
        let field = ConjugatedField::new(&m, &cutoff);
        let cfg = LpConfig {
            t_lp: 9.0,
            dt_lp: 0.02,
            ..LpConfig::default()
        };
        let prob = LpProblem::with_field(m.cocycle(), &field, consts, &split, &dich, &cfg).unwrap();
        assert!(prob.radius().unwrap().ok);
        let p = StateVector(vec![0.5 * consts.rho / (4.0 * dich.k), 0.0, 0.0, 0.0]);
        let r = prob.solve(Side::Unstable, &p).unwrap();
        assert!(r.contraction_est <= 0.55);
        assert!(r.h.norm() > 0.0);
    }
}
