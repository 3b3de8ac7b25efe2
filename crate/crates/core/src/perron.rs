//! Lyapunov–Perron construction of pseudo-unstable and pseudo-stable
//! manifolds for du/dt + A(θ_tω)u = F_ρ(θ_tω, u).
//!
//! For an anchor p ∈ E^u the unstable-side operator on [−T, 0] is
//!
//! ```text
//! J^u(u, p)(t) = U^u(t,ω)p − ∫_t^0 U^u(t−τ, θ_τω) Π^u F_ρ(u(τ)) dτ
//!                         + ∫_{−T}^t U^s(t−τ, θ_τω) Π^s F_ρ(u(τ)) dτ
//! ```
//!
//! and its fixed point gives h^u(ω, p) = Π^s u(0). The stable side mirrors it
//! on [0, T] with the roles of the blocks exchanged. Both operators are
//! contractions in the weighted norm sup_t e^{−γt}‖u(t)‖ once the radius
//! budget 4·K·B_1ρ^ε/(α − β) is at most 1/2. Integrals are composite
//! trapezoidal on the dt_lp grid with the cocycle factors in closed form, and
//! the half-line is truncated at T.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{DichotomyEstimate, LinearCocycle};
use crate::noise::grid_steps;
use crate::nonlinear::{integrate_mild, CutoffField, RandomField};
use crate::par::Exec;
use crate::spectral::{Side, Splitting, StateVector};
use crate::stats::{dist, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpConfig {
    /// Half-line truncation length T.
    pub t_lp: f64,
    pub dt_lp: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            t_lp: 20.0,
            dt_lp: 0.01,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Global constants of a cut-off nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConstants {
    pub b1: f64,
    pub eps: f64,
    pub rho: f64,
    pub b0: f64,
}

impl FieldConstants {
    pub fn lipschitz(&self) -> f64 {
        self.b1 * self.rho.powf(self.eps)
    }
}

impl From<&CutoffField> for FieldConstants {
    fn from(f: &CutoffField) -> Self {
        Self {
            b1: f.b1(),
            eps: f.eps(),
            rho: f.rho(),
            b0: f.b0(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusCheck {
    pub ok: bool,
    /// 4·K·B_1ρ^ε/(α − β); the operators contract by at most this plus the
    /// same again, so it must not exceed 1/2.
    pub budget: f64,
    /// Largest admissible radius ((α − β)/(8·K·B_1))^{1/ε}; infinite when ε = 0
    /// and the budget holds, zero when it fails.
    pub rho_max: f64,
}

/// Radius condition ρ ≤ ((α − β)/(8·K·B_1))^{1/ε}, stated through the contraction budget.
pub fn check_radius(dich: &DichotomyEstimate, b1: f64, eps: f64, rho: f64) -> Result<RadiusCheck> {
    if !(dich.alpha > dich.beta) {
        return Err(Error::InvalidDichotomy {
            alpha: dich.alpha,
            beta: dich.beta,
        });
    }
    if !(b1 >= 0.0) || !(0.0..=1.0).contains(&eps) || !(rho > 0.0) {
        return Err(Error::param(format!(
            "need b1 >= 0, eps in [0, 1], rho > 0; got b1 = {b1}, eps = {eps}, rho = {rho}"
        )));
    }
    let gap = dich.gap();
    let budget = 4.0 * dich.k * b1 * rho.powf(eps) / gap;
    let ok = budget <= 0.5;
    let rho_max = if b1 == 0.0 {
        f64::INFINITY
    } else if eps == 0.0 {
        if ok {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (gap / (8.0 * dich.k * b1)).powf(1.0 / eps)
    };
    Ok(RadiusCheck { ok, budget, rho_max })
}

/// A trajectory on the LP grid: [−T, 0] for the unstable side, [0, T] for the stable side.
#[derive(Debug, Clone, PartialEq)]
pub struct LpTrajectory {
    pub side: Side,
    pub times: Vec<f64>,
    pub values: Vec<StateVector>,
    pub gamma: f64,
    pub weighted_norm: f64,
}

impl LpTrajectory {
    pub fn new(side: Side, times: Vec<f64>, values: Vec<StateVector>, gamma: f64) -> Self {
        let weighted_norm = weighted_norm(&times, gamma, values.iter().map(|v| v.norm()));
        Self {
            side,
            times,
            values,
            gamma,
            weighted_norm,
        }
    }

    /// The state at t = 0.
    pub fn at_zero(&self) -> &StateVector {
        match self.side {
            Side::Unstable => self.values.last().expect("non-empty trajectory"),
            Side::Stable => &self.values[0],
        }
    }

    /// |self − other|_γ in the weighted sup norm.
    pub fn distance(&self, other: &LpTrajectory) -> f64 {
        weighted_norm(
            &self.times,
            self.gamma,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| dist(&a.0, &b.0)),
        )
    }
}

fn weighted_norm(times: &[f64], gamma: f64, norms: impl Iterator<Item = f64>) -> f64 {
    times
        .iter()
        .zip(norms)
        .map(|(t, n)| (-gamma * t).exp() * n)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphResult {
    pub side: Side,
    /// Anchor coordinates (p on the unstable side, q on the stable side), full-space.
    pub anchor: StateVector,
    /// Graph value in the complementary block, full-space.
    pub h: StateVector,
    pub trajectory: LpTrajectory,
    pub iterations: usize,
    pub first_delta: f64,
    pub last_delta: f64,
    pub contraction_est: f64,
    pub tail_bound: f64,
}

impl GraphResult {
    /// Coordinates of h in its own block.
    pub fn h_block<'a>(&'a self, split: &Splitting) -> &'a [f64] {
        split.block(self.side.other(), &self.h)
    }

    /// ceil(log(tol/first_delta)/log 0.55) + 2, the geometric-convergence budget.
    pub fn iteration_budget(&self, tol: f64) -> usize {
        if self.first_delta <= tol {
            return 2;
        }
        ((tol / self.first_delta).ln() / 0.55f64.ln()).ceil() as usize + 2
    }
}

// Grid data shared by all applications of one operator.
struct LpGrid {
    side: Side,
    times: Vec<f64>,
    indices: Vec<usize>,
    // log-growth relative to the origin, [n][m]
    g: Vec<Vec<f64>>,
    h: f64,
}

/// Everything that defines one pair of Lyapunov–Perron operators at ω.
pub struct LpProblem<'a> {
    spec: &'a LinearCocycle,
    field: &'a dyn RandomField,
    constants: FieldConstants,
    split: &'a Splitting,
    dich: DichotomyEstimate,
    cfg: LpConfig,
}

impl<'a> LpProblem<'a> {
    pub fn new(
        spec: &'a LinearCocycle,
        field: &'a CutoffField,
        split: &'a Splitting,
        dich: &DichotomyEstimate,
        cfg: &LpConfig,
    ) -> Result<Self> {
        Self::with_field(spec, field, FieldConstants::from(field), split, dich, cfg)
    }

    /// A problem for any random field whose constants have been certified separately.
    pub fn with_field(
        spec: &'a LinearCocycle,
        field: &'a dyn RandomField,
        constants: FieldConstants,
        split: &'a Splitting,
        dich: &DichotomyEstimate,
        cfg: &LpConfig,
    ) -> Result<Self> {
        if split.dim != spec.modes() {
            return Err(Error::DimensionMismatch {
                expected: spec.modes(),
                got: split.dim,
            });
        }
        if !(dich.alpha > dich.gamma && dich.gamma > dich.beta) {
            return Err(Error::InvalidDichotomy {
                alpha: dich.alpha,
                beta: dich.beta,
            });
        }
        if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
            return Err(Error::param("tol must be positive and max_iter at least 1"));
        }
        let min_t = 20.0 / dich.gap();
        if cfg.t_lp < min_t {
            return Err(Error::Precondition(format!(
                "t_lp = {} is shorter than 20/(alpha - beta) = {min_t}",
                cfg.t_lp
            )));
        }
        Ok(Self {
            spec,
            field,
            constants,
            split,
            dich: *dich,
            cfg: *cfg,
        })
    }

    pub fn radius(&self) -> Result<RadiusCheck> {
        check_radius(&self.dich, self.constants.b1, self.constants.eps, self.constants.rho)
    }

    /// Truncation error bound of the dropped tail at t = 0.
    pub fn tail_bound(&self, side: Side) -> f64 {
        let d = &self.dich;
        let rate = match side {
            Side::Unstable => d.gamma - d.beta,
            Side::Stable => d.alpha - d.gamma,
        };
        self.constants.b0 * d.k * (-rate * self.cfg.t_lp).exp() / rate
    }

    fn grid(&self, side: Side) -> Result<LpGrid> {
        let dt = self.spec.dt();
        let step = grid_steps(self.cfg.dt_lp, dt)?;
        if step < 1 {
            return Err(Error::param("dt_lp is below the noise grid step"));
        }
        let n = grid_steps(self.cfg.t_lp, self.cfg.dt_lp)?;
        if n < 1 {
            return Err(Error::param("t_lp must cover at least one dt_lp step"));
        }
        let (step, n) = (step as usize, n as usize);
        let times: Vec<f64> = match side {
            Side::Unstable => (0..=n).map(|k| -((n - k) as f64) * self.cfg.dt_lp).collect(),
            Side::Stable => (0..=n).map(|k| k as f64 * self.cfg.dt_lp).collect(),
        };
        let zero = self.spec.index(0.0)?;
        let indices: Vec<usize> = match side {
            Side::Unstable => {
                self.spec.index(times[0])?;
                (0..=n).map(|k| zero - (n - k) * step).collect()
            }
            Side::Stable => {
                self.spec.index(times[n])?;
                (0..=n).map(|k| zero + k * step).collect()
            }
        };
        let g = self.spec.log_growth_at(&indices);
        Ok(LpGrid {
            side,
            times,
            indices,
            g,
            h: self.cfg.dt_lp,
        })
    }

    fn check_anchor(&self, side: Side, anchor: &StateVector) -> Result<()> {
        if anchor.dim() != self.split.dim {
            return Err(Error::DimensionMismatch {
                expected: self.split.dim,
                got: anchor.dim(),
            });
        }
        if self.split.block(side.other(), anchor).iter().any(|&v| v != 0.0) {
            return Err(Error::Precondition(format!(
                "anchor must lie in the {side:?} block"
            )));
        }
        Ok(())
    }

    fn linear_part(&self, grid: &LpGrid, anchor: &StateVector) -> Vec<StateVector> {
        let own = self.split.range(grid.side);
        grid.g
            .iter()
            .map(|g| {
                let mut v = StateVector::zeros(self.split.dim);
                for m in own.clone() {
                    v[m] = g[m].exp() * anchor[m];
                }
                v
            })
            .collect()
    }

    fn apply_on(&self, grid: &LpGrid, anchor: &StateVector, traj: &LpTrajectory) -> Result<LpTrajectory> {
        let n = grid.times.len();
        if traj.values.len() != n || traj.side != grid.side {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: traj.values.len(),
            });
        }
        let j = self.split.dim;
        let mut f = vec![vec![0.0; j]; n];
        for (k, (u, out)) in traj.values.iter().zip(f.iter_mut()).enumerate() {
            self.field.apply_at(grid.indices[k], &u.0, out);
        }
        let mut out = self.linear_part(grid, anchor);
        let half = 0.5 * grid.h;
        for m in 0..j {
            // modes integrated from the far end of the grid towards its own anchor time
            let forward = match (grid.side, self.split.side_of(m)) {
                (Side::Unstable, Side::Stable) => true,
                (Side::Unstable, Side::Unstable) => false,
                (Side::Stable, Side::Stable) => true,
                (Side::Stable, Side::Unstable) => false,
            };
            if forward {
                // S_{k+1} = e^{g_{k+1}−g_k}(S_k + h/2 F_k) + h/2 F_{k+1}
                let mut s = 0.0;
                for k in 0..n - 1 {
                    let e = (grid.g[k + 1][m] - grid.g[k][m]).exp();
                    s = e * (s + half * f[k][m]) + half * f[k + 1][m];
                    out[k + 1][m] += s;
                }
            } else {
                // V_k = e^{g_k−g_{k+1}}(V_{k+1} + h/2 F_{k+1}) + h/2 F_k, subtracted
                let mut v = 0.0;
                for k in (0..n - 1).rev() {
                    let e = (grid.g[k][m] - grid.g[k + 1][m]).exp();
                    v = e * (v + half * f[k + 1][m]) + half * f[k][m];
                    out[k][m] -= v;
                }
            }
        }
        let result = LpTrajectory::new(grid.side, grid.times.clone(), out, self.dich.gamma);
        if !result.weighted_norm.is_finite() {
            return Err(Error::NonFinite("weighted norm of LP iterate".into()));
        }
        Ok(result)
    }

    /// The linear flow of the anchor, the starting iterate.
    pub fn initial(&self, side: Side, anchor: &StateVector) -> Result<LpTrajectory> {
        self.check_anchor(side, anchor)?;
        let grid = self.grid(side)?;
        let values = self.linear_part(&grid, anchor);
        Ok(LpTrajectory::new(side, grid.times, values, self.dich.gamma))
    }

    /// One application of J^u (side = Unstable) or J^s (side = Stable).
    pub fn apply(&self, side: Side, anchor: &StateVector, traj: &LpTrajectory) -> Result<LpTrajectory> {
        self.check_anchor(side, anchor)?;
        let grid = self.grid(side)?;
        self.apply_on(&grid, anchor, traj)
    }

    /// Grid times of one side, for building test trajectories.
    pub fn times(&self, side: Side) -> Result<Vec<f64>> {
        Ok(self.grid(side)?.times)
    }

    pub fn gamma(&self) -> f64 {
        self.dich.gamma
    }

    pub fn dichotomy(&self) -> &DichotomyEstimate {
        &self.dich
    }

    pub fn config(&self) -> &LpConfig {
        &self.cfg
    }

    /// Iterates the operator from the linear flow until the weighted update is ≤ tol.
    pub fn solve(&self, side: Side, anchor: &StateVector) -> Result<GraphResult> {
        let radius = self.radius()?;
        if !radius.ok {
            return Err(Error::Precondition(format!(
                "radius condition fails: budget {} > 1/2",
                radius.budget
            )));
        }
        self.check_anchor(side, anchor)?;
        let limit = self.constants.rho / (4.0 * self.dich.k);
        if anchor.norm() > limit * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!(
                "anchor norm {} exceeds rho/(4K) = {limit}",
                anchor.norm()
            )));
        }
        let grid = self.grid(side)?;
        let mut traj = LpTrajectory::new(
            side,
            grid.times.clone(),
            self.linear_part(&grid, anchor),
            self.dich.gamma,
        );
        let mut prev: Option<f64> = None;
        let mut first_delta = 0.0;
        let mut contraction_est: f64 = 0.0;
        for it in 1..=self.cfg.max_iter {
            let next = self.apply_on(&grid, anchor, &traj)?;
            let delta = next.distance(&traj);
            if it == 1 {
                first_delta = delta;
            }
            let floor = 1e3 * f64::EPSILON * (1.0 + next.weighted_norm);
            if let Some(p) = prev {
                if p > floor {
                    contraction_est = contraction_est.max(delta / p);
                }
            }
            traj = next;
            if delta <= self.cfg.tol {
                let h = crate::spectral::project(self.split, side.other(), traj.at_zero())?;
                return Ok(GraphResult {
                    side,
                    anchor: anchor.clone(),
                    h,
                    trajectory: traj,
                    iterations: it,
                    first_delta,
                    last_delta: delta,
                    contraction_est,
                    tail_bound: self.tail_bound(side),
                });
            }
            prev = Some(delta);
        }
        Err(Error::NonConvergence {
            iterations: self.cfg.max_iter,
            last_delta: prev.unwrap_or(f64::NAN),
            contraction_est,
        })
    }

    /// Solves for many anchors; results keep the anchor order.
    pub fn solve_many(&self, side: Side, anchors: &[StateVector], exec: Exec) -> Vec<Result<GraphResult>> {
        exec.map(anchors, |a| self.solve(side, a))
    }
}

pub fn lp_apply_unstable(
    spec: &LinearCocycle,
    field: &CutoffField,
    split: &Splitting,
    dich: &DichotomyEstimate,
    cfg: &LpConfig,
    p: &StateVector,
    traj: &LpTrajectory,
) -> Result<LpTrajectory> {
    LpProblem::new(spec, field, split, dich, cfg)?.apply(Side::Unstable, p, traj)
}

pub fn lp_apply_stable(
    spec: &LinearCocycle,
    field: &CutoffField,
    split: &Splitting,
    dich: &DichotomyEstimate,
    cfg: &LpConfig,
    q: &StateVector,
    traj: &LpTrajectory,
) -> Result<LpTrajectory> {
    LpProblem::new(spec, field, split, dich, cfg)?.apply(Side::Stable, q, traj)
}

/// h^u(ω, p) by fixed-point iteration.
pub fn solve_graph_unstable(
    spec: &LinearCocycle,
    field: &CutoffField,
    split: &Splitting,
    dich: &DichotomyEstimate,
    cfg: &LpConfig,
    p: &StateVector,
) -> Result<GraphResult> {
    LpProblem::new(spec, field, split, dich, cfg)?.solve(Side::Unstable, p)
}

/// h^s(ω, q) by fixed-point iteration.
pub fn solve_graph_stable(
    spec: &LinearCocycle,
    field: &CutoffField,
    split: &Splitting,
    dich: &DichotomyEstimate,
    cfg: &LpConfig,
    q: &StateVector,
) -> Result<GraphResult> {
    LpProblem::new(spec, field, split, dich, cfg)?.solve(Side::Stable, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub side: Side,
    pub tau: f64,
    pub defect: f64,
    /// Anchor of the evolved point at θ_τω.
    pub evolved_anchor: StateVector,
    pub iterations: (usize, usize),
}

/// Invariance defect of the manifold on `side`: evolves x = a + h(ω, a) for
/// time τ with the mild integrator (step `dt`) and measures how far φ(τ,ω,x)
/// is from the graph at θ_τω.
///
/// `dich` must hold on both LP windows, at ω and at θ_τω.
#[allow(clippy::too_many_arguments)]
pub fn verify_invariance_side(
    spec: &LinearCocycle,
    field: &CutoffField,
    split: &Splitting,
    dich: &DichotomyEstimate,
    cfg: &LpConfig,
    side: Side,
    anchor: &StateVector,
    tau: f64,
    dt: f64,
) -> Result<InvarianceReport> {
    if !(tau > 0.0 && tau <= 5.0) {
        return Err(Error::param(format!("tau must lie in (0, 5], got {tau}")));
    }
    let here = LpProblem::new(spec, field, split, dich, cfg)?.solve(side, anchor)?;
    let x = &here.anchor + &here.h;
    let y = integrate_mild(spec, field, &x, tau, dt)?;
    let shifted = spec.shifted(tau)?;
    let next_anchor = crate::spectral::project(split, side, &y)?;
    let there = LpProblem::new(&shifted, field, split, dich, cfg)?
        .solve(side, &next_anchor)
        .map_err(|e| match e {
            Error::Precondition(m) => Error::Precondition(format!("evolved anchor at tau = {tau}: {m}")),
            e => e,
        })?;
    let off = crate::spectral::project(split, side.other(), &y)?;
    Ok(InvarianceReport {
        side,
        tau,
        defect: norm(&(&off - &there.h).0),
        evolved_anchor: next_anchor,
        iterations: (here.iterations, there.iterations),
    })
}

/// Invariance defect of the pseudo-unstable manifold.
#[allow(clippy::too_many_arguments)]
pub fn verify_invariance(
    spec: &LinearCocycle,
    field: &CutoffField,
    split: &Splitting,
    dich: &DichotomyEstimate,
    cfg: &LpConfig,
    p: &StateVector,
    tau: f64,
    dt: f64,
) -> Result<f64> {
    verify_invariance_side(spec, field, split, dich, cfg, Side::Unstable, p, tau, dt).map(|r| r.defect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{estimate_window_dichotomy, propagate_linear, CocycleParams};
    use crate::noise::NoiseSettings;
    use crate::nonlinear::NonlinearField;
    use crate::spectral::{make_splitting, shifted_dirichlet_laplacian};
    use std::sync::Arc;

    fn dich(alpha: f64, beta: f64, k: f64) -> DichotomyEstimate {
        DichotomyEstimate {
            alpha,
            beta,
            gamma: 0.5 * (alpha + beta),
            k,
            epsilon_hat: 0.1,
            horizon: 1.0,
        }
    }

    #[test]
    fn radius_examples() {
        let d = dich(1.0, -2.0, 1.0);
        let r = check_radius(&d, 1.0, 1.0, 0.3).unwrap();
        assert!(r.ok && (r.budget - 0.4).abs() < 1e-15);
        assert!((r.rho_max - 0.375).abs() < 1e-15);
        let r = check_radius(&d, 1.0, 1.0, 0.5).unwrap();
        assert!(!r.ok && (r.budget - 2.0 / 3.0).abs() < 1e-15);
        let r = check_radius(&d, 1.0, 0.5, 1e-12).unwrap();
        assert!(r.ok);
        assert!(matches!(
            check_radius(&dich(-2.0, 1.0, 1.0), 1.0, 1.0, 0.1),
            Err(Error::InvalidDichotomy { .. })
        ));
    }

    struct Setup {
        spec: LinearCocycle,
        split: Splitting,
        dich: DichotomyEstimate,
    }

    fn setup(d: Vec<f64>) -> Setup {
        let model = shifted_dirichlet_laplacian(4, 2.0).unwrap();
        let params = Arc::new(CocycleParams::new(model, vec![d], vec![1.0]).unwrap());
        let settings = NoiseSettings {
            nus: vec![1.0],
            dt: 0.01,
            t_min: -40.0,
            t_max: 40.0,
            burn_in: 10.0,
        };
        let spec = LinearCocycle::generate(params, 21, &settings).unwrap();
        let split = make_splitting(spec.model(), 0.0).unwrap();
        let dich = estimate_window_dichotomy(&spec, &split, 0.3, -25.0, 25.0).unwrap();
        Setup { spec, split, dich }
    }

    fn cfg() -> LpConfig {
        LpConfig {
            t_lp: 15.0,
            dt_lp: 0.05,
            ..LpConfig::default()
        }
    }

    #[test]
    fn zero_field_gives_linear_flow_and_zero_graphs() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let f = CutoffField::new(NonlinearField::zero(4), 1.0).unwrap();
        let p = StateVector(vec![0.1, 0.0, 0.0, 0.0]);
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        let r = prob.solve(Side::Unstable, &p).unwrap();
        assert_eq!(r.h.norm(), 0.0);
        assert_eq!(r.iterations, 1);
        for (t, v) in r.trajectory.times.iter().zip(&r.trajectory.values) {
            let l = propagate_linear(&s.spec, *t, &p).unwrap();
            assert!(dist(&v.0, &l.0) <= 1e-12 * l.norm());
        }
        let q = StateVector(vec![0.0, 0.05, -0.02, 0.01]);
        let r = prob.solve(Side::Stable, &q).unwrap();
        assert_eq!(r.h.norm(), 0.0);
    }

    #[test]
    fn origin_is_fixed() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, 0.02), 1.0).unwrap();
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        for side in [Side::Unstable, Side::Stable] {
            let r = prob.solve(side, &StateVector::zeros(4)).unwrap();
            assert_eq!(r.h.norm(), 0.0);
            assert!(r.trajectory.values.iter().all(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn nonlinear_graph_is_nontrivial_and_converges() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let c = 0.5 * s.dich.gap() / (40.0 * s.dich.k);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, c), 1.0).unwrap();
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        assert!(prob.radius().unwrap().ok);
        let p = StateVector(vec![0.9 / (4.0 * s.dich.k), 0.0, 0.0, 0.0]);
        let r = prob.solve(Side::Unstable, &p).unwrap();
        assert!(r.h.norm() > 1e-6);
        assert_eq!(r.h[0], 0.0);
        assert!(r.last_delta <= 1e-10);
        assert!(r.contraction_est <= 0.55);
        assert!(r.iterations <= r.iteration_budget(1e-10));
        let residual = prob.apply(Side::Unstable, &p, &r.trajectory).unwrap().distance(&r.trajectory);
        assert!(residual <= 2e-10);
    }

    fn random_traj(prob: &LpProblem, side: Side, seed: u64, scale: f64) -> LpTrajectory {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let times = prob.times(side).unwrap();
        let values = times
            .iter()
            .map(|t| {
                let w = (prob.gamma() * t).exp() * scale;
                StateVector((0..4).map(|_| w * rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        LpTrajectory::new(side, times, values, prob.gamma())
    }

    #[test]
    fn operators_contract() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let c = s.dich.gap() / (8.0 * 5.0 * s.dich.k);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, c), 1.0).unwrap();
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        assert!(prob.radius().unwrap().ok);
        for side in [Side::Unstable, Side::Stable] {
            let a = match side {
                Side::Unstable => StateVector(vec![0.05, 0.0, 0.0, 0.0]),
                Side::Stable => StateVector(vec![0.0, 0.05, 0.02, -0.01]),
            };
            for seed in 0..5 {
                let u = random_traj(&prob, side, seed, 0.5);
                let v = random_traj(&prob, side, seed + 100, 0.5);
                let ju = prob.apply(side, &a, &u).unwrap();
                let jv = prob.apply(side, &a, &v).unwrap();
                assert!(ju.distance(&jv) <= 0.5 * u.distance(&v), "{side:?} seed {seed}");
            }
        }
    }

    #[test]
    fn graphs_are_lipschitz() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let c = 0.5 * s.dich.gap() / (40.0 * s.dich.k);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, c), 1.0).unwrap();
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        let lim = 1.0 / (4.0 * s.dich.k);
        let ps: Vec<StateVector> = [-0.9, -0.3, 0.2, 0.7]
            .iter()
            .map(|x| StateVector(vec![x * lim, 0.0, 0.0, 0.0]))
            .collect();
        let rs: Vec<GraphResult> = prob
            .solve_many(Side::Unstable, &ps, Exec::default())
            .into_iter()
            .collect::<Result<_>>()
            .unwrap();
        for a in &rs {
            for b in &rs {
                let dh = a.h.distance_to(&b.h);
                let dp = a.anchor.distance_to(&b.anchor);
                assert!(dh <= 2.0 * s.dich.k * dp + 1e-12);
            }
        }
    }

    #[test]
    fn invariance_defect_is_small() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let c = 0.5 * s.dich.gap() / (40.0 * s.dich.k);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, c), 1.0).unwrap();
        let cfg = LpConfig {
            t_lp: 15.0,
            dt_lp: 0.01,
            ..LpConfig::default()
        };
        let p = StateVector(vec![0.5 / (4.0 * s.dich.k), 0.0, 0.0, 0.0]);
        let r = verify_invariance_side(&s.spec, &f, &s.split, &s.dich, &cfg, Side::Unstable, &p, 0.5, 0.01)
            .unwrap();
        let h = solve_graph_unstable(&s.spec, &f, &s.split, &s.dich, &cfg, &p).unwrap();
        assert!(r.defect < 0.05 * h.h.norm(), "defect {} vs |h| {}", r.defect, h.h.norm());
    }

    #[test]
    fn preconditions() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, 5.0), 1.0).unwrap();
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        let p = StateVector(vec![0.01, 0.0, 0.0, 0.0]);
        assert!(matches!(prob.solve(Side::Unstable, &p), Err(Error::Precondition(_))));

        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, 1e-3), 1.0).unwrap();
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &cfg()).unwrap();
        let mixed = StateVector(vec![0.01, 0.01, 0.0, 0.0]);
        assert!(matches!(prob.solve(Side::Unstable, &mixed), Err(Error::Precondition(_))));
        let big = StateVector(vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(prob.solve(Side::Unstable, &big), Err(Error::Precondition(_))));

        let short = LpConfig { t_lp: 1.0, ..cfg() };
        assert!(LpProblem::new(&s.spec, &f, &s.split, &s.dich, &short).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let s = setup(vec![0.3, -0.2, 0.1, 0.4]);
        let c = 0.5 * s.dich.gap() / (40.0 * s.dich.k);
        let f = CutoffField::new(NonlinearField::lipschitz_mixed(4, c), 1.0).unwrap();
        let tight = LpConfig {
            max_iter: 1,
            tol: 1e-300,
            ..cfg()
        };
        let prob = LpProblem::new(&s.spec, &f, &s.split, &s.dich, &tight).unwrap();
        let p = StateVector(vec![0.01, 0.0, 0.0, 0.0]);
        assert!(matches!(
            prob.solve(Side::Unstable, &p),
            Err(Error::NonConvergence { iterations: 1, .. })
        ));
    }
}
