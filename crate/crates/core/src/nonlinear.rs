//! Nonlinear fields F(u) with F(0) = 0, the smooth cut-off F_ρ and the
//! exponential-Euler integrator for the mild solution of
//! du/dt + A(θ_tω)u = F(θ_tω, u).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::LinearCocycle;
use crate::noise::grid_steps;
use crate::spectral::StateVector;
use crate::stats::{dist, norm};

/// A time-independent map u ↦ F(u) on the truncated space.
pub trait Nonlinearity: Sync {
    fn apply_into(&self, u: &[f64], out: &mut [f64]);

    fn apply(&self, u: &StateVector) -> StateVector {
        let mut out = StateVector::zeros(u.dim());
        self.apply_into(&u.0, &mut out.0);
        out
    }
}

/// A nonlinearity that may depend on the sample point along the orbit,
/// evaluated at an absolute grid index of the noise realization.
pub trait RandomField: Sync {
    fn apply_at(&self, index: usize, u: &[f64], out: &mut [f64]);
}

impl<T: Nonlinearity> RandomField for T {
    fn apply_at(&self, _index: usize, u: &[f64], out: &mut [f64]) {
        self.apply_into(u, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Zero,
    /// F(u)_m = c·tanh(u_m).
    LipschitzComponentwise,
    /// F(u) = c·tanh(Q u) componentwise, Q the orthonormal DCT-II matrix.
    LipschitzMixed,
    /// F(u) = c·‖u‖^ε·u.
    HoelderRadial,
}

impl FieldKind {
    pub fn is_lipschitz(self) -> bool {
        matches!(self, FieldKind::LipschitzComponentwise | FieldKind::LipschitzMixed)
    }
}

/// Orthonormal DCT-II matrix, row-major.
fn dct_matrix(dim: usize) -> Vec<f64> {
    let n = dim as f64;
    let mut q = vec![0.0; dim * dim];
    for k in 0..dim {
        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for j in 0..dim {
            q[k * dim + j] = s * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n).cos();
        }
    }
    q
}

/// A nonlinearity satisfying ‖F(u) − F(v)‖ ≤ B̃_1(‖u‖^ε + ‖v‖^ε)‖u − v‖.
///
/// The Lipschitz kinds use ε = 0 (with 0⁰ = 1), for which B̃_1 = L_f/2.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearField {
    kind: FieldKind,
    c: f64,
    eps: f64,
    b1_tilde: f64,
    dim: usize,
    mixing: Vec<f64>,
}

impl NonlinearField {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: FieldKind::Zero,
            c: 0.0,
            eps: 1.0,
            b1_tilde: 0.0,
            dim,
            mixing: Vec::new(),
        }
    }

    pub fn lipschitz_componentwise(dim: usize, c: f64) -> Self {
        Self {
            kind: FieldKind::LipschitzComponentwise,
            c,
            eps: 0.0,
            b1_tilde: 0.5 * c.abs(),
            dim,
            mixing: Vec::new(),
        }
    }

    pub fn lipschitz_mixed(dim: usize, c: f64) -> Self {
        Self {
            kind: FieldKind::LipschitzMixed,
            c,
            eps: 0.0,
            b1_tilde: 0.5 * c.abs(),
            dim,
            mixing: dct_matrix(dim),
        }
    }

    /// Radial Hölder field with an explicitly certified constant B̃_1.
    pub fn hoelder_radial(dim: usize, c: f64, eps: f64, b1_tilde: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::param(format!("eps must lie in (0, 1], got {eps}")));
        }
        if !(b1_tilde >= 0.0) {
            return Err(Error::param("b1_tilde must be non-negative"));
        }
        Ok(Self {
            kind: FieldKind::HoelderRadial,
            c,
            eps,
            b1_tilde,
            dim,
            mixing: Vec::new(),
        })
    }

    /// Radial Hölder field whose B̃_1 is certified by [`estimate_b1_tilde`].
    pub fn hoelder_radial_estimated(dim: usize, c: f64, eps: f64, samples: usize, seed: u64) -> Result<Self> {
        let mut f = Self::hoelder_radial(dim, c, eps, 0.0)?;
        // the constant is scale-invariant, so the ball radius is immaterial
        f.b1_tilde = estimate_b1_tilde(&f, 1.0, samples, seed)?;
        Ok(f)
    }

    pub fn from_kind(kind: FieldKind, dim: usize, c: f64, eps: f64) -> Result<Self> {
        match kind {
            FieldKind::Zero => Ok(Self::zero(dim)),
            FieldKind::LipschitzComponentwise => Ok(Self::lipschitz_componentwise(dim, c)),
            FieldKind::LipschitzMixed => Ok(Self::lipschitz_mixed(dim, c)),
            FieldKind::HoelderRadial => Self::hoelder_radial_estimated(dim, c, eps, 20_000, 0),
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Hölder exponent ε (0 for the Lipschitz kinds).
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn b1_tilde(&self) -> f64 {
        self.b1_tilde
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Global Lipschitz constant L_f of the Lipschitz kinds.
    pub fn lipschitz(&self) -> Option<f64> {
        match self.kind {
            FieldKind::Zero => Some(0.0),
            FieldKind::LipschitzComponentwise | FieldKind::LipschitzMixed => Some(self.c.abs()),
            FieldKind::HoelderRadial => None,
        }
    }
}

impl Nonlinearity for NonlinearField {
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        match self.kind {
            FieldKind::Zero => out.fill(0.0),
            FieldKind::LipschitzComponentwise => {
                for (o, x) in out.iter_mut().zip(u) {
                    *o = self.c * x.tanh();
                }
            }
            FieldKind::LipschitzMixed => {
                let n = self.dim;
                for (k, o) in out.iter_mut().enumerate() {
                    let row = &self.mixing[k * n..(k + 1) * n];
                    let s: f64 = row.iter().zip(u).map(|(q, x)| q * x).sum();
                    *o = self.c * s.tanh();
                }
            }
            FieldKind::HoelderRadial => {
                let r = norm(u);
                let s = if r > 0.0 { self.c * r.powf(self.eps) } else { 0.0 };
                for (o, x) in out.iter_mut().zip(u) {
                    *o = s * x;
                }
            }
        }
    }
}

/// Smooth cut-off σ: 1 on |s| ≤ 1, 0 on |s| ≥ 2, quintic smoothstep between.
pub fn cutoff_sigma(s: f64) -> f64 {
    let a = s.abs();
    if a <= 1.0 {
        1.0
    } else if a >= 2.0 {
        0.0
    } else {
        let r = a - 1.0;
        1.0 - r * r * r * (10.0 - 15.0 * r + 6.0 * r * r)
    }
}

/// σ'(s); its maximum modulus is 15/8, attained at |s| = 3/2.
pub fn cutoff_sigma_derivative(s: f64) -> f64 {
    let a = s.abs();
    if a <= 1.0 || a >= 2.0 {
        0.0
    } else {
        let r = a - 1.0;
        -30.0 * r * r * (1.0 - r) * (1.0 - r) * s.signum()
    }
}

/// F_ρ(u) = σ(‖u‖/ρ)·F(u) with its global constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffField {
    base: NonlinearField,
    rho: f64,
    b1: f64,
    b0: f64,
}

impl CutoffField {
    pub fn new(base: NonlinearField, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::param(format!("rho must be positive, got {rho}")));
        }
        let bt = base.b1_tilde;
        let (b1, b0) = match base.kind {
            FieldKind::Zero => (0.0, 0.0),
            // ε = 0: 2B̃_1 from the difference term, 8B̃_1 from σ' ≤ 2 against ‖F(v)‖ ≤ 2B̃_1‖v‖
            FieldKind::LipschitzComponentwise | FieldKind::LipschitzMixed => {
                (10.0 * bt, 2.0 * bt * 2.0 * rho)
            }
            FieldKind::HoelderRadial => {
                let e = base.eps;
                (6.0 * 2f64.powf(e) * bt, bt * (2.0 * rho).powf(1.0 + e))
            }
        };
        Ok(Self { base, rho, b1, b0 })
    }

    pub fn base(&self) -> &NonlinearField {
        &self.base
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn eps(&self) -> f64 {
        self.base.eps
    }

    /// B_1 in ‖F_ρ(u) − F_ρ(v)‖ ≤ B_1 ρ^ε ‖u − v‖.
    pub fn b1(&self) -> f64 {
        self.b1
    }

    /// B_0 ≥ sup ‖F_ρ‖.
    pub fn b0(&self) -> f64 {
        self.b0
    }

    /// The global Lipschitz constant B_1 ρ^ε of F_ρ.
    pub fn lipschitz(&self) -> f64 {
        self.b1 * self.rho.powf(self.base.eps)
    }
}

impl Nonlinearity for CutoffField {
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let s = cutoff_sigma(norm(u) / self.rho);
        if s == 0.0 {
            out.fill(0.0);
            return;
        }
        self.base.apply_into(u, out);
        if s != 1.0 {
            out.iter_mut().for_each(|o| *o *= s);
        }
    }
}

pub fn apply_cutoff(field: &CutoffField, u: &StateVector) -> StateVector {
    field.apply(u)
}

fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    v.iter_mut().for_each(|x| *x *= r / n);
    v
}

/// Running supremum of ‖F(u) − F(v)‖ / ((‖u‖^ε + ‖v‖^ε)‖u − v‖) over pairs in
/// the 2ρ-ball. Odd-numbered pairs are radially aligned (v = s·u), where the
/// supremum of homogeneous fields tends to be attained.
pub fn estimate_b1_tilde(field: &NonlinearField, rho: f64, samples: usize, seed: u64) -> Result<f64> {
    if samples < 100 {
        return Err(Error::param(format!("need at least 100 samples, got {samples}")));
    }
    let dim = field.dim;
    let eps = field.eps;
    let pow = |x: f64| if eps == 0.0 { 1.0 } else { x.powf(eps) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fu, mut fv) = (vec![0.0; dim], vec![0.0; dim]);
    let mut best: f64 = 0.0;
    let mut used = 0usize;
    for k in 0..samples {
        let u = sample_ball(&mut rng, dim, 2.0 * rho);
        let v = if k % 2 == 1 {
            let s: f64 = rng.random_range(-1.0..1.0);
            u.iter().map(|x| s * x).collect()
        } else {
            sample_ball(&mut rng, dim, 2.0 * rho)
        };
        let d = dist(&u, &v);
        let weight = pow(norm(&u)) + pow(norm(&v));
        if d == 0.0 || weight == 0.0 {
            continue;
        }
        used += 1;
        field.apply_into(&u, &mut fu);
        field.apply_into(&v, &mut fv);
        best = best.max(dist(&fu, &fv) / (weight * d));
    }
    if used == 0 {
        return Err(Error::Domain("degenerate sampling: all pairs coincide".into()));
    }
    Ok(best)
}

fn check_state(spec: &LinearCocycle, x: &StateVector) -> Result<()> {
    if x.dim() != spec.modes() {
        return Err(Error::DimensionMismatch {
            expected: spec.modes(),
            got: x.dim(),
        });
    }
    Ok(())
}

/// Exponential-Euler steps `u_{n+1} = U(h, θ_{t_n}ω)(u_n + h·F(θ_{t_n}ω, u_n))`.
///
/// `t` and `dt` must be multiples of the noise grid step; when `dt` does not
/// divide `t` the last step is shortened. Calls `visit` after every step.
fn mild_steps(
    spec: &LinearCocycle,
    field: &dyn RandomField,
    x: &StateVector,
    t: f64,
    dt: f64,
    mut visit: impl FnMut(f64, &[f64]),
) -> Result<StateVector> {
    check_state(spec, x)?;
    if !(t >= 0.0) {
        return Err(Error::param("mild solutions run forward in time"));
    }
    let step = grid_steps(dt, spec.dt())?;
    if step < 1 {
        return Err(Error::param(format!("dt = {dt} is below the noise grid step")));
    }
    let step = step as usize;
    let start = spec.index(0.0)?;
    let end = spec.index(t)?;
    let j = spec.modes();
    let mut u = x.0.clone();
    let mut f = vec![0.0; j];
    let mut i = start;
    while i < end {
        let next = (i + step).min(end);
        let h = (next - i) as f64 * spec.dt();
        field.apply_at(i, &u, &mut f);
        for (m, (um, fm)) in u.iter_mut().zip(&f).enumerate() {
            *um = spec.log_growth_between(m, i, next).exp() * (*um + h * fm);
        }
        i = next;
        visit(spec.time_of(i), &u);
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mild solution blew up".into()));
    }
    Ok(StateVector(u))
}

/// φ(t, ω, x) for the nonlinear cocycle generated by `field`.
pub fn integrate_mild(
    spec: &LinearCocycle,
    field: &dyn RandomField,
    x: &StateVector,
    t: f64,
    dt: f64,
) -> Result<StateVector> {
    mild_steps(spec, field, x, t, dt, |_, _| {})
}

/// Like [`integrate_mild`] but returns `(t, u(t))` after every step, starting at t = 0.
pub fn integrate_mild_trajectory(
    spec: &LinearCocycle,
    field: &dyn RandomField,
    x: &StateVector,
    t: f64,
    dt: f64,
) -> Result<Vec<(f64, StateVector)>> {
    let mut traj = vec![(0.0, x.clone())];
    mild_steps(spec, field, x, t, dt, |s, u| traj.push((s, StateVector(u.to_vec()))))?;
    Ok(traj)
}
