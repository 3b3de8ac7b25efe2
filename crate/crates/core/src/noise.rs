//! The noise model: seeded two-sided Wiener paths on a uniform grid, the
//! Wiener shift θ_t, and stationary Ornstein–Uhlenbeck processes
//! z*(θ_tω) driven by the same path.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{fmt17, ls_slope, log_plus};

/// Relative tolerance used when snapping a time onto the grid.
const ALIGN_TOL: f64 = 1e-7;

// Per-component generator streams: right half, left half, OU initial value.
const STREAMS_PER_COMPONENT: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A two-sided, multi-component Wiener path pinned to zero at time zero.
///
/// Values live on the uniform grid `t_i = (i - origin) * dt`. Between nodes
/// the path is understood as the linear interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerGrid {
    dt: f64,
    origin: usize,
    len: usize,
    seed: u64,
    values: Vec<Vec<f64>>,
}

impl WienerGrid {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn components(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Grid index of time zero.
    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn t_min(&self) -> f64 {
        self.time(0)
    }

    pub fn t_max(&self) -> f64 {
        self.time(self.len - 1)
    }

    pub fn time(&self, index: usize) -> f64 {
        (index as f64 - self.origin as f64) * self.dt
    }

    pub fn values(&self, component: usize) -> &[f64] {
        &self.values[component]
    }

    /// Grid index of time `t`; errors if `t` is off-grid or outside the window.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let steps = grid_steps(t, self.dt)?;
        let idx = self.origin as i64 + steps;
        if idx < 0 || idx >= self.len as i64 {
            return Err(Error::Range {
                time: t,
                min: self.t_min(),
                max: self.t_max(),
            });
        }
        Ok(idx as usize)
    }

    /// Path value of `component` at grid time `t`.
    pub fn value_at(&self, component: usize, t: f64) -> Result<f64> {
        Ok(self.values[component][self.index_of(t)?])
    }

    /// Increment w(b) − w(a) over grid times.
    pub fn increment(&self, component: usize, a: f64, b: f64) -> Result<f64> {
        let v = &self.values[component];
        Ok(v[self.index_of(b)?] - v[self.index_of(a)?])
    }
}

/// Number of whole steps of size `dt` in `t`, or an alignment error.
pub(crate) fn grid_steps(t: f64, dt: f64) -> Result<i64> {
    let k = t / dt;
    let r = k.round();
    if (k - r).abs() > ALIGN_TOL * r.abs().max(1.0) {
        return Err(Error::Alignment { time: t, dt });
    }
    Ok(r as i64)
}

/// Samples a two-sided Wiener path with `components` independent scalar
/// components on `[t_min, t_max]` with step `dt`.
///
/// The right half and the left half of every component come from separate
/// generator streams, so widening either side of the window leaves the
/// other side bit-identical.
pub fn sample_wiener(
    seed: u64,
    components: usize,
    t_min: f64,
    t_max: f64,
    dt: f64,
) -> Result<WienerGrid> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param(format!("dt must be positive, got {dt}")));
    }
    if !(t_min <= 0.0) || !(t_max >= 0.0) {
        return Err(Error::param(format!(
            "window must contain 0, got [{t_min}, {t_max}]"
        )));
    }
    if components == 0 {
        return Err(Error::param("at least one noise component is required"));
    }
    let n_left = (-t_min / dt).round() as usize;
    let n_right = (t_max / dt).round() as usize;
    let len = n_left + n_right + 1;
    let sd = dt.sqrt();

    let values = (0..components as u64)
        .map(|c| {
            let mut v = vec![0.0; len];
            let mut right = stream_rng(seed, STREAMS_PER_COMPONENT * c);
            for j in 1..=n_right {
                let g: f64 = right.sample(StandardNormal);
                v[n_left + j] = v[n_left + j - 1] + sd * g;
            }
            let mut left = stream_rng(seed, STREAMS_PER_COMPONENT * c + 1);
            for j in 1..=n_left {
                let g: f64 = left.sample(StandardNormal);
                v[n_left - j] = v[n_left - j + 1] + sd * g;
            }
            v
        })
        .collect();

    Ok(WienerGrid {
        dt,
        origin: n_left,
        len,
        seed,
        values,
    })
}

/// The Wiener shift: `shift(ω, t)(s) = ω(s + t) − ω(t)`.
///
/// The result reuses the same nodes, so composing shifts never resamples.
pub fn shift(path: &WienerGrid, t: f64) -> Result<WienerGrid> {
    let j = path.index_of(t)?;
    let values = path
        .values
        .iter()
        .map(|v| {
            let base = v[j];
            v.iter().map(|x| x - base).collect()
        })
        .collect();
    Ok(WienerGrid {
        dt: path.dt,
        origin: j,
        len: path.len,
        seed: path.seed,
        values,
    })
}

/// Stationary Ornstein–Uhlenbeck path z*(θ_tω) for one Wiener component,
/// solving dz = −νz dt + dw on the grid of the driving path.
#[derive(Debug, Clone, PartialEq)]
pub struct OuPath {
    nu: f64,
    component: usize,
    burn_in: f64,
    dt: f64,
    origin: usize,
    valid_from: usize,
    values: Vec<f64>,
    // cumulative trapezoidal integral of z from the first grid node
    integral: Vec<f64>,
}

impl OuPath {
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn component(&self) -> usize {
        self.component
    }

    pub fn burn_in(&self) -> f64 {
        self.burn_in
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// First grid index at which the path is considered stationary.
    pub fn valid_from(&self) -> usize {
        self.valid_from
    }

    /// Earliest time at which z* may be evaluated.
    pub fn t_valid(&self) -> f64 {
        (self.valid_from as f64 - self.origin as f64) * self.dt
    }

    /// z at a grid index.
    #[inline]
    pub fn z(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Trapezoidal ∫ z over the grid interval between two indices.
    #[inline]
    pub fn integral_between(&self, from: usize, to: usize) -> f64 {
        self.integral[to] - self.integral[from]
    }

    /// Trapezoidal ∫ |z| over one grid cell starting at `index`.
    #[inline]
    pub fn abs_cell_integral(&self, index: usize) -> f64 {
        0.5 * self.dt * (self.values[index].abs() + self.values[index + 1].abs())
    }

    /// Largest integrated-SDE residual
    /// |z(t) − z(s) + ν∫_s^t z dτ − (w(t) − w(s))| over all valid grid pairs.
    pub fn max_integrated_residual(&self, path: &WienerGrid) -> f64 {
        let w = path.values(self.component);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in self.valid_from..self.values.len() {
            let r = self.values[i] + self.nu * self.integral[i] - w[i];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        hi - lo
    }
}

/// Builds the stationary OU process for `component` of `path`.
///
/// The recursion starts at the left end of the window from a draw of the
/// stationary law N(0, 1/(2ν)) and advances with the trapezoidal update
/// `z_{n+1}(1 + νdt/2) = z_n(1 − νdt/2) + Δw_n`, whose stationary variance is
/// exactly 1/(2ν). The path is trusted from `t_min + burn_in` onwards.
pub fn ou_stationary(path: &WienerGrid, component: usize, nu: f64, burn_in: f64) -> Result<OuPath> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::param(format!("nu must be positive, got {nu}")));
    }
    if component >= path.components() {
        return Err(Error::DimensionMismatch {
            expected: path.components(),
            got: component + 1,
        });
    }
    if !(burn_in >= 5.0 / nu) {
        return Err(Error::param(format!(
            "burn_in = {burn_in} must be at least 5/nu = {}",
            5.0 / nu
        )));
    }
    if burn_in > -path.t_min() + 1e-12 {
        return Err(Error::Range {
            time: -burn_in,
            min: path.t_min(),
            max: path.t_max(),
        });
    }
    let dt = path.dt;
    let w = path.values(component);
    let n = path.len;

    let mut init = stream_rng(path.seed, STREAMS_PER_COMPONENT * component as u64 + 2);
    let g: f64 = init.sample(StandardNormal);
    let mut values = vec![0.0; n];
    values[0] = g * (0.5 / nu).sqrt();
    let a = 1.0 - 0.5 * nu * dt;
    let b = 1.0 + 0.5 * nu * dt;
    for i in 0..n - 1 {
        values[i + 1] = (a * values[i] + (w[i + 1] - w[i])) / b;
    }

    let mut integral = vec![0.0; n];
    for i in 0..n - 1 {
        integral[i + 1] = integral[i] + 0.5 * dt * (values[i] + values[i + 1]);
    }

    let valid_from = ((burn_in / dt) - ALIGN_TOL).ceil() as usize;
    Ok(OuPath {
        nu,
        component,
        burn_in,
        dt,
        origin: path.origin,
        valid_from,
        values,
        integral,
    })
}

/// Settings needed to regenerate a noise realization from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    pub nus: Vec<f64>,
    pub dt: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub burn_in: f64,
}

/// One sample point ω: the Wiener path together with its OU processes.
#[derive(Debug, Clone)]
pub struct NoiseRealization {
    wiener: WienerGrid,
    ou: Vec<OuPath>,
}

impl NoiseRealization {
    pub fn generate(seed: u64, settings: &NoiseSettings) -> Result<Self> {
        let wiener = sample_wiener(
            seed,
            settings.nus.len(),
            settings.t_min,
            settings.t_max,
            settings.dt,
        )?;
        Self::from_wiener(wiener, &settings.nus, settings.burn_in)
    }

    pub fn from_wiener(wiener: WienerGrid, nus: &[f64], burn_in: f64) -> Result<Self> {
        if nus.len() != wiener.components() {
            return Err(Error::DimensionMismatch {
                expected: wiener.components(),
                got: nus.len(),
            });
        }
        let ou = nus
            .iter()
            .enumerate()
            .map(|(i, &nu)| ou_stationary(&wiener, i, nu, burn_in))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { wiener, ou })
    }

    pub fn wiener(&self) -> &WienerGrid {
        &self.wiener
    }

    pub fn ou(&self) -> &[OuPath] {
        &self.ou
    }

    pub fn components(&self) -> usize {
        self.ou.len()
    }

    pub fn dt(&self) -> f64 {
        self.wiener.dt
    }

    /// Earliest time at which every OU component is stationary.
    pub fn t_valid_min(&self) -> f64 {
        self.ou
            .iter()
            .map(OuPath::t_valid)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn t_max(&self) -> f64 {
        self.wiener.t_max()
    }

    /// Grid index of `t`, restricted to the stationary part of the window.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let idx = self.wiener.index_of(t)?;
        let first = self.ou.iter().map(OuPath::valid_from).max().unwrap_or(0);
        if idx < first {
            return Err(Error::Range {
                time: t,
                min: self.t_valid_min(),
                max: self.t_max(),
            });
        }
        Ok(idx)
    }

    pub fn time(&self, index: usize) -> f64 {
        self.wiener.time(index)
    }

    /// Writes `t, w_1..w_N, z_1..z_N` for every stationary grid time.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.components();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("w_{i}")));
        header.extend((1..=n).map(|i| format!("z_{i}")));
        writeln!(out, "{}", header.join(","))?;
        let first = self.ou.iter().map(OuPath::valid_from).max().unwrap_or(0);
        for i in first..self.wiener.len {
            let mut row = vec![fmt17(self.time(i))];
            row.extend((0..n).map(|c| fmt17(self.wiener.values[c][i])));
            row.extend(self.ou.iter().map(|z| fmt17(z.values[i])));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Least-squares slope of log⁺X(θ_tω) against t.
///
/// For a tempered random variable the slope tends to zero as the horizon grows.
pub fn temperedness_slope(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::param(format!(
            "temperedness needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::param("sample times must be strictly increasing"));
    }
    if let Some(&(t, x)) = samples.iter().find(|(_, x)| !(*x > 0.0)) {
        return Err(Error::Domain(format!("X({t}) = {x} is not positive")));
    }
    let ts: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ls: Vec<f64> = samples.iter().map(|s| log_plus(s.1)).collect();
    Ok(ls_slope(&ts, &ls))
}
