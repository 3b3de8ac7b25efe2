//! Run configuration and experiment orchestration behind the `rim` binary.
//!
//! A run is a pure function of (command, resolved config): every default is
//! filled in before any numerics start, echoed to `run.json`, and all floats
//! are written with 17 significant digits.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{
    default_epsilon_hat, dichotomy_constants_along_orbit, estimate_dichotomy, estimate_lyapunov,
    estimate_window_dichotomy, propagate_linear, CocycleParams, DichotomyEstimate, LinearCocycle,
};
use crate::noise::{grid_steps, temperedness_slope, NoiseSettings};
use crate::nonlinear::{CutoffField, FieldKind, NonlinearField};
use crate::par::Exec;
use crate::perron::{verify_invariance_side, GraphResult, LpConfig, LpProblem, RadiusCheck};
use crate::spectral::{make_splitting, shifted_dirichlet_laplacian, Side, SpectralModel, Splitting, StateVector};
use crate::stats::fmt17;
use crate::transform::{conjugate_flow_trajectory, integrate_stratonovich_trajectory, strong_error_check, SpdeModel};

pub const TOOL: &str = "rim";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SimulateLinear,
    Lyapunov,
    Dichotomy,
    Manifold,
    Validate,
    SpdeCompare,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::SimulateLinear,
        Command::Lyapunov,
        Command::Dichotomy,
        Command::Manifold,
        Command::Validate,
        Command::SpdeCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateLinear => "simulate-linear",
            Command::Lyapunov => "lyapunov",
            Command::Dichotomy => "dichotomy",
            Command::Manifold => "manifold",
            Command::Validate => "validate",
            Command::SpdeCompare => "spde-compare",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("command", format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    /// Number of modes J for the shifted Laplacian μ_j = shift − j².
    pub modes: Option<usize>,
    pub shift: Option<f64>,
    /// Explicit eigenvalues of −A; takes precedence over modes/shift.
    pub mu: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub nus: Vec<f64>,
    /// Diagonal of D_i, one row per noise component.
    #[serde(default)]
    pub d: Vec<Vec<f64>>,
    pub dt: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub burn_in: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplittingConfig {
    #[serde(default)]
    pub lambda: f64,
    pub epsilon_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: FieldKind,
    pub c: f64,
    pub eps: f64,
    pub rho: f64,
    /// Hölder constant of the radial kind; estimated when absent.
    pub b1_tilde: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            kind: FieldKind::Zero,
            c: 0.0,
            eps: 0.0,
            rho: 1.0,
            b1_tilde: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub t: Option<f64>,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DichotomyConfig {
    pub horizon: Option<f64>,
    pub dt_probe: Option<f64>,
    /// K(θ_tω) is sampled on [0, temper_span] for the temperedness slope.
    pub temper_span: Option<f64>,
    pub temper_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub side: Option<Side>,
    /// Anchors per coordinate axis of the anchor block.
    pub anchors: Option<usize>,
    /// Fraction of the admissible anchor radius ρ/(4K).
    pub anchor_scale: Option<f64>,
    /// Explicit anchors in block coordinates; replaces the generated ones.
    pub points: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub taus: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub anchors: Option<usize>,
    pub anchor_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeCompareConfig {
    pub t: Option<f64>,
    pub dt_levels: Option<Vec<f64>>,
    pub seeds: Option<usize>,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub splitting: SplittingConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub lp: LpConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub lyapunov: LyapunovConfig,
    #[serde(default)]
    pub dichotomy: DichotomyConfig,
    #[serde(default)]
    pub manifold: ManifoldConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub spde_compare: SpdeCompareConfig,
}

/// The `run.json` echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub config: RunConfig,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::config(path, msg)
}

fn positive(path: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(cfg_err(path, format!("must be positive and finite, got {v}")))
    }
}

fn aligned(path: &str, v: f64, dt: f64) -> Result<()> {
    grid_steps(v, dt)
        .map(|_| ())
        .map_err(|_| cfg_err(path, format!("{v} is not a multiple of noise.dt = {dt}")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| cfg_err("<toml>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(&path, e.into_inner().message().to_string())
        })
    }

    /// Reads a TOML config, or the `config` member of a `run.json` echo.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| cfg_err("<file>", format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let de = &mut serde_json::Deserializer::from_str(&text);
            let rec: RunRecord = serde_path_to_error::deserialize(de).map_err(|e| {
                let path = e.path().to_string();
                cfg_err(&path, e.into_inner().to_string())
            })?;
            Ok(rec.config)
        } else {
            Self::from_toml_str(&text)
        }
    }

    fn mu(&self) -> Result<Vec<f64>> {
        let s = &self.spectral;
        match (&s.mu, s.modes, s.shift) {
            (Some(mu), _, _) => SpectralModel::new(mu.clone())
                .map(|m| m.mu().to_vec())
                .map_err(|e| cfg_err("spectral.mu", e.to_string())),
            (None, Some(j), shift) => shifted_dirichlet_laplacian(j, shift.unwrap_or(0.0))
                .map(|m| m.mu().to_vec())
                .map_err(|e| cfg_err("spectral.modes", e.to_string())),
            (None, None, _) => Err(cfg_err("spectral", "give either `mu` or `modes`")),
        }
    }

    /// Fills every default for `command` and validates the result.
    ///
    /// Resolution is idempotent, so a resolved config re-resolves to itself.
    pub fn resolve(&self, command: Command) -> Result<RunConfig> {
        let mut c = self.clone();
        let mu = c.mu()?;
        let j = mu.len();
        if c.spectral.mu.is_none() {
            c.spectral.mu = Some(mu.clone());
        }
        c.spectral.modes = Some(j);
        if c.spectral.shift.is_none() {
            c.spectral.shift = Some(0.0);
        }

        // noise operators
        if c.noise.nus.is_empty() {
            c.noise.nus = vec![1.0];
        }
        let n = c.noise.nus.len();
        for (i, nu) in c.noise.nus.iter().enumerate() {
            positive(&format!("noise.nus[{i}]"), *nu)?;
        }
        if c.noise.d.is_empty() {
            c.noise.d = vec![vec![0.0; j]; n];
        }
        if c.noise.d.len() != n {
            return Err(cfg_err(
                "noise.d",
                format!("expected {n} rows (one per nu), got {}", c.noise.d.len()),
            ));
        }
        for (i, row) in c.noise.d.iter().enumerate() {
            if row.len() != j {
                return Err(cfg_err(&format!("noise.d[{i}]"), format!("expected {j} entries, got {}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(cfg_err(&format!("noise.d[{i}]"), "entries must be finite"));
            }
        }
        let nu_min = c.noise.nus.iter().copied().fold(f64::INFINITY, f64::min);
        let burn_in = *c.noise.burn_in.get_or_insert((5.0 / nu_min).max(10.0));
        positive("noise.burn_in", burn_in)?;
        if burn_in < 5.0 / nu_min {
            return Err(cfg_err("noise.burn_in", format!("must be at least 5/nu = {}", 5.0 / nu_min)));
        }

        // splitting and field
        let model = SpectralModel::new(mu).map_err(|e| cfg_err("spectral.mu", e.to_string()))?;
        let split = make_splitting(&model, c.splitting.lambda).map_err(|e| cfg_err("splitting.lambda", e.to_string()))?;
        if c.splitting.epsilon_hat.is_none() {
            let eps = default_epsilon_hat(&split).map_err(|e| cfg_err("splitting", e.to_string()))?;
            c.splitting.epsilon_hat = Some(eps);
        }
        positive("splitting.epsilon_hat", c.splitting.epsilon_hat.unwrap())?;
        let f = &mut c.field;
        if !(f.c >= 0.0 && f.c.is_finite()) {
            return Err(cfg_err("field.c", "must be non-negative"));
        }
        positive("field.rho", f.rho)?;
        match f.kind {
            FieldKind::HoelderRadial => {
                if !(f.eps > 0.0 && f.eps <= 1.0) {
                    return Err(cfg_err("field.eps", "must lie in (0, 1] for the radial kind"));
                }
                if f.b1_tilde.is_none() {
                    let est = NonlinearField::from_kind(f.kind, j, f.c, f.eps)
                        .map_err(|e| cfg_err("field", e.to_string()))?;
                    f.b1_tilde = Some(est.b1_tilde());
                }
            }
            _ => {
                f.eps = 0.0;
                f.b1_tilde = None;
            }
        }

        // per-command blocks
        let lp = c.lp;
        positive("lp.t_lp", lp.t_lp)?;
        positive("lp.dt_lp", lp.dt_lp)?;
        positive("lp.tol", lp.tol)?;
        if lp.max_iter == 0 {
            return Err(cfg_err("lp.max_iter", "must be at least 1"));
        }
        let default_dt = match command {
            Command::SpdeCompare => {
                let levels = c.spde_compare.dt_levels.get_or_insert(vec![1e-2, 5e-3, 2.5e-3, 1.25e-3]);
                levels.iter().copied().fold(f64::INFINITY, f64::min)
            }
            _ => 1e-3,
        };
        let dt = *c.noise.dt.get_or_insert(default_dt);
        positive("noise.dt", dt)?;

        let (need_min, need_max) = match command {
            Command::SimulateLinear => {
                let t = *c.simulate.t.get_or_insert(10.0);
                positive("simulate.t", t)?;
                aligned("simulate.t", t, dt)?;
                let x0 = c.simulate.x0.get_or_insert(vec![1.0; j]);
                if x0.len() != j {
                    return Err(cfg_err("simulate.x0", format!("expected {j} entries")));
                }
                (0.0, t)
            }
            Command::Lyapunov => {
                let h = *c.lyapunov.horizon.get_or_insert(1000.0);
                if !(h >= 10.0) {
                    return Err(cfg_err("lyapunov.horizon", "must be at least 10"));
                }
                aligned("lyapunov.horizon", h, dt)?;
                (0.0, h)
            }
            Command::Dichotomy => {
                let d = &mut c.dichotomy;
                let h = *d.horizon.get_or_insert(50.0);
                let probe = *d.dt_probe.get_or_insert(0.1);
                let span = *d.temper_span.get_or_insert(200.0);
                let samples = *d.temper_samples.get_or_insert(41);
                positive("dichotomy.horizon", h)?;
                positive("dichotomy.dt_probe", probe)?;
                positive("dichotomy.temper_span", span)?;
                aligned("dichotomy.dt_probe", probe, dt)?;
                grid_steps(h, probe).map_err(|_| cfg_err("dichotomy.horizon", "must be a multiple of dt_probe"))?;
                if samples < 10 {
                    return Err(cfg_err("dichotomy.temper_samples", "must be at least 10"));
                }
                for k in 0..samples {
                    aligned("dichotomy.temper_span", span * k as f64 / (samples - 1) as f64, dt)?;
                }
                (0.0, span + h)
            }
            Command::Manifold | Command::Validate => {
                aligned("lp.dt_lp", lp.dt_lp, dt)?;
                grid_steps(lp.t_lp, lp.dt_lp).map_err(|_| cfg_err("lp.t_lp", "must be a multiple of lp.dt_lp"))?;
                let m = &mut c.manifold;
                let side = *m.side.get_or_insert(Side::Unstable);
                m.anchors.get_or_insert(11);
                let scale = *m.anchor_scale.get_or_insert(0.9);
                if !(scale > 0.0 && scale <= 1.0) {
                    return Err(cfg_err("manifold.anchor_scale", "must lie in (0, 1]"));
                }
                let k = split.dim_of(side);
                if k == 0 {
                    return Err(cfg_err("manifold.side", format!("the {side:?} block is empty at this lambda")));
                }
                if let Some(points) = &m.points {
                    for (i, p) in points.iter().enumerate() {
                        if p.len() != k {
                            return Err(cfg_err(&format!("manifold.points[{i}]"), format!("expected {k} entries")));
                        }
                    }
                }
                let mut extra = 0.0;
                if command == Command::Validate {
                    if side != Side::Unstable {
                        return Err(cfg_err("manifold.side", "validate checks the unstable manifold"));
                    }
                    let v = &mut c.validate;
                    let taus = v.taus.get_or_insert(vec![0.5]);
                    for (i, tau) in taus.iter().enumerate() {
                        let path = format!("validate.taus[{i}]");
                        if !(*tau > 0.0 && *tau <= 5.0) {
                            return Err(cfg_err(&path, "must lie in (0, 5]"));
                        }
                        aligned(&path, *tau, dt)?;
                        extra = f64::max(extra, *tau);
                    }
                    let vdt = *v.dt.get_or_insert(lp.dt_lp);
                    positive("validate.dt", vdt)?;
                    aligned("validate.dt", vdt, dt)?;
                    v.anchors.get_or_insert(5);
                    let vs = *v.anchor_scale.get_or_insert(0.5);
                    if !(vs > 0.0 && vs <= 1.0) {
                        return Err(cfg_err("validate.anchor_scale", "must lie in (0, 1]"));
                    }
                }
                (-lp.t_lp, lp.t_lp + extra)
            }
            Command::SpdeCompare => {
                let s = &mut c.spde_compare;
                let t = *s.t.get_or_insert(1.0);
                positive("spde_compare.t", t)?;
                let levels = s.dt_levels.clone().unwrap_or_default();
                if levels.len() < 2 {
                    return Err(cfg_err("spde_compare.dt_levels", "need at least two levels"));
                }
                for (i, l) in levels.iter().enumerate() {
                    let path = format!("spde_compare.dt_levels[{i}]");
                    positive(&path, *l)?;
                    aligned(&path, *l, dt)?;
                }
                aligned("spde_compare.t", t, dt)?;
                if *s.seeds.get_or_insert(8) == 0 {
                    return Err(cfg_err("spde_compare.seeds", "must be at least 1"));
                }
                let x0 = s.x0.get_or_insert(vec![0.1; j]);
                if x0.len() != j {
                    return Err(cfg_err("spde_compare.x0", format!("expected {j} entries")));
                }
                if !matches!(c.field.kind, FieldKind::Zero) && !c.field.kind.is_lipschitz() {
                    return Err(cfg_err("field.kind", "spde-compare needs a globally Lipschitz field"));
                }
                (0.0, t)
            }
        };
        let t_min = *c.noise.t_min.get_or_insert(need_min - burn_in);
        let t_max = *c.noise.t_max.get_or_insert(need_max);
        aligned("noise.t_min", t_min, dt)?;
        aligned("noise.t_max", t_max, dt)?;
        if t_min + burn_in > need_min + 1e-9 * dt.max(1.0) {
            return Err(cfg_err(
                "noise.t_min",
                format!("must be at most {} (command needs t = {need_min} after the burn-in)", need_min - burn_in),
            ));
        }
        if t_max < need_max - 1e-9 {
            return Err(cfg_err("noise.t_max", format!("must be at least {need_max}")));
        }
        Ok(c)
    }
}

/// Everything a command needs, built from a resolved config.
struct Setup {
    params: Arc<CocycleParams>,
    settings: NoiseSettings,
    split: Splitting,
    epsilon_hat: f64,
}

impl Setup {
    fn new(c: &RunConfig) -> Result<Self> {
        let model = SpectralModel::new(c.mu()?)?;
        let params = Arc::new(CocycleParams::new(model, c.noise.d.clone(), c.noise.nus.clone())?);
        let settings = NoiseSettings {
            nus: c.noise.nus.clone(),
            dt: c.noise.dt.expect("resolved"),
            t_min: c.noise.t_min.expect("resolved"),
            t_max: c.noise.t_max.expect("resolved"),
            burn_in: c.noise.burn_in.expect("resolved"),
        };
        let split = make_splitting(&params.model, c.splitting.lambda)?;
        Ok(Self {
            params,
            settings,
            split,
            epsilon_hat: c.splitting.epsilon_hat.expect("resolved"),
        })
    }

    fn cocycle(&self, seed: u64) -> Result<LinearCocycle> {
        LinearCocycle::generate(self.params.clone(), seed, &self.settings)
    }

    fn field(&self, c: &RunConfig) -> Result<NonlinearField> {
        let j = self.params.modes();
        let f = &c.field;
        Ok(match f.kind {
            FieldKind::HoelderRadial => NonlinearField::hoelder_radial(j, f.c, f.eps, f.b1_tilde.expect("resolved"))?,
            kind => NonlinearField::from_kind(kind, j, f.c, f.eps)?,
        })
    }
}

/// An artifact held in memory until the whole command succeeds.
struct Artifact {
    name: String,
    bytes: Vec<u8>,
}

fn csv_line(cells: impl IntoIterator<Item = String>) -> String {
    let mut s = cells.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn csv_header(names: impl IntoIterator<Item = String>) -> String {
    csv_line(names)
}

fn cols(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn floats(xs: &[f64]) -> impl Iterator<Item = String> + '_ {
    xs.iter().map(|v| fmt17(*v))
}

fn write_json(v: &serde_json::Value, indent: usize, out: &mut String) {
    use serde_json::Value;
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Number(n) if n.is_f64() => out.push_str(&fmt17(n.as_f64().expect("f64"))),
        Value::Array(a) if !a.is_empty() => {
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_json(x, indent + 1, out);
                out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(o) if !o.is_empty() => {
            out.push_str("{\n");
            for (i, (k, x)) in o.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_json(x, indent + 1, out);
                out.push_str(if i + 1 < o.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Pretty JSON with every float at 17 significant digits.
fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value).map_err(|e| Error::NonFinite(e.to_string()))?;
    let mut out = String::new();
    write_json(&v, 0, &mut out);
    out.push('\n');
    Ok(out.into_bytes())
}

fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for a in artifacts {
        let mut w = BufWriter::new(File::create(dir.join(&a.name))?);
        w.write_all(&a.bytes)?;
        w.flush()?;
    }
    Ok(())
}

fn anchors(split: &Splitting, side: Side, per_axis: usize, radius: f64) -> Vec<StateVector> {
    let k = split.dim_of(side);
    let mut out = Vec::new();
    for axis in 0..k {
        for i in 0..per_axis {
            let s = if per_axis == 1 {
                0.0
            } else {
                radius * (2.0 * i as f64 / (per_axis - 1) as f64 - 1.0)
            };
            if axis > 0 && s == 0.0 {
                continue;
            }
            let mut block = vec![0.0; k];
            block[axis] = s;
            out.push(split.embed(side, &block).expect("block size"));
        }
    }
    out
}

fn simulate_linear(c: &RunConfig, s: &Setup, seed: u64) -> Result<Vec<Artifact>> {
    let spec = s.cocycle(seed)?;
    let t = c.simulate.t.expect("resolved");
    let x0 = StateVector(c.simulate.x0.clone().expect("resolved"));
    let mut paths = Vec::new();
    spec.noise().write_csv(&mut paths)?;
    let j = spec.modes();
    let mut traj = csv_header(std::iter::once("t".to_string()).chain(cols("u", j)));
    let steps = grid_steps(t, spec.dt())?;
    for k in 0..=steps {
        let tk = k as f64 * spec.dt();
        let u = propagate_linear(&spec, tk, &x0)?;
        traj += &csv_line(std::iter::once(fmt17(tk)).chain(floats(&u.0)));
    }
    Ok(vec![
        Artifact { name: "paths.csv".into(), bytes: paths },
        Artifact { name: "trajectory.csv".into(), bytes: traj.into_bytes() },
    ])
}

fn lyapunov(c: &RunConfig, s: &Setup, seed: u64) -> Result<Vec<Artifact>> {
    let spec = s.cocycle(seed)?;
    let lam = estimate_lyapunov(&spec, c.lyapunov.horizon.expect("resolved"))?;
    let mut mu = spec.model().mu().to_vec();
    mu.sort_by(|a, b| b.total_cmp(a));
    let mut out = csv_header(["mode", "mu", "lambda_hat", "abs_err"].map(String::from));
    for (m, (l, u)) in lam.iter().zip(&mu).enumerate() {
        out += &csv_line([(m + 1).to_string(), fmt17(*u), fmt17(*l), fmt17((l - u).abs())]);
    }
    Ok(vec![Artifact { name: "lyapunov.csv".into(), bytes: out.into_bytes() }])
}

#[derive(Serialize)]
struct DichotomyJson {
    alpha: f64,
    beta: f64,
    gamma: f64,
    #[serde(rename = "K")]
    k: f64,
    epsilon_hat: f64,
    horizon: f64,
    temperedness_slope: f64,
}

fn dichotomy(c: &RunConfig, s: &Setup, seed: u64, exec: Exec) -> Result<Vec<Artifact>> {
    let spec = s.cocycle(seed)?;
    let d = &c.dichotomy;
    let (h, probe) = (d.horizon.expect("resolved"), d.dt_probe.expect("resolved"));
    let est = estimate_dichotomy(&spec, &s.split, s.epsilon_hat, h, probe)?;
    let span = d.temper_span.expect("resolved");
    let n = d.temper_samples.expect("resolved");
    let times: Vec<f64> = (0..n).map(|k| span * k as f64 / (n - 1) as f64).collect();
    let ks = dichotomy_constants_along_orbit(&spec, &s.split, s.epsilon_hat, h, probe, &times, exec)?;
    let slope = temperedness_slope(&ks)?;
    let json = DichotomyJson {
        alpha: est.alpha,
        beta: est.beta,
        gamma: est.gamma,
        k: est.k,
        epsilon_hat: est.epsilon_hat,
        horizon: est.horizon,
        temperedness_slope: slope,
    };
    let mut csv = csv_header(["t", "K"].map(String::from));
    for (t, k) in &ks {
        csv += &csv_line([fmt17(*t), fmt17(*k)]);
    }
    Ok(vec![
        Artifact { name: "dichotomy.json".into(), bytes: json_bytes(&json)? },
        Artifact { name: "dichotomy_orbit.csv".into(), bytes: csv.into_bytes() },
    ])
}

#[derive(Serialize)]
struct ManifoldJson {
    side: Side,
    anchors: usize,
    dichotomy: DichotomyEstimate,
    radius: RadiusCheck,
    b1: f64,
    b0: f64,
    rho: f64,
    anchor_radius: f64,
    max_h_norm: f64,
    max_iterations: usize,
    max_last_delta: f64,
    max_contraction_est: f64,
    tail_bound: f64,
    max_lipschitz_quotient: f64,
}

struct ManifoldRun {
    dich: DichotomyEstimate,
    cutoff: CutoffField,
    radius: RadiusCheck,
    anchor_radius: f64,
}

fn manifold_setup(c: &RunConfig, s: &Setup, spec: &LinearCocycle, extra: f64) -> Result<ManifoldRun> {
    let t_lp = c.lp.t_lp;
    let dich = estimate_window_dichotomy(spec, &s.split, s.epsilon_hat, -t_lp, t_lp + extra)?;
    let cutoff = CutoffField::new(s.field(c)?, c.field.rho)?;
    let radius = crate::perron::check_radius(&dich, cutoff.b1(), cutoff.eps(), cutoff.rho())?;
    if !radius.ok {
        return Err(cfg_err(
            "field.rho",
            format!(
                "radius condition fails at this sample: budget {} > 1/2 (rho_max = {})",
                radius.budget, radius.rho_max
            ),
        ));
    }
    let anchor_radius = cutoff.rho() / (4.0 * dich.k);
    Ok(ManifoldRun { dich, cutoff, radius, anchor_radius })
}

fn manifold(c: &RunConfig, s: &Setup, seed: u64, exec: Exec) -> Result<Vec<Artifact>> {
    let spec = s.cocycle(seed)?;
    let run = manifold_setup(c, s, &spec, 0.0)?;
    let m = &c.manifold;
    let side = m.side.expect("resolved");
    let points = match &m.points {
        Some(p) => p
            .iter()
            .map(|b| s.split.embed(side, b))
            .collect::<Result<Vec<_>>>()?,
        None => anchors(
            &s.split,
            side,
            m.anchors.expect("resolved"),
            m.anchor_scale.expect("resolved") * run.anchor_radius,
        ),
    };
    let prob = LpProblem::new(&spec, &run.cutoff, &s.split, &run.dich, &c.lp)?;
    let results: Vec<GraphResult> = prob.solve_many(side, &points, exec).into_iter().collect::<Result<_>>()?;

    let (k, rest) = (s.split.dim_of(side), s.split.dim_of(side.other()));
    let (pn, hn) = match side {
        Side::Unstable => ("p", "h"),
        Side::Stable => ("q", "h"),
    };
    let mut csv = csv_header(
        cols(pn, k)
            .chain(cols(hn, rest))
            .chain(["iterations", "last_delta", "contraction_est", "tail_bound"].map(String::from)),
    );
    for r in &results {
        csv += &csv_line(
            floats(s.split.block(side, &r.anchor))
                .chain(floats(r.h_block(&s.split)))
                .chain([
                    r.iterations.to_string(),
                    fmt17(r.last_delta),
                    fmt17(r.contraction_est),
                    fmt17(r.tail_bound),
                ]),
        );
    }
    let mut lip: f64 = 0.0;
    for (i, a) in results.iter().enumerate() {
        for b in &results[i + 1..] {
            let dp = a.anchor.distance_to(&b.anchor);
            if dp > 0.0 {
                lip = lip.max(a.h.distance_to(&b.h) / dp);
            }
        }
    }
    let summary = ManifoldJson {
        side,
        anchors: results.len(),
        dichotomy: run.dich,
        radius: run.radius,
        b1: run.cutoff.b1(),
        b0: run.cutoff.b0(),
        rho: run.cutoff.rho(),
        anchor_radius: run.anchor_radius,
        max_h_norm: results.iter().map(|r| r.h.norm()).fold(0.0, f64::max),
        max_iterations: results.iter().map(|r| r.iterations).max().unwrap_or(0),
        max_last_delta: results.iter().map(|r| r.last_delta).fold(0.0, f64::max),
        max_contraction_est: results.iter().map(|r| r.contraction_est).fold(0.0, f64::max),
        tail_bound: results.first().map_or(0.0, |r| r.tail_bound),
        max_lipschitz_quotient: lip,
    };
    Ok(vec![
        Artifact { name: "manifold.csv".into(), bytes: csv.into_bytes() },
        Artifact { name: "manifold.json".into(), bytes: json_bytes(&summary)? },
    ])
}

#[derive(Serialize)]
struct ValidateJson {
    checks: usize,
    max_defect: f64,
    dichotomy: DichotomyEstimate,
}

fn validate(c: &RunConfig, s: &Setup, seed: u64, exec: Exec) -> Result<Vec<Artifact>> {
    let spec = s.cocycle(seed)?;
    let v = &c.validate;
    let taus = v.taus.clone().expect("resolved");
    let max_tau = taus.iter().copied().fold(0.0, f64::max);
    let run = manifold_setup(c, s, &spec, max_tau)?;
    let points = anchors(
        &s.split,
        Side::Unstable,
        v.anchors.expect("resolved"),
        v.anchor_scale.expect("resolved") * run.anchor_radius,
    );
    let jobs: Vec<(StateVector, f64)> = points
        .iter()
        .flat_map(|p| taus.iter().map(move |t| (p.clone(), *t)))
        .collect();
    let dt = v.dt.expect("resolved");
    let defects: Vec<f64> = exec
        .map(&jobs, |(p, tau)| {
            verify_invariance_side(&spec, &run.cutoff, &s.split, &run.dich, &c.lp, Side::Unstable, p, *tau, dt)
                .map(|r| r.defect)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let k = s.split.dim_of(Side::Unstable);
    let mut csv = csv_header(cols("p", k).chain(["tau", "defect"].map(String::from)));
    for ((p, tau), d) in jobs.iter().zip(&defects) {
        csv += &csv_line(floats(s.split.block(Side::Unstable, p)).chain([fmt17(*tau), fmt17(*d)]));
    }
    let summary = ValidateJson {
        checks: defects.len(),
        max_defect: defects.iter().copied().fold(0.0, f64::max),
        dichotomy: run.dich,
    };
    Ok(vec![
        Artifact { name: "validate.csv".into(), bytes: csv.into_bytes() },
        Artifact { name: "validate.json".into(), bytes: json_bytes(&summary)? },
    ])
}

fn spde_compare(c: &RunConfig, s: &Setup, seed: u64, exec: Exec) -> Result<Vec<Artifact>> {
    let sc = &c.spde_compare;
    let t = sc.t.expect("resolved");
    let levels = sc.dt_levels.clone().expect("resolved");
    let seeds = sc.seeds.expect("resolved");
    let x0 = StateVector(sc.x0.clone().expect("resolved"));
    let f = s.field(c)?;
    let report = strong_error_check(&s.params, &f, &s.settings, &x0, t, &levels, seeds, seed, exec)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        dt_levels: &'a [f64],
        mean_errors: &'a [f64],
        fitted_order: f64,
        seeds: &'a [u64],
    }
    let mut out = vec![Artifact {
        name: "spde_compare.json".into(),
        bytes: json_bytes(&Summary {
            dt_levels: &report.dt_levels,
            mean_errors: &report.mean_errors,
            fitted_order: report.fitted_order,
            seeds: &report.seeds,
        })?,
    }];
    let finest = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let traces: Vec<Artifact> = exec
        .map(&report.seeds, |&sd| -> Result<Artifact> {
            let model = SpdeModel::generate(s.params.clone(), f.clone(), sd, &s.settings)?;
            let a = conjugate_flow_trajectory(&model, &x0, t, finest)?;
            let b = integrate_stratonovich_trajectory(&model, &x0, t, finest)?;
            let j = model.modes();
            let mut csv = csv_header(std::iter::once("t".to_string()).chain(cols("x", j)).chain(cols("y", j)));
            for ((tk, xa), (_, xb)) in a.iter().zip(&b) {
                csv += &csv_line(std::iter::once(fmt17(*tk)).chain(floats(&xa.0)).chain(floats(&xb.0)));
            }
            Ok(Artifact { name: format!("trace_seed_{sd}.csv"), bytes: csv.into_bytes() })
        })
        .into_iter()
        .collect::<Result<_>>()?;
    out.extend(traces);
    Ok(out)
}

fn execute(command: Command, c: &RunConfig, seed: u64, exec: Exec) -> Result<Vec<Artifact>> {
    let s = Setup::new(c)?;
    match command {
        Command::SimulateLinear => simulate_linear(c, &s, seed),
        Command::Lyapunov => lyapunov(c, &s, seed),
        Command::Dichotomy => dichotomy(c, &s, seed, exec),
        Command::Manifold => manifold(c, &s, seed, exec),
        Command::Validate => validate(c, &s, seed, exec),
        Command::SpdeCompare => spde_compare(c, &s, seed, exec),
    }
}

fn record_artifact(command: Command, c: &RunConfig) -> Result<Artifact> {
    let rec = RunRecord {
        tool: TOOL.into(),
        version: VERSION.into(),
        command,
        config: c.clone(),
    };
    Ok(Artifact { name: "run.json".into(), bytes: json_bytes(&rec)? })
}

/// Resolves `config`, runs `command` and writes its artifacts plus `run.json` into `out_dir`.
pub fn run(command: Command, config: &RunConfig, out_dir: &Path, exec: Exec) -> Result<RunConfig> {
    let resolved = config.resolve(command)?;
    let mut artifacts = execute(command, &resolved, resolved.seed, exec)?;
    artifacts.push(record_artifact(command, &resolved)?);
    write_artifacts(out_dir, &artifacts)?;
    Ok(resolved)
}

/// Runs seeds `config.seed .. config.seed + seeds`, each into `out_dir/seed_<s>/`.
///
/// Seeds are computed in parallel under `exec`; artifacts are written in seed order.
pub fn run_sweep(command: Command, config: &RunConfig, out_dir: &Path, seeds: usize, exec: Exec) -> Result<Vec<RunConfig>> {
    if seeds == 0 {
        return Err(cfg_err("--seeds", "must be at least 1"));
    }
    let base = config.resolve(command)?;
    let configs: Vec<RunConfig> = (0..seeds as u64)
        .map(|k| RunConfig { seed: base.seed + k, ..base.clone() })
        .collect();
    let outputs: Vec<Result<Vec<Artifact>>> = exec.map(&configs, |c| {
        let mut a = execute(command, c, c.seed, Exec::Sequential)?;
        a.push(record_artifact(command, c)?);
        Ok(a)
    });
    for (c, out) in configs.iter().zip(outputs) {
        write_artifacts(&out_dir.join(format!("seed_{}", c.seed)), &out?)?;
    }
    Ok(configs)
}
