//! Run configuration, scenario dispatch and artifact writers for `wfp-lab`.
//!
//! Every JSON and CSV artifact starts with the code version and the full
//! effective configuration. Binary field and kernel dumps keep their
//! documented layout and carry the same echo in a trailer after the payload
//! (`WFPC`, `u64` little-endian byte count, UTF-8 JSON).

pub mod config;
pub mod selftest;

pub use config::{ConfigFile, ConfigReader};

use crate::constants::{compute_constants, ConstantsOptions, TheoryConstants};
use crate::density_matrix::{positivity_spectrum, t2_norm, trace_of, wigner_to_rho, PositivityReport};
use crate::error::{Result, WfpError};
use crate::phase_grid::{GridSpec, WignerField, SIGMA};
use crate::potential_theta::{gamma_m_estimate, PotentialKind, PotentialSpec};
use crate::propagator::{displaced_gaussian, evolve_with_state, DistanceSeries, Interpolation, PropagatorConfig, RunReport, ThetaSubstep};
use crate::spectral::{all_eigenvalues, assemble_generator, kernel_density, verify_gap, write_eigenvalues_csv, CoarseBox, GapReport};
use crate::steady_state::{fixed_point_solve, stationarity_residual, FixedPointReport, LinvBackend};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const VERSION: &str = concat!("wfp-lab ", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_SEED: u64 = 42;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

const TRAILER_MAGIC: &[u8; 4] = b"WFPC";

/// Process exit code for a failure.
pub fn exit_code(err: &WfpError) -> i32 {
    match err {
        WfpError::Config { .. } => EXIT_CONFIG,
        WfpError::Divergence(_) | WfpError::NoConvergence(_) | WfpError::Aliasing { .. } | WfpError::Overflow(_) => {
            EXIT_DIVERGENCE
        }
        WfpError::Invariant(_) => EXIT_INVARIANT,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Relax,
    #[default]
    Steady,
    Spectrum,
    Constants,
    Selftest,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::Relax, Scenario::Steady, Scenario::Spectrum, Scenario::Constants, Scenario::Selftest];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Relax => "relax",
            Scenario::Steady => "steady",
            Scenario::Spectrum => "spectrum",
            Scenario::Constants => "constants",
            Scenario::Selftest => "selftest",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scenario '{s}' (expected relax, steady, spectrum, constants or selftest)"))
    }
}

fn parse_choice<T: Copy>(reader: &ConfigReader<'_>, key: &str, default: T, choices: &[(&str, T)]) -> Result<T> {
    match reader.string(key) {
        None => Ok(default),
        Some(v) => choices.iter().find(|(name, _)| *name == v).map(|(_, c)| *c).ok_or_else(|| {
            let names: Vec<_> = choices.iter().map(|(n, _)| *n).collect();
            reader.error(key, format!("'{v}' is not one of {}", names.join(", ")))
        }),
    }
}

fn choice_name<T: PartialEq + Copy>(value: T, choices: &[(&'static str, T)]) -> &'static str {
    choices.iter().find(|(_, c)| *c == value).map_or("?", |(n, _)| n)
}

const BACKENDS: [(&str, LinvBackend); 2] = [("semigroup", LinvBackend::Semigroup), ("krylov", LinvBackend::Krylov)];
const SUBSTEPS: [(&str, ThetaSubstep); 2] = [("rk2", ThetaSubstep::Rk2), ("exact_shift", ThetaSubstep::ExactShift)];
const INTERPOLATIONS: [(&str, Interpolation); 3] = [
    ("trig_shear", Interpolation::TrigShear),
    ("trig_bicubic", Interpolation::TrigBicubic),
    ("lagrange4", Interpolation::Lagrange4),
];
const SERIES: [(&str, DistanceSeries); 2] = [("h", DistanceSeries::H), ("hm", DistanceSeries::Hm)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelaxSettings {
    /// Mean of the initial displaced Gaussian.
    pub shift_x: f64,
    pub shift_xi: f64,
}

impl Default for RelaxSettings {
    fn default() -> Self {
        Self { shift_x: 1.0, shift_xi: -1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadySettings {
    pub backend: LinvBackend,
    pub tol: f64,
    pub max_iter: usize,
    /// Re-solve with the other backend and report the agreement.
    pub compare_backends: bool,
}

impl Default for SteadySettings {
    fn default() -> Self {
        Self { backend: LinvBackend::Semigroup, tol: 1e-10, max_iter: 50, compare_backends: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumSettings {
    pub n: usize,
    /// Eigenvalues listed in the JSON report.
    pub k: usize,
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        Self { n: 48, k: 10 }
    }
}

/// Fully validated settings of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub grid: GridSpec,
    pub potential: PotentialSpec,
    pub propagator: PropagatorConfig,
    pub m: u32,
    pub gamma_tilde: Option<f64>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub relax: RelaxSettings,
    pub steady: SteadySettings,
    pub spectrum: SpectrumSettings,
    pub constants: ConstantsOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_file(&ConfigFile::default(), None).expect("defaults are valid")
    }
}

fn read_grid(r: &ConfigReader<'_>) -> Result<GridSpec> {
    let d: usize = r.parsed_or("grid.d", 1)?;
    let n: usize = r.parsed_or("grid.n", 128)?;
    let base = GridSpec::default_for(d, n).map_err(|e| r.error("grid.n", e))?;
    let n_x = r.parsed_or("grid.n_x", base.n_x())?;
    let n_xi = r.parsed_or("grid.n_xi", base.n_xi())?;
    let x_max = r.f64_or("grid.x_max", base.x_max())?;
    let xi_max = r.f64_or("grid.xi_max", base.xi_max())?;
    GridSpec::new(d, n_x, n_xi, x_max, xi_max).map_err(|e| r.error("grid", e))
}

fn read_samples(r: &ConfigReader<'_>, key: &str, base: Option<&Path>) -> Result<Vec<f64>> {
    let name = r.string(key).ok_or_else(|| r.error(key, "tabulated potential needs a samples file"))?;
    let path = match base {
        Some(dir) if Path::new(&name).is_relative() => dir.join(&name),
        _ => PathBuf::from(&name),
    };
    let text = std::fs::read_to_string(&path).map_err(|e| r.error(key, format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() || cell.starts_with('#') {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) => values.push(v),
            // A non-numeric first row is a header.
            Err(_) if values.is_empty() && i == 0 => continue,
            Err(e) => return Err(r.error(key, format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(values)
}

fn read_potential(r: &ConfigReader<'_>, grid: &GridSpec, base: Option<&Path>) -> Result<PotentialSpec> {
    let lambda = r.f64_or("potential.lambda", 0.01)?;
    let kind = r.string("potential.kind").unwrap_or_else(|| "sinusoidal".into());
    let amp = || r.f64_or("potential.amp", 1.0);
    let kind = match kind.as_str() {
        "none" => PotentialKind::None,
        "constant" => PotentialKind::Constant { value: r.f64_or("potential.value", 0.0)? },
        "quadratic" => PotentialKind::Quadratic { amp: amp()? },
        "sinusoidal" => PotentialKind::Sinusoidal { k0: r.list("potential.k0")?.unwrap_or(vec![1.0]), amp: amp()? },
        "gaussian_bump" => PotentialKind::GaussianBump {
            center: r.list("potential.center")?.unwrap_or(vec![0.0; grid.d()]),
            width: r.f64_or("potential.width", 1.0)?,
            amp: amp()?,
        },
        "tabulated" => PotentialKind::Tabulated {
            x_max: r.f64_or("potential.x_max", grid.x_max())?,
            samples: read_samples(r, "potential.samples", base)?,
        },
        other => return Err(r.error("potential.kind", format!("unknown potential kind '{other}'"))),
    };
    let spec = PotentialSpec::new(lambda, kind).map_err(|e| r.error("potential", e))?;
    spec.check_dimension(grid.d()).map_err(|e| r.error("potential", e))?;
    Ok(spec)
}

fn read_propagator(r: &ConfigReader<'_>, m: u32, spec: &PotentialSpec, grid: &GridSpec) -> Result<PropagatorConfig> {
    let def = PropagatorConfig::default();
    let window = match r.list("propagator.fit_window")? {
        None => def.fit_window,
        Some(v) if v.len() == 2 => [v[0], v[1]],
        Some(_) => return Err(r.error("propagator.fit_window", "expected two values 'start, end'")),
    };
    let cfg = PropagatorConfig {
        dt: r.f64_or("propagator.dt", def.dt)?,
        t_end: r.f64_or("propagator.t_end", def.t_end)?,
        record_every: r.parsed_or("propagator.record_every", def.record_every)?,
        theta_substep: parse_choice(r, "propagator.theta_substep", def.theta_substep, &SUBSTEPS)?,
        interpolation: parse_choice(r, "propagator.interpolation", def.interpolation, &INTERPOLATIONS)?,
        m,
        h_cut: r.f64_or("propagator.h_cut", def.h_cut)?,
        fit_window: window,
        fit_series: parse_choice(r, "propagator.fit_series", def.fit_series, &SERIES)?,
    };
    cfg.validate(spec, grid).map_err(|e| r.error("propagator", e))?;
    Ok(cfg)
}

impl RunConfig {
    /// Build from a parsed file; `base` resolves relative sample paths.
    pub fn from_file(file: &ConfigFile, base: Option<&Path>) -> Result<Self> {
        let r = file.reader();
        let scenario = r.parsed_or("scenario", Scenario::default())?;
        let m: u32 = r.parsed_or("m", 4)?;
        let gamma_tilde = r.parsed::<f64>("gamma_tilde")?;
        let output_dir = PathBuf::from(r.string("output_dir").unwrap_or_else(|| "wfp-out".into()));
        let seed = r.parsed_or("seed", DEFAULT_SEED)?;
        let grid = read_grid(&r)?;
        let potential = read_potential(&r, &grid, base)?;
        let propagator = read_propagator(&r, r.parsed_or("propagator.m", m)?, &potential, &grid)?;
        let relax = RelaxSettings {
            shift_x: r.f64_or("relax.shift_x", RelaxSettings::default().shift_x)?,
            shift_xi: r.f64_or("relax.shift_xi", RelaxSettings::default().shift_xi)?,
        };
        let sd = SteadySettings::default();
        let steady = SteadySettings {
            backend: parse_choice(&r, "steady.backend", sd.backend, &BACKENDS)?,
            tol: r.f64_or("steady.tol", sd.tol)?,
            max_iter: r.parsed_or("steady.max_iter", sd.max_iter)?,
            compare_backends: r.bool_or("steady.compare_backends", sd.compare_backends)?,
        };
        if !(steady.tol > 0.0) {
            return Err(r.error("steady.tol", "must be positive"));
        }
        let sp = SpectrumSettings::default();
        let spectrum = SpectrumSettings { n: r.parsed_or("spectrum.n", sp.n)?, k: r.parsed_or("spectrum.k", sp.k)? };
        let co = ConstantsOptions::default();
        let constants = ConstantsOptions {
            gamma_tilde,
            gamma_grid: co.gamma_grid.and_then(|_| GridSpec::default_for(grid.d(), 64).ok()),
            l1_points: r.parsed_or("constants.l1_points", co.l1_points)?,
            h_cut: r.f64_or("constants.h_cut", co.h_cut)?,
        };
        if let Some(g) = gamma_tilde {
            if !(g > 0.0) {
                return Err(r.error("gamma_tilde", "must be positive"));
            }
        }
        if m < 1 {
            return Err(r.error("m", "must be at least 1"));
        }
        r.finish()?;
        Ok(Self {
            scenario,
            grid,
            potential,
            propagator,
            m,
            gamma_tilde,
            output_dir,
            seed,
            relax,
            steady,
            spectrum,
            constants,
        })
    }

    /// Read, apply overrides, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| WfpError::Config { line: 0, message: format!("{}: {e}", p.display()) })?;
                ConfigFile::parse(&text)?
            }
            None => ConfigFile::default(),
        };
        for o in overrides {
            file.apply_override(o)?;
        }
        Self::from_file(&file, path.and_then(Path::parent))
    }

    /// Every effective setting as `key -> value`, defaults included.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut e = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            e.insert(k.to_string(), v);
        };
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        put("scenario", self.scenario.to_string());
        put("m", self.m.to_string());
        put("gamma_tilde", self.gamma_tilde.map_or("auto".into(), |g| g.to_string()));
        put("output_dir", self.output_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("grid.d", self.grid.d().to_string());
        put("grid.n_x", self.grid.n_x().to_string());
        put("grid.n_xi", self.grid.n_xi().to_string());
        put("grid.x_max", self.grid.x_max().to_string());
        put("grid.xi_max", self.grid.xi_max().to_string());
        put("potential.lambda", self.potential.lambda.to_string());
        match &self.potential.kind {
            PotentialKind::None => put("potential.kind", "none".into()),
            PotentialKind::Constant { value } => {
                put("potential.kind", "constant".into());
                put("potential.value", value.to_string());
            }
            PotentialKind::Quadratic { amp } => {
                put("potential.kind", "quadratic".into());
                put("potential.amp", amp.to_string());
            }
            PotentialKind::Sinusoidal { k0, amp } => {
                put("potential.kind", "sinusoidal".into());
                put("potential.k0", list(k0));
                put("potential.amp", amp.to_string());
            }
            PotentialKind::GaussianBump { center, width, amp } => {
                put("potential.kind", "gaussian_bump".into());
                put("potential.center", list(center));
                put("potential.width", width.to_string());
                put("potential.amp", amp.to_string());
            }
            PotentialKind::Tabulated { x_max, samples } => {
                put("potential.kind", "tabulated".into());
                put("potential.x_max", x_max.to_string());
                put("potential.samples", format!("<{} values>", samples.len()));
            }
        }
        let p = &self.propagator;
        put("propagator.dt", p.dt.to_string());
        put("propagator.t_end", p.t_end.to_string());
        put("propagator.record_every", p.record_every.to_string());
        put("propagator.theta_substep", choice_name(p.theta_substep, &SUBSTEPS).into());
        put("propagator.interpolation", choice_name(p.interpolation, &INTERPOLATIONS).into());
        put("propagator.m", p.m.to_string());
        put("propagator.h_cut", p.h_cut.to_string());
        put("propagator.fit_window", list(&p.fit_window));
        put("propagator.fit_series", choice_name(p.fit_series, &SERIES).into());
        put("relax.shift_x", self.relax.shift_x.to_string());
        put("relax.shift_xi", self.relax.shift_xi.to_string());
        put("steady.backend", self.steady.backend.to_string());
        put("steady.tol", self.steady.tol.to_string());
        put("steady.max_iter", self.steady.max_iter.to_string());
        put("steady.compare_backends", self.steady.compare_backends.to_string());
        put("spectrum.n", self.spectrum.n.to_string());
        put("spectrum.k", self.spectrum.k.to_string());
        put("constants.l1_points", self.constants.l1_points.to_string());
        put("constants.h_cut", self.constants.h_cut.to_string());
        e
    }
}

/// Writes artifacts into the output directory, each tagged with the echo.
pub struct ArtifactWriter {
    dir: PathBuf,
    scenario: Scenario,
    echo: BTreeMap<String, String>,
    written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    version: &'static str,
    scenario: Scenario,
    config: &'a BTreeMap<String, String>,
    result: &'a T,
}

impl ArtifactWriter {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let dir = config.output_dir.clone();
        let fail = |e: std::io::Error| WfpError::Config {
            line: 0,
            message: format!("output_dir {} is not writable: {e}", dir.display()),
        };
        std::fs::create_dir_all(&dir).map_err(fail)?;
        let probe = dir.join(".wfp-lab-write-probe");
        File::create(&probe).map_err(fail)?;
        std::fs::remove_file(&probe).map_err(fail)?;
        Ok(Self { dir: dir.clone(), scenario: config.scenario, echo: config.echo(), written: vec![] })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let file = File::create(&path)?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, result: &T) -> Result<()> {
        let mut out = self.create(name)?;
        let env = Envelope { version: VERSION, scenario: self.scenario, config: &self.echo, result };
        serde_json::to_writer_pretty(&mut out, &env).map_err(|e| WfpError::Format(e.to_string()))?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    /// CSV preceded by `#` lines holding the version and the echo.
    pub fn csv<F: FnOnce(&mut BufWriter<File>) -> Result<()>>(&mut self, name: &str, body: F) -> Result<()> {
        let mut out = self.create(name)?;
        writeln!(out, "# {VERSION}")?;
        writeln!(out, "# scenario = {}", self.scenario)?;
        for (k, v) in &self.echo {
            writeln!(out, "# {k} = {v}")?;
        }
        body(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let mut out = self.create(name)?;
        writeln!(out, "# {VERSION}")?;
        for (k, v) in &self.echo {
            writeln!(out, "# {k} = {v}")?;
        }
        out.write_all(body.as_bytes())?;
        out.flush()?;
        Ok(())
    }

    /// Binary payload followed by the echo trailer.
    pub fn binary<F: FnOnce(&mut BufWriter<File>) -> Result<()>>(&mut self, name: &str, body: F) -> Result<()> {
        let mut out = self.create(name)?;
        body(&mut out)?;
        let echo = serde_json::json!({ "version": VERSION, "scenario": self.scenario, "config": &self.echo });
        let bytes = serde_json::to_vec(&echo).map_err(|e| WfpError::Format(e.to_string()))?;
        out.write_all(TRAILER_MAGIC)?;
        out.write_all(&(bytes.len() as u64).to_le_bytes())?;
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }
}

/// Echo trailer of a binary artifact, if present.
pub fn read_trailer(bytes: &[u8]) -> Option<serde_json::Value> {
    let pos = bytes.windows(4).rposition(|w| w == TRAILER_MAGIC)?;
    let len = u64::from_le_bytes(bytes.get(pos + 4..pos + 12)?.try_into().ok()?) as usize;
    let payload = bytes.get(pos + 12..pos + 12 + len)?;
    serde_json::from_slice(payload).ok()
}

/// Outcome of a scenario: artifacts are on disk, `code` is the exit code.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub code: i32,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxSummary {
    pub lambda: f64,
    pub shift: [f64; 2],
    pub reference: &'static str,
    pub sigma: f64,
    pub fitted_rate: Option<f64>,
    /// `rate >= sigma`; only asserted for the unperturbed flow.
    pub rate_bound_holds: Option<bool>,
    pub mass_drift: f64,
    pub report: RunReport,
}

pub fn run_relax(config: &RunConfig, out: &mut ArtifactWriter) -> Result<RunOutcome> {
    let grid = config.grid;
    let w0 = displaced_gaussian(&grid, config.relax.shift_x, config.relax.shift_xi)?;
    let w0 = w0.scaled(1.0 / w0.mass());
    let unperturbed = config.potential.lambda == 0.0 || config.potential.is_trivial();
    let (reference, label) = if unperturbed {
        (WignerField::mu(grid), "mu")
    } else {
        let fp = fixed_point_solve(&grid, &config.potential, config.m, config.steady.tol, config.steady.max_iter, config.steady.backend)?;
        (fp.w_inf, "w_inf")
    };
    let (report, w_end) = evolve_with_state(&w0, &config.propagator, &config.potential, &reference)?;
    let rate = report.fit.as_ref().map(|f| f.rate);
    let bound = unperturbed.then(|| rate.is_some_and(|r| r >= SIGMA));
    let summary = RelaxSummary {
        lambda: config.potential.lambda,
        shift: [config.relax.shift_x, config.relax.shift_xi],
        reference: label,
        sigma: SIGMA,
        fitted_rate: rate,
        rate_bound_holds: bound,
        mass_drift: report.mass_drift(),
        report,
    };
    out.csv("relax.csv", |f| summary.report.write_csv(f))?;
    out.json("relax.json", &summary)?;
    out.binary("w_initial.wfpf", |f| w0.write_binary(f))?;
    out.binary("w_final.wfpf", |f| w_end.write_binary(f))?;
    let text = match rate {
        Some(r) => format!("relax: fitted rate {r:.6} (sigma = {SIGMA:.6}), mass drift {:.3e}", summary.mass_drift),
        None => "relax: no decay fit (fit window outside the run)".to_string(),
    };
    let code = if bound == Some(false) { EXIT_INVARIANT } else { EXIT_OK };
    Ok(RunOutcome { code, summary: text, files: out.written().to_vec() })
}

/// Diagnostics of the density matrix of a one-dimensional stationary state.
#[derive(Debug, Clone, Serialize)]
pub struct DensityDiagnostics {
    pub trace: f64,
    pub hermiticity_error: f64,
    pub positivity: PositivityReport,
    pub t2_norm: f64,
    /// `sqrt(2 pi) ||w||_{L^2}`.
    pub t2_from_wigner: f64,
    pub t2_relative_error: f64,
    pub pass: bool,
}

pub const TRACE_TOLERANCE: f64 = 1e-3;
pub const MIN_EIGENVALUE_FLOOR: f64 = -1e-4;
pub const T2_TOLERANCE: f64 = 1e-4;

pub fn density_diagnostics(w: &WignerField) -> Result<(DensityDiagnostics, crate::density_matrix::DensityMatrixKernel)> {
    let rho = wigner_to_rho(w)?;
    let trace = trace_of(&rho);
    let positivity = positivity_spectrum(&rho)?;
    let t2 = t2_norm(&rho);
    let t2_w = (2.0 * std::f64::consts::PI).sqrt() * w.norm_l2();
    let t2_rel = (t2 - t2_w).abs() / t2_w;
    let herm = rho.hermiticity_error();
    let pass = (trace - 1.0).abs() <= TRACE_TOLERANCE
        && herm <= crate::density_matrix::HERMITIAN_TOLERANCE
        && positivity.min_eigenvalue >= MIN_EIGENVALUE_FLOOR
        && t2_rel <= T2_TOLERANCE;
    let diag = DensityDiagnostics {
        trace,
        hermiticity_error: herm,
        positivity,
        t2_norm: t2,
        t2_from_wigner: t2_w,
        t2_relative_error: t2_rel,
        pass,
    };
    Ok((diag, rho))
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadySummary {
    pub report: FixedPointReport,
    pub stationarity_residual: f64,
    pub hm_distance_to_mu: f64,
    pub gamma_estimate: Option<f64>,
    /// `||w_inf(backend) - w_inf(other)||_{H_m}` when both were solved.
    pub cross_backend_distance: Option<f64>,
    pub density: Option<DensityDiagnostics>,
}

pub fn run_steady(config: &RunConfig, out: &mut ArtifactWriter) -> Result<RunOutcome> {
    let grid = config.grid;
    let s = config.steady;
    let mut report = fixed_point_solve(&grid, &config.potential, config.m, s.tol, s.max_iter, s.backend)?;
    let gamma = match config.potential.kind {
        PotentialKind::Quadratic { .. } => None,
        _ if config.potential.is_trivial() => None,
        _ => GridSpec::default_for(grid.d(), 64).ok().and_then(|g| gamma_m_estimate(&config.potential, config.m, &g).ok()),
    };
    if let Some(g) = gamma {
        report.set_gamma_estimate(g);
    }
    let cross = if s.compare_backends {
        let other = match s.backend {
            LinvBackend::Semigroup => LinvBackend::Krylov,
            LinvBackend::Krylov => LinvBackend::Semigroup,
        };
        let alt = fixed_point_solve(&grid, &config.potential, config.m, s.tol, s.max_iter, other)?;
        Some(report.w_inf.sub(&alt.w_inf)?.norm_hm(config.m))
    } else {
        None
    };
    let residual = stationarity_residual(&report.w_inf, &config.potential, config.m)?;
    let to_mu = report.w_inf.sub(&WignerField::mu(grid))?.norm_hm(config.m);
    let (density, rho) = if grid.d() == 1 {
        let (d, rho) = density_diagnostics(&report.w_inf)?;
        (Some(d), Some(rho))
    } else {
        (None, None)
    };
    out.binary("w_inf.wfpf", |f| report.w_inf.write_binary(f))?;
    if let Some(rho) = &rho {
        out.binary("rho_inf.wfpr", |f| rho.write_binary(f))?;
    }
    out.csv("fixed_point.csv", |f| {
        writeln!(f, "iteration,residual,increment,contraction")?;
        for i in 0..report.residuals.len() {
            let inc = report.increments.get(i).copied().unwrap_or(f64::NAN);
            let ratio = if i == 0 { f64::NAN } else { report.contraction.get(i - 1).copied().unwrap_or(f64::NAN) };
            writeln!(f, "{},{:.16e},{:.16e},{:.16e}", i + 1, report.residuals[i], inc, ratio)?;
        }
        Ok(())
    })?;
    let mass = report.mass;
    let summary = SteadySummary {
        report,
        stationarity_residual: residual,
        hm_distance_to_mu: to_mu,
        gamma_estimate: gamma,
        cross_backend_distance: cross,
        density,
    };
    out.json("steady.json", &summary)?;
    let mass_ok = (mass - 1.0).abs() <= crate::steady_state::MASS_TOLERANCE;
    let density_ok = summary.density.as_ref().is_none_or(|d| d.pass);
    let text = format!(
        "steady: {} iterations, stationarity residual {residual:.3e}, mass - 1 = {:.3e}, density diagnostics {}",
        summary.report.iterations,
        mass - 1.0,
        if density_ok { "pass" } else { "FAIL" }
    );
    let code = if mass_ok && density_ok { EXIT_OK } else { EXIT_INVARIANT };
    Ok(RunOutcome { code, summary: text, files: out.written().to_vec() })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumSummary {
    pub coarse: CoarseBox,
    pub kernel_residual: f64,
    pub kernel_mu_error: f64,
    pub rightmost: Vec<[f64; 2]>,
    pub gap: GapReport,
}

pub fn run_spectrum(config: &RunConfig, out: &mut ArtifactWriter) -> Result<RunOutcome> {
    if config.grid.d() != 1 {
        return Err(WfpError::Unsupported("the dense spectrum is implemented for d = 1".into()));
    }
    let coarse = CoarseBox::new(config.spectrum.n);
    let h = assemble_generator(&coarse)?;
    let eigs = all_eigenvalues(&h)?;
    let gap = verify_gap(&eigs, SIGMA);
    let density = kernel_density(&h)?;
    let mu = WignerField::mu(*h.grid());
    let mu = mu.scaled(1.0 / mu.mass());
    let summary = SpectrumSummary {
        coarse,
        kernel_residual: h.kernel_residual(),
        kernel_mu_error: density.sub(&mu)?.norm_l2() / mu.norm_l2(),
        rightmost: eigs.iter().take(config.spectrum.k).map(|z| [z.re, z.im]).collect(),
        gap,
    };
    out.csv("eigenvalues.csv", |f| write_eigenvalues_csv(f, &eigs))?;
    out.json("spectrum.json", &summary)?;
    let text = format!(
        "spectrum: {} eigenvalues on {}^2, kernel count {}, second real part {:?}, gap check {}",
        eigs.len(),
        coarse.n,
        summary.gap.kernel_count,
        summary.gap.second_real_part,
        if summary.gap.pass { "pass" } else { "FAIL" }
    );
    let code = if summary.gap.pass { EXIT_OK } else { EXIT_INVARIANT };
    Ok(RunOutcome { code, summary: text, files: out.written().to_vec() })
}

/// Human-readable table of the theory constants.
pub fn constants_table(c: &TheoryConstants) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.17e}"));
    let mut rows: Vec<(&str, String)> = vec![
        ("d", c.d.to_string()),
        ("m", c.m.to_string()),
        ("lambda", format!("{:.17e}", c.lambda)),
        ("sigma", format!("{:.17e}", c.sigma)),
        ("alpha", format!("{:.17e}", c.alpha)),
        ("a1", format!("{:.17e}", c.a1)),
        ("a2", format!("{:.17e}", c.a2)),
        ("K", format!("{:.17e}", c.k)),
        ("beta_m", format!("{:.17e}", c.beta_m)),
        ("eps_m", format!("{:.17e}", c.eps_m)),
        ("C_(A,m)", opt(c.c_am)),
        ("Sobolev constant", format!("{:.17e}", c.sobolev.constant)),
        ("Lambda_m", format!("{:.17e}", c.lambda_m)),
        ("gamma_m", format!("{:.17e}", c.gamma_m)),
        ("gamma_tilde", format!("{:.17e}", c.gamma_tilde)),
        ("||L1^eps|| (discrete)", format!("{:.17e}", c.l1_norm_estimate)),
        ("theta_m", format!("{:.17e}", c.theta_m)),
        ("log10 delta_m", format!("{:.17e}", c.log10_delta_m)),
        ("log10 sigma_m", format!("{:.17e}", c.log10_sigma_m)),
        ("Gamma_m bound", opt(c.gamma_bound)),
        ("Gamma_m estimate", opt(c.gamma_estimate)),
        ("log10 lambda_max", opt(c.log10_lambda_max)),
        ("kappa_m", opt(c.kappa_m)),
    ];
    for (k, v) in &c.exact {
        rows.push((k, format!("exact {v}")));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, v) in rows {
        s.push_str(&format!("{k:<width$}  {v}\n"));
    }
    s.push_str(&format!("Sobolev branch: {} ({})\n", c.sobolev.branch, c.sobolev.reference));
    s
}

pub fn run_constants(config: &RunConfig, out: &mut ArtifactWriter) -> Result<RunOutcome> {
    let c = compute_constants(config.m, config.grid.d(), &config.potential, &config.constants)?;
    out.json("constants.json", &c)?;
    out.text("constants.txt", &constants_table(&c))?;
    let text = format!("constants: sigma = {:.17}, beta_m = {}, eps_m = {}, K = {}", c.sigma, c.beta_m, c.eps_m, c.k);
    Ok(RunOutcome { code: EXIT_OK, summary: text, files: out.written().to_vec() })
}

/// Dispatch on the configured scenario.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let mut out = ArtifactWriter::new(config)?;
    match config.scenario {
        Scenario::Relax => run_relax(config, &mut out),
        Scenario::Steady => run_steady(config, &mut out),
        Scenario::Spectrum => run_spectrum(config, &mut out),
        Scenario::Constants => run_constants(config, &mut out),
        Scenario::Selftest => selftest::run_selftest(config, &mut out),
    }
}
