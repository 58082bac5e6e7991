//! Experiment runner: configuration, overrides, ladder runs, order fits and artifacts.
//!
//! Every CSV starts with a `# schema=` comment line and has a sibling JSON manifest.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acceptance;
use crate::asymptotics::{
    big_u_lattice_asym, linear_profile, nonlinear_limit_profile, w_l_limit, Branch, CorrelationSign, LimitProfileParams,
};
use crate::error::{Error, Result};
use crate::linear_solver::{LinearField, LinearOptions};
use crate::nonlinear::{beta_window, classify_gauge, picard_W, NonlinearitySpec, PicardOptions};
use crate::sources::{PhaseParams, ProfileSpec, Source, ZetaSpec};
use crate::symbols::{fit_asymptotics, CutoffSpec, DispersionSymbol, SymbolKind};
use crate::toy_ode::{solve_toy_nonlinear, tan_law, ToyConfig};
use crate::wavepackets::sum_packets;

pub const CSV_SCHEMA_VERSION: u32 = 1;

fn default_inner() -> f64 {
    5.0 / 8.0
}

fn default_outer() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolConfig {
    pub kind: SymbolKind,
    #[serde(default = "default_inner")]
    pub cutoff_inner: f64,
    #[serde(default = "default_outer")]
    pub cutoff_outer: f64,
}

impl SymbolConfig {
    pub fn build(&self) -> Result<DispersionSymbol> {
        match self.kind {
            SymbolKind::Model => Ok(DispersionSymbol::model()),
            SymbolKind::Whistler => Ok(DispersionSymbol::whistler(CutoffSpec::new(
                self.cutoff_inner,
                self.cutoff_outer,
            )?)),
            SymbolKind::Custom => Err(Error::Config {
                path: "symbol.kind".into(),
                msg: "custom symbols are only available through the library".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub gamma: f64,
    pub zeta_xi0: f64,
    pub profile: ProfileSpec,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            zeta_xi0: 1.0,
            profile: ProfileSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearConfig {
    #[serde(flatten)]
    pub spec: NonlinearitySpec,
    /// Packet-sum threshold exponent; `None` selects the window midpoint.
    pub beta: Option<f64>,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        Self {
            spec: NonlinearitySpec::default(),
            beta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub eps: Vec<f64>,
    /// Keep `eps` with `|cos(gamma/eps - pi/4)| >= cos_filter`.
    pub cos_filter: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            eps: vec![1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0, 1.0 / 400.0],
            cos_filter: 0.3,
        }
    }
}

impl LadderConfig {
    pub fn filtered(&self, gamma: f64) -> Vec<f64> {
        self.eps
            .iter()
            .copied()
            .filter(|e| (gamma / e - FRAC_PI_4).cos().abs() >= self.cos_filter)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Box half-length; zero selects the automatic size.
    pub half_length: f64,
    pub n_pp: usize,
    pub panel_fraction: f64,
    pub s_intervals: usize,
    pub max_points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let l = LinearOptions::default();
        let p = PicardOptions::default();
        Self {
            half_length: l.half_length,
            n_pp: l.n_pp,
            panel_fraction: l.panel_fraction,
            s_intervals: p.s_intervals,
            max_points: p.max_points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub band_tol: f64,
    pub alias_tol: f64,
    pub kernel_tol: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            band_tol: 1e-10,
            alias_tol: 1e-6,
            kernel_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T_list")]
    pub t_list: Vec<f64>,
    pub z_list: Vec<f64>,
    /// Slow time of the toy runs.
    #[serde(rename = "toy_T")]
    pub toy_t: f64,
    pub toy_harmonics: Vec<i32>,
    pub scan_eps: f64,
    #[serde(rename = "scan_T")]
    pub scan_t: f64,
    pub scan_z_lo: f64,
    pub scan_z_hi: f64,
    pub scan_z_step: f64,
    pub gauges: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_list: vec![1.25, 1.5],
            z_list: vec![0.0, 1.0, -1.0, 2.0, -2.0, 0.5],
            toy_t: 1.0,
            toy_harmonics: vec![-2, -1, 0, 2, 3],
            scan_eps: 1.0 / 100.0,
            scan_t: 1.5,
            scan_z_lo: -4.0,
            scan_z_hi: 4.0,
            scan_z_step: 0.25,
            gauges: vec![-1.0, 0.0, 0.5, 1.0, 2.0],
        }
    }
}

/// Full experiment description; only `symbol.kind` is required in a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub symbol: SymbolConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub nonlinearity: NonlinearConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            symbol: SymbolConfig {
                kind: SymbolKind::Model,
                cutoff_inner: default_inner(),
                cutoff_outer: default_outer(),
            },
            source: SourceConfig::default(),
            nonlinearity: NonlinearConfig::default(),
            ladder: LadderConfig::default(),
            grids: GridConfig::default(),
            tolerances: ToleranceConfig::default(),
            run: RunConfig::default(),
        }
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Parses a TOML value for `--set`; bare words fall back to strings.
fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `path=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must have the form path=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(path, "empty key in override path"));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(path, format!("`{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads an optional file, applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err(&p.display().to_string(), e.to_string()))?
            }
            None => toml::Table::try_from(Self::default()).map_err(|e| config_err("<defaults>", e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table = toml::from_str::<toml::Table>(text).map_err(|e| config_err("<config>", e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(|s| s.to_string())
                .unwrap_or_else(|| "<config>".into());
            config_err(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.source.gamma;
        if !(g > 0.0 && g < 0.25) {
            return Err(config_err("source.gamma", format!("must lie in (0, 1/4), got {g}")));
        }
        let r = self.source.profile.r;
        if !(r > 0.0 && r < g / 2.0) {
            return Err(config_err("source.profile.r", format!("need 0 < r < gamma/2 = {}, got {r}", g / 2.0)));
        }
        self.source.profile.validate(g)?;
        self.symbol.build()?;
        self.nonlinearity.spec.validate()?;
        if let Some(beta) = self.nonlinearity.beta {
            let (lo, hi) = beta_window(2.0, self.nonlinearity.spec.iota)?;
            if !(beta > lo && beta < hi) {
                return Err(config_err("nonlinearity.beta", format!("{beta} outside ({lo}, {hi})")));
            }
        }
        if self.ladder.eps.is_empty() || self.ladder.eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(config_err("ladder.eps", "need a non-empty list of values in (0, 1)"));
        }
        if self.grids.s_intervals < 4 {
            return Err(config_err("grids.s_intervals", "need at least 4"));
        }
        if !(self.run.scan_z_step > 0.0 && self.run.scan_z_hi >= self.run.scan_z_lo) {
            return Err(config_err("run.scan_z_step", "need a positive step over a non-empty range"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn source(&self) -> Result<Source> {
        Source::new(
            PhaseParams::new(self.source.gamma)?,
            self.source.profile.clone(),
            ZetaSpec {
                xi0: self.source.zeta_xi0,
            },
        )
    }

    pub fn linear_options(&self) -> LinearOptions {
        LinearOptions {
            half_length: self.grids.half_length,
            band_tol: self.tolerances.band_tol,
            n_pp: self.grids.n_pp,
            panel_fraction: self.grids.panel_fraction,
            alias_tol: self.tolerances.alias_tol,
        }
    }

    pub fn picard_options(&self) -> PicardOptions {
        PicardOptions {
            s_intervals: self.grids.s_intervals,
            alias_tol: self.tolerances.alias_tol,
            compute_local: false,
            max_points: self.grids.max_points,
        }
    }

    /// Scales every tolerance by `s`.
    pub fn scale_tolerances(&mut self, s: f64) {
        self.tolerances.band_tol *= s;
        self.tolerances.alias_tol *= s;
        self.tolerances.kernel_tol *= s;
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Log-log least-squares order with a 95% confidence half-width on the slope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub half_width: f64,
    pub rms_residual: f64,
    pub points: usize,
}

/// Two-sided 97.5% Student quantiles for 1..=10 degrees of freedom.
const T975: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];

pub fn fit_order(series: &[(f64, f64)]) -> Result<OrderFit> {
    if series.len() < 3 {
        return Err(Error::Input(format!("order fit needs at least 3 points, got {}", series.len())));
    }
    if let Some((e, v)) = series.iter().find(|(e, v)| !(*e > 0.0 && *v > 0.0)) {
        return Err(Error::Input(format!("order fit needs positive data, got ({e}, {v})")));
    }
    let xs: Vec<f64> = series.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = series.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let dof = n - 2;
    let se = (sse / dof as f64 / sxx).sqrt();
    let t = if dof <= T975.len() { T975[dof - 1] } else { 1.96 };
    Ok(OrderFit {
        slope,
        intercept,
        half_width: t * se,
        rms_residual: (sse / n as f64).sqrt(),
        points: n,
    })
}

/// CSV table with a versioned schema tag.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(kind: &str, header: &[&str]) -> Self {
        Self {
            schema: format!("quasirect.{kind}.v{CSV_SCHEMA_VERSION}"),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn render(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        let body = String::from_utf8(body).map_err(|e| Error::Input(e.to_string()))?;
        Ok(format!("# schema={}\n{body}", self.schema))
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Sidecar written next to every CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub schema: String,
    pub csv_file: String,
    pub csv_sha256: String,
    pub config_hash: String,
    pub code_version: String,
    pub threads: usize,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
    pub wall_clock_s: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn emit(
    dir: &Path,
    stem: &str,
    subcommand: &str,
    table: &CsvTable,
    cfg_hash: &str,
    diagnostics: BTreeMap<String, serde_json::Value>,
    started: Instant,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let text = table.render()?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let manifest = RunManifest {
        subcommand: subcommand.into(),
        schema: table.schema.clone(),
        csv_file: format!("{stem}.csv"),
        csv_sha256: hex(&Sha256::digest(text.as_bytes())),
        config_hash: cfg_hash.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
        diagnostics,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    write_atomic(&csv_path, text.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(csv_path)
}

/// Reads a CSV only when its manifest exists and its checksum matches.
pub fn read_manifested(csv_path: &Path) -> Result<(RunManifest, String)> {
    let man_path = csv_path.with_extension("json");
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&man_path).map_err(|_| {
        Error::Input(format!("{} has no manifest", csv_path.display()))
    })?)?;
    let text = fs::read_to_string(csv_path)?;
    if hex(&Sha256::digest(text.as_bytes())) != manifest.csv_sha256 {
        return Err(Error::Input(format!("{} does not match its manifest", csv_path.display())));
    }
    Ok((manifest, text))
}

/// Subcommands of the runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    SymbolCheck,
    ToyOde,
    LinearField,
    Packets,
    InterferenceScan,
    Profiles,
    GaugeSweep,
    NonlinearProfile,
    Accept,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::SymbolCheck => "symbol-check",
            Self::ToyOde => "toy-ode",
            Self::LinearField => "linear-field",
            Self::Packets => "packets",
            Self::InterferenceScan => "interference-scan",
            Self::Profiles => "profiles",
            Self::GaugeSweep => "gauge-sweep",
            Self::NonlinearProfile => "nonlinear-profile",
            Self::Accept => "accept",
        }
    }
}

type Diag = BTreeMap<String, serde_json::Value>;

fn diag<T: Serialize>(d: &mut Diag, key: &str, v: T) {
    d.insert(key.into(), serde_json::to_value(v).expect("diagnostic serializes"));
}

/// Runs one subcommand and returns the written CSV paths.
pub fn run(cmd: Subcommand, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let hash = cfg.hash();
    let sym = cfg.symbol.build()?;
    let src = cfg.source()?;
    let gamma = cfg.source.gamma;
    let mut d = Diag::new();
    let name = cmd.name();
    let emit1 = |stem: &str, t: &CsvTable, d: Diag| emit(out, stem, name, t, &hash, d, started).map(|p| vec![p]);
    match cmd {
        Subcommand::SymbolCheck => {
            let fit = fit_asymptotics(&sym, 1e2, 1e4);
            let report = serde_json::json!({
                "q_hat": fit.q_hat,
                "ell_hat": fit.ell_hat,
                "q_declared": sym.params.q,
                "ell_declared": sym.params.ell,
                "rms_residual": fit.rms_residual,
            });
            fs::create_dir_all(out)?;
            write_atomic(&out.join("symbol_check_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            let mut t = CsvTable::new("dispersion", &["xi", "p", "dp", "d2p"]);
            for i in 0..=400 {
                let xi = 10f64.powf(-2.0 + 6.0 * i as f64 / 400.0);
                let [p, dp, d2p] = sym.eval(xi);
                t.push([num(xi), num(p), num(dp), num(d2p)]);
            }
            diag(&mut d, "fit", &fit);
            emit1("symbol_check", &t, d)
        }
        Subcommand::ToyOde => {
            let mut t = CsvTable::new(
                "toy",
                &["eps", "U_re", "U_im", "tan_re", "tan_im", "tan_error", "harmonic_ratio"],
            );
            let mut errs = Vec::new();
            let mut ratios = Vec::new();
            for eps in cfg.ladder.filtered(gamma) {
                let base = ToyConfig {
                    eps,
                    gamma,
                    t_end: cfg.run.toy_t,
                    ..ToyConfig::default()
                };
                let (u, tl, err) = match solve_toy_nonlinear(&base) {
                    Ok(tr) => {
                        let u = tr.end();
                        let tl = tan_law(gamma, eps, cfg.run.toy_t);
                        (u, tl, (u - tl).norm())
                    }
                    Err(Error::BlowUp { detail }) => {
                        diag(&mut d, &format!("blowup_guard_eps_{eps}"), detail);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let ratio = acceptance::toy_harmonic_ratio(gamma, eps, cfg.run.toy_t, &cfg.run.toy_harmonics)?;
                errs.push((eps, err));
                ratios.push((eps, ratio));
                t.push([num(eps), num(u.re), num(u.im), num(tl.re), num(tl.im), num(err), num(ratio)]);
            }
            if errs.len() >= 3 {
                diag(&mut d, "tan_error_order", fit_order(&errs)?);
            }
            if ratios.len() >= 3 {
                diag(&mut d, "harmonic_ratio_order", fit_order(&ratios)?);
            }
            emit1("toy_ode", &t, d)
        }
        Subcommand::LinearField => {
            let mut t = CsvTable::new("linear_field", &["eps", "T", "z", "U_re", "U_im", "abs_U"]);
            for eps in cfg.ladder.filtered(gamma) {
                let field = LinearField::emitted(eps, &sym, &src, &cfg.linear_options())?;
                field.check_aliasing()?;
                diag(&mut d, &format!("edge_mass_eps_{eps}"), field.edge_mass());
                for &tt in &cfg.run.t_list {
                    for &z in &cfg.run.z_list {
                        let u = field.big_u_at(tt, z, None)?;
                        t.push([num(eps), num(tt), num(z), num(u.re), num(u.im), num(u.norm())]);
                    }
                }
            }
            emit1("linear_field", &t, d)
        }
        Subcommand::Packets => {
            let mut t = CsvTable::new(
                "packets",
                &["eps", "T", "z", "packets_re", "packets_im", "oracle_re", "oracle_im", "abs_diff"],
            );
            for eps in cfg.ladder.filtered(gamma) {
                let field = LinearField::emitted(eps, &sym, &src, &cfg.linear_options())?;
                for &tt in &cfg.run.t_list {
                    for &z in &cfg.run.z_list {
                        let p = sum_packets(eps, &sym, &src, tt, z)?;
                        let o = field.big_u_at(tt, z, None)?;
                        t.push([
                            num(eps),
                            num(tt),
                            num(z),
                            num(p.re),
                            num(p.im),
                            num(o.re),
                            num(o.im),
                            num((p - o).norm()),
                        ]);
                    }
                }
            }
            emit1("packets", &t, d)
        }
        Subcommand::InterferenceScan => {
            let eps = cfg.run.scan_eps;
            let field = LinearField::emitted(eps, &sym, &src, &cfg.linear_options())?;
            let mut t = CsvTable::new("interference_scan", &["eps", "T", "z", "U_re", "U_im", "abs_U"]);
            let steps = ((cfg.run.scan_z_hi - cfg.run.scan_z_lo) / cfg.run.scan_z_step).round() as usize;
            for i in 0..=steps {
                let z = cfg.run.scan_z_lo + cfg.run.scan_z_step * i as f64;
                let u = field.big_u_at(cfg.run.scan_t, z, None)?;
                t.push([num(eps), num(cfg.run.scan_t), num(z), num(u.re), num(u.im), num(u.norm())]);
            }
            emit1("interference_scan", &t, d)
        }
        Subcommand::Profiles => {
            let mut t = CsvTable::new(
                "profiles",
                &[
                    "eps", "T", "L_even_re", "L_even_im", "L_odd_re", "L_odd_im", "U_lattice_re", "U_lattice_im",
                    "W_minus_re", "W_minus_im", "W_plus_re", "W_plus_im", "W_l_re", "W_l_im",
                ],
            );
            for eps in cfg.ladder.filtered(gamma) {
                let params = LimitProfileParams::new(
                    sym.params.ell,
                    sym.params.q,
                    gamma,
                    eps,
                    cfg.nonlinearity.spec.t_win,
                    cfg.source.profile.clone(),
                )?;
                for &tt in &cfg.run.t_list {
                    let le = linear_profile(&params, tt, Branch::Even);
                    let lo = linear_profile(&params, tt, Branch::Odd);
                    let ul = big_u_lattice_asym(&params, tt);
                    let wm = nonlinear_limit_profile(&params, tt, CorrelationSign::Minus)?;
                    let wp = nonlinear_limit_profile(&params, tt, CorrelationSign::Plus)?;
                    let wl = w_l_limit(&params, tt, cfg.nonlinearity.spec.j1, cfg.nonlinearity.spec.j2);
                    t.push(
                        [eps, tt, le.re, le.im, lo.re, lo.im, ul.re, ul.im, wm.re, wm.im, wp.re, wp.im, wl.re, wl.im]
                            .map(num),
                    );
                }
            }
            if cfg.source.profile.period != crate::sources::Period::Pi {
                diag(&mut d, "four_branch_assembly", "extrapolated symmetric assembly for a 2 pi-periodic profile");
            }
            emit1("profiles", &t, d)
        }
        Subcommand::GaugeSweep => {
            let mut t = CsvTable::new("gauge_sweep", &["g", "class", "c_g", "xi_g"]);
            let mut records = Vec::new();
            for &g in &cfg.run.gauges {
                let spec = NonlinearitySpec {
                    omega: g - cfg.nonlinearity.spec.j1 as f64 + cfg.nonlinearity.spec.j2 as f64,
                    ..cfg.nonlinearity.spec
                };
                let c = classify_gauge(&spec, &sym);
                let class = serde_json::to_value(c.class)?.as_str().unwrap_or_default().to_string();
                t.push([num(c.g), class, num(c.c_g), c.xi_g.map(num).unwrap_or_default()]);
                records.push(c);
            }
            diag(&mut d, "gauge_classes", records);
            emit1("gauge_sweep", &t, d)
        }
        Subcommand::NonlinearProfile => {
            let spec = cfg.nonlinearity.spec;
            let gc = classify_gauge(&spec, &sym);
            diag(&mut d, "gauge_class", gc);
            let mut t = CsvTable::new(
                "nonlinear_profile",
                &["eps", "T", "z", "W_re", "W_im", "abs_W", "sup_abs_W", "limit_plus_re", "limit_plus_im"],
            );
            for eps in cfg.ladder.filtered(gamma) {
                let field = LinearField::emitted(eps, &sym, &src, &cfg.linear_options())?;
                let res = picard_W(&field, &sym, &spec, &cfg.run.t_list, &cfg.run.z_list, &cfg.picard_options())?;
                diag(&mut d, &format!("grid_points_eps_{eps}"), res.grid_points);
                diag(&mut d, &format!("edge_mass_eps_{eps}"), res.edge_mass);
                let params = LimitProfileParams::new(sym.params.ell, sym.params.q, gamma, eps, spec.t_win, cfg.source.profile.clone())?;
                for ((&(tt, z), w), (_, sup)) in res
                    .w
                    .points
                    .iter()
                    .zip(&res.w.values)
                    .zip(res.sup_abs.iter().flat_map(|s| std::iter::repeat(*s).take(cfg.run.z_list.len())))
                {
                    let lim = if gc.class == crate::nonlinear::ResonanceClass::Complete
                        && spec.j1 == 2
                        && spec.j2 == 0
                        && spec.eps_power() == 0
                    {
                        nonlinear_limit_profile(&params, tt, CorrelationSign::Plus)? * spec.lambda()
                    } else {
                        crate::C64::new(f64::NAN, f64::NAN)
                    };
                    t.push([eps, tt, z, w.re, w.im, w.norm(), sup, lim.re, lim.im].map(num));
                }
            }
            emit1("nonlinear_profile", &t, d)
        }
        Subcommand::Accept => {
            let reports = acceptance::run_suite(true)?;
            let mut paths = Vec::new();
            let mut summary = CsvTable::new("acceptance", &["criterion", "name", "pass", "detail"]);
            for r in &reports {
                println!("{}", r.line());
                summary.push([r.id.to_string(), r.name.to_string(), r.pass.to_string(), r.detail.clone()]);
                if let Some(csv) = &r.csv {
                    fs::create_dir_all(out)?;
                    let stem = format!("criterion_{:02}", r.id);
                    let p = out.join(format!("{stem}.csv"));
                    write_atomic(&p, csv.as_bytes())?;
                    let manifest = RunManifest {
                        subcommand: name.into(),
                        schema: csv.lines().next().unwrap_or_default().trim_start_matches("# schema=").into(),
                        csv_file: format!("{stem}.csv"),
                        csv_sha256: hex(&Sha256::digest(csv.as_bytes())),
                        config_hash: hash.clone(),
                        code_version: env!("CARGO_PKG_VERSION").into(),
                        threads: rayon::current_num_threads(),
                        diagnostics: BTreeMap::from([("seconds".to_string(), serde_json::json!(r.seconds))]),
                        wall_clock_s: r.seconds,
                    };
                    write_atomic(&out.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
                    paths.push(p);
                }
            }
            paths.push(emit(out, "acceptance", name, &summary, &hash, d, started)?);
            Ok(paths)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_of_exact_power_laws() {
        let ladder = [0.02, 0.01, 0.005, 0.0025];
        let s: Vec<(f64, f64)> = ladder.iter().map(|&e| (e, e)).collect();
        assert!((fit_order(&s).unwrap().slope - 1.0).abs() < 1e-12);
        let s: Vec<(f64, f64)> = ladder.iter().map(|&e| (e, 3.0 * e.powf(1.5))).collect();
        let f = fit_order(&s).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-6);
        assert!(f.half_width < 1e-9);
    }

    #[test]
    fn order_fit_rejects_bad_series() {
        assert!(fit_order(&[(0.1, 1.0), (0.05, 0.5)]).is_err());
        assert!(fit_order(&[(0.1, 1.0), (0.05, 0.0), (0.01, 0.1)]).is_err());
    }

    #[test]
    fn missing_kind_names_the_key() {
        let err = ExperimentConfig::from_toml("[symbol]\ncutoff_inner = 0.5\n").unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "kind"),
            e => panic!("{e}"),
        }
        let err = ExperimentConfig::from_toml("[source]\ngamma = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("symbol"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[symbol]\nkind = \"model\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides_reach_nested_fields_and_validate() {
        let cfg = ExperimentConfig::load(None, &["source.gamma=0.19".into(), "symbol.kind=whistler".into()]).unwrap();
        assert_eq!(cfg.source.gamma, 0.19);
        assert_eq!(cfg.symbol.kind, SymbolKind::Whistler);
        match ExperimentConfig::load(None, &["source.gamma=0.3".into()]).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "source.gamma"),
            e => panic!("{e}"),
        }
        match ExperimentConfig::load(None, &["source.profile.r=0.15".into()]).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "source.profile.r"),
            e => panic!("{e}"),
        }
        match ExperimentConfig::load(None, &["nonlinearity.beta=0.9".into(), "nonlinearity.iota=1.0".into()]).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "nonlinearity.beta"),
            e => panic!("{e}"),
        }
        assert!(ExperimentConfig::load(None, &["nonlinearity.nu=-1".into()]).is_err());
    }

    #[test]
    fn default_ladder_filter() {
        let l = LadderConfig::default().filtered(0.2);
        assert_eq!(l, vec![1.0 / 50.0, 1.0 / 100.0, 1.0 / 400.0]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.source.gamma = 0.19;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn artifacts_are_manifested_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let run_once = |sub: &str| {
            let out = dir.path().join(sub);
            run(Subcommand::GaugeSweep, &cfg, &out).unwrap();
            let (m, text) = read_manifested(&out.join("gauge_sweep.csv")).unwrap();
            assert!(text.starts_with("# schema=quasirect.gauge_sweep.v1\n"));
            assert_eq!(m.config_hash, cfg.hash());
            text
        };
        assert_eq!(run_once("a"), run_once("b"));
        fs::remove_file(dir.path().join("a/gauge_sweep.json")).unwrap();
        assert!(read_manifested(&dir.path().join("a/gauge_sweep.csv")).is_err());
    }
}
