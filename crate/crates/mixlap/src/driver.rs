//! Experiment configuration, the experiment runners and result emission.

use crate::bubbles::{bubble_constants, default_template, full_space_constants, talenti_bubble, BubbleParams};
use crate::error::{Error, Result};
use crate::functionals::{compactness_level, thresholds, Thresholds};
use crate::lattice::{build_grid, Field, Geometry, Grid, ModelParams};
use crate::operators::{apply_raw, energies_raw, KernelMatrix, Mode};
use crate::solvers::{
    choose_top, estimate_lambda, minimal_solution, minimize_from, minimize_in_ball, mountain_pass,
    path_scan, solve_sublinear_relative, source_scale, BranchPoint, LambdaBracket, LambdaSearch,
    MountainPassOptions, SolveReport, SolverOptions,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Nonexistence,
    Scaling,
    TwoSolution,
    Branch,
    BetaSeq,
    Harnack,
    EnergyEstimate,
    Thresholds,
    Bubbles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Solver tolerance; relative for the minimal-solution and sublinear solves.
    pub solve: f64,
    /// Λ bracket width as a fraction of the upper probe.
    pub lambda: f64,
    pub max_outer: usize,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { solve: 1e-6, lambda: 0.02, max_outer: 2000, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Bubble family for the energy-estimate scan and the asymptotics study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BubbleSettings {
    /// Decay exponent of the scale; `None` picks the default for the model.
    pub alpha: Option<f64>,
    pub cutoff_inner: f64,
    /// Bubble core radii `eps_b^alpha` tried by the scan.
    pub cores: Vec<f64>,
    /// Scale ladder for the asymptotics study; empty selects the default ladder.
    pub eps_ladder: Vec<f64>,
    /// Radial cell counts for the asymptotics study.
    pub radial_meshes: Vec<usize>,
    /// Empty places the bubble at the domain center.
    pub center: Vec<f64>,
}

impl Default for BubbleSettings {
    fn default() -> Self {
        BubbleSettings {
            alpha: None,
            cutoff_inner: 0.25,
            cores: vec![0.06, 0.04, 0.03, 0.02, 0.015, 0.01],
            eps_ladder: Vec::new(),
            radial_meshes: vec![400, 800],
            center: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelParams,
    pub geometry: Geometry,
    pub resolution: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: String,
    /// Branch λ values (ascending, positive) or nonexistence λ values (≤ 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    /// Upper probe for the Λ bracket; found by doubling from λ# when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hi: Option<f64>,
    /// Replaces `model.lambda` by this multiple of λ#.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_ball: Option<ProbeBall>,
    #[serde(default)]
    pub bubble: BubbleSettings,
    #[serde(default = "default_path_nodes")]
    pub path_nodes: usize,
}

fn default_out() -> String {
    "out/run".into()
}

fn default_path_nodes() -> usize {
    201
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, model: ModelParams, geometry: Geometry, resolution: usize) -> Self {
        ExperimentConfig {
            experiment,
            model,
            geometry,
            resolution,
            tolerances: Tolerances::default(),
            seed: 0,
            out: default_out(),
            lambdas: None,
            lambda_hi: None,
            lambda_fraction: None,
            init_count: None,
            tau_step: None,
            k_max: None,
            eps_list: None,
            probe_ball: None,
            bubble: BubbleSettings::default(),
            path_nodes: default_path_nodes(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidParams(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Experiment-specific completeness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        let t = &self.tolerances;
        if !(t.solve > 0.0 && t.solve < 1.0 && t.lambda > 0.0 && t.lambda < 1.0) {
            return bad("tolerances must lie in (0, 1)");
        }
        if t.max_outer == 0 || t.max_iter == 0 {
            return bad("iteration caps must be positive");
        }
        if self.geometry.dim() != self.model.dim_n {
            return bad("geometry dimension must equal dim_n");
        }
        match self.experiment {
            ExperimentKind::Branch => match &self.lambdas {
                Some(l) if !l.is_empty() && l[0] > 0.0 && l.windows(2).all(|w| w[0] < w[1]) => {}
                _ => return bad("branch needs an ascending list of positive lambdas"),
            },
            ExperimentKind::Nonexistence => {
                match &self.lambdas {
                    Some(l) if !l.is_empty() && l.iter().all(|v| *v <= 0.0) => {}
                    _ => return bad("nonexistence needs a list of lambdas <= 0"),
                }
                if self.init_count.unwrap_or(0) == 0 {
                    return bad("nonexistence needs init_count > 0");
                }
            }
            ExperimentKind::Scaling => match self.tau_step {
                Some(s) if s > 0.0 && s <= 0.1 => {}
                _ => return bad("scaling needs tau_step in (0, 0.1]"),
            },
            ExperimentKind::BetaSeq => {
                if self.k_max.unwrap_or(0) == 0 {
                    return bad("beta_seq needs k_max > 0");
                }
                if !(self.model.lambda > 0.0) {
                    return bad("beta_seq needs lambda > 0 for the radii");
                }
            }
            ExperimentKind::Harnack => {
                match &self.eps_list {
                    Some(l) if !l.is_empty() && l.windows(2).all(|w| w[0] > w[1]) && l.iter().all(|e| *e > 0.0) => {}
                    _ => return bad("harnack needs a decreasing list of positive eps"),
                }
                if self.probe_ball.is_none() {
                    return bad("harnack needs a probe ball");
                }
            }
            ExperimentKind::TwoSolution | ExperimentKind::EnergyEstimate => {
                if self.bubble.cores.is_empty() {
                    return bad("the energy-estimate scan needs at least one bubble core");
                }
            }
            ExperimentKind::Bubbles => {
                if self.bubble.radial_meshes.len() < 2 {
                    return bad("bubbles needs at least two radial meshes");
                }
            }
            ExperimentKind::Thresholds => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Verdict {
    fn check(name: &str, ok: bool, detail: String) -> Self {
        Verdict { name: name.into(), status: if ok { Status::Pass } else { Status::Fail }, detail }
    }
}

/// CSV cell. Text cells must not parse as a number or a boolean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Flag(bool),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Flag(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            // `{:?}` is the shortest representation that parses back to the same bits
            Cell::Num(v) => format!("{v:?}"),
            Cell::Flag(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn parse(s: &str) -> Cell {
        if let Ok(v) = s.parse::<f64>() {
            Cell::Num(v)
        } else if let Ok(b) = s.parse::<bool>() {
            Cell::Flag(b)
        } else {
            Cell::Text(s.into())
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Column values as numbers; non-numeric cells become NaN.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let io = |e: csv::Error| Error::Io(e.to_string());
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let columns = rd.headers().map_err(io)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            rows.push(rec.map_err(io)?.iter().map(Cell::parse).collect());
        }
        Ok(Table { name: name.into(), columns, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    /// `sha256("blob <len>\0" + canonical config JSON)`.
    pub config_hash: String,
}

impl Provenance {
    pub fn of(config: &ExperimentConfig) -> Self {
        let body = serde_json::to_string(config).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        Provenance { crate_version: env!("CARGO_PKG_VERSION").into(), config_hash: format!("{:x}", h.finalize()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub verdicts: Vec<Verdict>,
    pub tables: Vec<Table>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        ExperimentReport {
            config: config.clone(),
            verdicts: Vec::new(),
            tables: Vec::new(),
            provenance: Provenance::of(config),
        }
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.status == Status::Pass)
    }

    /// 0 when every verdict passes, 2 on any failure, else 3 for an inconclusive one.
    pub fn exit_code(&self) -> i32 {
        if self.verdicts.iter().any(|v| v.status == Status::Fail) {
            2
        } else if self.verdicts.iter().any(|v| v.status == Status::Inconclusive) {
            3
        } else {
            0
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    fn absorb(&mut self, other: ExperimentReport) {
        self.verdicts.extend(other.verdicts);
        self.tables.extend(other.tables);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Writes `<prefix>_<table>.csv` per table, or `<prefix>.json`.
pub fn emit_outputs(report: &ExperimentReport, prefix: &Path, format: Format) -> Result<Vec<PathBuf>> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let stem = prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut written = Vec::new();
    match format {
        Format::Json => {
            let path = prefix.with_file_name(format!("{stem}.json"));
            std::fs::write(&path, report.to_json()?).map_err(io)?;
            written.push(path);
        }
        Format::Csv => {
            for t in &report.tables {
                let path = prefix.with_file_name(format!("{stem}_{}.csv", t.name));
                std::fs::write(&path, t.to_csv()?).map_err(io)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Grid and kernel for a configuration.
pub struct Setup {
    pub grid: Grid,
    pub kernel: KernelMatrix,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let grid = build_grid(&config.geometry, config.resolution)?;
        let kernel = crate::operators::assemble_kernel(&grid, &config.model)?;
        Ok(Setup { grid, kernel })
    }
}

/// Runs the experiment named in the configuration.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut cfg = config.clone();
    if let Some(f) = cfg.lambda_fraction {
        let (th, _) = estimate_thresholds(&cfg.model, &cfg.geometry)?;
        cfg.model = cfg.model.with_lambda(f * th.lambda_sharp);
    }
    match cfg.experiment {
        ExperimentKind::Thresholds => run_thresholds(&cfg),
        ExperimentKind::Bubbles => run_bubbles(&cfg),
        _ => {
            let setup = Setup::new(&cfg)?;
            let (grid, kernel) = (&setup.grid, &setup.kernel);
            let params = cfg.model;
            let mut report = ExperimentReport::new(config);
            let sub = match cfg.experiment {
                ExperimentKind::Branch => run_branch_diagram(&cfg, cfg.lambdas.as_deref().unwrap_or(&[]), &params, kernel)?,
                ExperimentKind::Nonexistence => run_nonexistence_sweep(&cfg, grid, kernel)?,
                ExperimentKind::Scaling => run_scaling_experiment(&cfg, grid, kernel)?,
                ExperimentKind::TwoSolution => run_two_solution(&cfg, &params, grid, kernel, true)?,
                ExperimentKind::EnergyEstimate => run_two_solution(&cfg, &params, grid, kernel, false)?,
                ExperimentKind::BetaSeq => run_beta_sequence(&cfg, cfg.k_max.unwrap_or(1), &params, kernel)?,
                ExperimentKind::Harnack => run_harnack_floor(&cfg, grid, kernel)?,
                ExperimentKind::Thresholds | ExperimentKind::Bubbles => unreachable!(),
            };
            report.absorb(sub);
            Ok(report)
        }
    }
}

/// Threshold set from the bubble estimate of the Sobolev constant and the analytic
/// embedding constants `C1 = S0^{-r/p}/r`, `C2 = |Ω|^{1/q-1/r} S0^{-q/p}/q`.
pub fn estimate_thresholds(params: &ModelParams, geometry: &Geometry) -> Result<(Thresholds, f64)> {
    if !params.p_star().is_finite() {
        return Err(Error::InvalidParams("thresholds need N > p".into()));
    }
    let template = default_template(params)?;
    let (k1, k2) = full_space_constants(&template, params, 400)?;
    let s0 = k1 / k2.powf(params.p / params.p_star());
    let omega = geometry.measure();
    let (p, q, r) = (params.p, params.q, params.r);
    let c1 = s0.powf(-r / p) / r;
    let c2 = omega.powf(1.0 / q - 1.0 / r) * s0.powf(-q / p) / q;
    Ok((thresholds(params, s0, omega, c1, c2)?, s0))
}

fn run_thresholds(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(cfg);
    let (th, s0) = estimate_thresholds(&cfg.model, &cfg.geometry)?;
    let mut t = Table::new("thresholds", &["quantity", "value"]);
    for (k, v) in [
        ("S0_est", s0),
        ("lambda_star", th.lambda_star),
        ("lambda_star_star", th.lambda_star_star),
        ("lambda_sharp", th.lambda_sharp),
        ("r0", th.r0),
        ("delta0", th.delta0),
        ("compactness_level", compactness_level(&cfg.model, s0)),
    ] {
        t.push(vec![k.into(), v.into()]);
    }
    t.push(vec!["apq_ok".into(), th.apq_ok.into()]);
    report.tables.push(t);
    let ok = th.lambda_sharp > 0.0
        && th.lambda_sharp == th.lambda_star.min(th.lambda_star_star)
        && th.r0 > 0.0
        && th.delta0 > 0.0;
    report.verdicts.push(Verdict::check(
        "thresholds_positive",
        ok,
        format!("lambda_sharp {:e}, r0 {:e}, delta0 {:e}", th.lambda_sharp, th.r0, th.delta0),
    ));
    Ok(report)
}

fn search_for(cfg: &ExperimentConfig, cap: f64) -> LambdaSearch {
    LambdaSearch { tol: cfg.tolerances.solve, max_outer: cfg.tolerances.max_outer, blowup_cap: cap }
}

/// Doubles from `lambda_sharp` until the minimal-solution probe fails.
pub fn find_lambda_hi(params: &ModelParams, kernel: &KernelMatrix, lambda_sharp: f64, tol: f64, max_outer: usize) -> Result<f64> {
    let unbounded = LambdaSearch { tol, max_outer, blowup_cap: f64::INFINITY };
    let (base, _) = minimal_solution(&params.with_lambda(lambda_sharp), kernel, &unbounded)?;
    let search = LambdaSearch { blowup_cap: 1e3 * base.sup_norm.max(1.0), ..unbounded };
    let mut lam = 2.0 * lambda_sharp;
    for _ in 0..40 {
        let (pr, _) = minimal_solution(&params.with_lambda(lam), kernel, &search)?;
        if !pr.solvable {
            return Ok(lam);
        }
        lam *= 2.0;
    }
    Err(Error::Precondition("no unsolvable lambda found by doubling".into()))
}

/// Minimal-solution branch over `lambdas` with the Λ bracket and a probe above it.
pub fn run_branch_diagram(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    params: &ModelParams,
    kernel: &KernelMatrix,
) -> Result<ExperimentReport> {
    if lambdas.is_empty() || lambdas[0] <= 0.0 || lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams("lambda list must be positive and ascending".into()));
    }
    let mut report = ExperimentReport::new(cfg);
    let (th, _) = estimate_thresholds(params, &cfg.geometry)?;
    let ls = th.lambda_sharp;
    let tol = cfg.tolerances.solve;
    let max_outer = cfg.tolerances.max_outer;
    let hi0 = match cfg.lambda_hi {
        Some(h) => h,
        None => find_lambda_hi(params, kernel, ls, tol, max_outer)?,
    };
    let bracket: LambdaBracket = estimate_lambda(params, kernel, ls, hi0, cfg.tolerances.lambda * hi0, tol, max_outer)?;
    let search = search_for(cfg, bracket.blowup_cap);
    let points: Vec<Result<BranchPoint>> = lambdas
        .par_iter()
        .map(|&lam| {
            let (pr, rep) = minimal_solution(&params.with_lambda(lam), kernel, &search)?;
            Ok(BranchPoint { lambda: lam, sup_norm: pr.sup_norm, energy_total: rep.energy.total, converged: pr.solvable })
        })
        .collect();
    let points: Vec<BranchPoint> = points.into_iter().collect::<Result<_>>()?;
    let (above, _) = minimal_solution(&params.with_lambda(2.0 * bracket.hi), kernel, &search)?;

    let mut t = Table::new("branch", &["lambda", "sup_norm", "energy", "converged"]);
    for b in &points {
        t.push(vec![b.lambda.into(), b.sup_norm.into(), b.energy_total.into(), b.converged.into()]);
    }
    report.tables.push(t);
    let mut t = Table::new("lambda_probes", &["lambda", "solvable", "sup_norm", "outer_iterations", "used_supersolution"]);
    for pr in bracket.probes.iter().chain(std::iter::once(&above)) {
        t.push(vec![
            pr.lambda.into(),
            pr.solvable.into(),
            pr.sup_norm.into(),
            pr.outer_iterations.into(),
            pr.used_supersolution.into(),
        ]);
    }
    report.tables.push(t);
    let mut t = Table::new("lambda_bracket", &["lambda_sharp", "lo", "hi", "blowup_cap"]);
    t.push(vec![ls.into(), bracket.lo.into(), bracket.hi.into(), bracket.blowup_cap.into()]);
    report.tables.push(t);

    let conv: Vec<&BranchPoint> = points.iter().filter(|b| b.converged).collect();
    let all_conv = conv.len() == points.len();
    let mono = conv.windows(2).all(|w| w[1].sup_norm >= w[0].sup_norm);
    report.verdicts.push(Verdict {
        name: "branch_sup_norm_nondecreasing".into(),
        status: if !mono {
            Status::Fail
        } else if all_conv {
            Status::Pass
        } else {
            Status::Inconclusive
        },
        detail: format!("{} of {} points converged", conv.len(), points.len()),
    });
    let neg = conv.iter().all(|b| b.energy_total < 0.0);
    report.verdicts.push(Verdict::check(
        "branch_energy_negative",
        neg && !conv.is_empty(),
        format!("max energy {:e}", conv.iter().map(|b| b.energy_total).fold(f64::NEG_INFINITY, f64::max)),
    ));
    report.verdicts.push(Verdict::check(
        "lambda_bracket_finite",
        bracket.lo.is_finite() && bracket.hi.is_finite() && bracket.lo >= ls && bracket.lo < bracket.hi,
        format!("[{}, {}] with lambda_sharp {}", bracket.lo, bracket.hi, ls),
    ));
    report.verdicts.push(Verdict::check(
        "no_solution_above_bracket",
        !above.solvable,
        format!("probe at {} reached sup {:e} after {} iterations", above.lambda, above.sup_norm, above.outer_iterations),
    ));
    Ok(report)
}

/// Seeded positive random fields scaled to `ρ_ε = rho`.
fn random_starts(kernel: &KernelMatrix, params: &ModelParams, count: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<Field> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..kernel.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (loc, nl) = energies_raw(&v, kernel, params);
            let r = (loc + params.eps * nl).powf(1.0 / params.p);
            kernel.zero_field().with_values(v.iter().map(|x| x * rho / r).collect())
        })
        .collect()
}

/// Decay threshold for "only the trivial solution was found".
pub const TRIVIAL_SUP: f64 = 1e-6;

/// Descent from random starts for λ ≤ 0, plus a contrast run at λ#/2.
///
/// Decay of every run is numerical evidence of nonexistence, not a proof.
pub fn run_nonexistence_sweep(cfg: &ExperimentConfig, _grid: &Grid, kernel: &KernelMatrix) -> Result<ExperimentReport> {
    let params = cfg.model;
    let lambdas = cfg.lambdas.clone().unwrap_or_default();
    if lambdas.iter().any(|l| *l > 0.0) {
        return Err(Error::InvalidParams("nonexistence runs need lambda <= 0".into()));
    }
    let count = cfg.init_count.unwrap_or(0).max(1);
    let mut report = ExperimentReport::new(cfg);
    let (th, _) = estimate_thresholds(&params, &cfg.geometry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = random_starts(kernel, &params, count, 0.5 * th.r0, &mut rng);
    let opts = SolverOptions { max_iter: cfg.tolerances.max_iter, max_outer: cfg.tolerances.max_outer };
    let decay_tol = cfg.tolerances.solve.min(1e-10);
    let regime = if params.p > 2.0 && params.q >= 2.0 { "proposition regime" } else { "extended regime" };
    let mut t = Table::new("runs", &["lambda", "start", "sup_norm", "energy", "iterations", "converged"]);
    for &lam in &lambdas {
        let prm = params.with_lambda(lam);
        let runs: Vec<Result<SolveReport>> = starts.par_iter().map(|s| minimize_from(s, &prm, kernel, decay_tol, &opts)).collect();
        let runs: Vec<SolveReport> = runs.into_iter().collect::<Result<_>>()?;
        for (k, r) in runs.iter().enumerate() {
            t.push(vec![lam.into(), k.into(), r.field.sup_norm().into(), r.energy.total.into(), r.iterations.into(), r.converged.into()]);
        }
        let worst = runs.iter().map(|r| r.field.sup_norm()).fold(0.0, f64::max);
        let nontrivial = runs.iter().any(|r| r.converged && r.field.sup_norm() >= TRIVIAL_SUP);
        let status = if nontrivial {
            Status::Fail
        } else if runs.iter().all(|r| r.converged) && worst < TRIVIAL_SUP {
            Status::Pass
        } else {
            Status::Inconclusive
        };
        report.verdicts.push(Verdict {
            name: format!("only_trivial_solution_lambda_{lam}"),
            status,
            detail: format!("{count} starts, largest final sup {worst:e} ({regime}; numerical evidence, not proof)"),
        });
    }
    // contrast: a positive λ below the threshold must leave a nontrivial state
    let lam = 0.5 * th.lambda_sharp;
    let prm = params.with_lambda(lam);
    let tol = cfg.tolerances.solve * source_scale(&prm, kernel);
    let contrast: Vec<Result<SolveReport>> = starts.par_iter().take(3).map(|s| minimize_from(s, &prm, kernel, tol, &opts)).collect();
    let contrast: Vec<SolveReport> = contrast.into_iter().collect::<Result<_>>()?;
    for (k, r) in contrast.iter().enumerate() {
        t.push(vec![lam.into(), k.into(), r.field.sup_norm().into(), r.energy.total.into(), r.iterations.into(), r.converged.into()]);
    }
    report.tables.push(t);
    let found = contrast.iter().any(|r| r.converged && r.energy.total < 0.0 && r.field.values.iter().all(|v| *v > 0.0));
    report.verdicts.push(Verdict::check(
        "contrast_run_nontrivial",
        found,
        format!("lambda {lam:e}; sup norms {:?}", contrast.iter().map(|r| r.field.sup_norm()).collect::<Vec<_>>()),
    ));
    Ok(report)
}

/// Multilinear interpolation of the zero-extended field at `x`.
fn interpolate(u: &Field, grid: &Grid, x: &[f64]) -> f64 {
    let d = grid.dim;
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for k in 0..d {
        let s = (x[k] - grid.origin[k]) / grid.spacing[k];
        let f = s.floor();
        base[k] = f as isize;
        frac[k] = s - f;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut m = [0isize; 3];
        for k in 0..d {
            let bit = (corner >> k) & 1;
            m[k] = base[k] + bit as isize;
            w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
        }
        if w == 0.0 {
            continue;
        }
        if let Some(j) = grid.interior_at(&m[..d]) {
            acc += w * u.values[j];
        }
    }
    acc
}

/// `u_τ(x) = u(c + τ(x - c))` about the domain center `c`.
pub fn resample(u: &Field, grid: &Grid, tau: f64) -> Result<Field> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParams("tau must be positive".into()));
    }
    let c = grid.geometry.center();
    let vals: Vec<f64> = (0..grid.len())
        .map(|i| {
            let x = grid.node(i);
            let y: Vec<f64> = x.iter().zip(&c).map(|(a, b)| b + tau * (a - b)).collect();
            interpolate(u, grid, &y)
        })
        .collect();
    // the support of u_τ must stay inside the grid: compare masses under the scaling law
    if tau < 1.0 {
        let h = grid.spacing.iter().fold(0.0f64, |m, v| m.max(*v));
        let reach = (0..grid.len())
            .filter(|&i| u.values[i] != 0.0)
            .map(|i| {
                let x = grid.node(i);
                let y: Vec<f64> = x.iter().zip(&c).map(|(a, b)| b + (a - b) / tau).collect();
                grid.geometry.boundary_distance(&y)
            })
            .fold(f64::INFINITY, f64::min);
        if reach < 0.5 * h {
            return Err(Error::OutOfGrid(format!("tau = {tau} pushes the support out of the domain")));
        }
    }
    Ok(u.with_values(vals))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub tau: f64,
    pub grad_ratio: f64,
    pub grad_expected: f64,
    pub gagliardo_ratio: f64,
    pub gagliardo_expected: f64,
    /// Forward difference of `τ ↦ I(u_τ)` at `τ = 1⁺` from the scaling law.
    pub derivative: f64,
    /// `-(1-s) ε [u]^p`.
    pub bound: f64,
}

impl ScalingCheck {
    pub fn grad_error(&self) -> f64 {
        (self.grad_ratio / self.grad_expected - 1.0).abs()
    }

    pub fn gagliardo_error(&self) -> f64 {
        (self.gagliardo_ratio / self.gagliardo_expected - 1.0).abs()
    }

    /// Bound holds with slack `rel` of its size.
    pub fn bound_holds(&self, rel: f64) -> bool {
        self.derivative <= self.bound + rel * self.bound.abs()
    }
}

/// `(1 - (1+h)^{sp-p})/h`, which tends to `p - ps`.
pub fn derivative_limit(p: f64, s: f64, h: f64) -> f64 {
    (1.0 - (1.0 + h).powf(s * p - p)) / h
}

/// Scaling ratios on the resampled field and the one-sided derivative of `I(u_τ)`.
pub fn run_scaling_test(u: &Field, grid: &Grid, params: &ModelParams, kernel: &KernelMatrix, tau_step: f64) -> Result<ScalingCheck> {
    kernel.check(u)?;
    if !(tau_step > 0.0 && tau_step <= 0.1) {
        return Err(Error::InvalidParams("tau_step must lie in (0, 0.1]".into()));
    }
    if u.values.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroField);
    }
    if grid.dim != params.dim_n {
        return Err(Error::InvalidParams("scaling laws need grid dimension = N".into()));
    }
    let (p, s, n) = (params.p, params.s, params.n());
    let tau = 1.0 + tau_step;
    let ut = resample(u, grid, tau)?;
    let (a, b) = energies_raw(&u.values, kernel, params);
    let (at, bt) = energies_raw(&ut.values, kernel, params);
    let vol = kernel.cell_volume;
    let lq: f64 = u.values.iter().map(|v| v.max(0.0).powf(params.q)).sum::<f64>() * vol;
    let lr: f64 = u.values.iter().map(|v| v.max(0.0).powf(params.r)).sum::<f64>() * vol;
    let i_tau = |t: f64| {
        t.powf(p - n) * a / p + params.eps * t.powf(s * p - n) * b / p
            - params.lambda * t.powf(-n) * lq / params.q
            - t.powf(-n) * lr / params.r
    };
    let h = 1e-6;
    Ok(ScalingCheck {
        tau,
        grad_ratio: at / a,
        grad_expected: tau.powf(p - n),
        gagliardo_ratio: bt / b,
        gagliardo_expected: tau.powf(s * p - n),
        derivative: (i_tau(1.0 + h) - i_tau(1.0)) / h,
        bound: -(1.0 - s) * params.eps * b,
    })
}

/// Smooth compactly supported bump `cos²` in the inner half of the domain.
pub fn smooth_bump(grid: &Grid) -> Field {
    let c = grid.geometry.center();
    let rad = 0.5 * grid.geometry.boundary_distance(&c);
    Field::from_fn(grid, |x| {
        let r = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / rad;
        if r < 1.0 {
            (0.5 * std::f64::consts::PI * r).cos().powi(4)
        } else {
            0.0
        }
    })
}

fn run_scaling_experiment(cfg: &ExperimentConfig, grid: &Grid, kernel: &KernelMatrix) -> Result<ExperimentReport> {
    let params = cfg.model;
    let tau_step = cfg.tau_step.unwrap_or(0.05);
    let mut report = ExperimentReport::new(cfg);
    let mut t = Table::new(
        "scaling",
        &["field", "tau", "grad_ratio", "grad_expected", "gagliardo_ratio", "gagliardo_expected", "derivative", "bound"],
    );
    let row = |name: &str, c: &ScalingCheck| -> Vec<Cell> {
        vec![
            name.into(),
            c.tau.into(),
            c.grad_ratio.into(),
            c.grad_expected.into(),
            c.gagliardo_ratio.into(),
            c.gagliardo_expected.into(),
            c.derivative.into(),
            c.bound.into(),
        ]
    };
    let bump = run_scaling_test(&smooth_bump(grid), grid, &params, kernel, tau_step)?;
    t.push(row("bump", &bump));
    report.verdicts.push(Verdict::check(
        "scaling_ratios",
        bump.grad_error() < 0.02 && bump.gagliardo_error() < 0.02,
        format!("gradient error {:.3e}, Gagliardo error {:.3e}", bump.grad_error(), bump.gagliardo_error()),
    ));
    // λ = 0 descent limits
    let prm = params.with_lambda(0.0);
    let rho = estimate_thresholds(&prm, &cfg.geometry).map(|(th, _)| (0.5 * th.r0).min(1.0)).unwrap_or(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = cfg.init_count.unwrap_or(3).max(1);
    let starts = random_starts(kernel, &prm, count, rho, &mut rng);
    let opts = SolverOptions { max_iter: cfg.tolerances.max_iter, max_outer: cfg.tolerances.max_outer };
    let limits: Vec<Result<SolveReport>> =
        starts.par_iter().map(|s| minimize_from(s, &prm, kernel, cfg.tolerances.solve, &opts)).collect();
    let mut all_hold = true;
    let mut worst = f64::NEG_INFINITY;
    for (k, lim) in limits.into_iter().enumerate() {
        let lim = lim?;
        let c = run_scaling_test(&lim.field, grid, &prm, kernel, tau_step)?;
        all_hold &= c.bound_holds(0.05);
        worst = worst.max((c.derivative - c.bound) / c.bound.abs());
        t.push(row(&format!("descent_{k}"), &c));
    }
    report.tables.push(t);
    report.verdicts.push(Verdict::check(
        "scaling_derivative_bound",
        all_hold,
        format!("largest relative excess over the bound {worst:.3e}"),
    ));
    let lim = derivative_limit(params.p, params.s, 1e-6);
    let want = params.p - params.p * params.s;
    report.verdicts.push(Verdict::check(
        "derivative_limit",
        ((lim - want) / want).abs() < 1e-4,
        format!("{lim} against {want}"),
    ));
    Ok(report)
}

/// Minimizer, energy-estimate scan and mountain-pass solution.
///
/// With `full = false` only the scan runs.
pub fn run_two_solution(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    grid: &Grid,
    kernel: &KernelMatrix,
    full: bool,
) -> Result<ExperimentReport> {
    let (th, s0) = estimate_thresholds(params, &cfg.geometry)?;
    if !(params.lambda > 0.0 && params.lambda < th.lambda_sharp) {
        return Err(Error::Precondition(format!("need 0 < lambda < lambda_sharp = {}", th.lambda_sharp)));
    }
    let subcritical = params.r < params.p_star();
    if !th.apq_ok && !subcritical {
        return Err(Error::Precondition("the (p, q) range condition fails".into()));
    }
    let mut report = ExperimentReport::new(cfg);
    let tol = cfg.tolerances.solve;
    let base = minimize_in_ball(params, kernel, th.r0, tol)?;
    let c_min = base.energy.total;
    let window = c_min + compactness_level(params, s0);
    report.verdicts.push(Verdict::check(
        "minimizer_negative_energy",
        base.converged && c_min < 0.0,
        format!("c_min {c_min:e}, residual {:e}", base.residual_norm),
    ));

    let alpha = cfg.bubble.alpha.unwrap_or_else(|| crate::bubbles::default_alpha(params));
    let center = if cfg.bubble.center.is_empty() { cfg.geometry.center() } else { cfg.bubble.center.clone() };
    let mut scan = Table::new("scan", &["core", "eps_b", "top_scale", "scan_max", "window"]);
    let mut best: Option<(f64, Field)> = None;
    for &core in &cfg.bubble.cores {
        let eps_b = core.powf(1.0 / alpha);
        let bp = match BubbleParams::new(center.clone(), alpha, eps_b, cfg.bubble.cutoff_inner) {
            Ok(bp) => bp,
            Err(_) => continue,
        };
        let bump = match talenti_bubble(&bp, grid, params) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let (r0_scale, top) = choose_top(&base.field, &bump, params, kernel, th.r0)?;
        let (m, _) = path_scan(&base.field, &top, params, kernel, 400);
        scan.push(vec![core.into(), eps_b.into(), r0_scale.into(), m.into(), window.into()]);
        if best.as_ref().map(|b| m < b.0).unwrap_or(true) {
            best = Some((m, top));
        }
    }
    report.tables.push(scan);
    let (scan_max, top) = best.ok_or_else(|| Error::Precondition("no admissible bubble in the ladder".into()))?;
    let scan_ok = scan_max < window;
    let caveat = if subcritical { " (subcritical r)" } else { "" };
    report.verdicts.push(Verdict::check(
        "energy_estimate_scan",
        scan_ok,
        format!("best scan max {scan_max:e} against window {window:e}{caveat}"),
    ));
    if !full || !scan_ok {
        return Ok(report);
    }
    let mp = mountain_pass(&base, &top, params, kernel, cfg.path_nodes, tol, window, &MountainPassOptions::default())?;
    let c_mp = mp.energy.total;
    report.verdicts.push(Verdict::check(
        "mountain_pass_level_in_window",
        mp.converged && c_mp > 0.0 && c_mp < window,
        format!("c_mp {c_mp:e} in (0, {window:e}), residual {:e}", mp.residual_norm),
    ));
    let gap = mp.field.values.iter().zip(&base.field.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    report.verdicts.push(Verdict::check(
        "solutions_distinct",
        gap > 10.0 * tol,
        format!("sup-norm gap {gap:e}"),
    ));
    let mut sol = Table::new("solutions", &["kind", "energy", "sup_norm", "residual", "iterations", "converged"]);
    for (name, r) in [("minimizer", &base), ("mountain_pass", &mp)] {
        sol.push(vec![
            name.into(),
            r.energy.total.into(),
            r.field.sup_norm().into(),
            r.residual_norm.into(),
            r.iterations.into(),
            r.converged.into(),
        ]);
    }
    report.tables.push(sol);
    Ok(report)
}

/// Discrete Dirichlet-Laplacian eigenvectors, ascending, as columns.
fn laplacian_basis(kernel: &KernelMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = kernel.len();
    if n > 2048 {
        return Err(Error::InvalidParams("the eigenbasis is dense; use at most 2048 nodes".into()));
    }
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = kernel.apply_laplacian(&e);
        for i in 0..n {
            m[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((vals, vecs))
}

/// `log(‖u‖_q / ρ_ε(u))` and its gradient.
fn log_ratio(u: &[f64], kernel: &KernelMatrix, params: &ModelParams) -> (f64, Vec<f64>) {
    let vol = kernel.cell_volume;
    let q = params.q;
    let lq: f64 = u.iter().map(|v| v.abs().powf(q)).sum::<f64>() * vol;
    let (loc, nl) = energies_raw(u, kernel, params);
    let rp = loc + params.eps * nl;
    let a = apply_raw(u, kernel, params, Mode::Mixed);
    let g = u
        .iter()
        .zip(&a)
        .map(|(x, ai)| vol * x.abs().powf(q - 1.0).copysign(*x) / lq - ai / rp)
        .collect();
    (lq.ln() / q - rp.ln() / params.p, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub k: usize,
    pub beta: f64,
    pub rho: f64,
    pub converged: bool,
}

/// Ascent of the log-ratio over the span of basis columns `k0..`, from `start` coefficients.
fn tail_ascent(
    kernel: &KernelMatrix,
    params: &ModelParams,
    basis: &DMatrix<f64>,
    mu: &[f64],
    k0: usize,
    mut c: Vec<f64>,
    max_iter: usize,
) -> (f64, Vec<f64>, bool) {
    let dim = c.len();
    let tail = basis.columns(k0, dim);
    let to_u = |c: &[f64]| -> Vec<f64> { (tail * DVector::from_column_slice(c)).as_slice().to_vec() };
    let (mut f, mut g) = log_ratio(&to_u(&c), kernel, params);
    let mut step = 1.0;
    let mut converged = false;
    for _ in 0..max_iter {
        // coefficient gradient, scaled by the inverse Laplacian eigenvalue
        let gc = tail.tr_mul(&DVector::from_column_slice(&g));
        let dir: Vec<f64> = gc.iter().enumerate().map(|(j, v)| v * mu[k0] / mu[k0 + j]).collect();
        let slope: f64 = gc.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let cn: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if slope.sqrt() <= 1e-9 * cn.max(1e-300) {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = c.iter().zip(&dir).map(|(a, d)| a + step * cn * d / slope.sqrt()).collect();
            let (ft, gt) = log_ratio(&to_u(&trial), kernel, params);
            if ft.is_finite() && ft >= f + 1e-4 * step * cn * slope.sqrt() {
                let gain = ft - f;
                c = trial;
                f = ft;
                g = gt;
                step = (step * 2.0).min(1.0);
                accepted = true;
                if gain <= 1e-14 * f.abs().max(1.0) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    (f.exp(), c, converged)
}

/// `β_k = max ‖u‖_q/ρ_ε(u)` over the span of the Laplacian modes `k, k+1, …`, and
/// `ρ_k = (2pλβ_k^q/q)^{1/(p-q)}`.
pub fn beta_sequence(k_max: usize, params: &ModelParams, kernel: &KernelMatrix, max_iter: usize) -> Result<Vec<BetaRow>> {
    let n = kernel.len();
    if k_max == 0 || k_max > n {
        return Err(Error::InvalidParams("need 1 <= k_max <= node count".into()));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidParams("the radii need lambda > 0".into()));
    }
    let (mu, basis) = laplacian_basis(kernel)?;
    let (p, q) = (params.p, params.q);
    let mut rows = Vec::with_capacity(k_max);
    // downward, each level warm-started from the maximizer one level up
    let mut carry: Option<Vec<f64>> = None;
    for k in (1..=k_max).rev() {
        let k0 = k - 1;
        let dim = n - k0;
        let mut first = vec![0.0; dim];
        first[0] = 1.0;
        let mut cands = vec![first];
        if let Some(prev) = &carry {
            let mut c = vec![0.0; dim];
            c[1..].copy_from_slice(prev);
            cands.push(c);
        }
        let mut best: Option<(f64, Vec<f64>, bool)> = None;
        for c0 in cands {
            let r = tail_ascent(kernel, params, &basis, &mu, k0, c0, max_iter);
            if best.as_ref().map(|b| r.0 > b.0).unwrap_or(true) {
                best = Some(r);
            }
        }
        let (beta, c, conv) = best.unwrap_or((0.0, Vec::new(), false));
        let rho = (2.0 * p * params.lambda * beta.powf(q) / q).powf(1.0 / (p - q));
        rows.push(BetaRow { k, beta, rho, converged: conv });
        carry = Some(c);
    }
    rows.reverse();
    Ok(rows)
}

pub fn run_beta_sequence(cfg: &ExperimentConfig, k_max: usize, params: &ModelParams, kernel: &KernelMatrix) -> Result<ExperimentReport> {
    let rows = beta_sequence(k_max, params, kernel, cfg.tolerances.max_iter.min(5000))?;
    let mut report = ExperimentReport::new(cfg);
    let mut t = Table::new("beta", &["k", "beta", "rho", "converged"]);
    for r in &rows {
        t.push(vec![r.k.into(), r.beta.into(), r.rho.into(), r.converged.into()]);
    }
    report.tables.push(t);
    let positive = rows.iter().all(|r| r.beta > 0.0);
    let mono = rows.windows(2).all(|w| w[1].beta <= w[0].beta);
    report.verdicts.push(Verdict::check(
        "beta_positive_nonincreasing",
        positive && mono,
        format!("beta_1 {:e}, beta_{} {:e}", rows[0].beta, k_max, rows[k_max - 1].beta),
    ));
    if k_max >= 2 {
        report.verdicts.push(Verdict::check(
            "beta_halves",
            rows[k_max - 1].beta < 0.5 * rows[0].beta,
            format!("ratio {:.4}", rows[k_max - 1].beta / rows[0].beta),
        ));
        report.verdicts.push(Verdict::check(
            "rho_decreasing",
            rows.windows(2).all(|w| w[1].rho <= w[0].rho) && rows[k_max - 1].rho < rows[0].rho,
            format!("rho_1 {:e}, rho_{} {:e}", rows[0].rho, k_max, rows[k_max - 1].rho),
        ));
    }
    if rows.iter().any(|r| !r.converged) {
        report.verdicts.push(Verdict {
            name: "beta_ascent_converged".into(),
            status: Status::Inconclusive,
            detail: format!("unconverged k: {:?}", rows.iter().filter(|r| !r.converged).map(|r| r.k).collect::<Vec<_>>()),
        });
    }
    Ok(report)
}

/// Interior floor of the sublinear and minimal solutions across a decreasing ε list.
pub fn run_harnack_floor(cfg: &ExperimentConfig, grid: &Grid, kernel: &KernelMatrix) -> Result<ExperimentReport> {
    let params = cfg.model;
    let eps_list = cfg.eps_list.clone().unwrap_or_default();
    let ball = cfg.probe_ball.clone().ok_or_else(|| Error::InvalidParams("missing probe ball".into()))?;
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidParams("the floor experiment needs lambda > 0".into()));
    }
    if ball.center.len() != grid.dim || !(cfg.geometry.boundary_distance(&ball.center) > ball.radius) {
        return Err(Error::Precondition("probe ball must lie strictly inside the domain".into()));
    }
    let inside: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let x = grid.node(i);
            x.iter().zip(&ball.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= ball.radius
        })
        .collect();
    if inside.is_empty() {
        return Err(Error::Precondition("probe ball contains no nodes".into()));
    }
    let floor = |f: &Field| inside.iter().map(|&i| f.values[i]).fold(f64::INFINITY, f64::min);
    let search = search_for(cfg, f64::INFINITY);
    let rows: Vec<Result<(f64, f64, f64)>> = eps_list
        .par_iter()
        .map(|&e| {
            let prm = params.with_eps(e);
            let w = solve_sublinear_relative(&prm, kernel, cfg.tolerances.solve)?;
            let (_, z) = minimal_solution(&prm, kernel, &search)?;
            Ok((e, floor(&w.field), floor(&z.field)))
        })
        .collect();
    let rows: Vec<(f64, f64, f64)> = rows.into_iter().collect::<Result<_>>()?;
    let mut report = ExperimentReport::new(cfg);
    let mut t = Table::new("floors", &["eps", "w_floor", "u_floor"]);
    for r in &rows {
        t.push(vec![r.0.into(), r.1.into(), r.2.into()]);
    }
    report.tables.push(t);
    report.verdicts.push(Verdict::check(
        "floors_positive",
        rows.iter().all(|r| r.1 > 0.0 && r.2 > 0.0),
        format!("smallest floor {:e}", rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min)),
    ));
    let last = rows.last().map(|r| r.1).unwrap_or(0.0);
    let lo = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    report.verdicts.push(Verdict::check(
        "floor_uniform_in_eps",
        lo >= 0.5 * last && hi <= 2.0 * lo,
        format!("floors in [{lo:e}, {hi:e}], smallest eps gives {last:e}"),
    ));
    // the two solves carry independent relative errors of order the tolerance
    let rel = 10.0 * cfg.tolerances.solve;
    report.verdicts.push(Verdict::check(
        "minimal_floor_dominates",
        rows.iter().all(|r| r.2 >= r.1 * (1.0 - rel)),
        "minimal solution floor against sublinear floor".into(),
    ));
    Ok(report)
}

fn run_bubbles(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let params = cfg.model;
    let alpha = cfg.bubble.alpha.unwrap_or_else(|| crate::bubbles::default_alpha(&params));
    let r = cfg.bubble.cutoff_inner;
    let ladder = if cfg.bubble.eps_ladder.is_empty() {
        crate::bubbles::default_ladder(r, alpha)
    } else {
        cfg.bubble.eps_ladder.clone()
    };
    let center = if cfg.bubble.center.is_empty() { cfg.geometry.center() } else { cfg.bubble.center.clone() };
    let template = BubbleParams::new(center, alpha, ladder.iter().fold(f64::INFINITY, |a, b| a.min(*b)), r)?;
    let study = bubble_constants(&template, &ladder, &cfg.bubble.radial_meshes, &params)?;
    let mut report = ExperimentReport::new(cfg);
    let mut rows = Table::new("asymptotics", &["eps_b", "h", "quantity", "value", "fitted_slope", "theory_slope"]);
    for row in &study.rows {
        rows.push(vec![
            row.eps_b.into(),
            row.h.into(),
            row.quantity.as_str().into(),
            row.value.into(),
            row.fitted_slope.into(),
            row.theory_slope.into(),
        ]);
    }
    report.tables.push(rows);
    let mut slopes = Table::new("slopes", &["quantity", "h", "fitted_slope", "theory_slope", "checked"]);
    for s in &study.slopes {
        slopes.push(vec![s.quantity.as_str().into(), s.h.into(), s.fitted_slope.into(), s.theory_slope.into(), s.checked.into()]);
    }
    report.tables.push(slopes);
    let mut consts = Table::new("constants", &["h", "S0"]);
    for (h, s) in &study.s0_by_grid {
        consts.push(vec![(*h).into(), (*s).into()]);
    }
    consts.push(vec![0.0.into(), study.constants.s0_est.into()]);
    report.tables.push(consts);

    let finest = study.slopes.iter().map(|s| s.h).fold(f64::INFINITY, f64::min);
    let checked: Vec<_> = study.slopes.iter().filter(|s| s.h == finest && s.checked).collect();
    let worst = checked.iter().map(|s| s.relative_error()).fold(0.0, f64::max);
    report.verdicts.push(Verdict::check(
        "bubble_slopes",
        !checked.is_empty() && worst < 0.25,
        format!("largest relative slope error {worst:.3}"),
    ));
    let m = study.s0_by_grid.len();
    let (a, b) = (study.s0_by_grid[m - 2].1, study.s0_by_grid[m - 1].1);
    let drift = ((a - b) / b).abs();
    report.verdicts.push(Verdict::check("s0_stable", drift < 0.05, format!("S0 {a} and {b}, drift {drift:.3e}")));
    Ok(report)
}
