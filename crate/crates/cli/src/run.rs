//! Subcommand implementations and result persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use sw_design::analytic::{
    binary_residual_variance, cluster_mean_correlation, cohort_optimal_proportions, optimal_sequence_count, rho_from_e,
};
use sw_design::search::{
    cross_entropy_search, exhaustive_search_with, sensitivity_map, SearchOptions, SensitivityMap,
};
use sw_design::{Design, PowerSpec, SearchOutcome, VarianceComponents};

use crate::config::{Mode, RunConfig};
use crate::report::{self, DesignReport};
use crate::xfile;

/// Command-line inputs shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub mode: Mode,
    pub config_path: PathBuf,
    pub design: Option<PathBuf>,
    pub compare: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// How a successful run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Done,
    NoAdmissibleDesign,
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Output { dir })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: f64,
    finished_unix: f64,
    elapsed_seconds: f64,
    workers: Option<usize>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Serialize)]
struct EvaluateResult<'a> {
    report: &'a DesignReport,
    comparator: Option<&'a DesignReport>,
}

#[derive(Serialize)]
struct SearchRunResult<'a> {
    outcome: &'a SearchOutcome,
    report: &'a DesignReport,
    comparator: Option<&'a DesignReport>,
}

#[derive(Serialize)]
struct SensitivityResult<'a> {
    map: &'a SensitivityMap,
    ratio_files: Vec<String>,
}

#[derive(Serialize, Default)]
struct AnalyticResult {
    cluster_mean: Vec<ClusterMeanRow>,
    intra_cluster: Vec<IntraClusterRow>,
    cohort: Vec<CohortRow>,
    binary: Vec<BinaryRow>,
}

#[derive(Serialize)]
struct ClusterMeanRow {
    #[serde(rename = "E")]
    e: f64,
    rho: Option<f64>,
    sequence_count: Option<f64>,
}

#[derive(Serialize)]
struct IntraClusterRow {
    rho: f64,
    #[serde(rename = "E")]
    e: f64,
}

#[derive(Serialize)]
struct CohortRow {
    rho0: f64,
    rho1: f64,
    rho2: f64,
    proportions: Vec<f64>,
}

#[derive(Serialize)]
struct BinaryRow {
    p_bar: f64,
    residual_variance: f64,
}

/// Runs one subcommand end to end and writes its output directory.
pub fn execute(inv: &Invocation) -> Result<Status> {
    let started = unix_now();
    let clock = Instant::now();
    let mut config = RunConfig::load(&inv.config_path)?;
    if let Some(mode) = config.mode {
        if mode != inv.mode {
            bail!("config is for mode {} but the {} command was run", mode.name(), inv.mode.name());
        }
    }
    config.mode = Some(inv.mode);
    if inv.seed.is_some() {
        config.seed = inv.seed;
    }
    let name = config.name.clone().unwrap_or_else(|| {
        inv.config_path
            .file_stem()
            .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
    });
    let dir = inv.out.clone().unwrap_or_else(|| Path::new("runs").join(&name));

    let status = match inv.mode {
        Mode::Evaluate => evaluate(&mut config, inv, &dir)?,
        Mode::Search => search(&mut config, inv, &dir)?,
        Mode::CeSearch => ce_search(&mut config, inv, &dir)?,
        Mode::Sensitivity => sensitivity(&config, &dir)?,
        Mode::Analytic => analytic(&config, &dir)?,
    };

    let out = Output::create(dir)?;
    out.json("config.json", &config)?;
    out.json(
        "metadata.json",
        &Metadata {
            command: inv.mode.name(),
            version: env!("CARGO_PKG_VERSION"),
            started_unix: started,
            finished_unix: unix_now(),
            elapsed_seconds: clock.elapsed().as_secs_f64(),
            workers: inv.workers,
        },
    )?;
    println!("results written to {}", out.dir.display());
    Ok(status)
}

fn default_power(config: &RunConfig, arms: usize) -> PowerSpec {
    config.power.clone().unwrap_or_else(|| PowerSpec::ignore_power(arms.saturating_sub(1).max(1)))
}

fn arms_for(config: &RunConfig, block_arms: Option<usize>) -> Result<usize> {
    block_arms
        .or_else(|| config.space.as_ref().map(|s| s.arms))
        .context("number of arms D missing: set it in the design block or the space block")
}

/// Resolves `X` from a file, falling back to the inline matrix, and inlines it.
fn resolve_matrix(file: Option<&Path>, inline: &mut Option<Vec<Vec<u8>>>, what: &str) -> Result<Vec<Vec<u8>>> {
    if let Some(path) = file {
        *inline = Some(xfile::read(path)?);
    }
    inline.clone().with_context(|| format!("no {what} matrix: pass a CSV file or give X in the config"))
}

fn comparator(
    config: &mut RunConfig,
    inv: &Invocation,
    primary: &Design,
    vc: &VarianceComponents,
    spec: &PowerSpec,
) -> Result<Option<DesignReport>> {
    if inv.compare.is_none() && config.comparator.as_ref().is_none_or(|c| c.allocation.is_none()) {
        return Ok(None);
    }
    let mut block = config.comparator.clone().unwrap_or(crate::config::DesignBlock {
        m: primary.m(),
        arms: None,
        allocation: None,
    });
    let x = resolve_matrix(inv.compare.as_deref(), &mut block.allocation, "comparator")?;
    let arms = block.arms.unwrap_or(primary.arms());
    let design = Design::new(block.m, arms, x).context("invalid comparator design")?;
    config.comparator = Some(block);
    Ok(Some(DesignReport::new(design, vc, spec).context("cannot evaluate comparator design")?))
}

fn evaluate(config: &mut RunConfig, inv: &Invocation, dir: &Path) -> Result<Status> {
    let mut block = config.design.clone().context("evaluate needs a design block with m")?;
    let x = resolve_matrix(inv.design.as_deref(), &mut block.allocation, "design")?;
    let arms = arms_for(config, block.arms)?;
    let design = Design::new(block.m, arms, x)?;
    config.design = Some(block);
    let vc = config.components(Some((design.m(), design.periods())))?;
    let spec = default_power(config, arms);
    let report = DesignReport::new(design, &vc, &spec)?;
    let comp = comparator(config, inv, &report.design, &vc, &spec)?;
    print!("{}", report::summary("design evaluation", &report, comp.as_ref()));
    let out = Output::create(dir.to_path_buf())?;
    out.json(
        "result.json",
        &EvaluateResult {
            report: &report,
            comparator: comp.as_ref(),
        },
    )?;
    out.write("table.csv", &report::table_csv(&report, comp.as_ref()))?;
    Ok(Status::Done)
}

fn finish_search(
    config: &mut RunConfig,
    inv: &Invocation,
    dir: &Path,
    outcome: SearchOutcome,
    vc: &VarianceComponents,
    spec: &PowerSpec,
) -> Result<Status> {
    let result = outcome.result();
    let report = DesignReport::new(result.best.clone(), vc, spec)?;
    let comp = comparator(config, inv, &report.design, vc, spec)?;
    let (title, status) = if outcome.is_admissible() {
        (format!("admissible design ({}-criterion, w = {})", result.criterion, config.objective()?.w), Status::Done)
    } else {
        (
            "no design meets the power requirement; criterion optimum with power ignored".to_string(),
            Status::NoAdmissibleDesign,
        )
    };
    print!("{}", report::summary(&title, &report, comp.as_ref()));
    println!("  objective       {:.6}", result.objective_value);
    println!("  evaluated       {} ({} feasible)", result.n_evaluated, result.n_feasible);
    let out = Output::create(dir.to_path_buf())?;
    out.json(
        "result.json",
        &SearchRunResult {
            outcome: &outcome,
            report: &report,
            comparator: comp.as_ref(),
        },
    )?;
    out.write("table.csv", &report::table_csv(&report, comp.as_ref()))?;
    out.write("design.csv", &xfile::format(report.design.allocation()))?;
    Ok(status)
}

fn search(config: &mut RunConfig, inv: &Invocation, dir: &Path) -> Result<Status> {
    let block = config.space_block()?.clone();
    let space = block.build()?;
    let vc = config.components(None)?;
    let spec = default_power(config, space.arms());
    let objective = config.objective()?.clone();
    for w in objective.warnings() {
        eprintln!("warning: {w}");
    }
    let options = SearchOptions {
        candidate_cap: config.candidate_cap(),
        ..SearchOptions::default()
    };
    let outcome = exhaustive_search_with(&space, &vc, &spec, &objective, &options)?;
    finish_search(config, inv, dir, outcome, &vc, &spec)
}

fn ce_search(config: &mut RunConfig, inv: &Invocation, dir: &Path) -> Result<Status> {
    let mut ce = config.ce.clone().context("ce-search needs a ce block with C, T and m")?;
    if let Some(seed) = config.seed {
        ce.params.seed = seed;
    }
    config.seed = Some(ce.params.seed);
    let block = config.space_block()?.clone();
    let vc = config.components(Some((ce.m, ce.periods)))?;
    let spec = default_power(config, block.arms);
    let objective = config.objective()?.clone();
    let outcome = cross_entropy_search(
        ce.clusters,
        ce.periods,
        ce.m,
        block.arms,
        &block.restrictions,
        &vc,
        &objective,
        &spec,
        &ce.params,
    )?;
    config.ce = Some(ce);
    finish_search(config, inv, dir, outcome, &vc, &spec)
}

fn sensitivity(config: &RunConfig, dir: &Path) -> Result<Status> {
    let block = config.sensitivity.clone().unwrap_or(crate::config::SensitivityBlock {
        grid: Default::default(),
        ratio_designs: Vec::new(),
    });
    let space = config.space_block()?.build()?;
    let spec = default_power(config, space.arms());
    let objective = config.objective()?.clone();
    let options = SearchOptions {
        candidate_cap: config.candidate_cap(),
        ..SearchOptions::default()
    };
    let map = sensitivity_map(&block.grid, &space, &objective, &spec, &options)?;
    let out = Output::create(dir.to_path_buf())?;
    out.write("grid.csv", &map.to_csv())?;
    let mut ratio_files = Vec::new();
    for named in &block.ratio_designs {
        let ms: Vec<usize> = map.designs.iter().map(Design::m).collect();
        let m = ms.first().copied().context("no grid point has an optimal design")?;
        let design = Design::new(m, space.arms(), named.allocation.clone())
            .with_context(|| format!("invalid ratio design {}", named.name))?;
        let ratios = map.variance_ratios(&design, &objective)?;
        let mut csv = String::from("sigma_c2,sigma_eps2,rho,ratio\n");
        for r in &ratios {
            let rho = r.sigma_c2 / (r.sigma_c2 + r.sigma_eps2);
            csv.push_str(&format!("{},{},{},{}\n", r.sigma_c2, r.sigma_eps2, rho, r.ratio));
        }
        let file = format!("ratio_{}.csv", named.name);
        out.write(&file, &csv)?;
        let max = ratios.iter().map(|r| r.ratio).fold(0.0, f64::max);
        println!("  {}: largest ratio to the grid optimum {max:.4}", named.name);
        ratio_files.push(file);
    }
    println!("{} grid points, {} distinct optimal designs", map.points.len(), map.designs.len());
    for (i, d) in map.designs.iter().enumerate() {
        let n = map.points.iter().filter(|p| p.design_id == Some(i)).count();
        println!("  design {i} (m = {}, {n} points):\n    {}", d.m(), report::format_matrix(d.allocation()));
    }
    out.json(
        "result.json",
        &SensitivityResult {
            map: &map,
            ratio_files,
        },
    )?;
    Ok(Status::Done)
}

fn analytic(config: &RunConfig, dir: &Path) -> Result<Status> {
    let block = config.analytic.clone().context("analytic needs an analytic block")?;
    let mut result = AnalyticResult::default();
    let mut table = String::from("quantity,value,comparator,change_percent\n");
    let mt = block.m.zip(block.periods);
    for &e in &block.e {
        let rho = mt.map(|(m, t)| rho_from_e(m, t, e)).transpose()?;
        let f = optimal_sequence_count(e).ok();
        if let Some(r) = rho {
            table.push_str(&format!("rho(E={e}),{r},,\n"));
        }
        if let Some(f) = f {
            table.push_str(&format!("F(E={e}),{f},,\n"));
            println!("E = {e}: F = {f:.2}");
        } else {
            println!("E = {e}: F undefined");
        }
        result.cluster_mean.push(ClusterMeanRow {
            e,
            rho,
            sequence_count: f,
        });
    }
    for &rho in &block.rho {
        let (m, t) = mt.context("converting rho to E needs m and T")?;
        let e = cluster_mean_correlation(m, t, rho)?;
        table.push_str(&format!("E(rho={rho}),{e},,\n"));
        println!("rho = {rho}: E = {e:.4}");
        result.intra_cluster.push(IntraClusterRow { rho, e });
    }
    for s in &block.cohort {
        let (m, t) = mt.context("theoretical proportions need m and T")?;
        let p = cohort_optimal_proportions(m, t, s.rho0, s.rho1, s.rho2)?.p;
        let shown: Vec<String> = p.iter().map(|v| format!("{v:.2}")).collect();
        println!("rho = ({}, {}, {}): p = ({})", s.rho0, s.rho1, s.rho2, shown.join(", "));
        for (i, v) in p.iter().enumerate() {
            table.push_str(&format!("p{}(rho0={};rho1={};rho2={}),{v},,\n", i + 1, s.rho0, s.rho1, s.rho2));
        }
        result.cohort.push(CohortRow {
            rho0: s.rho0,
            rho1: s.rho1,
            rho2: s.rho2,
            proportions: p,
        });
    }
    for &p_bar in &block.p_bar {
        let v = binary_residual_variance(p_bar)?;
        table.push_str(&format!("residual_variance(p_bar={p_bar}),{v},,\n"));
        println!("p_bar = {p_bar}: residual variance {v:.4}");
        result.binary.push(BinaryRow {
            p_bar,
            residual_variance: v,
        });
    }
    let out = Output::create(dir.to_path_buf())?;
    out.json("result.json", &result)?;
    out.write("table.csv", &table)?;
    Ok(Status::Done)
}
