//! The `ecomplex` command-line pipeline.
//!
//! Subcommands form a staged pipeline: `synth` writes panels, `metrics`
//! turns panels into per-year metric CSVs, `regularize` produces binary
//! matrices (threshold or HMM), `analyze` builds fields/nestedness/minima
//! reports plus SVGs, `backtest` runs the CAGR harness, and `converge`
//! emits the SPSb-vs-NWKR diagnostics. Each stage consumes the previous
//! stage's files, so partial reruns are cheap.
//!
//! Every run writes `resolved.cfg` (and the seed within it) beside its
//! outputs; two runs with identical resolved configs are byte-identical,
//! at any worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{RegularizationMode, RunConfig, OUT_ROOT_ENV};
use crate::data::synth::{self, SynthSpec};
use crate::data::{self, Registry};
use crate::error::{Error, Result};
use crate::forecast::{
    self, BacktestInput, BacktestParams, ForecastMethod, KernelSpec,
};
use crate::hmm::{self, BinarizeRule, HmmOptions};
use crate::metrics::{
    self, BinaryExportMatrix, FcOptions, MatrixProvenance, MetricSeries,
};
use crate::nestedness::{self, NullModel};
use crate::plane::{self, CoordConvention, GridSpec};
use crate::plot;
use crate::seeding;

#[derive(Parser)]
#[command(
    name = "ecomplex",
    version,
    about = "Economic complexity pipeline: metrics, regularization, plane analysis, forecasting"
)]
struct Cli {
    /// Config file of `key = value` lines; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: $ECOMPLEX_OUT or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator name: nested, flicker, or drift.
    #[arg(long)]
    generator: String,
    /// Generator parameters as key=value (repeatable).
    #[arg(long = "param", value_parser = parse_kv)]
    params: Vec<(String, String)>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    exports: Option<PathBuf>,
    #[arg(long)]
    gdp: Option<PathBuf>,
    #[arg(long)]
    digit_level: Option<u8>,
    /// Use matrices from a `regularize` run instead of fresh thresholding.
    #[arg(long)]
    matrices: Option<PathBuf>,
}

#[derive(Args)]
struct RegularizeArgs {
    #[arg(long)]
    exports: Option<PathBuf>,
    #[arg(long)]
    digit_level: Option<u8>,
    /// threshold or hmm.
    #[arg(long)]
    mode: Option<String>,
    /// Binarization rule for hmm mode: expected-rca or top2.
    #[arg(long)]
    binarize: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Directory of metric CSVs from the `metrics` stage.
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
    /// Datasets for nestedness bars, as label=matrices.csv (repeatable).
    #[arg(long = "dataset", value_parser = parse_kv)]
    datasets: Vec<(String, String)>,
    /// Metric file names inside metrics_dir.
    #[arg(long, default_value = "complexity")]
    x_metric: String,
    #[arg(long, default_value = "logprody")]
    y_metric: String,
    #[arg(long, default_value = "herfindahl")]
    scalar_metric: String,
    /// Coordinate convention: rank or raw.
    #[arg(long, default_value = "rank")]
    coords: String,
    #[arg(long)]
    grid_nx: Option<usize>,
    #[arg(long)]
    grid_ny: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
    /// Bootstrap resamples for the minima-line error bars.
    #[arg(long)]
    bootstrap_count: Option<usize>,
    /// Replicates per null model.
    #[arg(long)]
    null_replicates: Option<usize>,
}

#[derive(Args)]
struct BacktestArgs {
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
    #[arg(long, default_value = "complexity")]
    x_metric: String,
    #[arg(long, default_value = "logprody")]
    y_metric: String,
    /// Apply log10 to the x metric when building plane coordinates.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    log_x: bool,
    /// Comma-separated horizons.
    #[arg(long)]
    dts: Option<String>,
    /// Comma-separated methods (spsb,nwkr,random,static,autocorrelation).
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    bootstraps: Option<usize>,
    #[arg(long)]
    samples_per_bootstrap: Option<usize>,
}

#[derive(Args)]
struct ConvergeArgs {
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
    #[arg(long, default_value = "complexity")]
    x_metric: String,
    #[arg(long, default_value = "logprody")]
    y_metric: String,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    log_x: bool,
    /// Comma-separated increasing bootstrap schedule.
    #[arg(long, default_value = "100,1000,10000")]
    schedule: String,
    /// Forecast horizon used to build displacements.
    #[arg(long, default_value_t = 3)]
    dt: u32,
    /// Number of query entities (sampled deterministically).
    #[arg(long, default_value_t = 30)]
    queries: usize,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    samples_per_bootstrap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic export/GDP panel.
    Synth(SynthArgs),
    /// Per-year metric CSVs: fitness, complexity, logPRODY, Herfindahl, RCA summaries.
    Metrics(MetricsArgs),
    /// Binary export matrices via thresholding or HMM regularization.
    Regularize(RegularizeArgs),
    /// Velocity/Herfindahl fields, gradient fit, minima lines, nestedness, SVGs.
    Analyze(AnalyzeArgs),
    /// Walk-forward CAGR backtests with baselines.
    Backtest(BacktestArgs),
    /// SPSb-to-NWKR convergence diagnostics.
    Converge(ConvergeArgs),
}

fn parse_kv(raw: &str) -> std::result::Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))
}

/// Binary entry point: parse, run, map errors to exit codes.
pub fn cli_main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cfg.out == PathBuf::from("out") {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            cfg.out = PathBuf::from(root);
        }
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    pool.install(|| match cli.command {
        Command::Synth(args) => cmd_synth(cfg, args),
        Command::Metrics(args) => cmd_metrics(cfg, args),
        Command::Regularize(args) => cmd_regularize(cfg, args),
        Command::Analyze(args) => cmd_analyze(cfg, args),
        Command::Backtest(args) => cmd_backtest(cfg, args),
        Command::Converge(args) => cmd_converge(cfg, args),
    })
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    cfg.write_resolved(&cfg.out)
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("missing required input `{what}`")))
}

fn check_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(())
}

fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_record(header)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for row in rows {
        writer
            .write_record(row)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- synth

fn cmd_synth(mut cfg: RunConfig, args: SynthArgs) -> Result<()> {
    let params: BTreeMap<String, String> = args.params.into_iter().collect();
    let spec = SynthSpec::from_name(&args.generator, &params)?;
    ensure_out(&cfg)?;
    let (panel, gdp, provenance) = synth::synth_panel(&spec, cfg.seed)?;
    data::write_export_csv(&panel, &cfg.out.join("export.csv"))?;
    data::write_gdp_csv(&gdp, &cfg.out.join("gdp.csv"))?;
    provenance.write_sidecar(&cfg.out.join("provenance.json"))?;
    cfg.exports = Some(cfg.out.join("export.csv"));
    cfg.gdp = Some(cfg.out.join("gdp.csv"));
    cfg.write_resolved(&cfg.out)?;
    println!("synth: wrote {} ({} countries x {} products x {} years)",
        cfg.out.display(),
        panel.countries().len(),
        panel.products().len(),
        panel.years().len());
    Ok(())
}

// -------------------------------------------------------------- metrics

fn cmd_metrics(mut cfg: RunConfig, args: MetricsArgs) -> Result<()> {
    if let Some(p) = args.exports {
        cfg.exports = Some(p);
    }
    if let Some(p) = args.gdp {
        cfg.gdp = Some(p);
    }
    if let Some(d) = args.digit_level {
        cfg.digit_level = d;
    }
    if let Some(m) = args.matrices {
        cfg.matrices = Some(m);
    }
    let exports = require(&cfg.exports, "exports")?;
    check_exists(&exports)?;
    let panel = data::load_export_csv(&exports, cfg.digit_level)?;
    let gdp = match &cfg.gdp {
        Some(path) => {
            check_exists(path)?;
            Some(data::load_gdp_csv(path)?)
        }
        None => None,
    };
    ensure_out(&cfg)?;

    let external = match &cfg.matrices {
        Some(path) => {
            check_exists(path)?;
            Some(load_matrices(path, panel.countries(), panel.products())?)
        }
        None => None,
    };

    let years = panel.years().to_vec();
    let products = panel.products().clone();
    let countries = panel.countries().clone();
    let mut fitness = MetricSeries::filled("fitness", countries.clone(), years.clone());
    let mut complexity = MetricSeries::filled("complexity", products.clone(), years.clone());
    let mut logprody = MetricSeries::filled("logprody", products.clone(), years.clone());
    let mut herfindahl = MetricSeries::filled("herfindahl", products.clone(), years.clone());
    let mut diversification = MetricSeries::filled("diversification", countries.clone(), years.clone());
    let mut ubiquity = MetricSeries::filled("ubiquity", products.clone(), years.clone());
    let mut pruned_rows: Vec<Vec<String>> = Vec::new();
    let mut excluded_rows: Vec<Vec<String>> = Vec::new();

    for &year in &years {
        let rca = metrics::compute_rca(&panel, year)?;
        let mcp = match &external {
            Some(list) => list
                .iter()
                .find(|m| m.year == year)
                .cloned()
                .ok_or(Error::UnknownYear(year))?,
            None => metrics::threshold_mcp(&rca),
        };

        for c in 0..countries.len() {
            let d = mcp.m.row(c).iter().filter(|&&v| v == 1).count();
            diversification.set(c, year, d as f64)?;
        }
        for p in 0..products.len() {
            let u = mcp.m.column(p).iter().filter(|&&v| v == 1).count();
            ubiquity.set(p, year, u as f64)?;
        }

        // the map rejects empty rows/columns; prune them explicitly and
        // report what was pruned
        let (pruned, kept_rows, kept_cols) = metrics::prune_empty(mcp.m.view());
        for c in 0..countries.len() {
            if !kept_rows.contains(&c) {
                pruned_rows.push(vec![year.to_string(), "country".into(), countries.code(c).into()]);
            }
        }
        for p in 0..products.len() {
            if !kept_cols.contains(&p) {
                pruned_rows.push(vec![year.to_string(), "product".into(), products.code(p).into()]);
            }
        }
        if !kept_rows.is_empty() && !kept_cols.is_empty() {
            let fc = metrics::fitness_complexity(pruned.view(), &FcOptions::default())?;
            for (i, &c) in kept_rows.iter().enumerate() {
                fitness.set(c, year, fc.fitness[i])?;
            }
            for (j, &p) in kept_cols.iter().enumerate() {
                complexity.set(p, year, fc.complexity[j])?;
            }
        }

        let h = metrics::compute_herfindahl(&panel, year)?;
        herfindahl.set_year(year, &h.values)?;

        if let Some(gdp) = &gdp {
            let lp = metrics::compute_logprody(&rca, &countries, gdp, year)?;
            logprody.set_year(year, &lp.values)?;
            for &c in &lp.excluded_countries {
                excluded_rows.push(vec![year.to_string(), countries.code(c).to_owned()]);
            }
        }
    }

    fitness.write_csv(&cfg.out.join("fitness.csv"))?;
    complexity.write_csv(&cfg.out.join("complexity.csv"))?;
    herfindahl.write_csv(&cfg.out.join("herfindahl.csv"))?;
    diversification.write_csv(&cfg.out.join("diversification.csv"))?;
    ubiquity.write_csv(&cfg.out.join("ubiquity.csv"))?;
    metrics::total_export_series(&panel)?.write_csv(&cfg.out.join("export_value.csv"))?;
    if gdp.is_some() {
        logprody.write_csv(&cfg.out.join("logprody.csv"))?;
        write_csv_rows(&cfg.out.join("excluded_countries.csv"), &["year", "country"], &excluded_rows)?;
    }
    write_csv_rows(&cfg.out.join("pruned.csv"), &["year", "kind", "entity"], &pruned_rows)?;
    println!("metrics: wrote {} for years {}..={}", cfg.out.display(), years[0], years[years.len() - 1]);
    Ok(())
}

// ----------------------------------------------------------- regularize

#[derive(Serialize, serde::Deserialize)]
struct MatricesMeta {
    countries: Vec<String>,
    products: Vec<String>,
    years: Vec<i32>,
    provenance: MatrixProvenance,
}

fn write_matrices(
    path: &Path,
    meta_path: &Path,
    matrices: &[BinaryExportMatrix],
    countries: &Registry,
    products: &Registry,
) -> Result<()> {
    let mut rows = Vec::new();
    for m in matrices {
        for c in 0..countries.len() {
            for p in 0..products.len() {
                if m.m[[c, p]] == 1 {
                    rows.push(vec![
                        m.year.to_string(),
                        countries.code(c).to_owned(),
                        products.code(p).to_owned(),
                    ]);
                }
            }
        }
    }
    write_csv_rows(path, &["year", "country", "product"], &rows)?;
    write_json(
        meta_path,
        &MatricesMeta {
            countries: countries.iter().map(str::to_owned).collect(),
            products: products.iter().map(str::to_owned).collect(),
            years: matrices.iter().map(|m| m.year).collect(),
            provenance: matrices
                .first()
                .map(|m| m.provenance)
                .unwrap_or(MatrixProvenance::Thresholded),
        },
    )
}

fn load_matrices(
    path: &Path,
    countries: &Registry,
    products: &Registry,
) -> Result<Vec<BinaryExportMatrix>> {
    let meta_path = path.with_file_name(
        path.file_stem()
            .map(|s| format!("{}_meta.json", s.to_string_lossy()))
            .unwrap_or_else(|| "matrices_meta.json".into()),
    );
    let meta: MatricesMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    if meta.countries != countries.iter().collect::<Vec<_>>()
        || meta.products != products.iter().collect::<Vec<_>>()
    {
        return Err(Error::Validation(
            "matrix registries do not match the export panel".into(),
        ));
    }
    let mut by_year: BTreeMap<i32, Array2<u8>> = meta
        .years
        .iter()
        .map(|&y| (y, Array2::zeros((countries.len(), products.len()))))
        .collect();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let year: i32 = record[0].trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad year `{}`", &record[0]),
        })?;
        let c = countries
            .index_of(record[1].trim())
            .ok_or_else(|| Error::Validation(format!("unknown country `{}`", &record[1])))?;
        let p = products
            .index_of(record[2].trim())
            .ok_or_else(|| Error::Validation(format!("unknown product `{}`", &record[2])))?;
        let m = by_year
            .get_mut(&year)
            .ok_or(Error::UnknownYear(year))?;
        m[[c, p]] = 1;
    }
    Ok(by_year
        .into_iter()
        .map(|(year, m)| BinaryExportMatrix {
            year,
            m,
            provenance: meta.provenance,
        })
        .collect())
}

fn cmd_regularize(mut cfg: RunConfig, args: RegularizeArgs) -> Result<()> {
    if let Some(p) = args.exports {
        cfg.exports = Some(p);
    }
    if let Some(d) = args.digit_level {
        cfg.digit_level = d;
    }
    if let Some(m) = args.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(b) = args.binarize {
        cfg.binarize = match b.as_str() {
            "expected-rca" => BinarizeRule::ExpectedRca,
            "top2" => BinarizeRule::Top2,
            other => return Err(Error::Config(format!("unknown binarize rule `{other}`"))),
        };
    }
    let exports = require(&cfg.exports, "exports")?;
    check_exists(&exports)?;
    let panel = data::load_export_csv(&exports, cfg.digit_level)?;
    ensure_out(&cfg)?;

    let thresholded: Vec<BinaryExportMatrix> = panel
        .years()
        .iter()
        .map(|&y| Ok(metrics::threshold_mcp(&metrics::compute_rca(&panel, y)?)))
        .collect::<Result<_>>()?;

    let matrices = match cfg.mode {
        RegularizationMode::Threshold => thresholded.clone(),
        RegularizationMode::Hmm => {
            let reg =
                hmm::regularize_panel(&panel, &HmmOptions::default(), cfg.binarize, cfg.seed)?;
            let models_dir = cfg.out.join("models");
            std::fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
            for (c, model) in reg.models.iter().enumerate() {
                model.write_json(
                    &models_dir.join(format!("{}.json", panel.countries().code(c))),
                )?;
            }
            if !reg.untrained.is_empty() {
                let rows: Vec<Vec<String>> = reg
                    .untrained
                    .iter()
                    .map(|&c| vec![panel.countries().code(c).to_owned()])
                    .collect();
                write_csv_rows(&cfg.out.join("untrained.csv"), &["country"], &rows)?;
            }
            reg.matrices
        }
    };

    write_matrices(
        &cfg.out.join("matrices.csv"),
        &cfg.out.join("matrices_meta.json"),
        &matrices,
        panel.countries(),
        panel.products(),
    )?;

    // flip-count report: raw thresholding vs the written matrices
    let raw_flips = metrics::flip_counts(&thresholded)?;
    let out_flips = metrics::flip_counts(&matrices)?;
    let mut rows = Vec::new();
    for c in 0..panel.countries().len() {
        for p in 0..panel.products().len() {
            if raw_flips[[c, p]] > 0 || out_flips[[c, p]] > 0 {
                rows.push(vec![
                    panel.countries().code(c).to_owned(),
                    panel.products().code(p).to_owned(),
                    raw_flips[[c, p]].to_string(),
                    out_flips[[c, p]].to_string(),
                ]);
            }
        }
    }
    write_csv_rows(
        &cfg.out.join("flips.csv"),
        &["country", "product", "flips_threshold", "flips_out"],
        &rows,
    )?;
    let raw_total: u32 = raw_flips.iter().sum();
    let out_total: u32 = out_flips.iter().sum();
    println!(
        "regularize({}): wrote {}; total flips {} -> {}",
        cfg.mode,
        cfg.out.display(),
        raw_total,
        out_total
    );
    Ok(())
}

// -------------------------------------------------------------- analyze

fn metric_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

fn load_metric(dir: &Path, name: &str) -> Result<MetricSeries> {
    let path = metric_path(dir, name);
    check_exists(&path)?;
    MetricSeries::read_csv(&path, name)
}

fn cmd_analyze(mut cfg: RunConfig, args: AnalyzeArgs) -> Result<()> {
    if let Some(d) = args.metrics_dir {
        cfg.metrics_dir = Some(d);
    }
    if let Some(v) = args.grid_nx {
        cfg.grid_nx = v;
    }
    if let Some(v) = args.grid_ny {
        cfg.grid_ny = v;
    }
    if let Some(v) = args.min_count {
        cfg.min_count = v;
    }
    if let Some(v) = args.bootstrap_count {
        cfg.bootstrap_count = v;
    }
    if let Some(v) = args.null_replicates {
        cfg.null_replicates = v;
    }
    let dir = require(&cfg.metrics_dir, "metrics_dir")?;
    check_exists(&dir)?;
    let convention = match args.coords.as_str() {
        "rank" => CoordConvention::TiedRank,
        "raw" => CoordConvention::Raw,
        other => return Err(Error::Config(format!("unknown coordinate convention `{other}`"))),
    };
    ensure_out(&cfg)?;

    let xs = load_metric(&dir, &args.x_metric)?;
    let ys = load_metric(&dir, &args.y_metric)?;
    let scalar = load_metric(&dir, &args.scalar_metric)?;

    let points = plane::points_from_series(&xs, &ys, convention)?;
    let disps = plane::displacements(&points);
    let grid = match convention {
        CoordConvention::TiedRank => GridSpec::unit(cfg.grid_nx, cfg.grid_ny, cfg.min_count),
        CoordConvention::Raw => {
            GridSpec::covering(&points, cfg.grid_nx, cfg.grid_ny, cfg.min_count)?
        }
    };

    let velocity = plane::build_velocity_field(&disps, &grid)?;
    let scalar_values: Vec<f64> = points
        .iter()
        .map(|p| scalar.get(p.entity, p.year).unwrap_or(f64::NAN))
        .collect();
    let scalar_field = plane::build_scalar_field(&points, &scalar_values, &grid)?;

    // grid dump
    let mut rows = Vec::new();
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                format!("{}", velocity.vx[[i, j]]),
                format!("{}", velocity.vy[[i, j]]),
                format!("{}", scalar_field.scalar[[i, j]]),
                velocity.count[[i, j]].to_string(),
            ]);
        }
    }
    write_csv_rows(
        &cfg.out.join("field_grid.csv"),
        &["cellX", "cellY", "vx", "vy", "H", "count"],
        &rows,
    )?;

    let fit = plane::fit_gradient_model(&velocity, &scalar_field)?;
    write_json(&cfg.out.join("fit.json"), &fit)?;

    let v_line = plane::velocity_minima_line(
        &disps,
        &grid,
        cfg.bootstrap_count,
        seeding::substream(cfg.seed, 0x11),
    )?;
    let h_line = plane::scalar_minima_line(
        &points,
        &scalar_values,
        &grid,
        cfg.bootstrap_count,
        seeding::substream(cfg.seed, 0x12),
    )?;
    for (line, name) in [(&v_line, "minima_v.csv"), (&h_line, "minima_h.csv")] {
        let rows: Vec<Vec<String>> = line
            .x
            .iter()
            .zip(line.y.iter())
            .zip(line.stderr.iter())
            .map(|((x, y), se)| {
                vec![
                    format!("{x}"),
                    y.map(|v| format!("{v}")).unwrap_or_default(),
                    se.map(|v| format!("{v}")).unwrap_or_default(),
                ]
            })
            .collect();
        write_csv_rows(&cfg.out.join(name), &["x", "y", "stderr"], &rows)?;
    }

    std::fs::write(
        cfg.out.join("quiver.svg"),
        plot::quiver_svg(&velocity, &args.x_metric, &args.y_metric),
    )
    .map_err(|e| Error::io(cfg.out.join("quiver.svg"), e))?;
    std::fs::write(
        cfg.out.join("hfield.svg"),
        plot::heatmap_svg(&scalar_field, Some(&h_line), &args.x_metric, &args.y_metric),
    )
    .map_err(|e| Error::io(cfg.out.join("hfield.svg"), e))?;

    // nestedness per dataset
    if !args.datasets.is_empty() {
        let mut nodf_rows = Vec::new();
        let mut reports = Vec::new();
        let mut bar_groups = Vec::new();
        for (label, matrices_path) in &args.datasets {
            let path = PathBuf::from(matrices_path);
            check_exists(&path)?;
            let (matrices, _) = load_matrices_standalone(&path)?;
            let mut values = Vec::new();
            for m in &matrices {
                let res = nestedness::nodf(m.m.view())?;
                nodf_rows.push(vec![
                    label.clone(),
                    m.year.to_string(),
                    format!("{}", res.nodf),
                ]);
                values.push(res.nodf);
            }
            // significance on the latest year
            if let Some(last) = matrices.last() {
                let obs = nestedness::nodf(last.m.view())?;
                for model in [NullModel::EE, NullModel::DD, NullModel::FF] {
                    let ens = nestedness::null_ensemble(
                        last.m.view(),
                        model,
                        cfg.null_replicates,
                        seeding::combine(&[cfg.seed, 0x13, model as u64]),
                    )?;
                    let rows: Vec<Vec<String>> = ens
                        .values
                        .iter()
                        .map(|v| vec![label.clone(), format!("{model:?}"), format!("{v}")])
                        .collect();
                    write_csv_rows(
                        &cfg.out.join(format!("null_nodf_{label}_{model:?}.csv")),
                        &["dataset", "model", "nodf"],
                        &rows,
                    )?;
                    let mut report = serde_json::to_value(nestedness::significance(&obs, &ens)?)?;
                    report["dataset"] = serde_json::Value::String(label.clone());
                    reports.push(report);
                }
            }
            bar_groups.push((label.clone(), values));
        }
        write_csv_rows(&cfg.out.join("nodf.csv"), &["dataset", "year", "nodf"], &nodf_rows)?;
        write_json(&cfg.out.join("significance.json"), &reports)?;
        std::fs::write(cfg.out.join("nodf_bars.svg"), plot::bars_svg(&bar_groups, "NODF"))
            .map_err(|e| Error::io(cfg.out.join("nodf_bars.svg"), e))?;
    }

    println!(
        "analyze: wrote {} (k_x={:.4}, k_y={:.4}, R2_x={:.4}, R2_y={:.4})",
        cfg.out.display(),
        fit.k_x,
        fit.k_y,
        fit.r2_x,
        fit.r2_y
    );
    Ok(())
}

/// Load matrices together with registries from the sidecar (no panel needed).
fn load_matrices_standalone(path: &Path) -> Result<(Vec<BinaryExportMatrix>, MatricesMeta)> {
    let meta_path = path.with_file_name(
        path.file_stem()
            .map(|s| format!("{}_meta.json", s.to_string_lossy()))
            .unwrap_or_else(|| "matrices_meta.json".into()),
    );
    let meta: MatricesMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    let countries = Registry::from_codes(meta.countries.clone())?;
    let products = Registry::from_codes(meta.products.clone())?;
    let matrices = load_matrices(path, &countries, &products)?;
    Ok((matrices, meta))
}

// ------------------------------------------------------------- backtest

fn coordinate_series(series: &MetricSeries, log: bool, name: &str) -> Result<MetricSeries> {
    if !log {
        return Ok(series.clone());
    }
    let mut out = MetricSeries::filled(
        format!("log10_{name}"),
        series.entities.clone(),
        series.years.clone(),
    );
    for e in 0..series.entities.len() {
        for &year in &series.years {
            if let Some(v) = series.get(e, year) {
                if v > 0.0 {
                    out.set(e, year, v.log10())?;
                }
            }
        }
    }
    Ok(out)
}

fn parse_methods(raw: &str) -> Result<Vec<ForecastMethod>> {
    raw.split(',').map(|v| v.trim().parse()).collect()
}

fn cmd_backtest(mut cfg: RunConfig, args: BacktestArgs) -> Result<()> {
    if let Some(d) = args.metrics_dir {
        cfg.metrics_dir = Some(d);
    }
    if let Some(s) = args.sigma {
        cfg.sigma = Some(s);
    }
    if let Some(b) = args.bootstraps {
        cfg.bootstraps = b;
    }
    if let Some(n) = args.samples_per_bootstrap {
        cfg.samples_per_bootstrap = n;
    }
    if let Some(dts) = &args.dts {
        cfg.dts = dts
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad horizon `{v}`")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(methods) = &args.methods {
        cfg.methods = parse_methods(methods)?;
    }
    let dir = require(&cfg.metrics_dir, "metrics_dir")?;
    check_exists(&dir)?;
    ensure_out(&cfg)?;

    let xm = load_metric(&dir, &args.x_metric)?;
    let ym = load_metric(&dir, &args.y_metric)?;
    let coord_x = coordinate_series(&xm, args.log_x, &args.x_metric)?;
    let input = BacktestInput {
        metrics: vec![&xm, &ym],
        coord_x: &coord_x,
        coord_y: &ym,
    };
    let report = forecast::backtest(
        &input,
        &BacktestParams {
            methods: cfg.methods.clone(),
            dts: cfg.dts.clone(),
            sigma: cfg.sigma,
            bootstraps: cfg.bootstraps,
            samples_per_bootstrap: cfg.samples_per_bootstrap,
            seed: cfg.seed,
        },
    )?;

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.entity.clone(),
                r.year.to_string(),
                r.dt.to_string(),
                r.metric.clone(),
                r.method.to_string(),
                format!("{}", r.forecast),
                format!("{}", r.observed),
                format!("{}", r.error),
            ]
        })
        .collect();
    write_csv_rows(
        &cfg.out.join("backtest.csv"),
        &["entity", "year", "dt", "metric", "method", "forecast", "observed", "error"],
        &rows,
    )?;

    #[derive(Serialize)]
    struct Summary<'a> {
        mae: &'a [forecast::MaeRow],
        skipped: &'a BTreeMap<String, usize>,
        audit: &'a forecast::LeakageAudit,
    }
    write_json(
        &cfg.out.join("summary.json"),
        &Summary {
            mae: &report.summary,
            skipped: &report.skipped,
            audit: &report.audit,
        },
    )?;
    println!(
        "backtest: {} forecasts, {} leakage violations, wrote {}",
        report.audit.forecasts,
        report.audit.violations,
        cfg.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------- converge

fn cmd_converge(mut cfg: RunConfig, args: ConvergeArgs) -> Result<()> {
    if let Some(d) = args.metrics_dir {
        cfg.metrics_dir = Some(d);
    }
    if let Some(s) = args.sigma {
        cfg.sigma = Some(s);
    }
    if let Some(n) = args.samples_per_bootstrap {
        cfg.samples_per_bootstrap = n;
    }
    let dir = require(&cfg.metrics_dir, "metrics_dir")?;
    check_exists(&dir)?;
    let schedule: Vec<usize> = args
        .schedule
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule entry `{v}`")))
        })
        .collect::<Result<_>>()?;
    ensure_out(&cfg)?;

    let xm = load_metric(&dir, &args.x_metric)?;
    let ym = load_metric(&dir, &args.y_metric)?;
    let coord_x = coordinate_series(&xm, args.log_x, &args.x_metric)?;
    let input = BacktestInput {
        metrics: vec![&xm, &ym],
        coord_x: &coord_x,
        coord_y: &ym,
    };
    // anchor at the last year that still has the dt window
    let years = &coord_x.years;
    let t_hat = years[years.len() - 1] - args.dt as i32 + 1;
    let set = forecast::assemble_analogues(&input, t_hat, args.dt)?;
    let kernel = match cfg.sigma {
        Some(s) => KernelSpec::new(s)?,
        None => KernelSpec::from_analogues(&set, 0.1)?,
    };

    // deterministic query sample: entities with coordinates at t_hat
    let n = coord_x.entities.len();
    let candidates: Vec<usize> = (0..n)
        .filter(|&e| coord_x.get(e, t_hat).is_some() && ym.get(e, t_hat).is_some())
        .collect();
    let step = (candidates.len() / args.queries.max(1)).max(1);
    let queries: Vec<usize> = candidates.iter().step_by(step).take(args.queries).copied().collect();
    if queries.is_empty() {
        return Err(Error::Validation("no query entities at the anchor year".into()));
    }

    let mut mae_rows = Vec::new();
    let mut phi_rows = Vec::new();
    for &e in &queries {
        let query = [
            coord_x.get(e, t_hat).expect("filtered"),
            ym.get(e, t_hat).expect("filtered"),
        ];
        let diag = forecast::convergence_scan(
            query,
            &set,
            &kernel,
            &schedule,
            cfg.samples_per_bootstrap,
            seeding::combine(&[cfg.seed, 0x14, e as u64]),
        )?;
        let code = coord_x.entities.code(e).to_owned();
        for (i, &b) in diag.schedule.iter().enumerate() {
            mae_rows.push(vec![
                code.clone(),
                b.to_string(),
                format!("{}", diag.mae_expectation[i]),
                format!("{}", diag.mae_sigma[i]),
            ]);
        }
        for (p, f) in diag
            .kernel_probability
            .iter()
            .zip(diag.sampled_frequency.iter())
        {
            phi_rows.push(vec![code.clone(), format!("{p}"), format!("{f}")]);
        }
    }
    write_csv_rows(
        &cfg.out.join("converge.csv"),
        &["query", "bootstraps", "mae_expectation", "mae_sigma"],
        &mae_rows,
    )?;
    write_csv_rows(
        &cfg.out.join("phi_p.csv"),
        &["query", "kernel_probability", "sampled_frequency"],
        &phi_rows,
    )?;
    println!(
        "converge: {} queries x {} schedule points, wrote {}",
        queries.len(),
        schedule.len(),
        cfg.out.display()
    );
    Ok(())
}
