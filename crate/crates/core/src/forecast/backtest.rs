//! Walk-forward CAGR backtesting over metric series.
//!
//! For a forecast anchored at year t-hat with horizon dt, the admissible
//! analogues are all (entity, t) observations with t < t-hat; the audit
//! re-verifies that rule on every assembled set. Displacements are the
//! CAGR% of each metric over the horizon; forecasts are scored with
//! E = |CAGR%_observed - CAGR%_forecast| and aggregated as MAE per
//! (metric, method, horizon).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricSeries;
use crate::seeding;

use super::{
    baseline_predict, cagr, nwkr_predict, spsb_predict, Analogue, AnalogueSet, BaselineKind,
    KernelSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastMethod {
    Spsb,
    Nwkr,
    Random,
    Static,
    Autocorrelation,
}

impl ForecastMethod {
    pub const ALL: [ForecastMethod; 5] = [
        ForecastMethod::Spsb,
        ForecastMethod::Nwkr,
        ForecastMethod::Random,
        ForecastMethod::Static,
        ForecastMethod::Autocorrelation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ForecastMethod::Spsb => "spsb",
            ForecastMethod::Nwkr => "nwkr",
            ForecastMethod::Random => "random",
            ForecastMethod::Static => "static",
            ForecastMethod::Autocorrelation => "autocorrelation",
        }
    }
}

impl std::str::FromStr for ForecastMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spsb" => Ok(ForecastMethod::Spsb),
            "nwkr" => Ok(ForecastMethod::Nwkr),
            "random" => Ok(ForecastMethod::Random),
            "static" => Ok(ForecastMethod::Static),
            "autocorrelation" => Ok(ForecastMethod::Autocorrelation),
            other => Err(Error::Validation(format!("unknown forecast method `{other}`"))),
        }
    }
}

impl std::fmt::Display for ForecastMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metric series to forecast plus the plane coordinates shared by all of
/// them. All series must agree on entities.
pub struct BacktestInput<'a> {
    pub metrics: Vec<&'a MetricSeries>,
    pub coord_x: &'a MetricSeries,
    pub coord_y: &'a MetricSeries,
}

impl BacktestInput<'_> {
    fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::Validation("no metrics to backtest".into()));
        }
        let n = self.coord_x.entities.len();
        if self.coord_y.entities.len() != n
            || self.metrics.iter().any(|m| m.entities.len() != n)
        {
            return Err(Error::Validation("series disagree on entities".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BacktestParams {
    pub methods: Vec<ForecastMethod>,
    pub dts: Vec<u32>,
    /// Kernel bandwidth; None picks 0.1 x the analogue bounding-box diagonal.
    pub sigma: Option<f64>,
    pub bootstraps: usize,
    pub samples_per_bootstrap: usize,
    pub seed: u64,
}

impl Default for BacktestParams {
    fn default() -> Self {
        BacktestParams {
            methods: ForecastMethod::ALL.to_vec(),
            dts: vec![3, 4, 5],
            sigma: None,
            bootstraps: 1000,
            samples_per_bootstrap: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestRecord {
    pub entity: String,
    pub year: i32,
    pub dt: u32,
    pub metric: String,
    pub method: ForecastMethod,
    pub forecast: f64,
    pub observed: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaeRow {
    pub metric: String,
    pub method: ForecastMethod,
    pub dt: u32,
    pub mae: f64,
    pub count: usize,
}

/// Construction audit of the temporal split.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub forecasts: usize,
    pub analogues_checked: usize,
    /// Analogues found with t >= t-hat; must be zero.
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub records: Vec<BacktestRecord>,
    pub summary: Vec<MaeRow>,
    pub skipped: BTreeMap<String, usize>,
    pub audit: LeakageAudit,
}

/// All admissible analogues for a forecast anchored at `t_hat` with horizon
/// `dt`: every (entity, t) with t < t_hat, coordinates at t, and positive
/// metric values at t and t + dt.
pub fn assemble_analogues(
    input: &BacktestInput<'_>,
    t_hat: i32,
    dt: u32,
) -> Result<AnalogueSet> {
    input.validate()?;
    let n = input.coord_x.entities.len();
    let mut analogues = Vec::new();
    for &t in &input.coord_x.years {
        if t >= t_hat {
            continue;
        }
        for e in 0..n {
            let (Some(x), Some(y)) = (input.coord_x.get(e, t), input.coord_y.get(e, t)) else {
                continue;
            };
            let mut displacement = Vec::with_capacity(input.metrics.len());
            let mut ok = true;
            for m in &input.metrics {
                match (m.get(e, t), m.get(e, t + dt as i32)) {
                    (Some(a), Some(b)) if a > 0.0 && b > 0.0 => {
                        displacement.push(cagr(a, b, dt)?);
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                analogues.push(Analogue {
                    entity: e,
                    time: t,
                    position: [x, y],
                    displacement,
                });
            }
        }
    }
    AnalogueSet::new(analogues)
}

struct Target {
    entity: usize,
    position: [f64; 2],
    observed: Vec<f64>,
    previous: Option<Vec<f64>>,
}

fn collect_targets(
    input: &BacktestInput<'_>,
    t_hat: i32,
    dt: u32,
    skipped: &mut BTreeMap<String, usize>,
) -> Vec<Target> {
    let n = input.coord_x.entities.len();
    let mut targets = Vec::new();
    for e in 0..n {
        let (Some(x), Some(y)) = (input.coord_x.get(e, t_hat), input.coord_y.get(e, t_hat))
        else {
            *skipped.entry("target-missing-coordinates".into()).or_insert(0) += 1;
            continue;
        };
        let mut observed = Vec::with_capacity(input.metrics.len());
        let mut ok = true;
        for m in &input.metrics {
            match (m.get(e, t_hat), m.get(e, t_hat + dt as i32)) {
                (Some(a), Some(b)) if a > 0.0 && b > 0.0 => {
                    observed.push(cagr(a, b, dt).expect("positive inputs"));
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            *skipped.entry("target-missing-data".into()).or_insert(0) += 1;
            continue;
        }
        // the target's own previous displacement, for the autocorrelation baseline
        let mut previous = Some(Vec::with_capacity(input.metrics.len()));
        for m in &input.metrics {
            match (m.get(e, t_hat - dt as i32), m.get(e, t_hat)) {
                (Some(a), Some(b)) if a > 0.0 && b > 0.0 => {
                    if let Some(prev) = previous.as_mut() {
                        prev.push(cagr(a, b, dt).expect("positive inputs"));
                    }
                }
                _ => {
                    previous = None;
                    break;
                }
            }
        }
        targets.push(Target {
            entity: e,
            position: [x, y],
            observed,
            previous,
        });
    }
    targets
}

fn method_tag(m: ForecastMethod) -> u64 {
    match m {
        ForecastMethod::Spsb => 1,
        ForecastMethod::Nwkr => 2,
        ForecastMethod::Random => 3,
        ForecastMethod::Static => 4,
        ForecastMethod::Autocorrelation => 5,
    }
}

/// Walk-forward backtest across every anchor year that leaves both history
/// and a verification window.
pub fn backtest(input: &BacktestInput<'_>, params: &BacktestParams) -> Result<BacktestReport> {
    input.validate()?;
    if params.dts.is_empty() || params.methods.is_empty() {
        return Err(Error::Validation("need at least one horizon and one method".into()));
    }
    let years = input.coord_x.years.clone();
    let mut records: Vec<BacktestRecord> = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut audit = LeakageAudit::default();

    for &dt in &params.dts {
        for &t_hat in &years {
            // need at least one year of history and the observation window
            if t_hat <= years[0] || t_hat + dt as i32 > years[years.len() - 1] {
                continue;
            }
            let set = match assemble_analogues(input, t_hat, dt) {
                Ok(s) => s,
                Err(_) => {
                    *skipped.entry("no-analogues".into()).or_insert(0) += 1;
                    continue;
                }
            };
            audit.analogues_checked += set.len();
            audit.violations += set.iter().filter(|a| a.time >= t_hat).count();

            let kernel = match params.sigma {
                Some(s) => KernelSpec::new(s)?,
                None => KernelSpec::from_analogues(&set, 0.1)?,
            };
            let targets = collect_targets(input, t_hat, dt, &mut skipped);
            audit.forecasts += targets.len() * params.methods.len();

            let batch: Vec<Vec<BacktestRecord>> = targets
                .par_iter()
                .map(|target| {
                    let mut out = Vec::new();
                    for &method in &params.methods {
                        let seed = seeding::combine(&[
                            params.seed,
                            target.entity as u64,
                            t_hat as u64,
                            dt as u64,
                            method_tag(method),
                        ]);
                        let forecast = match method {
                            ForecastMethod::Spsb => spsb_predict(
                                target.position,
                                &set,
                                &kernel,
                                params.bootstraps,
                                params.samples_per_bootstrap,
                                seed,
                            ),
                            ForecastMethod::Nwkr => nwkr_predict(target.position, &set, &kernel),
                            ForecastMethod::Random => {
                                baseline_predict(BaselineKind::Random, None, &set, seed)
                            }
                            ForecastMethod::Static => {
                                baseline_predict(BaselineKind::Static, None, &set, seed)
                            }
                            ForecastMethod::Autocorrelation => baseline_predict(
                                BaselineKind::Autocorrelation,
                                target.previous.as_deref(),
                                &set,
                                seed,
                            ),
                        };
                        let Ok(forecast) = forecast else {
                            continue; // counted after the parallel section
                        };
                        for (k, metric) in input.metrics.iter().enumerate() {
                            out.push(BacktestRecord {
                                entity: input.coord_x.entities.code(target.entity).to_owned(),
                                year: t_hat,
                                dt,
                                metric: metric.name.clone(),
                                method,
                                forecast: forecast.expectation[k],
                                observed: target.observed[k],
                                error: (target.observed[k] - forecast.expectation[k]).abs(),
                            });
                        }
                    }
                    out
                })
                .collect();
            // autocorrelation skips are deterministic; reconstruct the count
            if params.methods.contains(&ForecastMethod::Autocorrelation) {
                let missing = targets.iter().filter(|t| t.previous.is_none()).count();
                if missing > 0 {
                    *skipped.entry("autocorrelation-no-history".into()).or_insert(0) += missing;
                }
            }
            records.extend(batch.into_iter().flatten());
        }
    }

    if records.is_empty() {
        return Err(Error::Validation(
            "backtest produced no forecasts; series too short for the horizons".into(),
        ));
    }

    let mut agg: BTreeMap<(String, ForecastMethod, u32), (f64, usize)> = BTreeMap::new();
    for r in &records {
        let e = agg.entry((r.metric.clone(), r.method, r.dt)).or_insert((0.0, 0));
        e.0 += r.error;
        e.1 += 1;
    }
    let summary = agg
        .into_iter()
        .map(|((metric, method, dt), (sum, count))| MaeRow {
            metric,
            method,
            dt,
            mae: sum / count as f64,
            count,
        })
        .collect();

    Ok(BacktestReport {
        records,
        summary,
        skipped,
        audit,
    })
}
