//! Displacement forecasting on the plane: the SPSb bootstrap scheme, its
//! deterministic NWKR limit, convergence diagnostics between the two, CAGR
//! backtesting with baselines, and country-level reconstruction.
//!
//! Both methods weight analogues with the same Gaussian kernel of bandwidth
//! sigma, so SPSb converges to NWKR as the number of bootstraps grows; the
//! SPSb standard deviation times sqrt(N) converges to the NWKR one.

mod backtest;

pub use backtest::{
    assemble_analogues, backtest, BacktestInput, BacktestParams, BacktestRecord, BacktestReport,
    ForecastMethod, LeakageAudit, MaeRow,
};

use ndarray::{Array1, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed (position, displacement) pair usable as a predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Analogue {
    pub entity: usize,
    pub time: i32,
    pub position: [f64; 2],
    pub displacement: Vec<f64>,
}

/// Uniform-dimension collection of analogues.
#[derive(Debug, Clone)]
pub struct AnalogueSet {
    analogues: Vec<Analogue>,
    dim: usize,
}

impl AnalogueSet {
    pub fn new(analogues: Vec<Analogue>) -> Result<Self> {
        let first = analogues
            .first()
            .ok_or_else(|| Error::Validation("need at least one analogue".into()))?;
        let dim = first.displacement.len();
        if dim == 0 {
            return Err(Error::Validation("displacements must have at least 1 component".into()));
        }
        for a in &analogues {
            if a.displacement.len() != dim {
                return Err(Error::Validation("displacement dimensions differ".into()));
            }
            if a.displacement.iter().any(|v| !v.is_finite())
                || a.position.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Validation("analogue values must be finite".into()));
            }
        }
        Ok(AnalogueSet { analogues, dim })
    }

    pub fn len(&self) -> usize {
        self.analogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.analogues.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = &Analogue> {
        self.analogues.iter()
    }

    pub fn max_time(&self) -> i32 {
        self.analogues.iter().map(|a| a.time).max().expect("non-empty")
    }

    /// Diagonal of the positions' bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for a in &self.analogues {
            x_min = x_min.min(a.position[0]);
            x_max = x_max.max(a.position[0]);
            y_min = y_min.min(a.position[1]);
            y_max = y_max.max(a.position[1]);
        }
        ((x_max - x_min).powi(2) + (y_max - y_min).powi(2)).sqrt()
    }
}

/// Gaussian kernel bandwidth on plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub sigma: f64,
}

impl KernelSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Validation(format!("kernel sigma must be positive, got {sigma}")));
        }
        Ok(KernelSpec { sigma })
    }

    /// Default bandwidth: `factor` times the analogue bounding-box diagonal
    /// (0.1 unless overridden).
    pub fn from_analogues(set: &AnalogueSet, factor: f64) -> Result<Self> {
        let diag = set.bbox_diagonal();
        if diag <= 0.0 {
            // all analogues at one point: any positive bandwidth behaves the same
            return KernelSpec::new(1.0);
        }
        KernelSpec::new(factor * diag)
    }
}

/// Which algorithm produced a forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Spsb,
    Nwkr,
    Random,
    Static,
    Autocorrelation,
}

/// Run parameters recorded with a forecast.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastParams {
    pub sigma: Option<f64>,
    pub b: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

/// Expectation and uncertainty of one predicted displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub expectation: Vec<f64>,
    pub standard_deviation: Vec<f64>,
    pub method: MethodTag,
    pub params: ForecastParams,
    /// Kish effective sample size of the kernel weights.
    pub effective_analogues: f64,
    /// True when every unshifted kernel weight underflowed; weights are
    /// computed in shifted log space, which degrades gracefully to a
    /// nearest-analogue prediction.
    pub underflow_fallback: bool,
}

/// Normalized kernel weights over the analogue set (computed in log space,
/// shifted by the max before exponentiation). Also reports whether the
/// unshifted weights would all have underflowed.
fn kernel_weights(query: [f64; 2], set: &AnalogueSet, kernel: &KernelSpec) -> (Vec<f64>, bool) {
    let two_sigma2 = 2.0 * kernel.sigma * kernel.sigma;
    let logs: Vec<f64> = set
        .iter()
        .map(|a| {
            let dx = query[0] - a.position[0];
            let dy = query[1] - a.position[1];
            -(dx * dx + dy * dy) / two_sigma2
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let underflow = max < f64::MIN_POSITIVE.ln();
    let mut weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    (weights, underflow)
}

fn effective_count(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sum2: f64 = weights.iter().map(|w| w * w).sum();
    if sum2 > 0.0 { sum * sum / sum2 } else { 0.0 }
}

/// Nadaraya-Watson kernel regression: kernel-weighted mean of the analogue
/// displacements, with the population second-moment standard deviation.
pub fn nwkr_predict(
    query: [f64; 2],
    set: &AnalogueSet,
    kernel: &KernelSpec,
) -> Result<ForecastResult> {
    if set.is_empty() {
        return Err(Error::Validation("need at least one analogue".into()));
    }
    let (weights, underflow) = kernel_weights(query, set, kernel);
    let dim = set.dim();
    let mut expectation = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for (a, &w) in set.iter().zip(weights.iter()) {
        for k in 0..dim {
            expectation[k] += w * a.displacement[k];
            second[k] += w * a.displacement[k] * a.displacement[k];
        }
    }
    let standard_deviation: Vec<f64> = second
        .iter()
        .zip(expectation.iter())
        .map(|(m2, e)| (m2 - e * e).max(0.0).sqrt())
        .collect();
    Ok(ForecastResult {
        expectation,
        standard_deviation,
        method: MethodTag::Nwkr,
        params: ForecastParams {
            sigma: Some(kernel.sigma),
            ..ForecastParams::default()
        },
        effective_analogues: effective_count(&weights),
        underflow_fallback: underflow,
    })
}

struct SpsbOutcome {
    result: ForecastResult,
    counts: Vec<u64>,
}

fn spsb_run(
    query: [f64; 2],
    set: &AnalogueSet,
    kernel: &KernelSpec,
    bootstraps: usize,
    samples_per_bootstrap: usize,
    seed: u64,
    track_counts: bool,
) -> Result<SpsbOutcome> {
    if set.is_empty() {
        return Err(Error::Validation("need at least one analogue".into()));
    }
    if bootstraps == 0 || samples_per_bootstrap == 0 {
        return Err(Error::Validation("B and N must be at least 1".into()));
    }
    let (weights, underflow) = kernel_weights(query, set, kernel);
    let sampler = WeightedAliasIndex::new(weights.clone())
        .map_err(|e| Error::Degenerate(format!("cannot build sampler: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dim = set.dim();
    let n = samples_per_bootstrap as f64;
    let mut counts = vec![0u64; if track_counts { set.len() } else { 0 }];
    // per-bootstrap means, one row per bootstrap
    let mut means = vec![0.0f64; bootstraps * dim];
    for b in 0..bootstraps {
        let row = &mut means[b * dim..(b + 1) * dim];
        for _ in 0..samples_per_bootstrap {
            let idx = sampler.sample(&mut rng);
            if track_counts {
                counts[idx] += 1;
            }
            let d = &set.analogues[idx].displacement;
            for k in 0..dim {
                row[k] += d[k];
            }
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }

    let bf = bootstraps as f64;
    let mut expectation = vec![0.0; dim];
    for b in 0..bootstraps {
        for k in 0..dim {
            expectation[k] += means[b * dim + k];
        }
    }
    for e in expectation.iter_mut() {
        *e /= bf;
    }
    let mut standard_deviation = vec![0.0; dim];
    if bootstraps > 1 {
        for b in 0..bootstraps {
            for k in 0..dim {
                let d = means[b * dim + k] - expectation[k];
                standard_deviation[k] += d * d;
            }
        }
        for s in standard_deviation.iter_mut() {
            *s = (*s / (bf - 1.0)).sqrt();
        }
    }

    Ok(SpsbOutcome {
        result: ForecastResult {
            expectation,
            standard_deviation,
            method: MethodTag::Spsb,
            params: ForecastParams {
                sigma: Some(kernel.sigma),
                b: Some(bootstraps),
                n: Some(samples_per_bootstrap),
                seed: Some(seed),
            },
            effective_analogues: effective_count(&weights),
            underflow_fallback: underflow,
        },
        counts,
    })
}

/// Bootstrapped Selective Predictability Scheme: B bootstraps of N samples
/// drawn with the normalized Gaussian kernel probabilities; expectation is
/// the mean of the per-bootstrap means, the standard deviation their
/// unbiased (B-1) spread.
pub fn spsb_predict(
    query: [f64; 2],
    set: &AnalogueSet,
    kernel: &KernelSpec,
    bootstraps: usize,
    samples_per_bootstrap: usize,
    seed: u64,
) -> Result<ForecastResult> {
    spsb_run(query, set, kernel, bootstraps, samples_per_bootstrap, seed, false)
        .map(|o| o.result)
}

/// SPSb-vs-NWKR convergence diagnostics for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceDiagnostics {
    pub schedule: Vec<usize>,
    /// Relative |E_spsb - E_nwkr| / |E_nwkr| per schedule entry (mean over
    /// displacement components).
    pub mae_expectation: Vec<f64>,
    /// Relative |sqrt(N) sigma_spsb - sigma_nwkr| / sigma_nwkr per entry.
    pub mae_sigma: Vec<f64>,
    /// Normalized kernel probability per analogue.
    pub kernel_probability: Vec<f64>,
    /// Sampled frequency per analogue at the largest B.
    pub sampled_frequency: Vec<f64>,
    /// Largest kernel probability among analogues never sampled at the
    /// largest B; None when every analogue appeared.
    pub divergence_probability: Option<f64>,
}

/// Run SPSb over an increasing bootstrap schedule against the NWKR
/// reference. Frequencies are tracked at the largest schedule entry.
pub fn convergence_scan(
    query: [f64; 2],
    set: &AnalogueSet,
    kernel: &KernelSpec,
    schedule: &[usize],
    samples_per_bootstrap: usize,
    seed: u64,
) -> Result<ConvergenceDiagnostics> {
    if schedule.is_empty() {
        return Err(Error::Validation("empty bootstrap schedule".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("bootstrap schedule must be strictly increasing".into()));
    }
    let reference = nwkr_predict(query, set, kernel)?;
    let sqrt_n = (samples_per_bootstrap as f64).sqrt();
    let (weights, _) = kernel_weights(query, set, kernel);

    let mut mae_expectation = Vec::with_capacity(schedule.len());
    let mut mae_sigma = Vec::with_capacity(schedule.len());
    let mut frequencies = vec![0.0; set.len()];
    let last = schedule.len() - 1;
    for (i, &b) in schedule.iter().enumerate() {
        let outcome = spsb_run(
            query,
            set,
            kernel,
            b,
            samples_per_bootstrap,
            crate::seeding::substream(seed, i as u64),
            i == last,
        )?;
        let mut e_err = 0.0;
        let mut e_terms = 0usize;
        let mut s_err = 0.0;
        let mut s_terms = 0usize;
        for k in 0..set.dim() {
            let e_ref = reference.expectation[k];
            if e_ref.abs() > 0.0 {
                e_err += (outcome.result.expectation[k] - e_ref).abs() / e_ref.abs();
                e_terms += 1;
            }
            let s_ref = reference.standard_deviation[k];
            if s_ref > 0.0 {
                s_err += (outcome.result.standard_deviation[k] * sqrt_n - s_ref).abs() / s_ref;
                s_terms += 1;
            }
        }
        mae_expectation.push(if e_terms > 0 { e_err / e_terms as f64 } else { f64::NAN });
        mae_sigma.push(if s_terms > 0 { s_err / s_terms as f64 } else { f64::NAN });
        if i == last {
            let total = (b * samples_per_bootstrap) as f64;
            for (f, &c) in frequencies.iter_mut().zip(outcome.counts.iter()) {
                *f = c as f64 / total;
            }
        }
    }

    let divergence_probability = weights
        .iter()
        .zip(frequencies.iter())
        .filter(|(_, &f)| f == 0.0)
        .map(|(&p, _)| p)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));

    Ok(ConvergenceDiagnostics {
        schedule: schedule.to_vec(),
        mae_expectation,
        mae_sigma,
        kernel_probability: weights,
        sampled_frequency: frequencies,
        divergence_probability,
    })
}

/// Percentage compound annual growth rate from `x_t` to `x_tdt` over `dt`
/// years: ((x_tdt/x_t)^(1/dt) - 1) * 100.
pub fn cagr(x_t: f64, x_tdt: f64, dt: u32) -> Result<f64> {
    if dt < 1 {
        return Err(Error::Validation("CAGR horizon must be at least 1 year".into()));
    }
    if !(x_t > 0.0) || !(x_tdt > 0.0) || !x_t.is_finite() || !x_tdt.is_finite() {
        return Err(Error::Validation(format!(
            "CAGR needs positive values, got {x_t} and {x_tdt}"
        )));
    }
    Ok(((x_tdt / x_t).powf(1.0 / dt as f64) - 1.0) * 100.0)
}

/// Trivial comparison forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// One observed analogue displacement picked uniformly at random.
    Random,
    /// Zero displacement.
    Static,
    /// The target's own previous observed displacement.
    Autocorrelation,
}

/// Baseline forecast; `previous` carries the target's last observed
/// displacement for the autocorrelation baseline.
pub fn baseline_predict(
    kind: BaselineKind,
    previous: Option<&[f64]>,
    set: &AnalogueSet,
    seed: u64,
) -> Result<ForecastResult> {
    if set.is_empty() {
        return Err(Error::Validation("need at least one analogue".into()));
    }
    let dim = set.dim();
    let (expectation, method) = match kind {
        BaselineKind::Static => (vec![0.0; dim], MethodTag::Static),
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = rng.random_range(0..set.len());
            (set.analogues[idx].displacement.clone(), MethodTag::Random)
        }
        BaselineKind::Autocorrelation => match previous {
            Some(prev) => {
                if prev.len() != dim {
                    return Err(Error::Validation("previous displacement dimension differs".into()));
                }
                (prev.to_vec(), MethodTag::Autocorrelation)
            }
            None => {
                return Err(Error::Validation(
                    "autocorrelation baseline needs a prior displacement".into(),
                ))
            }
        },
    };
    Ok(ForecastResult {
        expectation,
        standard_deviation: vec![0.0; dim],
        method,
        params: ForecastParams {
            seed: matches!(kind, BaselineKind::Random).then_some(seed),
            ..ForecastParams::default()
        },
        effective_analogues: set.len() as f64,
        underflow_fallback: false,
    })
}

/// F_c = sum_p M_cp C_p: the unnormalized fitness reconstruction (equals the
/// pre-normalization half-step of the FC map).
pub fn reconstruct_fitness(
    m: ArrayView2<'_, u8>,
    complexity: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (nc, np) = m.dim();
    if complexity.len() != np {
        return Err(Error::Validation(format!(
            "complexity has {} entries, matrix has {np} products",
            complexity.len()
        )));
    }
    let mut fitness = Array1::zeros(nc);
    for c in 0..nc {
        let mut acc = 0.0;
        for p in 0..np {
            if m[[c, p]] == 1 {
                acc += complexity[p];
            }
        }
        fitness[c] = acc;
    }
    Ok(fitness)
}

/// Least-squares inversion of logPRODY = nRCA^T log10(GDP).
#[derive(Debug, Clone)]
pub struct NrcaInversion {
    pub log_gdp: Array1<f64>,
    pub residual_norm: f64,
    pub rank: usize,
    pub rank_deficient: bool,
    /// Products dropped (zero nRCA column or missing logPRODY).
    pub dropped_products: Vec<usize>,
}

/// Estimate log10 GDP per country from a column-normalized nRCA matrix and a
/// logPRODY vector via the SVD pseudo-inverse; rank-deficient systems yield
/// the minimum-norm solution with a flag.
pub fn invert_nrca_gdp(
    nrca: ArrayView2<'_, f64>,
    logprody: &Array1<f64>,
) -> Result<NrcaInversion> {
    let (nc, np) = nrca.dim();
    if logprody.len() != np {
        return Err(Error::Validation(format!(
            "logPRODY has {} entries, nRCA has {np} products",
            logprody.len()
        )));
    }
    let mut rows: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    for p in 0..np {
        let col_sum: f64 = nrca.column(p).sum();
        if col_sum == 0.0 || logprody[p].is_nan() {
            dropped.push(p);
            continue;
        }
        if (col_sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "nRCA column {p} sums to {col_sum}, not 1: not column-normalized"
            )));
        }
        rows.push(p);
    }
    if rows.is_empty() {
        return Err(Error::Validation("no usable products for inversion".into()));
    }

    let a = nalgebra::DMatrix::from_fn(rows.len(), nc, |r, c| nrca[[c, rows[r]]]);
    let b = nalgebra::DVector::from_fn(rows.len(), |r, _| logprody[rows[r]]);
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * (rows.len().max(nc) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let solution = svd
        .solve(&b, tol)
        .map_err(|e| Error::Degenerate(format!("SVD solve failed: {e}")))?;
    let residual_norm = (&a * &solution - &b).norm();

    Ok(NrcaInversion {
        log_gdp: Array1::from_iter(solution.iter().copied()),
        residual_norm,
        rank,
        rank_deficient: rank < nc.min(rows.len()),
        dropped_products: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn analogue(x: f64, y: f64, d: &[f64]) -> Analogue {
        Analogue {
            entity: 0,
            time: 0,
            position: [x, y],
            displacement: d.to_vec(),
        }
    }

    /// Seeded synthetic analogue cloud with a smooth displacement surface.
    pub(crate) fn synthetic_set(count: usize, seed: u64, noise: f64) -> AnalogueSet {
        use rand_distr::Normal;
        let mut rng = crate::seeding::rng(seed, 0xa71);
        let gauss: Normal<f64> = Normal::new(0.0, noise).unwrap();
        let analogues = (0..count)
            .map(|i| {
                let x = rng.random::<f64>();
                let y = rng.random::<f64>();
                let d = 2.0
                    + (2.0 * std::f64::consts::PI * x).sin()
                        * (2.0 * std::f64::consts::PI * y).cos()
                    + gauss.sample(&mut rng);
                Analogue {
                    entity: i,
                    time: 0,
                    position: [x, y],
                    displacement: vec![d],
                }
            })
            .collect();
        AnalogueSet::new(analogues).unwrap()
    }

    #[test]
    fn nwkr_single_analogue_is_exact() {
        let set = AnalogueSet::new(vec![analogue(0.3, 0.3, &[1.5, -0.5])]).unwrap();
        let kernel = KernelSpec::new(0.2).unwrap();
        let r = nwkr_predict([0.0, 0.0], &set, &kernel).unwrap();
        assert_eq!(r.expectation, vec![1.5, -0.5]);
        assert_eq!(r.standard_deviation, vec![0.0, 0.0]);
    }

    #[test]
    fn nwkr_equidistant_pair_averages() {
        let set = AnalogueSet::new(vec![
            analogue(1.0, 0.0, &[2.0]),
            analogue(-1.0, 0.0, &[6.0]),
        ])
        .unwrap();
        let kernel = KernelSpec::new(0.5).unwrap();
        let r = nwkr_predict([0.0, 0.0], &set, &kernel).unwrap();
        assert_abs_diff_eq!(r.expectation[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn nwkr_matches_straight_line_oracle() {
        let set = synthetic_set(50, 3, 0.3);
        let kernel = KernelSpec::from_analogues(&set, 0.1).unwrap();
        let query = [0.4, 0.6];
        let r = nwkr_predict(query, &set, &kernel).unwrap();

        // independent re-summation
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for a in set.iter() {
            let d2 = (query[0] - a.position[0]).powi(2) + (query[1] - a.position[1]).powi(2);
            let w = (-d2 / (2.0 * kernel.sigma * kernel.sigma)).exp();
            wsum += w;
            acc += w * a.displacement[0];
        }
        assert_abs_diff_eq!(r.expectation[0], acc / wsum, epsilon = 1e-12);
    }

    #[test]
    fn nwkr_is_invariant_under_set_duplication() {
        let set = synthetic_set(40, 9, 0.2);
        let doubled = AnalogueSet::new(
            set.iter().cloned().chain(set.iter().cloned()).collect(),
        )
        .unwrap();
        let kernel = KernelSpec::from_analogues(&set, 0.1).unwrap();
        let a = nwkr_predict([0.5, 0.5], &set, &kernel).unwrap();
        let b = nwkr_predict([0.5, 0.5], &doubled, &kernel).unwrap();
        assert_abs_diff_eq!(a.expectation[0], b.expectation[0], epsilon = 1e-12);
        assert_abs_diff_eq!(
            a.standard_deviation[0],
            b.standard_deviation[0],
            epsilon = 1e-12
        );
    }

    #[test]
    fn nwkr_expectation_is_a_convex_combination() {
        let set = synthetic_set(30, 5, 0.4);
        let kernel = KernelSpec::from_analogues(&set, 0.1).unwrap();
        let r = nwkr_predict([0.2, 0.8], &set, &kernel).unwrap();
        let lo = set
            .iter()
            .map(|a| a.displacement[0])
            .fold(f64::INFINITY, f64::min);
        let hi = set
            .iter()
            .map(|a| a.displacement[0])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(r.expectation[0] >= lo && r.expectation[0] <= hi);
    }

    #[test]
    fn nwkr_underflow_falls_back_to_nearest() {
        let set = AnalogueSet::new(vec![
            analogue(1.0, 0.0, &[5.0]),
            analogue(2.0, 0.0, &[9.0]),
        ])
        .unwrap();
        let kernel = KernelSpec::new(1e-3).unwrap();
        let r = nwkr_predict([1000.0, 0.0], &set, &kernel).unwrap();
        assert!(r.underflow_fallback);
        // nearest analogue dominates completely
        assert_abs_diff_eq!(r.expectation[0], 9.0, epsilon = 1e-9);
    }

    #[test]
    fn spsb_constant_displacements_are_exact_for_any_seed() {
        let set = AnalogueSet::new(vec![
            analogue(0.1, 0.1, &[3.0]),
            analogue(0.5, 0.5, &[3.0]),
            analogue(0.9, 0.9, &[3.0]),
        ])
        .unwrap();
        let kernel = KernelSpec::new(0.3).unwrap();
        for seed in [0, 1, 99] {
            let r = spsb_predict([0.4, 0.4], &set, &kernel, 50, 10, seed).unwrap();
            assert_abs_diff_eq!(r.expectation[0], 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(r.standard_deviation[0], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn spsb_fixed_seed_is_bit_reproducible() {
        let set = synthetic_set(80, 2, 0.5);
        let kernel = KernelSpec::from_analogues(&set, 0.1).unwrap();
        let a = spsb_predict([0.3, 0.3], &set, &kernel, 200, 50, 7).unwrap();
        let b = spsb_predict([0.3, 0.3], &set, &kernel, 200, 50, 7).unwrap();
        assert_eq!(a.expectation, b.expectation);
        assert_eq!(a.standard_deviation, b.standard_deviation);
        let c = spsb_predict([0.3, 0.3], &set, &kernel, 200, 50, 8).unwrap();
        assert_ne!(a.expectation, c.expectation);
    }

    #[test]
    fn spsb_rejects_zero_bootstraps() {
        let set = synthetic_set(10, 1, 0.1);
        let kernel = KernelSpec::new(0.2).unwrap();
        assert!(spsb_predict([0.5, 0.5], &set, &kernel, 0, 10, 0).is_err());
    }

    #[test]
    fn convergence_scan_frequencies_sum_to_one() {
        let set = synthetic_set(100, 4, 0.3);
        let kernel = KernelSpec::from_analogues(&set, 0.1).unwrap();
        let diag = convergence_scan([0.5, 0.5], &set, &kernel, &[50, 200], 20, 3).unwrap();
        let p_sum: f64 = diag.kernel_probability.iter().sum();
        assert_abs_diff_eq!(p_sum, 1.0, epsilon = 1e-9);
        let f_sum: f64 = diag.sampled_frequency.iter().sum();
        assert_abs_diff_eq!(f_sum, 1.0, epsilon = 1e-9);
        assert_eq!(diag.mae_expectation.len(), 2);
    }

    #[test]
    fn convergence_scan_requires_increasing_schedule() {
        let set = synthetic_set(10, 4, 0.3);
        let kernel = KernelSpec::new(0.2).unwrap();
        assert!(convergence_scan([0.5, 0.5], &set, &kernel, &[100, 100], 10, 0).is_err());
        assert!(convergence_scan([0.5, 0.5], &set, &kernel, &[], 10, 0).is_err());
    }

    #[test]
    fn cagr_examples() {
        assert_abs_diff_eq!(cagr(100.0, 100.0, 3).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cagr(100.0, 121.0, 2).unwrap(), 10.0, epsilon = 1e-9);
        // halving then doubling composes to zero over the full window
        assert_abs_diff_eq!(cagr(64.0, 64.0, 6).unwrap(), 0.0, epsilon = 1e-12);
        assert!(cagr(0.0, 5.0, 3).is_err());
        assert!(cagr(5.0, -1.0, 3).is_err());
        assert!(cagr(5.0, 5.0, 0).is_err());
    }

    #[test]
    fn baselines() {
        let set = AnalogueSet::new(vec![analogue(0.0, 0.0, &[7.0])]).unwrap();
        let s = baseline_predict(BaselineKind::Static, None, &set, 0).unwrap();
        assert_eq!(s.expectation, vec![0.0]);
        let a = baseline_predict(BaselineKind::Autocorrelation, Some(&[2.0]), &set, 0).unwrap();
        assert_eq!(a.expectation, vec![2.0]);
        let r = baseline_predict(BaselineKind::Random, None, &set, 5).unwrap();
        assert_eq!(r.expectation, vec![7.0], "single analogue must be picked");
        assert!(baseline_predict(BaselineKind::Autocorrelation, None, &set, 0).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let m = array![[1u8, 1, 1], [1, 1, 1]];
        let c = array![1.0, 1.0, 1.0];
        let f = reconstruct_fitness(m.view(), &c).unwrap();
        assert_eq!(f, array![3.0, 3.0]);

        let single = array![[1u8, 0], [0, 1]];
        let c = array![2.5, 0.5];
        let f = reconstruct_fitness(single.view(), &c).unwrap();
        assert_eq!(f, array![2.5, 0.5]);
    }

    #[test]
    fn reconstruction_matches_fc_half_step() {
        use crate::metrics::{fitness_complexity, FcOptions};
        let mut rng = crate::seeding::rng(3, 3);
        let m = loop {
            let cand =
                ndarray::Array2::from_shape_fn((8, 10), |_| u8::from(rng.random_bool(0.5)));
            let rows_ok = (0..8).all(|c| cand.row(c).iter().any(|&v| v == 1));
            let cols_ok = (0..10).all(|p| cand.column(p).iter().any(|&v| v == 1));
            if rows_ok && cols_ok {
                break cand;
            }
        };
        let fc = fitness_complexity(m.view(), &FcOptions::default()).unwrap();
        assert!(fc.converged);
        let rebuilt = reconstruct_fitness(m.view(), &fc.complexity).unwrap();
        // proportional to the converged fitness: constant ratio
        let ratio = rebuilt[0] / fc.fitness[0];
        for c in 0..8 {
            assert_abs_diff_eq!(rebuilt[c] / fc.fitness[c], ratio, epsilon = 1e-10);
        }
    }

    #[test]
    fn inversion_recovers_square_system() {
        // products == countries, strictly dominant diagonal weights
        let nc = 6;
        let mut rng = crate::seeding::rng(11, 0);
        let mut nrca = ndarray::Array2::zeros((nc, nc));
        for p in 0..nc {
            let mut col: Vec<f64> = (0..nc)
                .map(|c| if c == p { 5.0 } else { rng.random::<f64>() * 0.5 })
                .collect();
            let sum: f64 = col.iter().sum();
            for v in col.iter_mut() {
                *v /= sum;
            }
            for c in 0..nc {
                nrca[[c, p]] = col[c];
            }
        }
        let truth: Vec<f64> = (0..nc).map(|c| 3.0 + 0.3 * c as f64).collect();
        let logprody = Array1::from_shape_fn(nc, |p| {
            (0..nc).map(|c| nrca[[c, p]] * truth[c]).sum::<f64>()
        });
        let inv = invert_nrca_gdp(nrca.view(), &logprody).unwrap();
        assert!(!inv.rank_deficient);
        for c in 0..nc {
            assert_abs_diff_eq!(inv.log_gdp[c], truth[c], epsilon = 1e-8);
        }
        assert!(inv.residual_norm < 1e-10);
    }

    #[test]
    fn inversion_identity_like_nrca_reads_off_logprody() {
        // every product exported by exactly one country
        let nrca = array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let logprody = array![4.0, 4.0, 2.5];
        let inv = invert_nrca_gdp(nrca.view(), &logprody).unwrap();
        assert_abs_diff_eq!(inv.log_gdp[0], 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(inv.log_gdp[1], 2.5, epsilon = 1e-10);
    }

    #[test]
    fn inversion_residual_shrinks_with_noise() {
        let nc = 5;
        let np = 40;
        let mut rng = crate::seeding::rng(13, 1);
        let mut nrca = ndarray::Array2::zeros((nc, np));
        for p in 0..np {
            let mut col: Vec<f64> = (0..nc).map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = col.iter().sum();
            for (c, v) in col.iter().enumerate() {
                nrca[[c, p]] = v / sum;
            }
        }
        let truth: Vec<f64> = (0..nc).map(|c| 3.0 + 0.4 * c as f64).collect();
        let clean = Array1::from_shape_fn(np, |p| {
            (0..nc).map(|c| nrca[[c, p]] * truth[c]).sum::<f64>()
        });
        let mut prev_residual = -1.0;
        for &noise in &[0.1, 0.01, 0.001] {
            use rand_distr::Normal;
            let gauss: Normal<f64> = Normal::new(0.0, noise).unwrap();
            let mut rng = crate::seeding::rng(17, (noise * 1e5) as u64);
            let noisy = Array1::from_shape_fn(np, |p| clean[p] + gauss.sample(&mut rng));
            let inv = invert_nrca_gdp(nrca.view(), &noisy).unwrap();
            if prev_residual >= 0.0 {
                assert!(inv.residual_norm < prev_residual);
            }
            prev_residual = inv.residual_norm;
        }
    }

    #[test]
    fn inversion_flags_rank_deficiency() {
        // two identical countries: rank 1 over 2 unknowns
        let nrca = array![[0.5, 0.5], [0.5, 0.5]];
        let logprody = array![4.0, 4.0];
        let inv = invert_nrca_gdp(nrca.view(), &logprody).unwrap();
        assert!(inv.rank_deficient);
        // minimum-norm solution still reproduces the data
        assert!(inv.residual_norm < 1e-10);
    }
}
