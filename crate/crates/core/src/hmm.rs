//! HMM regularization of RCA time series.
//!
//! One 4-state model per country, trained jointly on all of the country's
//! product series with Baum-Welch. Observations are log(RCA + delta): RCA is
//! positive and heavy-tailed, so Gaussian emissions in log space keep the EM
//! updates in closed form. States are relabeled by increasing emission mean,
//! so stage 4 is the strongest comparative advantage. Decoding takes the
//! posterior-marginal MAP at each timestep (not the Viterbi path).
//!
//! By default each series is centered at its own log-space median before
//! pooling (the per-series reading of "quantiles of the RCA time-series").
//! RCA carries a country-and-product level offset (its row and column
//! normalizations), and pooling raw series per country blurs the regime
//! structure with the per-product part of that offset; centering removes it
//! and is what makes the learned transitions sticky enough to denoise.
//! Uncentered pooling stays available through `HmmOptions::center`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ExportPanel;
use crate::error::{Error, Result};
use crate::metrics::{self, BinaryExportMatrix, MatrixProvenance};
use crate::seeding;

pub const STAGES: usize = 4;

/// Offset added before taking logs so zero RCA stays finite.
pub const RCA_LOG_OFFSET: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct HmmOptions {
    /// Stop when the log-likelihood gain falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Seeded restarts; the best final likelihood wins.
    pub restarts: usize,
    pub var_floor: f64,
    /// Center each series at its own log-space median before pooling.
    pub center: bool,
}

impl Default for HmmOptions {
    fn default() -> Self {
        HmmOptions {
            tol: 1e-6,
            max_iter: 500,
            restarts: 3,
            var_floor: 1e-4,
            center: true,
        }
    }
}

/// Per-country model: transitions, initial distribution, Gaussian emission
/// parameters on log(RCA + delta), and the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmmModel {
    pub transition: [[f64; STAGES]; STAGES],
    pub initial: [f64; STAGES],
    pub means: [f64; STAGES],
    pub variances: [f64; STAGES],
    pub trained: bool,
    /// Observations were centered per series at training time; decoding
    /// applies the same transform.
    pub centered: bool,
    pub log_likelihood: Vec<f64>,
    /// Pooled log-space quartile edges used for quantization and init.
    pub bin_edges: [f64; 3],
}

impl HmmModel {
    fn untrained(edges: [f64; 3]) -> Self {
        HmmModel {
            transition: [[0.25; STAGES]; STAGES],
            initial: [0.25; STAGES],
            means: [0.0; STAGES],
            variances: [1.0; STAGES],
            trained: false,
            centered: false,
            log_likelihood: Vec::new(),
            bin_edges: edges,
        }
    }

    /// Expected RCA of each stage, mapped back from log space; for a
    /// centered model, `center` is the series' own log-space median.
    pub fn stage_rca_at(&self, center: f64) -> [f64; STAGES] {
        let mut out = [0.0; STAGES];
        for (s, m) in self.means.iter().enumerate() {
            out[s] = (m + center).exp() - RCA_LOG_OFFSET;
        }
        out
    }

    /// Expected RCA of each stage for uncentered models.
    pub fn stage_rca(&self) -> [f64; STAGES] {
        self.stage_rca_at(0.0)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Most probable stage per year for one (country, product) cell; 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePath {
    pub stages: Vec<u8>,
}

/// log(RCA + delta) transform of one series.
pub fn log_rca(series: &[f64]) -> Vec<f64> {
    series.iter().map(|&v| (v + RCA_LOG_OFFSET).ln()).collect()
}

/// A series' own center: the median of its log(RCA + delta) values.
pub fn series_center(series: &[f64]) -> f64 {
    let mut logs = log_rca(series);
    logs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = logs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        logs[n / 2]
    } else {
        0.5 * (logs[n / 2 - 1] + logs[n / 2])
    }
}

/// Type-7 (linear interpolation) quartiles of a pooled sample.
pub fn quartile_edges(pooled: &[f64]) -> Result<[f64; 3]> {
    if pooled.is_empty() {
        return Err(Error::Validation("cannot take quartiles of nothing".into()));
    }
    let mut sorted: Vec<f64> = pooled.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let quantile = |q: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        if lo + 1 >= sorted.len() {
            return sorted[sorted.len() - 1];
        }
        sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
    };
    Ok([quantile(0.25), quantile(0.5), quantile(0.75)])
}

/// Pooled log-space quartile edges over all series of one country.
pub fn pooled_log_edges(series_set: &[Vec<f64>]) -> Result<[f64; 3]> {
    let pooled: Vec<f64> = series_set.iter().flat_map(|s| log_rca(s)).collect();
    quartile_edges(&pooled)
}

/// Bin an RCA series into stages 1..=4 by the pooled log-space edges.
/// Constant series land in a single stage; that is not an error.
pub fn quantize_rca(series: &[f64], edges: &[f64; 3]) -> Vec<u8> {
    log_rca(series)
        .into_iter()
        .map(|v| {
            if v < edges[0] {
                1
            } else if v < edges[1] {
                2
            } else if v < edges[2] {
                3
            } else {
                4
            }
        })
        .collect()
}

/// Per-timestep emission log-densities, shifted by the per-step max so the
/// scaled forward/backward recursions never underflow. Returns (shifted
/// densities, shifts).
fn shifted_emissions(model: &HmmModel, obs: &[f64]) -> (Array2<f64>, Vec<f64>) {
    let t_len = obs.len();
    let mut dens = Array2::zeros((t_len, STAGES));
    let mut shifts = vec![0.0; t_len];
    for (t, &o) in obs.iter().enumerate() {
        let mut lb = [0.0; STAGES];
        for s in 0..STAGES {
            let var = model.variances[s];
            let d = o - model.means[s];
            lb[s] = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var);
        }
        let max = lb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shifts[t] = max;
        for s in 0..STAGES {
            dens[[t, s]] = (lb[s] - max).exp();
        }
    }
    (dens, shifts)
}

/// Scaled forward-backward pass. Returns (posterior marginals gamma with
/// rows summing to 1, xi accumulated over transitions, log-likelihood).
fn forward_backward_full(model: &HmmModel, obs: &[f64]) -> (Array2<f64>, [[f64; STAGES]; STAGES], f64) {
    let t_len = obs.len();
    let (b, shifts) = shifted_emissions(model, obs);
    let mut alpha = Array2::zeros((t_len, STAGES));
    let mut scale = vec![0.0; t_len];

    for s in 0..STAGES {
        alpha[[0, s]] = model.initial[s] * b[[0, s]];
    }
    scale[0] = (0..STAGES).map(|s| alpha[[0, s]]).sum();
    if scale[0] <= 0.0 {
        scale[0] = f64::MIN_POSITIVE;
    }
    for s in 0..STAGES {
        alpha[[0, s]] /= scale[0];
    }
    for t in 1..t_len {
        for j in 0..STAGES {
            let mut acc = 0.0;
            for i in 0..STAGES {
                acc += alpha[[t - 1, i]] * model.transition[i][j];
            }
            alpha[[t, j]] = acc * b[[t, j]];
        }
        scale[t] = (0..STAGES).map(|s| alpha[[t, s]]).sum();
        if scale[t] <= 0.0 {
            scale[t] = f64::MIN_POSITIVE;
        }
        for s in 0..STAGES {
            alpha[[t, s]] /= scale[t];
        }
    }

    let mut beta = Array2::zeros((t_len, STAGES));
    for s in 0..STAGES {
        beta[[t_len - 1, s]] = 1.0;
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..STAGES {
            let mut acc = 0.0;
            for j in 0..STAGES {
                acc += model.transition[i][j] * b[[t + 1, j]] * beta[[t + 1, j]];
            }
            beta[[t, i]] = acc / scale[t + 1];
        }
    }

    let mut gamma = Array2::zeros((t_len, STAGES));
    for t in 0..t_len {
        let mut norm = 0.0;
        for s in 0..STAGES {
            gamma[[t, s]] = alpha[[t, s]] * beta[[t, s]];
            norm += gamma[[t, s]];
        }
        if norm > 0.0 {
            for s in 0..STAGES {
                gamma[[t, s]] /= norm;
            }
        }
    }

    let mut xi = [[0.0; STAGES]; STAGES];
    for t in 0..t_len.saturating_sub(1) {
        let mut norm = 0.0;
        let mut local = [[0.0; STAGES]; STAGES];
        for i in 0..STAGES {
            for j in 0..STAGES {
                let v = alpha[[t, i]]
                    * model.transition[i][j]
                    * b[[t + 1, j]]
                    * beta[[t + 1, j]]
                    / scale[t + 1];
                local[i][j] = v;
                norm += v;
            }
        }
        if norm > 0.0 {
            for i in 0..STAGES {
                for j in 0..STAGES {
                    xi[i][j] += local[i][j] / norm;
                }
            }
        }
    }

    let loglik: f64 = scale
        .iter()
        .zip(shifts.iter())
        .map(|(c, s)| c.ln() + s)
        .sum();
    (gamma, xi, loglik)
}

/// Posterior state marginals and log-likelihood of one observed series.
pub fn posterior_marginals(model: &HmmModel, series: &[f64]) -> Result<(Array2<f64>, f64)> {
    if !model.trained {
        return Err(Error::UntrainedModel);
    }
    if series.is_empty() {
        return Err(Error::Validation("empty series".into()));
    }
    let mut obs = log_rca(series);
    if model.centered {
        let center = series_center(series);
        for o in obs.iter_mut() {
            *o -= center;
        }
    }
    let (gamma, _, loglik) = forward_backward_full(model, &obs);
    Ok((gamma, loglik))
}

/// Most probable development stage at each timestep (pointwise MAP over the
/// posterior marginals).
pub fn decode_stages(model: &HmmModel, series: &[f64]) -> Result<StagePath> {
    let (gamma, _) = posterior_marginals(model, series)?;
    let stages = gamma
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for s in 1..STAGES {
                if row[s] > row[best] {
                    best = s;
                }
            }
            (best + 1) as u8
        })
        .collect();
    Ok(StagePath { stages })
}

fn initial_model(
    series_log: &[Vec<f64>],
    edges: [f64; 3],
    jitter_sd: f64,
    rng: &mut impl Rng,
    var_floor: f64,
) -> HmmModel {
    let pooled: Vec<f64> = series_log.iter().flatten().copied().collect();
    let min = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bounds = [min, edges[0], edges[1], edges[2], max];

    let mut means = [0.0; STAGES];
    let mut variances = [0.0; STAGES];
    for s in 0..STAGES {
        means[s] = 0.5 * (bounds[s] + bounds[s + 1]);
        // within-bin variance, floored
        let members: Vec<f64> = pooled
            .iter()
            .copied()
            .filter(|&v| v >= bounds[s] && v <= bounds[s + 1])
            .collect();
        let var = if members.len() > 1 {
            let m = members.iter().sum::<f64>() / members.len() as f64;
            members.iter().map(|v| (v - m).powi(2)).sum::<f64>() / members.len() as f64
        } else {
            0.0
        };
        let span = (max - min).max(1e-3);
        variances[s] = var.max(span * span / 64.0).max(var_floor);
    }
    if jitter_sd > 0.0 {
        let noise = Normal::new(0.0, jitter_sd).expect("valid");
        for m in means.iter_mut() {
            *m += noise.sample(rng);
        }
    }

    let mut transition = [[0.05; STAGES]; STAGES];
    for (s, row) in transition.iter_mut().enumerate() {
        row[s] = 0.85;
    }
    HmmModel {
        transition,
        initial: [1.0 / STAGES as f64; STAGES],
        means,
        variances,
        trained: true,
        centered: false,
        log_likelihood: Vec::new(),
        bin_edges: edges,
    }
}

fn em_iterate(model: &mut HmmModel, series_log: &[Vec<f64>], opts: &HmmOptions) -> Vec<f64> {
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..opts.max_iter {
        let mut pi_acc = [0.0; STAGES];
        let mut xi_acc = [[0.0; STAGES]; STAGES];
        let mut trans_gamma = [0.0; STAGES];
        let mut wsum = [0.0; STAGES];
        let mut wobs = [0.0; STAGES];
        let mut wobs2 = [0.0; STAGES];
        let mut loglik = 0.0;

        for obs in series_log {
            let (gamma, xi, ll) = forward_backward_full(model, obs);
            loglik += ll;
            for s in 0..STAGES {
                pi_acc[s] += gamma[[0, s]];
            }
            for i in 0..STAGES {
                for j in 0..STAGES {
                    xi_acc[i][j] += xi[i][j];
                }
            }
            for t in 0..obs.len() {
                for s in 0..STAGES {
                    let g = gamma[[t, s]];
                    wsum[s] += g;
                    wobs[s] += g * obs[t];
                    wobs2[s] += g * obs[t] * obs[t];
                    if t + 1 < obs.len() {
                        trans_gamma[s] += g;
                    }
                }
            }
        }

        trace.push(loglik);

        // M-step
        let n_seq = series_log.len() as f64;
        for s in 0..STAGES {
            model.initial[s] = pi_acc[s] / n_seq;
        }
        for i in 0..STAGES {
            if trans_gamma[i] > 0.0 {
                for j in 0..STAGES {
                    model.transition[i][j] = xi_acc[i][j] / trans_gamma[i];
                }
                // renormalize against accumulated rounding
                let row_sum: f64 = model.transition[i].iter().sum();
                if row_sum > 0.0 {
                    for j in 0..STAGES {
                        model.transition[i][j] /= row_sum;
                    }
                }
            }
        }
        for s in 0..STAGES {
            if wsum[s] > 1e-12 {
                let mean = wobs[s] / wsum[s];
                let var = (wobs2[s] / wsum[s] - mean * mean).max(opts.var_floor);
                model.means[s] = mean;
                model.variances[s] = var;
            }
        }

        if (loglik - prev).abs() < opts.tol && prev.is_finite() {
            break;
        }
        prev = loglik;
    }
    trace
}

fn relabel_by_mean(model: &mut HmmModel) {
    let mut order: Vec<usize> = (0..STAGES).collect();
    order.sort_by(|&a, &b| model.means[a].partial_cmp(&model.means[b]).expect("finite"));
    let old = model.clone();
    for (new_i, &src_i) in order.iter().enumerate() {
        model.initial[new_i] = old.initial[src_i];
        model.means[new_i] = old.means[src_i];
        model.variances[new_i] = old.variances[src_i];
        for (new_j, &src_j) in order.iter().enumerate() {
            model.transition[new_i][new_j] = old.transition[src_i][src_j];
        }
    }
}

/// Train one country model on all of its product RCA series jointly.
///
/// Needs at least 5 years of data. All-zero (constant) input yields an
/// untrained model rather than an error; callers fall back to thresholding.
pub fn train_hmm(series: &[Vec<f64>], opts: &HmmOptions, seed: u64) -> Result<HmmModel> {
    if series.is_empty() {
        return Err(Error::Validation("no series to train on".into()));
    }
    let years = series[0].len();
    if years < 5 {
        return Err(Error::Validation(format!(
            "HMM training needs at least 5 years, got {years}"
        )));
    }
    if series.iter().any(|s| s.len() != years) {
        return Err(Error::Validation("series lengths differ".into()));
    }

    let series_log: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let mut obs = log_rca(s);
            if opts.center {
                let center = series_center(s);
                for o in obs.iter_mut() {
                    *o -= center;
                }
            }
            obs
        })
        .collect();
    let pooled: Vec<f64> = series_log.iter().flatten().copied().collect();
    let min = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let edges = quartile_edges(&pooled)?;
    if max - min < 1e-9 {
        return Ok(HmmModel::untrained(edges));
    }

    // relative floor against single-point variance collapse
    let pooled_mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let pooled_var =
        pooled.iter().map(|v| (v - pooled_mean).powi(2)).sum::<f64>() / pooled.len() as f64;
    let var_floor = opts.var_floor.max(1e-3 * pooled_var);

    let spread = max - min;
    let mut best: Option<HmmModel> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = seeding::rng(seed, restart as u64);
        let jitter = if restart == 0 { 0.0 } else { 0.15 * spread };
        let mut model = initial_model(&series_log, edges, jitter, &mut rng, var_floor);
        model.centered = opts.center;
        let trace = em_iterate(&mut model, &series_log, &HmmOptions { var_floor, ..*opts });
        model.log_likelihood = trace;
        let better = match &best {
            None => true,
            Some(b) => {
                model.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
                    > b.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
            }
        };
        if better {
            best = Some(model);
        }
    }
    let mut model = best.expect("at least one restart");
    relabel_by_mean(&mut model);
    Ok(model)
}

/// Which stages count as "exporting" when binarizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeRule {
    /// Stage active iff its expected RCA (emission mean mapped back from log
    /// space) is >= 1: keeps the original threshold semantics.
    ExpectedRca,
    /// Stages 3 and 4 active, a fixed sensitivity alternative.
    Top2,
}

impl BinarizeRule {
    /// `center` is the series' own log-space median for centered models and
    /// 0 otherwise.
    pub fn active(&self, model: &HmmModel, stage: u8, center: f64) -> bool {
        match self {
            BinarizeRule::ExpectedRca => model.stage_rca_at(center)[(stage - 1) as usize] >= 1.0,
            BinarizeRule::Top2 => stage >= 3,
        }
    }
}

/// HMM regularization of a whole panel.
#[derive(Debug, Clone)]
pub struct RegularizedPanel {
    /// One model per country, country index order.
    pub models: Vec<HmmModel>,
    /// One matrix per year, provenance `hmm-regularized`.
    pub matrices: Vec<BinaryExportMatrix>,
    /// Countries whose model could not be trained (degenerate input); their
    /// rows fall back to plain thresholding.
    pub untrained: Vec<usize>,
}

/// Train per-country models, decode every (country, product) series, and
/// binarize into per-year matrices.
pub fn regularize_panel(
    panel: &ExportPanel,
    opts: &HmmOptions,
    rule: BinarizeRule,
    seed: u64,
) -> Result<RegularizedPanel> {
    let years = panel.years().to_vec();
    let nc = panel.countries().len();
    let np = panel.products().len();

    // RCA per year once, sliced per country below.
    let mut rca_by_year = Vec::with_capacity(years.len());
    for &year in &years {
        rca_by_year.push(metrics::compute_rca(panel, year)?);
    }

    struct CountryResult {
        model: HmmModel,
        // np x years of 0/1, or None when untrained
        bits: Option<Array2<u8>>,
    }

    let per_country: Vec<CountryResult> = (0..nc)
        .into_par_iter()
        .map(|c| -> Result<CountryResult> {
            let series: Vec<Vec<f64>> = (0..np)
                .map(|p| {
                    rca_by_year
                        .iter()
                        .map(|rca| rca.values[[c, p]])
                        .collect::<Vec<f64>>()
                })
                .collect();
            let model = train_hmm(&series, opts, seeding::substream(seed, c as u64))?;
            if !model.trained {
                return Ok(CountryResult { model, bits: None });
            }
            let mut bits = Array2::zeros((np, years.len()));
            for (p, s) in series.iter().enumerate() {
                let path = decode_stages(&model, s)?;
                let center = if model.centered { series_center(s) } else { 0.0 };
                for (t, &stage) in path.stages.iter().enumerate() {
                    bits[[p, t]] = u8::from(rule.active(&model, stage, center));
                }
            }
            Ok(CountryResult {
                model,
                bits: Some(bits),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut matrices = Vec::with_capacity(years.len());
    for (t, &year) in years.iter().enumerate() {
        let mut m = Array2::zeros((nc, np));
        for (c, result) in per_country.iter().enumerate() {
            match &result.bits {
                Some(bits) => {
                    for p in 0..np {
                        m[[c, p]] = bits[[p, t]];
                    }
                }
                None => {
                    for p in 0..np {
                        m[[c, p]] = u8::from(rca_by_year[t].values[[c, p]] >= 1.0);
                    }
                }
            }
        }
        matrices.push(BinaryExportMatrix {
            year,
            m,
            provenance: MatrixProvenance::HmmRegularized,
        });
    }

    let untrained = per_country
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.model.trained)
        .map(|(c, _)| c)
        .collect();
    Ok(RegularizedPanel {
        models: per_country.into_iter().map(|r| r.model).collect(),
        matrices,
        untrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;
    use approx::assert_abs_diff_eq;

    fn sample_model() -> HmmModel {
        HmmModel {
            transition: [
                [0.90, 0.05, 0.03, 0.02],
                [0.05, 0.85, 0.07, 0.03],
                [0.02, 0.08, 0.85, 0.05],
                [0.01, 0.04, 0.05, 0.90],
            ],
            initial: [0.4, 0.3, 0.2, 0.1],
            means: [-3.0, -1.0, 1.0, 3.0],
            variances: [0.09, 0.09, 0.09, 0.09],
            trained: true,
            centered: false,
            log_likelihood: vec![],
            bin_edges: [-2.0, 0.0, 2.0],
        }
    }

    fn uncentered() -> HmmOptions {
        HmmOptions {
            center: false,
            ..HmmOptions::default()
        }
    }

    /// Draw (states, RCA series) pairs from a known model.
    fn sample_series(
        model: &HmmModel,
        count: usize,
        len: usize,
        seed: u64,
    ) -> (Vec<Vec<u8>>, Vec<Vec<f64>>) {
        use rand::Rng;
        let mut states_all = Vec::new();
        let mut series_all = Vec::new();
        for k in 0..count {
            let mut rng = crate::seeding::rng(seed, k as u64);
            let mut states = Vec::with_capacity(len);
            let mut series = Vec::with_capacity(len);
            let mut s = {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = STAGES - 1;
                for (i, &p) in model.initial.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            for _ in 0..len {
                states.push((s + 1) as u8);
                let noise: f64 = {
                    let n = Normal::new(0.0, model.variances[s].sqrt()).unwrap();
                    n.sample(&mut rng)
                };
                let obs = model.means[s] + noise;
                series.push((obs.exp() - RCA_LOG_OFFSET).max(0.0));
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (j, &p) in model.transition[s].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        s = j;
                        break;
                    }
                }
            }
            states_all.push(states);
            series_all.push(series);
        }
        (states_all, series_all)
    }

    #[test]
    fn quartile_edges_match_explicit_quantiles() {
        // oracle: sorted x = [1..9], type-7 quantiles at 0.25/0.5/0.75 are 3, 5, 7
        let values: Vec<f64> = (1..=9).map(f64::from).collect();
        let edges = quartile_edges(&values).unwrap();
        assert_abs_diff_eq!(edges[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(edges[1], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(edges[2], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn quantize_hits_all_four_stages_at_boundaries() {
        let edges = [0.0, 1.0, 2.0]; // log space
        let to_rca = |log_v: f64| (log_v as f64).exp() - RCA_LOG_OFFSET;
        let series = vec![to_rca(-0.5), to_rca(0.0), to_rca(1.0), to_rca(2.0)];
        assert_eq!(quantize_rca(&series, &edges), vec![1, 2, 3, 4]);
    }

    #[test]
    fn quantize_constant_series_is_single_stage() {
        let series = vec![1.0; 8];
        let edges = pooled_log_edges(&[series.clone()]).unwrap();
        let stages = quantize_rca(&series, &edges);
        assert!(stages.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn quantize_monotone_series_is_non_decreasing() {
        let series: Vec<f64> = (0..16).map(|i| 0.05 * 1.6f64.powi(i)).collect();
        let edges = pooled_log_edges(&[series.clone()]).unwrap();
        let stages = quantize_rca(&series, &edges);
        assert!(stages.windows(2).all(|w| w[1] >= w[0]), "{stages:?}");
        assert_eq!(*stages.first().unwrap(), 1);
        assert_eq!(*stages.last().unwrap(), 4);
    }

    #[test]
    fn training_recovers_transition_matrix() {
        let truth = sample_model();
        let (_, series) = sample_series(&truth, 500, 20, 42);
        let model = train_hmm(&series, &uncentered(), 7).unwrap();
        assert!(model.trained);
        let mut l1 = 0.0;
        for i in 0..STAGES {
            for j in 0..STAGES {
                l1 += (model.transition[i][j] - truth.transition[i][j]).abs();
            }
        }
        assert!(l1 < 0.15, "transition L1 distance {l1}");
        for s in 0..STAGES {
            assert!(
                (model.means[s] - truth.means[s]).abs() < 0.2,
                "mean {s}: {} vs {}",
                model.means[s],
                truth.means[s]
            );
        }
    }

    #[test]
    fn em_never_decreases_log_likelihood() {
        let truth = sample_model();
        let (_, series) = sample_series(&truth, 40, 15, 3);
        let model = train_hmm(&series, &uncentered(), 5).unwrap();
        for w in model.log_likelihood.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-7 * w[0].abs().max(1.0),
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn training_is_order_insensitive_and_deterministic() {
        let truth = sample_model();
        let (_, series) = sample_series(&truth, 30, 12, 9);
        let a = train_hmm(&series, &uncentered(), 21).unwrap();
        let b = train_hmm(&series, &uncentered(), 21).unwrap();
        assert_eq!(a.transition, b.transition, "same seed must be bit-identical");

        let mut reversed = series.clone();
        reversed.reverse();
        let c = train_hmm(&reversed, &uncentered(), 21).unwrap();
        for i in 0..STAGES {
            assert_abs_diff_eq!(a.means[i], c.means[i], epsilon = 1e-9);
            for j in 0..STAGES {
                assert_abs_diff_eq!(a.transition[i][j], c.transition[i][j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_all_zero_input_yields_untrained_flag() {
        let series = vec![vec![0.0; 10]; 5];
        let model = train_hmm(&series, &HmmOptions::default(), 0).unwrap();
        assert!(!model.trained);
        assert!(matches!(
            decode_stages(&model, &series[0]),
            Err(Error::UntrainedModel)
        ));
    }

    #[test]
    fn too_few_years_is_an_error() {
        let series = vec![vec![1.0, 2.0, 3.0]];
        assert!(train_hmm(&series, &HmmOptions::default(), 0).is_err());
    }

    #[test]
    fn decode_noiseless_stage4_is_constant_four() {
        let model = sample_model();
        let rca4 = model.stage_rca()[3];
        let series = vec![rca4; 10];
        let path = decode_stages(&model, &series).unwrap();
        assert!(path.stages.iter().all(|&s| s == 4), "{:?}", path.stages);
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let model = sample_model();
        let (_, series) = sample_series(&model, 1, 25, 13);
        let (gamma, _) = posterior_marginals(&model, &series[0]).unwrap();
        for row in gamma.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        }
    }

    /// Exact forward-backward on the tiny chain, computed by enumerating all
    /// state paths; independent oracle for the posterior decoder.
    fn enumerate_posteriors(model: &HmmModel, obs_log: &[f64]) -> Array2<f64> {
        let t_len = obs_log.len();
        let n_paths = STAGES.pow(t_len as u32);
        let mut post = Array2::zeros((t_len, STAGES));
        let mut total = 0.0;
        for code in 0..n_paths {
            let mut states = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                states.push(c % STAGES);
                c /= STAGES;
            }
            let mut logp = model.initial[states[0]].ln();
            for t in 1..t_len {
                logp += model.transition[states[t - 1]][states[t]].ln();
            }
            for t in 0..t_len {
                let s = states[t];
                let var = model.variances[s];
                let d = obs_log[t] - model.means[s];
                logp += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var);
            }
            let p = logp.exp();
            total += p;
            for t in 0..t_len {
                post[[t, states[t]]] += p;
            }
        }
        post / total
    }

    #[test]
    fn decode_matches_exact_enumeration_and_finds_single_switch() {
        let model = sample_model();
        // flicker around the 2/3 boundary with one true switch at t=4
        let stage2 = model.means[1];
        let stage3 = model.means[2];
        let boundary_noise = 0.35;
        let obs_log: Vec<f64> = [
            stage2,
            stage2 + boundary_noise,
            stage2 - boundary_noise,
            stage2 + boundary_noise,
            stage3,
            stage3 - boundary_noise,
            stage3 + boundary_noise,
            stage3 - boundary_noise,
        ]
        .to_vec();
        let series: Vec<f64> = obs_log.iter().map(|v| v.exp() - RCA_LOG_OFFSET).collect();

        let exact = enumerate_posteriors(&model, &obs_log);
        let (gamma, _) = posterior_marginals(&model, &series).unwrap();
        for t in 0..obs_log.len() {
            for s in 0..STAGES {
                assert_abs_diff_eq!(gamma[[t, s]], exact[[t, s]], epsilon = 1e-9);
            }
        }

        let path = decode_stages(&model, &series).unwrap();
        let changes = path
            .stages
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count();
        assert_eq!(changes, 1, "stages {:?}", path.stages);
        assert_eq!(path.stages[0], 2);
        assert_eq!(*path.stages.last().unwrap(), 3);
    }

    #[test]
    fn binarize_rules() {
        let model = sample_model(); // stage RCAs ~ e^{-3},e^{-1},e,e^{3}
        assert!(!BinarizeRule::ExpectedRca.active(&model, 1, 0.0));
        assert!(!BinarizeRule::ExpectedRca.active(&model, 2, 0.0));
        assert!(BinarizeRule::ExpectedRca.active(&model, 3, 0.0));
        assert!(BinarizeRule::ExpectedRca.active(&model, 4, 0.0));
        assert!(!BinarizeRule::Top2.active(&model, 2, 0.0));
        assert!(BinarizeRule::Top2.active(&model, 3, 0.0));
    }

    #[test]
    fn regularization_reduces_flips_on_flicker_panel() {
        let spec = synth::SynthSpec::flicker(10, 15, 20, 0.3);
        let (panel, _, _) = synth::synth_panel(&spec, 31).unwrap();

        let thresholded: Vec<BinaryExportMatrix> = panel
            .years()
            .iter()
            .map(|&y| metrics::threshold_mcp(&metrics::compute_rca(&panel, y).unwrap()))
            .collect();
        let reg = regularize_panel(&panel, &HmmOptions::default(), BinarizeRule::ExpectedRca, 31)
            .unwrap();

        let raw_flips: u32 = metrics::flip_counts(&thresholded).unwrap().iter().sum();
        let reg_flips: u32 = metrics::flip_counts(&reg.matrices).unwrap().iter().sum();
        assert!(
            reg_flips < raw_flips,
            "regularized flips {reg_flips} !< raw {raw_flips}"
        );
        assert_eq!(
            reg.matrices[0].provenance,
            MatrixProvenance::HmmRegularized
        );
    }

    #[test]
    fn all_high_and_all_low_paths_binarize_to_ones_and_zeros() {
        let model = sample_model();
        let high = vec![model.stage_rca()[3]; 12];
        let low = vec![model.stage_rca()[0].max(1e-4); 12];
        let high_path = decode_stages(&model, &high).unwrap();
        let low_path = decode_stages(&model, &low).unwrap();
        assert!(high_path
            .stages
            .iter()
            .all(|&s| BinarizeRule::ExpectedRca.active(&model, s, 0.0)));
        assert!(low_path
            .stages
            .iter()
            .all(|&s| !BinarizeRule::ExpectedRca.active(&model, s, 0.0)));
    }

    #[test]
    fn model_json_roundtrip() {
        let model = sample_model();
        let f = tempfile::NamedTempFile::new().unwrap();
        model.write_json(f.path()).unwrap();
        let back = HmmModel::read_json(f.path()).unwrap();
        assert_eq!(model.transition, back.transition);
        assert_eq!(model.means, back.means);
        assert_eq!(model.bin_edges, back.bin_edges);
    }

    #[test]
    fn row_stochasticity_after_training() {
        let truth = sample_model();
        let (_, series) = sample_series(&truth, 25, 14, 77);
        let model = train_hmm(&series, &uncentered(), 4).unwrap();
        for row in &model.transition {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(model.initial.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        assert!(model.variances.iter().all(|&v| v > 0.0));
        assert!(model.means.windows(2).all(|w| w[0] <= w[1]), "relabeled by mean");
    }
}
