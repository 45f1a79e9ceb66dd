//! Per-year trade metrics: RCA, the binary export matrix, the
//! Fitness-Complexity fixed point, nRCA, logPRODY, and the Herfindahl index.
//!
//! All operations are pure functions of immutable inputs and can run in
//! parallel across years.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ExportPanel, GdpPanel, Registry};
use crate::error::{Error, Result};

/// Balassa index per (country, product) for one year.
///
/// Rows (countries) or columns (products) whose export totals are zero get
/// RCA 0 everywhere and are listed in the flags instead of being dropped.
#[derive(Debug, Clone)]
pub struct RcaMatrix {
    pub year: i32,
    pub values: Array2<f64>,
    pub zero_countries: Vec<usize>,
    pub zero_products: Vec<usize>,
}

/// RCA_cp = (EXM_cp / sum_j EXM_cj) / (sum_i EXM_ip / sum_kl EXM_kl).
pub fn compute_rca(panel: &ExportPanel, year: i32) -> Result<RcaMatrix> {
    let exm = panel.year_slice(year)?;
    rca_from_values(exm, year)
}

/// RCA from a raw country x product value slice.
pub fn rca_from_values(exm: ArrayView2<'_, f64>, year: i32) -> Result<RcaMatrix> {
    let total: f64 = exm.sum();
    if total == 0.0 {
        return Err(Error::Degenerate(format!(
            "no exports anywhere in year {year}"
        )));
    }
    let row_totals = exm.sum_axis(Axis(1));
    let col_totals = exm.sum_axis(Axis(0));
    let (nc, np) = exm.dim();
    let mut values = Array2::zeros((nc, np));
    for c in 0..nc {
        if row_totals[c] == 0.0 {
            continue;
        }
        for p in 0..np {
            if col_totals[p] == 0.0 {
                continue;
            }
            values[[c, p]] = (exm[[c, p]] / row_totals[c]) / (col_totals[p] / total);
        }
    }
    Ok(RcaMatrix {
        year,
        values,
        zero_countries: (0..nc).filter(|&c| row_totals[c] == 0.0).collect(),
        zero_products: (0..np).filter(|&p| col_totals[p] == 0.0).collect(),
    })
}

/// How a binary export matrix was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixProvenance {
    Thresholded,
    HmmRegularized,
}

/// Binary adjacency matrix of the bipartite export network for one year.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryExportMatrix {
    pub year: i32,
    pub m: Array2<u8>,
    pub provenance: MatrixProvenance,
}

impl BinaryExportMatrix {
    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.m.view()
    }
}

/// M_cp = 1 iff RCA_cp >= 1.
pub fn threshold_mcp(rca: &RcaMatrix) -> BinaryExportMatrix {
    BinaryExportMatrix {
        year: rca.year,
        m: rca.values.map(|&v| u8::from(v >= 1.0)),
        provenance: MatrixProvenance::Thresholded,
    }
}

/// Number of 0<->1 transitions of each cell across a year-ordered sequence
/// of matrices. A noise proxy: thresholded matrices flicker, regularized
/// ones should not.
pub fn flip_counts(matrices: &[BinaryExportMatrix]) -> Result<Array2<u32>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Validation("no matrices".into()))?;
    let dim = first.m.dim();
    let mut flips = Array2::zeros(dim);
    for w in matrices.windows(2) {
        if w[1].m.dim() != dim {
            return Err(Error::Validation("matrix dimensions differ across years".into()));
        }
        for ((cell, &a), &b) in flips.iter_mut().zip(w[0].m.iter()).zip(w[1].m.iter()) {
            if a != b {
                *cell += 1;
            }
        }
    }
    Ok(flips)
}

/// Converged output of the Fitness-Complexity map.
#[derive(Debug, Clone)]
pub struct FitnessComplexity {
    pub fitness: Array1<f64>,
    pub complexity: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FcOptions {
    /// Max relative change of any fitness/complexity value between
    /// iterations below which values count as settled.
    pub tol: f64,
    pub max_iter: usize,
    /// Consecutive iterations the full ranking must stay unchanged.
    pub rank_stable_iters: usize,
}

impl Default for FcOptions {
    fn default() -> Self {
        FcOptions {
            tol: 1e-13,
            max_iter: 1000,
            rank_stable_iters: 10,
        }
    }
}

fn ranking(values: &Array1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    idx
}

/// Iterate the Fitness-Complexity map to convergence from F = C = 1.
///
/// Convergence demands both settled values (max relative change < tol) and a
/// ranking that has not moved for `rank_stable_iters` consecutive iterations;
/// an exact fixed point (zero change) converges immediately.
pub fn fitness_complexity(m: ArrayView2<'_, u8>, opts: &FcOptions) -> Result<FitnessComplexity> {
    let (nc, np) = m.dim();
    fitness_complexity_with_init(
        m,
        opts,
        Array1::ones(nc),
        Array1::ones(np),
    )
}

/// Same map from an explicit positive initial condition.
pub fn fitness_complexity_with_init(
    m: ArrayView2<'_, u8>,
    opts: &FcOptions,
    fitness0: Array1<f64>,
    complexity0: Array1<f64>,
) -> Result<FitnessComplexity> {
    let (nc, np) = m.dim();
    if nc == 0 || np == 0 {
        return Err(Error::Structural("empty matrix".into()));
    }
    for c in 0..nc {
        if m.row(c).iter().all(|&v| v == 0) {
            return Err(Error::Structural(format!(
                "country row {c} has no exports; prune it first"
            )));
        }
    }
    for p in 0..np {
        if m.column(p).iter().all(|&v| v == 0) {
            return Err(Error::Structural(format!(
                "product column {p} has no exporters; prune it first"
            )));
        }
    }
    if fitness0.len() != nc || complexity0.len() != np {
        return Err(Error::Validation("initial condition dimensions differ".into()));
    }
    if fitness0.iter().chain(complexity0.iter()).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Validation("initial condition must be positive".into()));
    }

    let mut fitness = fitness0;
    let mut complexity = complexity0;
    let mut rank_f = ranking(&fitness);
    let mut rank_c = ranking(&complexity);
    let mut stable_streak = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut f_raw = Array1::zeros(nc);
        for c in 0..nc {
            let mut acc = 0.0;
            for p in 0..np {
                if m[[c, p]] == 1 {
                    acc += complexity[p];
                }
            }
            f_raw[c] = acc;
        }
        let mut c_raw = Array1::zeros(np);
        for p in 0..np {
            let mut denom = 0.0;
            for c in 0..nc {
                if m[[c, p]] == 1 {
                    denom += 1.0 / fitness[c];
                }
            }
            c_raw[p] = 1.0 / denom;
        }
        let f_mean = f_raw.mean().expect("non-empty");
        let c_mean = c_raw.mean().expect("non-empty");
        let f_new = f_raw / f_mean;
        let c_new = c_raw / c_mean;

        let mut delta: f64 = 0.0;
        for (new, old) in f_new.iter().zip(fitness.iter()) {
            delta = delta.max((new - old).abs() / old);
        }
        for (new, old) in c_new.iter().zip(complexity.iter()) {
            delta = delta.max((new - old).abs() / old);
        }

        let rf = ranking(&f_new);
        let rc = ranking(&c_new);
        if rf == rank_f && rc == rank_c {
            stable_streak += 1;
        } else {
            stable_streak = 0;
            rank_f = rf;
            rank_c = rc;
        }

        fitness = f_new;
        complexity = c_new;

        if delta == 0.0 || (delta < opts.tol && stable_streak >= opts.rank_stable_iters) {
            converged = true;
            break;
        }
    }

    Ok(FitnessComplexity {
        fitness,
        complexity,
        iterations,
        converged,
    })
}

/// Drop all-zero rows and columns, returning the pruned matrix together with
/// the kept row and column indices. Pruning changes registry indices, which
/// is why `fitness_complexity` refuses empty rows/columns instead of doing
/// this silently.
pub fn prune_empty(m: ArrayView2<'_, u8>) -> (Array2<u8>, Vec<usize>, Vec<usize>) {
    let rows: Vec<usize> = (0..m.nrows())
        .filter(|&c| m.row(c).iter().any(|&v| v != 0))
        .collect();
    let cols: Vec<usize> = (0..m.ncols())
        .filter(|&p| m.column(p).iter().any(|&v| v != 0))
        .collect();
    let mut out = Array2::zeros((rows.len(), cols.len()));
    for (i, &c) in rows.iter().enumerate() {
        for (j, &p) in cols.iter().enumerate() {
            out[[i, j]] = m[[c, p]];
        }
    }
    (out, rows, cols)
}

/// Column-normalized RCA: per-product weights over countries.
#[derive(Debug, Clone)]
pub struct NrcaMatrix {
    pub year: i32,
    pub values: Array2<f64>,
    /// Products whose RCA column sums to zero (no exporters); left unnormalized.
    pub zero_products: Vec<usize>,
}

/// nRCA_cp = RCA_cp / sum_j RCA_jp.
pub fn compute_nrca(rca: &RcaMatrix) -> NrcaMatrix {
    let (nc, np) = rca.values.dim();
    let mut values = Array2::zeros((nc, np));
    let mut zero_products = Vec::new();
    for p in 0..np {
        let col_sum: f64 = rca.values.column(p).sum();
        if col_sum == 0.0 {
            zero_products.push(p);
            continue;
        }
        for c in 0..nc {
            values[[c, p]] = rca.values[[c, p]] / col_sum;
        }
    }
    NrcaMatrix {
        year: rca.year,
        values,
        zero_products,
    }
}

/// logPRODY per product: nRCA-weighted mean of exporters' log10 GDP per capita.
#[derive(Debug, Clone)]
pub struct LogProdyVector {
    pub year: i32,
    /// NaN where no valid exporter exists.
    pub values: Array1<f64>,
    /// Products with no valid exporters.
    pub missing_products: Vec<usize>,
    /// Countries that carried RCA weight but had no GDP observation; their
    /// weight was dropped and the rest renormalized.
    pub excluded_countries: Vec<usize>,
}

/// L_p = sum_c nRCA_cp * log10(GDP_c), with missing-GDP exporters dropped
/// and the remaining weights renormalized.
pub fn compute_logprody(
    rca: &RcaMatrix,
    countries: &Registry,
    gdp: &GdpPanel,
    year: i32,
) -> Result<LogProdyVector> {
    let (nc, np) = rca.values.dim();
    if countries.len() != nc {
        return Err(Error::Validation(format!(
            "country registry has {} entries, RCA has {nc} rows",
            countries.len()
        )));
    }
    let log_gdp: Vec<Option<f64>> = (0..nc)
        .map(|c| gdp.get(countries.code(c), year).map(f64::log10))
        .collect();

    let mut excluded: Vec<usize> = Vec::new();
    let mut values = Array1::from_elem(np, f64::NAN);
    let mut missing_products = Vec::new();
    for p in 0..np {
        let mut weight_sum = 0.0;
        let mut acc = 0.0;
        for c in 0..nc {
            let w = rca.values[[c, p]];
            if w == 0.0 {
                continue;
            }
            match log_gdp[c] {
                Some(lg) => {
                    weight_sum += w;
                    acc += w * lg;
                }
                None => {
                    if !excluded.contains(&c) {
                        excluded.push(c);
                    }
                }
            }
        }
        if weight_sum > 0.0 {
            values[p] = acc / weight_sum;
        } else {
            missing_products.push(p);
        }
    }
    excluded.sort_unstable();
    Ok(LogProdyVector {
        year,
        values,
        missing_products,
        excluded_countries: excluded,
    })
}

/// Herfindahl index per product, with the underlying market shares.
#[derive(Debug, Clone)]
pub struct HerfindahlVector {
    pub year: i32,
    /// NaN where world export of the product is zero.
    pub values: Array1<f64>,
    pub shares: Array2<f64>,
    pub unexported_products: Vec<usize>,
}

/// H_p = sum_c s_cp^2 with s_cp = EXM_cp / sum_c EXM_cp.
pub fn compute_herfindahl(panel: &ExportPanel, year: i32) -> Result<HerfindahlVector> {
    let exm = panel.year_slice(year)?;
    let (nc, np) = exm.dim();
    let mut shares = Array2::zeros((nc, np));
    let mut values = Array1::from_elem(np, f64::NAN);
    let mut unexported = Vec::new();
    for p in 0..np {
        let world: f64 = exm.column(p).sum();
        if world == 0.0 {
            unexported.push(p);
            continue;
        }
        let mut h = 0.0;
        for c in 0..nc {
            let s = exm[[c, p]] / world;
            shares[[c, p]] = s;
            h += s * s;
        }
        values[p] = h;
    }
    Ok(HerfindahlVector {
        year,
        values,
        shares,
        unexported_products: unexported,
    })
}

/// One named metric over (entity, year), NaN marking missing observations.
#[derive(Debug, Clone)]
pub struct MetricSeries {
    pub name: String,
    pub entities: Registry,
    pub years: Vec<i32>,
    values: Array2<f64>,
}

impl MetricSeries {
    pub fn new(
        name: impl Into<String>,
        entities: Registry,
        years: Vec<i32>,
        values: Array2<f64>,
    ) -> Result<Self> {
        if values.dim() != (entities.len(), years.len()) {
            return Err(Error::Validation(format!(
                "metric values shape {:?} does not match ({}, {})",
                values.dim(),
                entities.len(),
                years.len()
            )));
        }
        Ok(MetricSeries {
            name: name.into(),
            entities,
            years,
            values,
        })
    }

    pub fn filled(name: impl Into<String>, entities: Registry, years: Vec<i32>) -> Self {
        let values = Array2::from_elem((entities.len(), years.len()), f64::NAN);
        MetricSeries {
            name: name.into(),
            entities,
            years,
            values,
        }
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    pub fn get(&self, entity: usize, year: i32) -> Option<f64> {
        let t = self.year_index(year)?;
        let v = self.values[[entity, t]];
        if v.is_nan() { None } else { Some(v) }
    }

    pub fn set(&mut self, entity: usize, year: i32, value: f64) -> Result<()> {
        let t = self
            .year_index(year)
            .ok_or(Error::UnknownYear(year))?;
        self.values[[entity, t]] = value;
        Ok(())
    }

    /// Store one year's vector (NaN entries stay missing).
    pub fn set_year(&mut self, year: i32, column: &Array1<f64>) -> Result<()> {
        let t = self.year_index(year).ok_or(Error::UnknownYear(year))?;
        if column.len() != self.entities.len() {
            return Err(Error::Validation("column length mismatch".into()));
        }
        for (e, &v) in column.iter().enumerate() {
            self.values[[e, t]] = v;
        }
        Ok(())
    }

    /// All entity values for one year (NaN = missing).
    pub fn year_column(&self, year: i32) -> Option<Array1<f64>> {
        let t = self.year_index(year)?;
        Some(self.values.column(t).to_owned())
    }

    /// Emit as `year,entity,value`, sorted, skipping missing cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writer
            .write_record(["year", "entity", "value"])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        for (t, &year) in self.years.iter().enumerate() {
            for e in 0..self.entities.len() {
                let v = self.values[[e, t]];
                if !v.is_nan() {
                    writer
                        .write_record([
                            year.to_string(),
                            self.entities.code(e).to_owned(),
                            format!("{v}"),
                        ])
                        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
                }
            }
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Read back a `year,entity,value` file.
    pub fn read_csv(path: &Path, name: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut cells: Vec<(i32, String, f64)> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            if record.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected 3 fields, got {}", record.len()),
                });
            }
            let year: i32 = record[0].trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad year `{}`", &record[0]),
            })?;
            let value: f64 = record[2].trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad value `{}`", &record[2]),
            })?;
            cells.push((year, record[1].trim().to_owned(), value));
        }
        if cells.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let mut codes: Vec<String> = cells.iter().map(|(_, e, _)| e.clone()).collect();
        codes.sort_unstable();
        codes.dedup();
        let entities = Registry::from_codes(codes)?;
        let min_year = cells.iter().map(|c| c.0).min().expect("non-empty");
        let max_year = cells.iter().map(|c| c.0).max().expect("non-empty");
        let years: Vec<i32> = (min_year..=max_year).collect();
        let mut series = MetricSeries::filled(name, entities, years);
        for (year, code, value) in cells {
            let e = series.entities.index_of(&code).expect("registry covers codes");
            series.set(e, year, value)?;
        }
        Ok(series)
    }
}

/// Total world export value per product per year (used as a plane coordinate
/// for single-exporter synthetic panels and as a general volume metric).
pub fn total_export_series(panel: &ExportPanel) -> Result<MetricSeries> {
    let mut series = MetricSeries::filled(
        "export_value",
        panel.products().clone(),
        panel.years().to_vec(),
    );
    for &year in panel.years() {
        let slice = panel.year_slice(year)?;
        for p in 0..panel.products().len() {
            let total: f64 = slice.column(p).sum();
            if total > 0.0 {
                series.set(p, year, total)?;
            }
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Registry;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn panel_from(values: Array2<f64>, year: i32) -> ExportPanel {
        let (nc, np) = values.dim();
        let countries = Registry::from_codes((0..nc).map(|i| format!("C{i:03}"))).unwrap();
        let products = Registry::from_codes((0..np).map(|i| format!("{i:04}"))).unwrap();
        let mut tensor = ndarray::Array3::zeros((nc, np, 1));
        tensor.index_axis_mut(Axis(2), 0).assign(&values);
        ExportPanel::new(countries, products, vec![year], tensor, 4).unwrap()
    }

    #[test]
    fn rca_single_cell_is_one() {
        let rca = rca_from_values(array![[5.0]].view(), 2000).unwrap();
        assert_abs_diff_eq!(rca.values[[0, 0]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rca_matches_hand_evaluation() {
        let rca = rca_from_values(array![[10.0, 0.0], [10.0, 10.0]].view(), 2000).unwrap();
        assert_abs_diff_eq!(rca.values[[0, 0]], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rca.values[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rca.values[[1, 0]], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(rca.values[[1, 1]], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn rca_is_scale_invariant() {
        let base = array![[3.0, 1.0, 0.0], [2.0, 5.0, 1.0]];
        let a = rca_from_values(base.view(), 2000).unwrap();
        let scaled = base.mapv(|v| v * 7.0);
        let b = rca_from_values(scaled.view(), 2000).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rca_flags_zero_rows_and_columns() {
        let rca = rca_from_values(array![[0.0, 0.0], [1.0, 0.0]].view(), 2000).unwrap();
        assert_eq!(rca.zero_countries, vec![0]);
        assert_eq!(rca.zero_products, vec![1]);
        assert_eq!(rca.values[[0, 0]], 0.0);
    }

    #[test]
    fn rca_all_zero_year_is_an_error() {
        assert!(rca_from_values(array![[0.0]].view(), 2000).is_err());
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let rca = RcaMatrix {
            year: 2000,
            values: array![[1.0, 0.999, 0.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        let m = threshold_mcp(&rca);
        assert_eq!(m.m, array![[1u8, 0, 0]]);
        assert_eq!(m.provenance, MatrixProvenance::Thresholded);
    }

    #[test]
    fn threshold_all_zero_stays_all_zero() {
        let rca = RcaMatrix {
            year: 2000,
            values: Array2::zeros((2, 2)),
            zero_countries: vec![],
            zero_products: vec![],
        };
        assert!(threshold_mcp(&rca).m.iter().all(|&v| v == 0));
    }

    #[test]
    fn fc_uniform_matrix_converges_immediately() {
        let m = array![[1u8, 1], [1, 1]];
        let fc = fitness_complexity(m.view(), &FcOptions::default()).unwrap();
        assert!(fc.converged);
        assert_eq!(fc.iterations, 1);
        assert_abs_diff_eq!(fc.fitness[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fc.complexity[1], 1.0, epsilon = 1e-15);
    }

    /// Straight-line reimplementation of the map, kept deliberately separate
    /// from the production path, used as the convergence oracle.
    pub(crate) fn fc_oracle(m: ArrayView2<'_, u8>, iters: usize) -> (Vec<f64>, Vec<f64>) {
        let (nc, np) = m.dim();
        let mut f = vec![1.0; nc];
        let mut c = vec![1.0; np];
        for _ in 0..iters {
            let mut f_new = vec![0.0; nc];
            for i in 0..nc {
                for j in 0..np {
                    f_new[i] += m[[i, j]] as f64 * c[j];
                }
            }
            let mut c_new = vec![0.0; np];
            for j in 0..np {
                let mut d = 0.0;
                for i in 0..nc {
                    d += m[[i, j]] as f64 / f[i];
                }
                c_new[j] = 1.0 / d;
            }
            let fm: f64 = f_new.iter().sum::<f64>() / nc as f64;
            let cm: f64 = c_new.iter().sum::<f64>() / np as f64;
            f = f_new.into_iter().map(|v| v / fm).collect();
            c = c_new.into_iter().map(|v| v / cm).collect();
        }
        (f, c)
    }

    /// A perfect stairstep sits in the map's degenerate regime: extremal
    /// fitness/complexity values drift toward 0 algebraically, so the value
    /// criterion never fires. Rankings are monotone and stable from the
    /// first iterations, and the trajectory matches the oracle step for step.
    #[test]
    fn fc_stairstep_is_monotone_and_matches_oracle() {
        let m = array![[1u8, 1, 1], [1, 1, 0], [1, 0, 0]];
        let fc = fitness_complexity(m.view(), &FcOptions::default()).unwrap();
        assert!(fc.fitness[0] > fc.fitness[1] && fc.fitness[1] > fc.fitness[2]);
        assert!(fc.complexity[2] > fc.complexity[1] && fc.complexity[1] > fc.complexity[0]);
        let (f, c) = fc_oracle(m.view(), fc.iterations);
        for i in 0..3 {
            assert_abs_diff_eq!(fc.fitness[i], f[i], epsilon = 1e-10);
            assert_abs_diff_eq!(fc.complexity[i], c[i], epsilon = 1e-10);
        }
    }

    /// Both initial conditions approach the same limit; the transient decays
    /// like 1/n^2 on the stairstep, so reaching 1e-8 needs a deep run.
    #[test]
    fn fc_initial_condition_does_not_matter_on_stairstep() {
        let m = array![[1u8, 1, 1], [1, 1, 0], [1, 0, 0]];
        let opts = FcOptions {
            max_iter: 200_000,
            ..FcOptions::default()
        };
        let base = fitness_complexity(m.view(), &opts).unwrap();
        let alt = fitness_complexity_with_init(
            m.view(),
            &opts,
            array![3.0, 0.5, 1.25],
            array![0.1, 9.0, 2.0],
        )
        .unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(base.fitness[i], alt.fitness[i], epsilon = 1e-8);
            assert_abs_diff_eq!(base.complexity[i], alt.complexity[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn fc_rejects_empty_rows_naming_the_offender() {
        let m = array![[1u8, 1], [0, 0]];
        match fitness_complexity(m.view(), &FcOptions::default()) {
            Err(Error::Structural(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn fc_normalization_holds_on_output() {
        let m = array![[1u8, 1, 1], [1, 1, 0], [1, 0, 0]];
        let fc = fitness_complexity(m.view(), &FcOptions::default()).unwrap();
        assert_abs_diff_eq!(fc.fitness.mean().unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fc.complexity.mean().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn prune_empty_keeps_indices() {
        let m = array![[0u8, 1, 0], [0, 0, 0], [0, 1, 1]];
        let (pruned, rows, cols) = prune_empty(m.view());
        assert_eq!(rows, vec![0, 2]);
        assert_eq!(cols, vec![1, 2]);
        assert_eq!(pruned, array![[1u8, 0], [1, 1]]);
    }

    #[test]
    fn nrca_examples() {
        let rca = RcaMatrix {
            year: 2000,
            values: array![[2.0, 3.0], [0.0, 3.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        let nrca = compute_nrca(&rca);
        assert_abs_diff_eq!(nrca.values[[0, 0]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nrca.values[[0, 1]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(nrca.values[[1, 1]], 0.5, epsilon = 1e-15);
        for p in 0..2 {
            assert_abs_diff_eq!(nrca.values.column(p).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nrca_flags_zero_columns() {
        let rca = RcaMatrix {
            year: 2000,
            values: array![[0.0, 1.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        let nrca = compute_nrca(&rca);
        assert_eq!(nrca.zero_products, vec![0]);
        assert_eq!(nrca.values[[0, 0]], 0.0);
    }

    fn gdp_panel(codes: &[&str], year: i32, values: &[f64]) -> GdpPanel {
        let countries = Registry::from_codes(codes.iter().copied()).unwrap();
        let gdp = Array2::from_shape_vec((codes.len(), 1), values.to_vec()).unwrap();
        GdpPanel::new(countries, vec![year], gdp).unwrap()
    }

    #[test]
    fn logprody_single_exporter() {
        let countries = Registry::from_codes(["C000"]).unwrap();
        let rca = RcaMatrix {
            year: 2000,
            values: array![[2.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        let gdp = gdp_panel(&["C000"], 2000, &[1e4]);
        let lp = compute_logprody(&rca, &countries, &gdp, 2000).unwrap();
        assert_abs_diff_eq!(lp.values[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn logprody_forced_weighted_mean() {
        // weights 0.25/0.75 on log10 GDP 3 and 5 -> 4.5
        let countries = Registry::from_codes(["C000", "C001"]).unwrap();
        let rca = RcaMatrix {
            year: 2000,
            values: array![[1.0], [3.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        let gdp = gdp_panel(&["C000", "C001"], 2000, &[1e3, 1e5]);
        let lp = compute_logprody(&rca, &countries, &gdp, 2000).unwrap();
        assert_abs_diff_eq!(lp.values[0], 4.5, epsilon = 1e-12);
    }

    #[test]
    fn logprody_equal_gdp_is_flat() {
        let countries = Registry::from_codes(["C000", "C001"]).unwrap();
        let rca = RcaMatrix {
            year: 2000,
            values: array![[1.0, 0.4], [0.7, 2.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        let gdp = gdp_panel(&["C000", "C001"], 2000, &[500.0, 500.0]);
        let lp = compute_logprody(&rca, &countries, &gdp, 2000).unwrap();
        for p in 0..2 {
            assert_abs_diff_eq!(lp.values[p], 500f64.log10(), epsilon = 1e-12);
        }
    }

    #[test]
    fn logprody_excludes_missing_gdp_and_renormalizes() {
        let countries = Registry::from_codes(["C000", "C001"]).unwrap();
        let rca = RcaMatrix {
            year: 2000,
            values: array![[1.0], [3.0]],
            zero_countries: vec![],
            zero_products: vec![],
        };
        // only C000 has GDP
        let gdp = gdp_panel(&["C000"], 2000, &[1e3]);
        let lp = compute_logprody(&rca, &countries, &gdp, 2000).unwrap();
        assert_abs_diff_eq!(lp.values[0], 3.0, epsilon = 1e-12);
        assert_eq!(lp.excluded_countries, vec![1]);
    }

    #[test]
    fn logprody_flags_products_without_valid_exporters() {
        let countries = Registry::from_codes(["C000"]).unwrap();
        let rca = RcaMatrix {
            year: 2000,
            values: array![[0.0, 1.0]],
            zero_countries: vec![],
            zero_products: vec![0],
        };
        let gdp = gdp_panel(&["C000"], 2000, &[1e3]);
        let lp = compute_logprody(&rca, &countries, &gdp, 2000).unwrap();
        assert!(lp.values[0].is_nan());
        assert_eq!(lp.missing_products, vec![0]);
    }

    #[test]
    fn herfindahl_monopoly_and_equal_split() {
        let panel = panel_from(array![[4.0, 2.0], [0.0, 2.0]], 2000);
        let h = compute_herfindahl(&panel, 2000).unwrap();
        assert_abs_diff_eq!(h.values[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h.values[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn herfindahl_sum_of_squared_shares() {
        let panel = panel_from(array![[5.0], [3.0], [2.0]], 2000);
        let h = compute_herfindahl(&panel, 2000).unwrap();
        assert_abs_diff_eq!(h.values[0], 0.38, epsilon = 1e-12);
        assert_abs_diff_eq!(h.shares.column(0).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn herfindahl_flags_unexported_products() {
        let panel = panel_from(array![[1.0, 0.0]], 2000);
        let h = compute_herfindahl(&panel, 2000).unwrap();
        assert!(h.values[1].is_nan());
        assert_eq!(h.unexported_products, vec![1]);
    }

    #[test]
    fn flip_counts_count_transitions() {
        let mk = |bits: [u8; 2]| BinaryExportMatrix {
            year: 0,
            m: Array2::from_shape_vec((1, 2), bits.to_vec()).unwrap(),
            provenance: MatrixProvenance::Thresholded,
        };
        let flips = flip_counts(&[mk([0, 1]), mk([1, 1]), mk([0, 1])]).unwrap();
        assert_eq!(flips[[0, 0]], 2);
        assert_eq!(flips[[0, 1]], 0);
    }

    #[test]
    fn metric_series_csv_roundtrip() {
        let entities = Registry::from_codes(["0001", "0002"]).unwrap();
        let mut series = MetricSeries::filled("fitness", entities, vec![2000, 2001]);
        series.set(0, 2000, 1.25).unwrap();
        series.set(1, 2001, 0.5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        series.write_csv(f.path()).unwrap();
        let loaded = MetricSeries::read_csv(f.path(), "fitness").unwrap();
        assert_eq!(loaded.get(0, 2000), Some(1.25));
        assert_eq!(loaded.get(1, 2000), None);
        assert_eq!(loaded.get(1, 2001), Some(0.5));
    }

    proptest! {
        #[test]
        fn prop_rca_scale_invariant(
            values in proptest::collection::vec(0.0f64..100.0, 12),
            scale in 0.01f64..100.0,
        ) {
            let base = Array2::from_shape_vec((3, 4), values).unwrap();
            prop_assume!(base.sum() > 0.0);
            let a = rca_from_values(base.view(), 0).unwrap();
            let b = rca_from_values(base.mapv(|v| v * scale).view(), 0).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn prop_fc_permutation_equivariant(seed in 0u64..1000) {
            let mut rng = crate::seeding::rng(seed, 1);
            use rand::Rng;
            // random 5x6 matrix without empty rows/columns
            let m = loop {
                let cand = Array2::from_shape_fn((5, 6), |_| u8::from(rng.random_bool(0.45)));
                let rows_ok = (0..5).all(|c| cand.row(c).iter().any(|&v| v == 1));
                let cols_ok = (0..6).all(|p| cand.column(p).iter().any(|&v| v == 1));
                if rows_ok && cols_ok {
                    break cand;
                }
            };
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..5).collect();
                for i in (1..5).rev() {
                    let j = rng.random_range(0..=i);
                    p.swap(i, j);
                }
                p
            };
            let mut permuted = Array2::zeros((5, 6));
            for (dst, &src) in perm.iter().enumerate() {
                permuted.row_mut(dst).assign(&m.row(src));
            }
            let opts = FcOptions { tol: 1e-10, rank_stable_iters: 5, ..FcOptions::default() };
            let a = fitness_complexity(m.view(), &opts).unwrap();
            let b = fitness_complexity(permuted.view(), &opts).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((a.fitness[src] - b.fitness[dst]).abs() < 1e-7);
            }
            for p in 0..6 {
                prop_assert!((a.complexity[p] - b.complexity[p]).abs() < 1e-7);
            }
        }

        #[test]
        fn prop_nrca_columns_sum_to_one(values in proptest::collection::vec(0.0f64..10.0, 12)) {
            let m = Array2::from_shape_vec((3, 4), values).unwrap();
            let rca = RcaMatrix { year: 0, values: m, zero_countries: vec![], zero_products: vec![] };
            let nrca = compute_nrca(&rca);
            for p in 0..4 {
                if !nrca.zero_products.contains(&p) {
                    prop_assert!((nrca.values.column(p).sum() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn prop_logprody_within_exporter_gdp_range(
            weights in proptest::collection::vec(0.0f64..5.0, 4),
            gdps in proptest::collection::vec(100.0f64..1e6, 4),
        ) {
            prop_assume!(weights.iter().sum::<f64>() > 0.0);
            let countries = Registry::from_codes((0..4).map(|i| format!("C{i:03}"))).unwrap();
            let rca = RcaMatrix {
                year: 0,
                values: Array2::from_shape_vec((4, 1), weights.clone()).unwrap(),
                zero_countries: vec![],
                zero_products: vec![],
            };
            let gdp = {
                let g = Array2::from_shape_vec((4, 1), gdps.clone()).unwrap();
                GdpPanel::new(Registry::from_codes((0..4).map(|i| format!("C{i:03}"))).unwrap(), vec![0], g).unwrap()
            };
            let lp = compute_logprody(&rca, &countries, &gdp, 0).unwrap();
            let logs: Vec<f64> = gdps
                .iter()
                .zip(weights.iter())
                .filter(|(_, &w)| w > 0.0)
                .map(|(g, _)| g.log10())
                .collect();
            let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lp.values[0] >= lo - 1e-12 && lp.values[0] <= hi + 1e-12);
        }

        #[test]
        fn prop_herfindahl_bounds(values in proptest::collection::vec(0.0f64..50.0, 8)) {
            let m = Array2::from_shape_vec((4, 2), values).unwrap();
            let panel = panel_from(m, 2000);
            let h = compute_herfindahl(&panel, 2000).unwrap();
            for p in 0..2 {
                let v = h.values[p];
                if !v.is_nan() {
                    prop_assert!(v >= 0.25 - 1e-12 && v <= 1.0 + 1e-12);
                }
            }
        }
    }
}
