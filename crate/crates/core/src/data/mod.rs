//! Registries, export/GDP panels, and synthetic fixture generators.
//!
//! Panels are immutable after construction and safe to share across worker
//! threads. Construction validates the invariants once; compute modules can
//! then index without re-checking.

mod csv_io;
pub mod synth;

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_export_csv, load_gdp_csv, write_export_csv, write_gdp_csv};

/// Ordered set of stable entity codes with a dense-index bijection.
///
/// Used for both countries (ISO-like codes) and products (4- or 6-digit HS
/// codes kept as strings).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn from_codes<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let codes: Vec<String> = codes.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            if index.insert(code.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate code `{code}`")));
            }
        }
        Ok(Registry { codes, index })
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, idx: usize) -> &str {
        &self.codes[idx]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(String::as_str)
    }
}

/// The export tensor EXM[c][p][t] with its registries.
#[derive(Debug, Clone)]
pub struct ExportPanel {
    countries: Registry,
    products: Registry,
    years: Vec<i32>,
    /// Non-negative export value, shape (countries, products, years).
    values: Array3<f64>,
    digit_level: u8,
}

impl ExportPanel {
    pub fn new(
        countries: Registry,
        products: Registry,
        years: Vec<i32>,
        values: Array3<f64>,
        digit_level: u8,
    ) -> Result<Self> {
        if countries.is_empty() || products.is_empty() || years.is_empty() {
            return Err(Error::EmptyPanel);
        }
        if digit_level != 4 && digit_level != 6 {
            return Err(Error::Validation(format!(
                "digit level must be 4 or 6, got {digit_level}"
            )));
        }
        for w in years.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(Error::Validation(format!(
                    "years must be strictly increasing and contiguous, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let expect = (countries.len(), products.len(), years.len());
        if values.dim() != expect {
            return Err(Error::Validation(format!(
                "value tensor shape {:?} does not match registries {:?}",
                values.dim(),
                expect
            )));
        }
        for p in products.iter() {
            if p.len() != digit_level as usize || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::Validation(format!(
                    "product code `{p}` is not a {digit_level}-digit code"
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!(
                "export values must be finite and non-negative, found {v}"
            )));
        }
        Ok(ExportPanel {
            countries,
            products,
            years,
            values,
            digit_level,
        })
    }

    pub fn countries(&self) -> &Registry {
        &self.countries
    }

    pub fn products(&self) -> &Registry {
        &self.products
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn digit_level(&self) -> u8 {
        self.digit_level
    }

    pub fn year_index(&self, year: i32) -> Result<usize> {
        self.years
            .iter()
            .position(|&y| y == year)
            .ok_or(Error::UnknownYear(year))
    }

    /// Country x product slice for one year.
    pub fn year_slice(&self, year: i32) -> Result<ArrayView2<'_, f64>> {
        let t = self.year_index(year)?;
        Ok(self.values.index_axis(ndarray::Axis(2), t))
    }

    pub fn value(&self, country: usize, product: usize, year: i32) -> Result<f64> {
        let t = self.year_index(year)?;
        Ok(self.values[[country, product, t]])
    }

    /// Export value series of one (country, product) cell across all years.
    pub fn cell_series(&self, country: usize, product: usize) -> Vec<f64> {
        (0..self.years.len())
            .map(|t| self.values[[country, product, t]])
            .collect()
    }

    /// Countries whose total export in `year` is zero. They are retained in
    /// the registries; metric ops must skip them.
    pub fn zero_export_countries(&self, year: i32) -> Result<Vec<usize>> {
        let slice = self.year_slice(year)?;
        Ok((0..self.countries.len())
            .filter(|&c| slice.row(c).sum() == 0.0)
            .collect())
    }
}

/// GDP per capita panel; `NaN` marks a country-year with no observation.
#[derive(Debug, Clone)]
pub struct GdpPanel {
    countries: Registry,
    years: Vec<i32>,
    /// Shape (countries, years); entries are > 0 or NaN (missing).
    gdp: Array2<f64>,
}

impl GdpPanel {
    pub fn new(countries: Registry, years: Vec<i32>, gdp: Array2<f64>) -> Result<Self> {
        if gdp.dim() != (countries.len(), years.len()) {
            return Err(Error::Validation(format!(
                "gdp shape {:?} does not match registries ({}, {})",
                gdp.dim(),
                countries.len(),
                years.len()
            )));
        }
        if let Some(v) = gdp.iter().find(|v| !v.is_nan() && **v <= 0.0) {
            return Err(Error::Validation(format!(
                "GDP per capita must be positive, found {v}"
            )));
        }
        Ok(GdpPanel {
            countries,
            years,
            gdp,
        })
    }

    pub fn countries(&self) -> &Registry {
        &self.countries
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    /// GDP per capita for a country code in a year, if observed.
    pub fn get(&self, code: &str, year: i32) -> Option<f64> {
        let c = self.countries.index_of(code)?;
        let t = self.years.iter().position(|&y| y == year)?;
        let v = self.gdp[[c, t]];
        if v.is_nan() { None } else { Some(v) }
    }

    /// Countries of `panel` with no GDP observation in `year`.
    pub fn missing_from(&self, panel: &ExportPanel, year: i32) -> Vec<String> {
        panel
            .countries()
            .iter()
            .filter(|code| self.get(code, year).is_none())
            .map(str::to_owned)
            .collect()
    }
}

/// Generation metadata written as a JSON sidecar next to synthetic panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

impl Provenance {
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_sidecar(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
