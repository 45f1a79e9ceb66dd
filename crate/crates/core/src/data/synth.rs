//! Seeded synthetic panels used by tests, the acceptance suite, and the
//! `synth` CLI subcommand.
//!
//! Three generators:
//! - `nested`: a triangular export pattern with optional per-cell flip noise.
//!   The pattern lives in the *support* of the export values (an export-value
//!   configuration whose RCA threshold reproduces an exact full stairstep
//!   does not exist, because a fully diversified country's shares are forced
//!   equal to world shares).
//! - `flicker`: RCA regimes per cell with rare regime switches. Observation
//!   noise takes the form of threshold excursions: with probability
//!   2*noise_rate a year's value is drawn at the RCA=1 boundary (landing on
//!   the wrong side half the time, so the wrong-side rate is `noise_rate`),
//!   otherwise tightly around the regime level. Values oscillate around the
//!   threshold rather than jumping between separated clusters; that is the
//!   fluctuation regime HMM smoothing is built for.
//! - `drift`: plane trajectories (Brownian motion plus a configurable drift
//!   field), embedded as single-exporter products so that logPRODY recovers
//!   the y coordinate exactly and log10 of export value recovers x.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeding;

use super::{ExportPanel, GdpPanel, Provenance, Registry};

/// Drift field evaluated at plane positions; displacement per year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftField {
    /// Same displacement everywhere.
    Constant { dx: f64, dy: f64 },
    /// Gradient flow of a quadratic bowl: d = -k * grad((x-x0)^2*ax + (y-y0)^2*ay).
    BowlGradient {
        x0: f64,
        y0: f64,
        ax: f64,
        ay: f64,
        k: f64,
    },
    /// Vertical speed with a parabolic profile in y, zero at y0: dy = ay*(y-y0)^2 + floor.
    /// Keeps the column-wise minimum of v_y pinned to y0 for minima-line fixtures.
    VyBowl { y0: f64, ay: f64, floor: f64 },
}

impl DriftField {
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            DriftField::Constant { dx, dy } => (dx, dy),
            DriftField::BowlGradient { x0, y0, ax, ay, k } => {
                (-k * 2.0 * ax * (x - x0), -k * 2.0 * ay * (y - y0))
            }
            DriftField::VyBowl { y0, ay, floor } => (0.0, ay * (y - y0).powi(2) + floor),
        }
    }
}

/// Generator selection plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    Nested {
        countries: usize,
        products: usize,
        years: usize,
        /// Per-cell, per-year flip probability.
        noise: f64,
    },
    Flicker {
        countries: usize,
        products: usize,
        years: usize,
        /// Probability that one observed year lands on the wrong side of RCA=1.
        noise_rate: f64,
        /// Per-year probability of a true regime change.
        switch_prob: f64,
        rca_high: f64,
        rca_low: f64,
    },
    Drift {
        entities: usize,
        years: usize,
        field: DriftField,
        /// Standard deviation of the per-step Brownian component.
        noise: f64,
        x_range: (f64, f64),
        y_range: (f64, f64),
    },
}

impl SynthSpec {
    pub fn nested(countries: usize, products: usize, years: usize, noise: f64) -> Self {
        SynthSpec::Nested {
            countries,
            products,
            years,
            noise,
        }
    }

    pub fn flicker(countries: usize, products: usize, years: usize, noise_rate: f64) -> Self {
        SynthSpec::Flicker {
            countries,
            products,
            years,
            noise_rate,
            switch_prob: 0.05,
            rca_high: 3.0,
            rca_low: 0.25,
        }
    }

    pub fn drift(entities: usize, years: usize, field: DriftField, noise: f64) -> Self {
        SynthSpec::Drift {
            entities,
            years,
            field,
            noise,
            x_range: (1.0, 2.0),
            y_range: (3.0, 5.0),
        }
    }

    /// Build a spec from a generator name and flat key-value parameters, as
    /// passed by the CLI. Unknown names are an error; unknown keys are too.
    pub fn from_name(name: &str, params: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(
            params: &BTreeMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            match params.get(key) {
                None => Ok(default),
                Some(raw) => raw
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`"))),
            }
        }
        let known = |keys: &[&str]| -> Result<()> {
            for k in params.keys() {
                if !keys.contains(&k.as_str()) {
                    return Err(Error::Config(format!("unknown parameter `{k}` for `{name}`")));
                }
            }
            Ok(())
        };
        match name {
            "nested" => {
                known(&["countries", "products", "years", "noise"])?;
                Ok(SynthSpec::Nested {
                    countries: get(params, "countries", 20)?,
                    products: get(params, "products", 30)?,
                    years: get(params, "years", 10)?,
                    noise: get(params, "noise", 0.0)?,
                })
            }
            "flicker" => {
                known(&[
                    "countries",
                    "products",
                    "years",
                    "noise_rate",
                    "switch_prob",
                    "rca_high",
                    "rca_low",
                ])?;
                Ok(SynthSpec::Flicker {
                    countries: get(params, "countries", 20)?,
                    products: get(params, "products", 30)?,
                    years: get(params, "years", 20)?,
                    noise_rate: get(params, "noise_rate", 0.3)?,
                    switch_prob: get(params, "switch_prob", 0.05)?,
                    rca_high: get(params, "rca_high", 3.0)?,
                    rca_low: get(params, "rca_low", 0.25)?,
                })
            }
            "drift" => {
                known(&["entities", "years", "noise", "dx", "dy"])?;
                Ok(SynthSpec::Drift {
                    entities: get(params, "entities", 200)?,
                    years: get(params, "years", 15)?,
                    field: DriftField::Constant {
                        dx: get(params, "dx", 0.01)?,
                        dy: get(params, "dy", 0.02)?,
                    },
                    noise: get(params, "noise", 0.01)?,
                    x_range: (1.0, 2.0),
                    y_range: (3.0, 5.0),
                })
            }
            other => Err(Error::UnknownGenerator(other.to_owned())),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SynthSpec::Nested { .. } => "nested",
            SynthSpec::Flicker { .. } => "flicker",
            SynthSpec::Drift { .. } => "drift",
        }
    }

    fn params(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match self {
            SynthSpec::Nested {
                countries,
                products,
                years,
                noise,
            } => {
                m.insert("countries".into(), countries.to_string());
                m.insert("products".into(), products.to_string());
                m.insert("years".into(), years.to_string());
                m.insert("noise".into(), noise.to_string());
                m.insert("pattern".into(), "support".into());
            }
            SynthSpec::Flicker {
                countries,
                products,
                years,
                noise_rate,
                switch_prob,
                rca_high,
                rca_low,
            } => {
                m.insert("countries".into(), countries.to_string());
                m.insert("products".into(), products.to_string());
                m.insert("years".into(), years.to_string());
                m.insert("noise_rate".into(), noise_rate.to_string());
                m.insert("switch_prob".into(), switch_prob.to_string());
                m.insert("rca_high".into(), rca_high.to_string());
                m.insert("rca_low".into(), rca_low.to_string());
            }
            SynthSpec::Drift {
                entities,
                years,
                field,
                noise,
                x_range,
                y_range,
            } => {
                m.insert("entities".into(), entities.to_string());
                m.insert("years".into(), years.to_string());
                m.insert("field".into(), format!("{field:?}"));
                m.insert("noise".into(), noise.to_string());
                m.insert("x_range".into(), format!("{x_range:?}"));
                m.insert("y_range".into(), format!("{y_range:?}"));
                m.insert("embedding".into(), "single-exporter".into());
            }
        }
        m
    }
}

const FIRST_YEAR: i32 = 2000;

/// One flicker observation in log space: a boundary excursion with
/// probability 2*noise_rate (wrong side half the time), otherwise tight
/// around the regime level.
fn flicker_obs(
    regime_margin: f64,
    noise_rate: f64,
    boundary: &Normal<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let excursion_p = (2.0 * noise_rate).min(0.95);
    if excursion_p > 0.0 && rng.random_bool(excursion_p) {
        boundary.sample(rng)
    } else {
        let tight = Normal::new(regime_margin, 0.3 * regime_margin.abs().max(0.2))
            .expect("valid");
        tight.sample(rng)
    }
}

fn country_codes(n: usize) -> Registry {
    Registry::from_codes((0..n).map(|i| format!("S{i:04}"))).expect("codes unique")
}

fn product_codes(n: usize) -> Registry {
    Registry::from_codes((0..n).map(|i| format!("{i:04}"))).expect("codes unique")
}

/// Number of products exported by country `c` in the triangular pattern.
fn stairstep_cutoff(c: usize, rows: usize, cols: usize) -> usize {
    (((rows - c) as f64 / rows as f64) * cols as f64).ceil() as usize
}

/// Triangular binary matrix with per-cell flip noise. Row 0 is the most
/// diversified country; column 0 the most ubiquitous product.
pub fn nested_matrix(rows: usize, cols: usize, noise: f64, seed: u64) -> Array2<u8> {
    let mut rng = seeding::rng(seed, 0x6e65);
    let mut m = Array2::zeros((rows, cols));
    for c in 0..rows {
        let cutoff = stairstep_cutoff(c, rows, cols);
        for p in 0..cols {
            let mut bit = u8::from(p < cutoff);
            if noise > 0.0 && rng.random_bool(noise) {
                bit ^= 1;
            }
            m[[c, p]] = bit;
        }
    }
    m
}

/// Deterministic synthetic (export, GDP) panel pair for `spec` and `seed`.
pub fn synth_panel(spec: &SynthSpec, seed: u64) -> Result<(ExportPanel, GdpPanel, Provenance)> {
    let provenance = Provenance {
        generator: spec.name().to_owned(),
        seed,
        params: spec.params(),
    };
    let (panel, gdp) = match spec {
        SynthSpec::Nested {
            countries,
            products,
            years,
            noise,
        } => gen_nested(*countries, *products, *years, *noise, seed)?,
        SynthSpec::Flicker {
            countries,
            products,
            years,
            noise_rate,
            switch_prob,
            rca_high,
            rca_low,
        } => gen_flicker(
            *countries,
            *products,
            *years,
            *noise_rate,
            *switch_prob,
            *rca_high,
            *rca_low,
            seed,
        )?,
        SynthSpec::Drift {
            entities,
            years,
            field,
            noise,
            x_range,
            y_range,
        } => gen_drift(*entities, *years, *field, *noise, *x_range, *y_range, seed)?,
    };
    Ok((panel, gdp, provenance))
}

fn gdp_for_rank(countries: usize, years: usize, seed: u64) -> Result<Array2<f64>> {
    // Richer countries are the more diversified ones (lower index).
    let mut rng = seeding::rng(seed, 0x6764);
    let jitter: Normal<f64> = Normal::new(0.0, 0.02).expect("valid");
    let mut gdp = Array2::zeros((countries, years));
    for c in 0..countries {
        let frac = if countries > 1 {
            (countries - 1 - c) as f64 / (countries - 1) as f64
        } else {
            1.0
        };
        let base = 3.0 + 1.5 * frac;
        for t in 0..years {
            gdp[[c, t]] = 10f64.powf(base + jitter.sample(&mut rng));
        }
    }
    Ok(gdp)
}

fn gen_nested(
    countries: usize,
    products: usize,
    years: usize,
    noise: f64,
    seed: u64,
) -> Result<(ExportPanel, GdpPanel)> {
    let mut rng = seeding::rng(seed, 0x6e76);
    let jitter: Normal<f64> = Normal::new(0.0, 0.25).expect("valid");
    let mut values = Array3::zeros((countries, products, years));
    for t in 0..years {
        let m = nested_matrix(countries, products, noise, seeding::combine(&[seed, t as u64]));
        for c in 0..countries {
            for p in 0..products {
                if m[[c, p]] == 1 {
                    values[[c, p, t]] = 10.0 * jitter.sample(&mut rng).exp();
                }
            }
        }
    }
    let year_list: Vec<i32> = (0..years as i32).map(|t| FIRST_YEAR + t).collect();
    let panel = ExportPanel::new(
        country_codes(countries),
        product_codes(products),
        year_list.clone(),
        values,
        4,
    )?;
    let gdp = GdpPanel::new(
        country_codes(countries),
        year_list,
        gdp_for_rank(countries, years, seed)?,
    )?;
    Ok((panel, gdp))
}

#[allow(clippy::too_many_arguments)]
fn gen_flicker(
    countries: usize,
    products: usize,
    years: usize,
    noise_rate: f64,
    switch_prob: f64,
    rca_high: f64,
    rca_low: f64,
    seed: u64,
) -> Result<(ExportPanel, GdpPanel)> {
    if rca_high <= 1.0 || rca_low >= 1.0 || rca_low <= 0.0 {
        return Err(Error::Validation(
            "flicker regimes must straddle RCA=1 (rca_low < 1 < rca_high)".into(),
        ));
    }
    // regimes and observations draw from separate substreams so that
    // changing the noise rate leaves the regime paths untouched
    let mut regime_rng = seeding::rng(seed, 0x7265);
    let mut obs_rng = seeding::rng(seed, 0x666c);
    let boundary: Normal<f64> = Normal::new(0.0, 0.3).expect("valid");
    let mut values = Array3::zeros((countries, products, years));
    for c in 0..countries {
        let cutoff = stairstep_cutoff(c, countries, products);
        for p in 0..products {
            let mut regime_high = p < cutoff;
            for t in 0..years {
                if t > 0 && regime_rng.random_bool(switch_prob) {
                    regime_high = !regime_high;
                }
                let margin = if regime_high { rca_high.ln() } else { rca_low.ln() };
                values[[c, p, t]] =
                    flicker_obs(margin, noise_rate, &boundary, &mut obs_rng).exp();
            }
        }
    }
    let year_list: Vec<i32> = (0..years as i32).map(|t| FIRST_YEAR + t).collect();
    let panel = ExportPanel::new(
        country_codes(countries),
        product_codes(products),
        year_list.clone(),
        values,
        4,
    )?;
    let gdp = GdpPanel::new(
        country_codes(countries),
        year_list,
        gdp_for_rank(countries, years, seed)?,
    )?;
    Ok((panel, gdp))
}

/// One flickering RCA series with a single true regime switch at `switch_at`.
/// Returns the series and the true regime (0 = low, 1 = high) per year.
/// Years land on the wrong side of RCA=1 with probability `noise_rate`.
pub fn flicker_series(
    years: usize,
    switch_at: usize,
    rca_high: f64,
    rca_low: f64,
    noise_rate: f64,
    seed: u64,
) -> (Vec<f64>, Vec<u8>) {
    let mut rng = seeding::rng(seed, 0x6673);
    let boundary: Normal<f64> = Normal::new(0.0, 0.3).expect("valid");
    let mut series = Vec::with_capacity(years);
    let mut truth = Vec::with_capacity(years);
    for t in 0..years {
        let regime_high = t >= switch_at;
        truth.push(u8::from(regime_high));
        let margin = if regime_high { rca_high.ln() } else { rca_low.ln() };
        series.push(flicker_obs(margin, noise_rate, &boundary, &mut rng).exp());
    }
    (series, truth)
}

fn gen_drift(
    entities: usize,
    years: usize,
    field: DriftField,
    noise: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    seed: u64,
) -> Result<(ExportPanel, GdpPanel)> {
    if years < 2 {
        return Err(Error::Validation("drift generator needs at least 2 years".into()));
    }
    let mut rng = seeding::rng(seed, 0x6472);
    let step: Normal<f64> = Normal::new(0.0, 1.0).expect("valid");
    let mut export = Array3::zeros((entities, entities, years));
    let mut gdp = Array2::zeros((entities, years));
    for e in 0..entities {
        let mut x = x_range.0 + rng.random::<f64>() * (x_range.1 - x_range.0);
        let mut y = y_range.0 + rng.random::<f64>() * (y_range.1 - y_range.0);
        for t in 0..years {
            export[[e, e, t]] = 10f64.powf(x);
            gdp[[e, t]] = 10f64.powf(y);
            let (dx, dy) = field.eval(x, y);
            x += dx + noise * step.sample(&mut rng);
            y += dy + noise * step.sample(&mut rng);
        }
    }
    let year_list: Vec<i32> = (0..years as i32).map(|t| FIRST_YEAR + t).collect();
    let panel = ExportPanel::new(
        country_codes(entities),
        product_codes(entities),
        year_list.clone(),
        export,
        4,
    )?;
    let gdp = GdpPanel::new(country_codes(entities), year_list, gdp)?;
    Ok((panel, gdp))
}

/// Binary support of the export values for one year (1 where value > 0).
pub fn support_matrix(panel: &ExportPanel, year: i32) -> Result<Array2<u8>> {
    let slice = panel.year_slice(year)?;
    Ok(slice.map(|&v| u8::from(v > 0.0)))
}
