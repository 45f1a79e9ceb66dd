//! CSV ingestion and emission for export and GDP panels.
//!
//! Formats are UTF-8, comma-separated, `.` decimal point:
//! exports `year,country,product,value`, GDP `year,country,gdppc`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

use super::{ExportPanel, GdpPanel, Registry};

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Load an export panel, truncating product codes to `digit_level` and
/// summing values that collide after truncation. Missing cells are zero.
pub fn load_export_csv(path: &Path, digit_level: u8) -> Result<ExportPanel> {
    if digit_level != 4 && digit_level != 6 {
        return Err(Error::Validation(format!(
            "digit level must be 4 or 6, got {digit_level}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io(path, into_io(e)))?;

    {
        let headers = reader
            .headers()
            .map_err(|e| parse_error(path, 1, e.to_string()))?;
        let expect = ["year", "country", "product", "value"];
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expect {
            return Err(parse_error(
                path,
                1,
                format!("expected header `year,country,product,value`, got `{}`", got.join(",")),
            ));
        }
    }

    let mut cells: BTreeMap<(i32, String, String), f64> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| parse_error(path, line, e.to_string()))?;
        if record.len() != 4 {
            return Err(parse_error(
                path,
                line,
                format!("expected 4 fields, got {}", record.len()),
            ));
        }
        let year: i32 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad year `{}`", &record[0])))?;
        let country = record[1].trim().to_owned();
        let product = record[2].trim().to_owned();
        let value: f64 = record[3]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad value `{}`", &record[3])))?;
        if country.is_empty() {
            return Err(parse_error(path, line, "empty country code"));
        }
        if !product.bytes().all(|b| b.is_ascii_digit()) || product.is_empty() {
            return Err(parse_error(path, line, format!("bad product code `{product}`")));
        }
        if product.len() < digit_level as usize {
            return Err(Error::Validation(format!(
                "product code `{product}` at {}:{line} has fewer than {digit_level} digits",
                path.display()
            )));
        }
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Validation(format!(
                "value `{value}` at {}:{line} must be finite and non-negative",
                path.display()
            )));
        }
        let truncated = product[..digit_level as usize].to_owned();
        *cells.entry((year, country, truncated)).or_insert(0.0) += value;
    }

    if cells.is_empty() {
        return Err(Error::EmptyPanel);
    }

    let mut countries = BTreeSet::new();
    let mut products = BTreeSet::new();
    let mut min_year = i32::MAX;
    let mut max_year = i32::MIN;
    for (year, country, product) in cells.keys() {
        countries.insert(country.clone());
        products.insert(product.clone());
        min_year = min_year.min(*year);
        max_year = max_year.max(*year);
    }
    let countries = Registry::from_codes(countries)?;
    let products = Registry::from_codes(products)?;
    let years: Vec<i32> = (min_year..=max_year).collect();

    let mut values = Array3::zeros((countries.len(), products.len(), years.len()));
    for ((year, country, product), value) in &cells {
        let c = countries.index_of(country).expect("registry covers keys");
        let p = products.index_of(product).expect("registry covers keys");
        let t = (*year - min_year) as usize;
        values[[c, p, t]] = *value;
    }

    ExportPanel::new(countries, products, years, values, digit_level)
}

/// Write a panel as `year,country,product,value`, skipping zero cells,
/// sorted by (year, country, product).
pub fn write_export_csv(panel: &ExportPanel, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, into_io(e)))?;
    writer
        .write_record(["year", "country", "product", "value"])
        .map_err(|e| Error::io(path, into_io(e)))?;
    for &year in panel.years() {
        let slice = panel.year_slice(year)?;
        for c in 0..panel.countries().len() {
            for p in 0..panel.products().len() {
                let v = slice[[c, p]];
                if v != 0.0 {
                    writer
                        .write_record([
                            year.to_string(),
                            panel.countries().code(c).to_owned(),
                            panel.products().code(p).to_owned(),
                            format_value(v),
                        ])
                        .map_err(|e| Error::io(path, into_io(e)))?;
                }
            }
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Load a GDP-per-capita panel from `year,country,gdppc`. Countries absent
/// in a year stay `NaN`; downstream ops must exclude them.
pub fn load_gdp_csv(path: &Path) -> Result<GdpPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io(path, into_io(e)))?;

    {
        let headers = reader
            .headers()
            .map_err(|e| parse_error(path, 1, e.to_string()))?;
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != ["year", "country", "gdppc"] {
            return Err(parse_error(
                path,
                1,
                format!("expected header `year,country,gdppc`, got `{}`", got.join(",")),
            ));
        }
    }

    let mut cells: BTreeMap<(i32, String), f64> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_error(path, line, e.to_string()))?;
        if record.len() != 3 {
            return Err(parse_error(
                path,
                line,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let year: i32 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad year `{}`", &record[0])))?;
        let country = record[1].trim().to_owned();
        let gdppc: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad gdppc `{}`", &record[2])))?;
        if !gdppc.is_finite() || gdppc <= 0.0 {
            return Err(Error::Validation(format!(
                "gdppc `{gdppc}` at {}:{line} must be positive",
                path.display()
            )));
        }
        cells.insert((year, country), gdppc);
    }

    if cells.is_empty() {
        return Err(Error::EmptyPanel);
    }

    let mut countries = BTreeSet::new();
    let mut min_year = i32::MAX;
    let mut max_year = i32::MIN;
    for (year, country) in cells.keys() {
        countries.insert(country.clone());
        min_year = min_year.min(*year);
        max_year = max_year.max(*year);
    }
    let countries = Registry::from_codes(countries)?;
    let years: Vec<i32> = (min_year..=max_year).collect();

    let mut gdp = Array2::from_elem((countries.len(), years.len()), f64::NAN);
    for ((year, country), v) in &cells {
        let c = countries.index_of(country).expect("registry covers keys");
        let t = (*year - min_year) as usize;
        gdp[[c, t]] = *v;
    }
    GdpPanel::new(countries, years, gdp)
}

/// Write a GDP panel as `year,country,gdppc`, skipping missing cells.
pub fn write_gdp_csv(panel: &GdpPanel, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, into_io(e)))?;
    writer
        .write_record(["year", "country", "gdppc"])
        .map_err(|e| Error::io(path, into_io(e)))?;
    for &year in panel.years() {
        for code in panel.countries().iter() {
            if let Some(v) = panel.get(code, year) {
                writer
                    .write_record([year.to_string(), code.to_owned(), format_value(v)])
                    .map_err(|e| Error::io(path, into_io(e)))?;
            }
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Shortest round-trip decimal representation.
pub(crate) fn format_value(v: f64) -> String {
    format!("{v}")
}

fn into_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn truncation_sums_six_digit_codes() {
        let f = write_temp("year,country,product,value\n2000,A,100630,5\n2000,A,100610,7\n");
        let panel = load_export_csv(f.path(), 4).unwrap();
        let p = panel.products().index_of("1006").unwrap();
        let c = panel.countries().index_of("A").unwrap();
        assert_eq!(panel.value(c, p, 2000).unwrap(), 12.0);
    }

    #[test]
    fn empty_file_is_an_empty_panel_error() {
        let f = write_temp("year,country,product,value\n");
        let err = load_export_csv(f.path(), 4).unwrap_err();
        assert!(matches!(err, Error::EmptyPanel));
        assert_eq!(err.to_string(), "empty panel");
    }

    #[test]
    fn negative_value_is_a_validation_error() {
        let f = write_temp("year,country,product,value\n2000,A,1006,-3\n");
        assert!(matches!(
            load_export_csv(f.path(), 4).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn malformed_row_names_the_line() {
        let f = write_temp("year,country,product,value\n2000,A,1006,5\nnot-a-year,B,1006,1\n");
        match load_export_csv(f.path(), 4).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn short_code_below_digit_level_rejected() {
        let f = write_temp("year,country,product,value\n2000,A,1006,5\n");
        assert!(matches!(
            load_export_csv(f.path(), 6).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn gdp_roundtrip_and_zero_rejected() {
        let f = write_temp("year,country,gdppc\n2000,A,1000\n");
        let gdp = load_gdp_csv(f.path()).unwrap();
        assert_eq!(gdp.get("A", 2000), Some(1000.0));

        let f = write_temp("year,country,gdppc\n2000,A,0\n");
        assert!(matches!(load_gdp_csv(f.path()).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn export_roundtrip_up_to_row_order() {
        let f = write_temp(
            "year,country,product,value\n2001,B,2204,1.5\n2000,A,1006,5\n2000,B,1006,2\n2001,A,2204,0.25\n",
        );
        let panel = load_export_csv(f.path(), 4).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_export_csv(&panel, out.path()).unwrap();
        let reloaded = load_export_csv(out.path(), 4).unwrap();
        assert_eq!(
            panel.countries().iter().collect::<Vec<_>>(),
            reloaded.countries().iter().collect::<Vec<_>>()
        );
        for &year in panel.years() {
            assert_eq!(
                panel.year_slice(year).unwrap(),
                reloaded.year_slice(year).unwrap()
            );
        }
    }

    #[test]
    fn aggregation_is_associative_across_digit_levels() {
        let six = "year,country,product,value\n2000,A,100630,5\n2000,A,100610,7\n2000,B,220410,2\n2000,B,100630,1\n";
        let f6 = write_temp(six);
        let at6 = load_export_csv(f6.path(), 6).unwrap();
        // aggregate the 6-digit panel to 4 digits by re-emitting and truncating
        let out = tempfile::NamedTempFile::new().unwrap();
        write_export_csv(&at6, out.path()).unwrap();
        let via6 = load_export_csv(out.path(), 4).unwrap();
        let direct = load_export_csv(f6.path(), 4).unwrap();
        for &year in direct.years() {
            assert_eq!(
                via6.year_slice(year).unwrap(),
                direct.year_slice(year).unwrap()
            );
        }
    }
}
