use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Scalar forcing paths imported from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvForcings {
    pub start_year: i32,
    pub names: Vec<String>,
    /// `[month, forcing]`
    pub values: Array2<f64>,
}

/// Reads a `year,month,<forcing>...` table. Rows must be consecutive months
/// starting in January; every cell is required.
pub fn read_forcings_csv(path: &Path) -> Result<CsvForcings> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "year" || &headers[1] != "month" {
        return Err(Error::format(0, "header must be `year,month,<forcing>...`"));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let width = headers.len();

    let mut rows: Vec<f64> = Vec::new();
    let mut start_year = None;
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() != width || rec.iter().any(str::is_empty) {
            return Err(Error::format(offset, "missing cell"));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(offset, format!("not a number: `{s}`")))
        };
        let year: i32 = rec[0]
            .parse()
            .map_err(|_| Error::format(offset, format!("bad year `{}`", &rec[0])))?;
        let month: usize = rec[1]
            .parse()
            .map_err(|_| Error::format(offset, format!("bad month `{}`", &rec[1])))?;
        if !(1..=12).contains(&month) {
            return Err(Error::format(offset, format!("month {month} outside 1-12")));
        }
        let y0 = *start_year.get_or_insert(year);
        let expect_year = y0 + (n / 12) as i32;
        let expect_month = n % 12 + 1;
        if year != expect_year || month != expect_month {
            return Err(Error::format(
                offset,
                format!("expected {expect_year}-{expect_month:02}, found {year}-{month:02}"),
            ));
        }
        for cell in rec.iter().skip(2) {
            rows.push(parse(cell)?);
        }
        n += 1;
    }
    let start_year = start_year.ok_or_else(|| Error::format(0, "no data rows"))?;
    let values = Array2::from_shape_vec((n, names.len()), rows)
        .map_err(|e| Error::format(0, e.to_string()))?;
    Ok(CsvForcings {
        start_year,
        names,
        values,
    })
}

pub fn write_forcings_csv(path: &Path, forcings: &CsvForcings) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["year".to_string(), "month".to_string()];
    header.extend(forcings.names.iter().cloned());
    w.write_record(&header)?;
    for (t, row) in forcings.values.rows().into_iter().enumerate() {
        let mut rec = vec![
            (forcings.start_year + (t / 12) as i32).to_string(),
            (t % 12 + 1).to_string(),
        ];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
