use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use ogmm_core::Batch;

use crate::error::CliError;

/// Observation rows read from CSV with a header line.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Column counts implied by a `y, x1.., z1..` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
    pub q: usize,
}

pub fn open(path: Option<&Path>) -> Result<(Box<dyn Read>, String), CliError> {
    match path {
        None => Ok((Box::new(io::stdin()), "<stdin>".into())),
        Some(p) if p.as_os_str() == "-" => Ok((Box::new(io::stdin()), "<stdin>".into())),
        Some(p) => {
            let f = File::open(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            Ok((Box::new(f), p.display().to_string()))
        }
    }
}

pub fn read_table<R: Read>(reader: R, source: &str) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{source}: cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.is_empty() || columns.iter().all(String::is_empty) {
        return Err(CliError::Input(format!("{source}: missing header row")));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Input(format!("{source}:{line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != columns.len() {
            return Err(CliError::Input(format!(
                "{source}:{line}: expected {} fields, found {}",
                columns.len(),
                record.len()
            )));
        }
        let row = record
            .iter()
            .zip(&columns)
            .map(|(field, name)| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Input(format!("{source}:{line}: column `{name}`: `{field}` is not a finite number"))),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{source}: no data rows")));
    }
    Ok(Table { columns, rows })
}

/// Checks `y, x1..xp, z1..zq` (in this order) and returns `p` and `q`.
pub fn layout(columns: &[String]) -> Result<Layout, CliError> {
    if columns.first().map(String::as_str) != Some("y") {
        return Err(CliError::Input("first column must be `y`".into()));
    }
    let mut p = 0;
    let mut q = 0;
    for name in &columns[1..] {
        let expect_x = format!("x{}", p + 1);
        let expect_z = format!("z{}", q + 1);
        if q == 0 && *name == expect_x {
            p += 1;
        } else if *name == expect_z {
            q += 1;
        } else {
            return Err(CliError::Input(format!(
                "unexpected column `{name}`; expected `{}`",
                if q == 0 { format!("{expect_x}` or `{expect_z}") } else { expect_z }
            )));
        }
    }
    if p == 0 {
        return Err(CliError::Input("no regressor columns `x1..`".into()));
    }
    Ok(Layout { p, q })
}

/// Cuts rows into a first batch of `first` rows and later batches of
/// `size` rows, stopping after `limit` batches.
pub fn batches(rows: &[Vec<f64>], first: usize, size: usize, limit: Option<usize>) -> Result<Vec<Batch>, CliError> {
    if first == 0 || size == 0 {
        return Err(CliError::Usage("batch sizes must be positive".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut len = first.min(rows.len());
    while start < rows.len() && limit.map_or(true, |l| out.len() < l) {
        out.push(Batch::from_rows(&rows[start..start + len]).map_err(CliError::from)?);
        start += len;
        len = size.min(rows.len() - start);
    }
    Ok(out)
}
