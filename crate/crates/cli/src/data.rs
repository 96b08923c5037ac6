//! `dose,response` CSV input.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Observations grouped by dose, in file order of first appearance.
pub fn read_data(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = rdr.headers().with_context(|| format!("{}: cannot read header", path.display()))?.clone();
    let names: Vec<String> = headers.iter().map(str::to_ascii_lowercase).collect();
    if names != ["dose", "response"] {
        bail!(
            "{}: line 1: expected header `dose,response`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        );
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            bail!("{}: line {line}: expected 2 fields, found {}", path.display(), rec.len());
        }
        let parse = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = rec[i]
                .parse()
                .with_context(|| format!("{}: line {line}: {name} `{}` is not a number", path.display(), &rec[i]))?;
            if !v.is_finite() {
                bail!("{}: line {line}: {name} must be finite", path.display());
            }
            Ok(v)
        };
        out.push((parse(0, "dose")?, parse(1, "response")?));
    }
    if out.is_empty() {
        bail!("{}: no observations", path.display());
    }
    Ok(out)
}
