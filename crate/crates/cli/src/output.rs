use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Writes numeric rows under a header.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Reads the columns named `x1..` from a CSV of samples.
pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().context("empty samples file")??;
    let cols: Vec<usize> = header
        .split(',')
        .enumerate()
        .filter(|(_, name)| name.trim().starts_with('x'))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        bail!("{}: no x columns in header '{header}'", path.display());
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let cells: Vec<&str> = line.split(',').collect();
        let row = cols
            .iter()
            .map(|&c| {
                cells
                    .get(c)
                    .context("short row")?
                    .trim()
                    .parse::<f64>()
                    .context("not a number")
            })
            .collect::<Result<Vec<f64>>>()
            .with_context(|| format!("{} line {}", path.display(), n + 2))?;
        out.push(row);
    }
    Ok(out)
}

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}
