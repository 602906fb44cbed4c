//! Per-patch scalar maps over the token grid, emitted as P2 graymaps
//! (min-max scaled to 0..255) plus raw CSV.

use std::io::Write;
use std::path::Path;

use crate::error::{contract_err, Result};

/// L2 norm of each token row, laid out on the `rows x cols` patch grid.
pub fn feature_norm_map(
    tokens: &[f64],
    t: usize,
    dim: usize,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    if t != rows * cols {
        return contract_err(format!("{t} tokens do not tile a {rows}x{cols} grid"));
    }
    if tokens.len() != t * dim {
        return contract_err("token buffer does not match the stated shape");
    }
    Ok(tokens
        .chunks(dim)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Plain-text portable graymap. Values are min-max scaled to 0..255; a
/// constant map renders as all zeros.
pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    if values.len() != rows * cols {
        return contract_err(format!(
            "{} values do not tile a {rows}x{cols} grid",
            values.len()
        ));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| {
                let v = values[r * cols + c];
                let g = if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u32
                } else {
                    0
                };
                g.min(255).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Raw unscaled values, one grid row per CSV line.
pub fn write_map_csv(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    if values.len() != rows * cols {
        return contract_err(format!(
            "{} values do not tile a {rows}x{cols} grid",
            values.len()
        ));
    }
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| values[r * cols + c].to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
