//! Evidence maps as CSV: one row per grid row, values printed with six
//! significant digits.

use std::fmt::Write as _;
use std::path::Path;

use indret_core::Tensor;

use crate::error::{AppError, Result};

pub fn format_map(map: &Tensor) -> Result<String> {
    if map.rank() != 2 {
        return Err(AppError::Validation("CSV export expects a 2D map".into()));
    }
    let (rows, cols) = (map.shape()[0], map.shape()[1]);
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{:.5e}", map.at(&[r, c])).expect("writing to String cannot fail");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, format_map(map)?)?;
    Ok(())
}

pub fn parse(text: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut cols = None;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| AppError::Validation(format!("CSV line {}: bad value", ln + 1)))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(AppError::Validation(format!(
                    "CSV line {}: ragged row",
                    ln + 1
                )))
            }
            _ => {}
        }
        rows.push(values);
    }
    let cols = cols.ok_or_else(|| AppError::Validation("empty CSV".into()))?;
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(vec![rows.len(), cols], data).map_err(AppError::Core)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_six_significant_digits() {
        let t = Tensor::new(vec![2, 2], vec![1.23456789, 0.000012345678, 42.0, 0.0]).unwrap();
        let text = format_map(&t).unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(back.shape(), &[2, 2]);
        for (a, b) in t.data().iter().zip(back.data()) {
            let scale = a.abs().max(1e-300);
            assert!((a - b).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(parse("1,2\n3\n").is_err());
        assert!(parse("").is_err());
    }
}
