//! Plain-text matrix container: a `rows cols` header line followed by
//! whitespace-separated values in row-major order.

use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub fn format_matrix(m: &Tensor) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let line: Vec<String> = m.row_slice(i).iter().map(f64::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str, origin: &str) -> Result<Tensor> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(1, format!("bad header {header:?}: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(err(1, format!("header must be `rows cols`, got {header:?}")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| err(i + 1, format!("non-numeric value {tok:?}")))?;
            data.push(v);
        }
    }
    if data.len() != rows * cols {
        return Err(err(
            text.lines().count(),
            format!("expected {} values, found {}", rows * cols, data.len()),
        ));
    }
    Tensor::new(rows, cols, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    std::fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_matrix(&std::fs::read_to_string(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Tensor::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        let back = parse_matrix(&format_matrix(&m), "mem").unwrap();
        assert!(back.bit_eq(&m));
    }

    #[test]
    fn malformed_input() {
        assert!(parse_matrix("", "mem").is_err());
        assert!(parse_matrix("2 2\n1 2 3\n", "mem").is_err());
        assert!(matches!(parse_matrix("1 2\n1 x\n", "mem"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_matrix("2\n1 2\n", "mem").is_err());
    }
}
