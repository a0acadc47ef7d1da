//! Text file formats.
//!
//! Matrix file: first line `# rows cols`, then `rows` lines of `cols`
//! comma-separated decimals. Observation file: header `row,col,value`, then
//! one 0-based triple per line. Values are written with 17 significant digits
//! so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{NimcError, Result};
use crate::types::{FactorPair, FeatureSet, Observation, ObservationSet};
use crate::activations::ActivationKind;

pub const OBSERVATION_HEADER: &str = "row,col,value";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err<T>(line: usize, message: impl Into<String>) -> Result<T> {
    Err(NimcError::Parse { line, message: message.into() })
}

fn parse_finite(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| NimcError::Parse { line, message: format!("'{}' is not a number", tok.trim()) })?;
    if !v.is_finite() {
        return parse_err(line, format!("non-finite value '{}'", tok.trim()));
    }
    Ok(v)
}

pub fn matrix_to_string(m: &DMatrix<f64>) -> String {
    let mut out = format!("# {} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = match lines.next() {
        Some(h) => h,
        None => return parse_err(1, "empty matrix file"),
    };
    let dims: Vec<&str> = header.trim().strip_prefix('#').map(|r| r.split_whitespace().collect()).unwrap_or_default();
    if dims.len() != 2 {
        return parse_err(hline, format!("malformed header '{header}', expected '# rows cols'"));
    }
    let rows: usize = dims[0].parse().map_err(|_| NimcError::Parse { line: hline, message: "bad row count".into() })?;
    let cols: usize = dims[1].parse().map_err(|_| NimcError::Parse { line: hline, message: "bad column count".into() })?;
    let mut m = DMatrix::zeros(rows, cols);
    let mut seen = 0;
    for (lineno, line) in lines {
        if seen == rows {
            return parse_err(lineno, format!("more than {rows} data rows"));
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != cols {
            return parse_err(lineno, format!("ragged row: expected {cols} values, found {}", toks.len()));
        }
        for (j, t) in toks.iter().enumerate() {
            m[(seen, j)] = parse_finite(t, lineno)?;
        }
        seen += 1;
    }
    if seen != rows {
        return parse_err(hline, format!("header declares {rows} rows but file has {seen}"));
    }
    Ok(m)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_string(m))?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    parse_matrix(&fs::read_to_string(path)?)
}

pub fn observations_to_string(obs: &ObservationSet) -> String {
    let mut out = String::from(OBSERVATION_HEADER);
    out.push('\n');
    for o in obs {
        out.push_str(&format!("{},{},{}\n", o.i, o.j, fmt_f64(o.a)));
    }
    out
}

/// Parses an observation file. When `grid` is given, indices are checked
/// against `(n1, n2)` and the first offending line is reported.
pub fn parse_observations(text: &str, grid: Option<(usize, usize)>) -> Result<ObservationSet> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == OBSERVATION_HEADER => {}
        Some((n, h)) => return parse_err(n, format!("malformed header '{h}', expected '{OBSERVATION_HEADER}'")),
        None => return parse_err(1, "empty observation file"),
    }
    let mut triples = Vec::new();
    for (lineno, line) in lines {
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 3 {
            return parse_err(lineno, format!("expected 3 fields, found {}", toks.len()));
        }
        let idx = |t: &str| -> Result<usize> {
            t.trim().parse().map_err(|_| NimcError::Parse { line: lineno, message: format!("'{}' is not a non-negative index", t.trim()) })
        };
        let (i, j) = (idx(toks[0])?, idx(toks[1])?);
        let a = parse_finite(toks[2], lineno)?;
        if let Some((n1, n2)) = grid {
            if i >= n1 || j >= n2 {
                return parse_err(lineno, format!("index ({i}, {j}) outside {n1}x{n2} grid"));
            }
        }
        triples.push(Observation { i, j, a });
    }
    Ok(ObservationSet::new(triples))
}

pub fn save_observations(path: impl AsRef<Path>, obs: &ObservationSet) -> Result<()> {
    fs::write(path, observations_to_string(obs))?;
    Ok(())
}

pub fn load_observations(path: impl AsRef<Path>) -> Result<ObservationSet> {
    parse_observations(&fs::read_to_string(path)?, None)
}

/// Loads observations and checks every index against the feature grid.
pub fn load_observations_for(path: impl AsRef<Path>, fs_: &FeatureSet) -> Result<ObservationSet> {
    parse_observations(&fs::read_to_string(path)?, Some((fs_.n1(), fs_.n2())))
}

/// Writes `X` and `Y` as two matrix files.
pub fn save_features(x_path: impl AsRef<Path>, y_path: impl AsRef<Path>, features: &FeatureSet) -> Result<()> {
    save_matrix(x_path, features.x())?;
    save_matrix(y_path, features.y())
}

pub fn load_features(x_path: impl AsRef<Path>, y_path: impl AsRef<Path>) -> Result<FeatureSet> {
    FeatureSet::new(load_matrix(x_path)?, load_matrix(y_path)?)
}

pub fn save_factors(u_path: impl AsRef<Path>, v_path: impl AsRef<Path>, fp: &FactorPair) -> Result<()> {
    save_matrix(u_path, fp.u())?;
    save_matrix(v_path, fp.v())
}

pub fn load_factors(u_path: impl AsRef<Path>, v_path: impl AsRef<Path>, kind: ActivationKind) -> Result<FactorPair> {
    FactorPair::new(load_matrix(u_path)?, load_matrix(v_path)?, kind)
}
