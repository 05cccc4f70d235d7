//! Plain-text matrix archive.
//!
//! ```text
//! mmlqg-archive 1
//! Abar 2 2
//! -1.0000000000000000e0 2.5000000000000000e-1
//! ...
//! ```
//!
//! Each entry is a header line `name rows cols` followed by `rows` lines of
//! row-major values printed with 17 significant digits, which round-trips
//! every finite double exactly.

use mmlqg::consistency::extract_pi_blocks;
use mmlqg::{Mat64, MeanFieldCoefficients, MeanFieldSolution64, Vector64};
use std::fmt::Write as _;

pub const MAGIC: &str = "mmlqg-archive";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArchiveError {
    #[error("archive line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("archive has no entry named {0}")]
    Missing(String),
    #[error("archive entry {name} has shape {found}, expected {expected}")]
    Shape { name: String, expected: String, found: String },
    #[error("unsupported archive version {0}")]
    Version(u32),
}

/// Formats a double with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixArchive {
    pub entries: Vec<(String, Mat64)>,
}

impl MatrixArchive {
    pub fn insert(&mut self, name: impl Into<String>, m: Mat64) {
        let name = name.into();
        assert!(!name.is_empty() && !name.contains(char::is_whitespace), "bad entry name {name:?}");
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = m,
            None => self.entries.push((name, m)),
        }
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &Vector64) {
        self.insert(name, Mat64::from_column_slice(v.len(), 1, v.as_slice()));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, x: f64) {
        self.insert(name, Mat64::from_element(1, 1, x));
    }

    pub fn get(&self, name: &str) -> Result<&Mat64, ArchiveError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| ArchiveError::Missing(name.into()))
    }

    pub fn get_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<&Mat64, ArchiveError> {
        let m = self.get(name)?;
        if m.shape() != (rows, cols) {
            return Err(ArchiveError::Shape {
                name: name.into(),
                expected: format!("{rows}x{cols}"),
                found: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
        Ok(m)
    }

    pub fn get_vector(&self, name: &str, len: usize) -> Result<Vector64, ArchiveError> {
        Ok(Vector64::from_column_slice(self.get_shaped(name, len, 1)?.as_slice()))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64, ArchiveError> {
        Ok(self.get_shaped(name, 1, 1)?[(0, 0)])
    }

    pub fn write(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (name, m) in &self.entries {
            let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
            for r in m.row_iter() {
                let line: Vec<String> = r.iter().map(|&x| fmt17(x)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn read(text: &str) -> Result<Self, ArchiveError> {
        let bad = |line: usize, reason: String| ArchiveError::Malformed { line, reason };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty archive".into()))?;
        let mut head = first.split_whitespace();
        if head.next() != Some(MAGIC) {
            return Err(bad(1, format!("expected header `{MAGIC} <version>`")));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing version".into()))?;
        if version != VERSION {
            return Err(ArchiveError::Version(version));
        }
        let mut archive = MatrixArchive::default();
        while let Some((ln, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(ln, format!("expected `name rows cols`, found {header:?}")));
            };
            let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, format!("bad dimension {s:?}")));
            let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| bad(ln, format!("{name}: truncated")))?;
                let vals = row
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad(ln, format!("bad number {t:?}"))))
                    .collect::<Result<Vec<f64>, _>>()?;
                if vals.len() != cols {
                    return Err(bad(ln, format!("{name}: expected {cols} values, found {}", vals.len())));
                }
                data.extend(vals);
            }
            archive.insert(name, Mat64::from_row_slice(rows, cols, &data));
        }
        Ok(archive)
    }

    pub fn from_solution(sol: &MeanFieldSolution64) -> Self {
        let c = &sol.coefficients;
        let mut a = MatrixArchive::default();
        a.insert("Abar", c.abar.clone());
        a.insert("Gbar", c.gbar.clone());
        a.insert("Hbar", c.hbar.clone());
        a.insert("Lbar", c.lbar.clone());
        a.insert("Jbar", c.jbar.clone());
        a.insert_vector("mbar", &c.mbar);
        a.insert("Pi0", sol.pi0.clone());
        a.insert_vector("s0", &sol.s0);
        for (k, (pi, s)) in sol.pik.iter().zip(&sol.sk).enumerate() {
            a.insert(format!("Pi_{k}"), pi.clone());
            a.insert_vector(format!("s_{k}"), s);
        }
        a.insert_scalar("residual", sol.residual);
        a.insert_scalar("iterations", sol.iterations as f64);
        a.insert_scalar("converged", if sol.converged { 1.0 } else { 0.0 });
        a
    }

    /// Rebuilds a solution for a game with state dimension `n` and `k`
    /// minor types, checking every shape.
    pub fn to_solution(&self, n: usize, k: usize) -> Result<MeanFieldSolution64, ArchiveError> {
        let nk = n * k;
        let nz = n + nk;
        let d = 3 * n + 2 * nk;
        let coefficients = MeanFieldCoefficients {
            abar: self.get_shaped("Abar", nk, nk)?.clone(),
            gbar: self.get_shaped("Gbar", nk, n)?.clone(),
            hbar: self.get_shaped("Hbar", nk, n)?.clone(),
            lbar: self.get_shaped("Lbar", nk, nk)?.clone(),
            jbar: self.get_shaped("Jbar", nk, d * k)?.clone(),
            mbar: self.get_vector("mbar", nk)?,
        };
        let mut pik = Vec::with_capacity(k);
        let mut sk = Vec::with_capacity(k);
        let mut pi_blocks = Vec::with_capacity(k);
        for t in 0..k {
            let pi = self.get_shaped(&format!("Pi_{t}"), d, d)?.clone();
            pi_blocks.push(extract_pi_blocks(&pi, n, k).expect("shape checked above"));
            pik.push(pi);
            sk.push(self.get_vector(&format!("s_{t}"), d)?);
        }
        if self.get(&format!("Pi_{k}")).is_ok() {
            return Err(ArchiveError::Shape {
                name: "Pi".into(),
                expected: format!("{k} types"),
                found: "more types".into(),
            });
        }
        Ok(MeanFieldSolution64 {
            coefficients,
            pi0: self.get_shaped("Pi0", nz, nz)?.clone(),
            s0: self.get_vector("s0", nz)?,
            pik,
            sk,
            pi_blocks,
            iterations: self.get_scalar("iterations")? as usize,
            residual: self.get_scalar("residual")?,
            converged: self.get_scalar("converged")? != 0.0,
        })
    }
}
