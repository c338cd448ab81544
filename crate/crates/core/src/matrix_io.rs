//! Sparse genes x cells count matrices: construction, text formats and
//! library-size normalization.
//!
//! Two on-disk formats are supported:
//!
//! - Matrix Market coordinate files (`%%MatrixMarket matrix coordinate real general`),
//!   1-indexed on disk. Gene and cell names live in sidecar files next to the
//!   matrix (`<stem>.genes.txt`, `<stem>.cells.txt`, one name per line); when
//!   they are absent, names default to `gene_<i>` / `cell_<j>`.
//! - Dense delimited text: a header row of cell names, then one row per gene
//!   whose first field is the gene name. Tab or comma is detected from the
//!   header line.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    Dimension {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid value {value} at gene {gene} ({gene_name}), cell {cell} ({cell_name})")]
    Value {
        gene: usize,
        cell: usize,
        gene_name: String,
        cell_name: String,
        value: f64,
    },
    #[error("cell {cell} ({name}) has zero total count")]
    DegenerateCell { cell: usize, name: String },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid matrix: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, MatrixError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    MatrixMarket,
    DenseDelimited,
}

impl MatrixFormat {
    /// Guess the format from a file extension: `.mtx` is Matrix Market,
    /// anything else is dense delimited text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") => MatrixFormat::MatrixMarket,
            _ => MatrixFormat::DenseDelimited,
        }
    }
}

/// Nonnegative genes x cells matrix in compressed sparse row form (one row
/// per gene). Explicit zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    n_genes: usize,
    n_cells: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    gene_names: Vec<String>,
    cell_names: Vec<String>,
}

impl CountMatrix {
    /// Build from `(gene, cell, value)` triplets. Zero values are dropped;
    /// duplicate coordinates are an error.
    pub fn from_triplets(
        n_genes: usize,
        n_cells: usize,
        mut triplets: Vec<(usize, usize, f64)>,
        gene_names: Vec<String>,
        cell_names: Vec<String>,
    ) -> Result<Self> {
        if n_genes == 0 || n_cells == 0 {
            return Err(MatrixError::Invalid(format!(
                "matrix must have at least one gene and one cell, got {n_genes}x{n_cells}"
            )));
        }
        check_names(&gene_names, n_genes, "gene")?;
        check_names(&cell_names, n_cells, "cell")?;
        triplets.sort_by_key(|&(g, c, _)| (g, c));
        let mut row_ptr = vec![0usize; n_genes + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &(g, c, v) in &triplets {
            if g >= n_genes || c >= n_cells {
                return Err(MatrixError::Invalid(format!(
                    "entry ({g}, {c}) outside {n_genes}x{n_cells}"
                )));
            }
            if last == Some((g, c)) {
                return Err(MatrixError::Invalid(format!("duplicate entry ({g}, {c})")));
            }
            last = Some((g, c));
            if !v.is_finite() || v < 0.0 {
                return Err(MatrixError::Value {
                    gene: g,
                    cell: c,
                    gene_name: gene_names[g].clone(),
                    cell_name: cell_names[c].clone(),
                    value: v,
                });
            }
            if v == 0.0 {
                continue;
            }
            row_ptr[g + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for g in 0..n_genes {
            row_ptr[g + 1] += row_ptr[g];
        }
        Ok(Self {
            n_genes,
            n_cells,
            row_ptr,
            col_idx,
            values,
            gene_names,
            cell_names,
        })
    }

    /// Build from a dense gene-major buffer (`data[g * n_cells + c]`).
    pub fn from_dense(
        n_genes: usize,
        n_cells: usize,
        data: &[f64],
        gene_names: Vec<String>,
        cell_names: Vec<String>,
    ) -> Result<Self> {
        if data.len() != n_genes * n_cells {
            return Err(MatrixError::Invalid(format!(
                "dense buffer has {} values, expected {}",
                data.len(),
                n_genes * n_cells
            )));
        }
        let triplets = data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i / n_cells, i % n_cells, v))
            .collect();
        Self::from_triplets(n_genes, n_cells, triplets, gene_names, cell_names)
    }

    /// Dense matrix with generated names, mostly for tests and simulation.
    pub fn from_dense_unnamed(n_genes: usize, n_cells: usize, data: &[f64]) -> Result<Self> {
        Self::from_dense(
            n_genes,
            n_cells,
            data,
            default_names("gene", n_genes),
            default_names("cell", n_cells),
        )
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_genes, self.n_cells)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn cell_names(&self) -> &[String] {
        &self.cell_names
    }

    /// Nonzero `(cell, value)` pairs of one gene, in ascending cell order.
    pub fn row(&self, gene: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[gene]..self.row_ptr[gene + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// All stored `(gene, cell, value)` entries in gene-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_genes).flat_map(move |g| self.row(g).map(move |(c, v)| (g, c, v)))
    }

    pub fn get(&self, gene: usize, cell: usize) -> f64 {
        let range = self.row_ptr[gene]..self.row_ptr[gene + 1];
        match self.col_idx[range.clone()].binary_search(&cell) {
            Ok(i) => self.values[range.start + i],
            Err(_) => 0.0,
        }
    }

    /// Dense gene-major copy (`out[g * n_cells + c]`).
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_genes * self.n_cells];
        for (g, c, v) in self.entries() {
            out[g * self.n_cells + c] = v;
        }
        out
    }

    pub fn cell_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.n_cells];
        for (_, c, v) in self.entries() {
            totals[c] += v;
        }
        totals
    }

    /// Number of zero entries in each cell.
    pub fn zeros_per_cell(&self) -> Vec<usize> {
        let mut nz = vec![0usize; self.n_cells];
        for &c in &self.col_idx {
            nz[c] += 1;
        }
        nz.into_iter().map(|n| self.n_genes - n).collect()
    }

    /// Fraction of all entries that are zero.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz() as f64 / (self.n_genes * self.n_cells) as f64
    }

    /// True when every stored value is an integer (within `tol`).
    pub fn is_integral(&self, tol: f64) -> bool {
        self.values.iter().all(|v| (v - v.round()).abs() <= tol)
    }

    /// Same matrix with every stored value mapped through `f`. Values mapped
    /// to zero are dropped; the result is revalidated.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let triplets = self.entries().map(|(g, c, v)| (g, c, f(g, c, v))).collect();
        Self::from_triplets(
            self.n_genes,
            self.n_cells,
            triplets,
            self.gene_names.clone(),
            self.cell_names.clone(),
        )
    }
}

pub fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn check_names(names: &[String], n: usize, what: &str) -> Result<()> {
    if names.len() != n {
        return Err(MatrixError::Invalid(format!(
            "{} {what} names for {n} {what}s",
            names.len()
        )));
    }
    let mut seen = HashSet::with_capacity(n);
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(MatrixError::Invalid(format!("duplicate {what} name {name:?}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading and writing
// ---------------------------------------------------------------------------

pub fn read_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<CountMatrix> {
    let path = path.as_ref();
    match format {
        MatrixFormat::MatrixMarket => read_matrix_market(path),
        MatrixFormat::DenseDelimited => read_dense(path),
    }
}

pub fn write_matrix(m: &CountMatrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        MatrixFormat::MatrixMarket => {
            let mut out = String::new();
            out.push_str("%%MatrixMarket matrix coordinate real general\n");
            let _ = writeln!(out, "{} {} {}", m.n_genes, m.n_cells, m.nnz());
            for (g, c, v) in m.entries() {
                let _ = writeln!(out, "{} {} {}", g + 1, c + 1, v);
            }
            fs::write(path, out)?;
            write_lines(&sidecar_path(path, "genes"), &m.gene_names)?;
            write_lines(&sidecar_path(path, "cells"), &m.cell_names)?;
        }
        MatrixFormat::DenseDelimited => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            write!(w, "gene")?;
            for name in &m.cell_names {
                write!(w, "\t{name}")?;
            }
            writeln!(w)?;
            let mut row = vec![0.0; m.n_cells];
            for g in 0..m.n_genes {
                row.iter_mut().for_each(|v| *v = 0.0);
                for (c, v) in m.row(g) {
                    row[c] = v;
                }
                write!(w, "{}", m.gene_names[g])?;
                for v in &row {
                    write!(w, "\t{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Sidecar file holding gene or cell names for a Matrix Market file:
/// `dir/foo.mtx` -> `dir/foo.genes.txt`.
pub fn sidecar_path(path: &Path, kind: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{kind}.txt"))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> MatrixError {
    MatrixError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MmField {
    Real,
    Integer,
    Pattern,
}

struct MmHeader {
    field: MmField,
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
}

/// Reads the banner and size line; returns the header and the remaining
/// lines (with their 1-based line numbers).
fn read_mm_body(path: &Path) -> Result<(MmHeader, Vec<(usize, String)>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, banner) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let banner = banner?;
    let tokens: Vec<String> = banner
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(parse_err(path, 1, format!("bad Matrix Market banner {banner:?}")));
    }
    if tokens[2] != "coordinate" {
        return Err(parse_err(path, 1, "only coordinate format is supported"));
    }
    let field = match tokens[3].as_str() {
        "real" | "double" => MmField::Real,
        "integer" => MmField::Integer,
        "pattern" => MmField::Pattern,
        other => return Err(parse_err(path, 1, format!("unsupported field type {other:?}"))),
    };
    if tokens[4] != "general" {
        return Err(parse_err(path, 1, "only general symmetry is supported"));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut body = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        if size.is_none() {
            let parts: Vec<&str> = trimmed.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(MatrixError::Dimension {
                    path: path.display().to_string(),
                    line: lineno,
                    expected: 3,
                    found: parts.len(),
                });
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| parse_err(path, lineno, format!("bad size field {s:?}")))
            };
            size = Some((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
        } else {
            body.push((lineno, line));
        }
    }
    let (n_rows, n_cols, nnz) = size.ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    if body.len() != nnz {
        return Err(parse_err(
            path,
            body.last().map_or(2, |(l, _)| *l),
            format!("header declares {nnz} entries, found {}", body.len()),
        ));
    }
    Ok((
        MmHeader {
            field,
            n_rows,
            n_cols,
            nnz,
        },
        body,
    ))
}

fn parse_mm_coords(
    path: &Path,
    lineno: usize,
    parts: &[&str],
    n_rows: usize,
    n_cols: usize,
) -> Result<(usize, usize)> {
    let idx = |s: &str, bound: usize| -> Result<usize> {
        let i: usize = s
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad index {s:?}")))?;
        if i == 0 || i > bound {
            return Err(parse_err(
                path,
                lineno,
                format!("index {i} outside 1..={bound}"),
            ));
        }
        Ok(i - 1)
    };
    Ok((idx(parts[0], n_rows)?, idx(parts[1], n_cols)?))
}

fn read_matrix_market(path: &Path) -> Result<CountMatrix> {
    let (header, body) = read_mm_body(path)?;
    let expected = if header.field == MmField::Pattern { 2 } else { 3 };
    let mut triplets = Vec::with_capacity(header.nnz);
    let gene_names = read_names_or_default(&sidecar_path(path, "genes"), "gene", header.n_rows)?;
    let cell_names = read_names_or_default(&sidecar_path(path, "cells"), "cell", header.n_cols)?;
    for (lineno, line) in &body {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != expected {
            return Err(MatrixError::Dimension {
                path: path.display().to_string(),
                line: *lineno,
                expected,
                found: parts.len(),
            });
        }
        let (g, c) = parse_mm_coords(path, *lineno, &parts, header.n_rows, header.n_cols)?;
        let v = if header.field == MmField::Pattern {
            1.0
        } else {
            parts[2]
                .parse::<f64>()
                .map_err(|_| parse_err(path, *lineno, format!("bad value {:?}", parts[2])))?
        };
        if !v.is_finite() || v < 0.0 {
            return Err(MatrixError::Value {
                gene: g,
                cell: c,
                gene_name: gene_names[g].clone(),
                cell_name: cell_names[c].clone(),
                value: v,
            });
        }
        triplets.push((g, c, v));
    }
    CountMatrix::from_triplets(header.n_rows, header.n_cols, triplets, gene_names, cell_names)
}

fn read_names_or_default(path: &Path, prefix: &str, n: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(default_names(prefix, n));
    }
    let names = read_labels(path)?;
    if names.len() != n {
        return Err(MatrixError::Invalid(format!(
            "{} lists {} names, matrix has {n}",
            path.display(),
            names.len()
        )));
    }
    Ok(names)
}

fn read_dense(path: &Path) -> Result<CountMatrix> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = loop {
        match lines.next() {
            Some((_, l)) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break l;
                }
            }
            None => return Err(parse_err(path, 1, "empty file")),
        }
    };
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let header_fields: Vec<&str> = header.trim_end_matches('\r').split(delim).collect();

    let mut gene_names = Vec::new();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in lines {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(MatrixError::Dimension {
                path: path.display().to_string(),
                line: lineno,
                expected,
                found: fields.len(),
            });
        }
        gene_names.push(fields[0].trim().to_string());
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, lineno, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((lineno, values));
    }
    let n_cells = width.map_or(header_fields.len().saturating_sub(1), |w| w - 1);
    // The header either carries a corner label over the gene-name column or
    // lists cell names only.
    let cell_names: Vec<String> = if header_fields.len() == n_cells + 1 {
        header_fields[1..].iter().map(|s| s.trim().to_string()).collect()
    } else if header_fields.len() == n_cells {
        header_fields.iter().map(|s| s.trim().to_string()).collect()
    } else {
        return Err(MatrixError::Dimension {
            path: path.display().to_string(),
            line: rows.first().map_or(2, |(l, _)| *l),
            expected: header_fields.len(),
            found: n_cells + 1,
        });
    };
    let n_genes = rows.len();
    let mut triplets = Vec::new();
    for (g, (_, values)) in rows.iter().enumerate() {
        for (c, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(MatrixError::Value {
                    gene: g,
                    cell: c,
                    gene_name: gene_names[g].clone(),
                    cell_name: cell_names[c].clone(),
                    value: v,
                });
            }
            if v != 0.0 {
                triplets.push((g, c, v));
            }
        }
    }
    CountMatrix::from_triplets(n_genes, n_cells, triplets, gene_names, cell_names)
}

/// Binary genes x cells pattern (e.g. a dropout mask) as sorted `(gene, cell)`
/// positions.
pub fn write_pattern(
    path: impl AsRef<Path>,
    n_genes: usize,
    n_cells: usize,
    positions: &[(usize, usize)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("%%MatrixMarket matrix coordinate pattern general\n");
    let _ = writeln!(out, "{n_genes} {n_cells} {}", positions.len());
    for &(g, c) in positions {
        let _ = writeln!(out, "{} {}", g + 1, c + 1);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a pattern (or any coordinate) Matrix Market file and returns its
/// shape and 0-indexed positions sorted by `(gene, cell)`.
pub fn read_pattern(path: impl AsRef<Path>) -> Result<((usize, usize), Vec<(usize, usize)>)> {
    let path = path.as_ref();
    let (header, body) = read_mm_body(path)?;
    let mut positions = Vec::with_capacity(header.nnz);
    for (lineno, line) in &body {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 2 {
            return Err(MatrixError::Dimension {
                path: path.display().to_string(),
                line: *lineno,
                expected: 2,
                found: parts.len(),
            });
        }
        positions.push(parse_mm_coords(
            path,
            *lineno,
            &parts,
            header.n_rows,
            header.n_cols,
        )?);
    }
    positions.sort_unstable();
    positions.dedup();
    Ok(((header.n_rows, header.n_cols), positions))
}

/// One label per non-empty line, in cell order.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_labels<T: std::fmt::Display>(path: impl AsRef<Path>, labels: &[T]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    None,
    LibrarySize,
    LibrarySizeLog2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationRecord {
    pub mode: NormalizationMode,
    /// Per-cell multipliers: normalized = raw * size_factor.
    pub size_factors: Vec<f64>,
    pub applied_log: bool,
}

/// Library-size normalization to the median cell total, optionally followed
/// by `log2(v + 1)`. Zeros stay zero.
pub fn normalize(
    m: &CountMatrix,
    mode: NormalizationMode,
) -> Result<(CountMatrix, NormalizationRecord)> {
    if mode == NormalizationMode::None {
        return Ok((
            m.clone(),
            NormalizationRecord {
                mode,
                size_factors: vec![1.0; m.n_cells],
                applied_log: false,
            },
        ));
    }
    let totals = m.cell_totals();
    if let Some(c) = totals.iter().position(|&t| t <= 0.0) {
        return Err(MatrixError::DegenerateCell {
            cell: c,
            name: m.cell_names[c].clone(),
        });
    }
    let target = median(&totals);
    let size_factors: Vec<f64> = totals.iter().map(|t| target / t).collect();
    let applied_log = mode == NormalizationMode::LibrarySizeLog2;
    let out = m.map_values(|_, c, v| {
        let scaled = v * size_factors[c];
        if applied_log {
            scaled.ln_1p() / std::f64::consts::LN_2
        } else {
            scaled
        }
    })?;
    Ok((
        out,
        NormalizationRecord {
            mode,
            size_factors,
            applied_log,
        },
    ))
}

pub fn denormalize(m: &CountMatrix, rec: &NormalizationRecord) -> Result<CountMatrix> {
    if rec.size_factors.len() != m.n_cells {
        return Err(MatrixError::ShapeMismatch {
            expected: (m.n_genes, rec.size_factors.len()),
            found: m.shape(),
        });
    }
    if rec.mode == NormalizationMode::None {
        return Ok(m.clone());
    }
    m.map_values(|_, c, v| {
        let scaled = if rec.applied_log {
            (v * std::f64::consts::LN_2).exp_m1()
        } else {
            v
        };
        scaled / rec.size_factors[c]
    })
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
