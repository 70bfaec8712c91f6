//! Unit-level experiment logs, fold assignment, and cell-fold aggregates.
//!
//! Cells and folds are 1-based throughout, matching the CSV files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("malformed header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: expected {expected} surrogate columns, found {found}")]
    Dimension { line: u64, expected: usize, found: usize },
    #[error("line {line}: duplicate key (cell {cell_id}, fold {fold_id})")]
    DuplicateKey { line: u64, cell_id: usize, fold_id: usize },
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    Parse { line: u64, column: String, value: String },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("cell {cell_id} has {units} units, fewer than the {folds} folds requested")]
    CellTooSmall { cell_id: usize, units: usize, folds: usize },
    #[error("dataset has no fold assignment")]
    FoldsUnassigned,
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl DataError {
    fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub cell_id: usize,
    /// `None` until folds are assigned.
    pub fold_id: Option<usize>,
    pub surrogate: Vec<f64>,
    pub outcome: f64,
}

/// A validated collection of unit records: `num_cells` cells of exactly
/// `units_per_cell` units each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<UnitRecord>,
    num_cells: usize,
    num_folds: Option<usize>,
    surrogate_dim: usize,
    units_per_cell: usize,
}

impl Dataset {
    /// Builds a dataset, checking that cells are `1..=num_cells`, equally
    /// sized, and that every surrogate has length `surrogate_dim`. Fold labels
    /// must be either absent everywhere or present everywhere.
    pub fn new(records: Vec<UnitRecord>, num_cells: usize, surrogate_dim: usize) -> Result<Self, DataError> {
        if num_cells == 0 || surrogate_dim == 0 {
            return Err(DataError::Invalid("need at least one cell and one surrogate".into()));
        }
        let mut per_cell = vec![0usize; num_cells];
        for (i, r) in records.iter().enumerate() {
            if r.cell_id == 0 || r.cell_id > num_cells {
                return Err(DataError::Invalid(format!("record {i}: cell_id {} outside 1..={num_cells}", r.cell_id)));
            }
            if r.surrogate.len() != surrogate_dim {
                return Err(DataError::Invalid(format!("record {i}: surrogate length {} != {surrogate_dim}", r.surrogate.len())));
            }
            per_cell[r.cell_id - 1] += 1;
        }
        let units_per_cell = per_cell[0];
        if let Some(c) = per_cell.iter().position(|&c| c != units_per_cell) {
            return Err(DataError::Invalid(format!("cell {} has {} units, cell 1 has {units_per_cell}", c + 1, per_cell[c])));
        }
        if units_per_cell == 0 {
            return Err(DataError::Invalid("cells are empty".into()));
        }

        let assigned = records.iter().filter(|r| r.fold_id.is_some()).count();
        let num_folds = if assigned == 0 {
            None
        } else if assigned != records.len() {
            return Err(DataError::Invalid("fold labels are only partially assigned".into()));
        } else {
            let num_folds = records.iter().filter_map(|r| r.fold_id).max().unwrap_or(0);
            check_fold_balance(&records, num_cells, num_folds)?;
            Some(num_folds)
        };

        Ok(Dataset { records, num_cells, num_folds, surrogate_dim, units_per_cell })
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UnitRecord> {
        self.records
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_folds(&self) -> Option<usize> {
        self.num_folds
    }

    pub fn surrogate_dim(&self) -> usize {
        self.surrogate_dim
    }

    pub fn units_per_cell(&self) -> usize {
        self.units_per_cell
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by cell, in record order.
    pub(crate) fn indices_by_cell(&self) -> Vec<Vec<usize>> {
        let mut by_cell = vec![Vec::with_capacity(self.units_per_cell); self.num_cells];
        for (i, r) in self.records.iter().enumerate() {
            by_cell[r.cell_id - 1].push(i);
        }
        by_cell
    }
}

fn check_fold_balance(records: &[UnitRecord], num_cells: usize, num_folds: usize) -> Result<(), DataError> {
    if num_folds < 2 {
        return Err(DataError::TooFewFolds(num_folds));
    }
    let mut counts = vec![0usize; num_cells * num_folds];
    for r in records {
        let v = r.fold_id.expect("checked by caller");
        if v == 0 {
            return Err(DataError::Invalid("fold_id 0; folds are 1-based".into()));
        }
        counts[(r.cell_id - 1) * num_folds + (v - 1)] += 1;
    }
    for (a, row) in counts.chunks(num_folds).enumerate() {
        let lo = row.iter().copied().min().unwrap_or(0);
        let hi = row.iter().copied().max().unwrap_or(0);
        if lo == 0 || hi - lo > 1 {
            return Err(DataError::Invalid(format!("cell {}: fold sizes {row:?} are not balanced", a + 1)));
        }
    }
    Ok(())
}

/// Per (cell, fold) sample means. The sufficient statistic for JIVE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFoldAggregate {
    pub cell_id: usize,
    pub fold_id: usize,
    pub count: usize,
    pub mean_surrogate: Vec<f64>,
    pub mean_outcome: f64,
}

/// Relabels folds with a balanced random permutation inside each cell.
///
/// Cell `a` with `n` units receives labels `1, 2, .., L, 1, 2, ..` shuffled,
/// so fold sizes differ by at most one. Existing labels are overwritten.
pub fn assign_folds(dataset: Dataset, num_folds: usize, seed: u64) -> Result<Dataset, DataError> {
    if num_folds < 2 {
        return Err(DataError::TooFewFolds(num_folds));
    }
    if dataset.units_per_cell < num_folds {
        return Err(DataError::CellTooSmall { cell_id: 1, units: dataset.units_per_cell, folds: num_folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_cell = dataset.indices_by_cell();
    let Dataset { mut records, num_cells, surrogate_dim, units_per_cell, .. } = dataset;
    let mut labels: Vec<usize> = (0..units_per_cell).map(|i| i % num_folds + 1).collect();
    for members in &by_cell {
        labels.sort_unstable();
        labels.shuffle(&mut rng);
        for (&i, &v) in members.iter().zip(&labels) {
            records[i].fold_id = Some(v);
        }
    }
    Ok(Dataset { records, num_cells, num_folds: Some(num_folds), surrogate_dim, units_per_cell })
}

/// Exact per (cell, fold) means, sorted by `(cell_id, fold_id)`.
///
/// Sums accumulate in record order, so the result is reproducible bit for bit.
pub fn aggregate(dataset: &Dataset) -> Result<Vec<CellFoldAggregate>, DataError> {
    let num_folds = dataset.num_folds.ok_or(DataError::FoldsUnassigned)?;
    let d = dataset.surrogate_dim;
    let cells = dataset.num_cells;
    let mut counts = vec![0usize; cells * num_folds];
    let mut s_sums = vec![0.0; cells * num_folds * d];
    let mut y_sums = vec![0.0; cells * num_folds];
    for r in &dataset.records {
        let slot = (r.cell_id - 1) * num_folds + (r.fold_id.expect("validated") - 1);
        counts[slot] += 1;
        y_sums[slot] += r.outcome;
        for (acc, s) in s_sums[slot * d..(slot + 1) * d].iter_mut().zip(&r.surrogate) {
            *acc += s;
        }
    }
    Ok((0..cells * num_folds)
        .map(|slot| {
            let n = counts[slot] as f64;
            CellFoldAggregate {
                cell_id: slot / num_folds + 1,
                fold_id: slot % num_folds + 1,
                count: counts[slot],
                mean_surrogate: s_sums[slot * d..(slot + 1) * d].iter().map(|s| s / n).collect(),
                mean_outcome: y_sums[slot] / n,
            }
        })
        .collect())
}

/// Aggregates arranged as a complete cell x fold grid.
///
/// Cell ids need not be contiguous, but every cell must carry folds `1..=L`
/// for one common `L >= 2`.
#[derive(Debug, Clone)]
pub struct AggregateGrid {
    cell_ids: Vec<usize>,
    num_folds: usize,
    dim: usize,
    counts: Vec<usize>,
    s_means: Vec<f64>,
    y_means: Vec<f64>,
}

impl AggregateGrid {
    pub fn new(aggregates: &[CellFoldAggregate]) -> Result<Self, DataError> {
        let first = aggregates.first().ok_or_else(|| DataError::Invalid("no aggregates".into()))?;
        let dim = first.mean_surrogate.len();
        if dim == 0 {
            return Err(DataError::Invalid("surrogate dimension is zero".into()));
        }
        let mut by_key: BTreeMap<(usize, usize), &CellFoldAggregate> = BTreeMap::new();
        for (i, agg) in aggregates.iter().enumerate() {
            if agg.mean_surrogate.len() != dim {
                return Err(DataError::Invalid(format!("aggregate {i}: surrogate length {} != {dim}", agg.mean_surrogate.len())));
            }
            if agg.count == 0 {
                return Err(DataError::Invalid(format!("aggregate (cell {}, fold {}) has zero count", agg.cell_id, agg.fold_id)));
            }
            if by_key.insert((agg.cell_id, agg.fold_id), agg).is_some() {
                return Err(DataError::Invalid(format!("duplicate aggregate (cell {}, fold {})", agg.cell_id, agg.fold_id)));
            }
        }
        let cell_ids: Vec<usize> = by_key.keys().map(|&(a, _)| a).collect::<BTreeSet<_>>().into_iter().collect();
        let num_folds = by_key.len() / cell_ids.len();
        if num_folds < 2 {
            return Err(DataError::TooFewFolds(num_folds));
        }
        let mut counts = Vec::with_capacity(by_key.len());
        let mut s_means = Vec::with_capacity(by_key.len() * dim);
        let mut y_means = Vec::with_capacity(by_key.len());
        for &a in &cell_ids {
            for v in 1..=num_folds {
                let agg = by_key.get(&(a, v)).ok_or_else(|| DataError::Invalid(format!("cell {a} is missing fold {v} of {num_folds}")))?;
                counts.push(agg.count);
                s_means.extend_from_slice(&agg.mean_surrogate);
                y_means.push(agg.mean_outcome);
            }
        }
        if counts.len() != by_key.len() {
            return Err(DataError::Invalid("cells carry different fold sets".into()));
        }
        Ok(AggregateGrid { cell_ids, num_folds, dim, counts, s_means, y_means })
    }

    pub fn num_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn num_folds(&self) -> usize {
        self.num_folds
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell_ids(&self) -> &[usize] {
        &self.cell_ids
    }

    fn slot(&self, cell: usize, fold: usize) -> usize {
        cell * self.num_folds + fold
    }

    /// `cell` and `fold` are 0-based grid positions.
    pub fn count(&self, cell: usize, fold: usize) -> usize {
        self.counts[self.slot(cell, fold)]
    }

    pub fn s_mean(&self, cell: usize, fold: usize) -> &[f64] {
        let s = self.slot(cell, fold);
        &self.s_means[s * self.dim..(s + 1) * self.dim]
    }

    pub fn y_mean(&self, cell: usize, fold: usize) -> f64 {
        self.y_means[self.slot(cell, fold)]
    }

    /// Count-weighted mean of the surrogate over every fold except `fold`.
    pub fn s_mean_excluding(&self, cell: usize, fold: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut total = 0usize;
        for w in (0..self.num_folds).filter(|&w| w != fold) {
            let c = self.count(cell, w);
            total += c;
            for (o, s) in out.iter_mut().zip(self.s_mean(cell, w)) {
                *o += c as f64 * s;
            }
        }
        out.iter_mut().for_each(|o| *o /= total as f64);
        out
    }

    /// Whole-cell (folds pooled) means of S and Y.
    pub fn cell_means(&self, cell: usize) -> (Vec<f64>, f64) {
        let mut s = vec![0.0; self.dim];
        let mut y = 0.0;
        let mut total = 0usize;
        for v in 0..self.num_folds {
            let c = self.count(cell, v);
            total += c;
            y += c as f64 * self.y_mean(cell, v);
            for (o, m) in s.iter_mut().zip(self.s_mean(cell, v)) {
                *o += c as f64 * m;
            }
        }
        s.iter_mut().for_each(|o| *o /= total as f64);
        (s, y / total as f64)
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn aggregate_header(dim: usize) -> String {
    let mut h = String::from("cell_id,fold_id,count");
    for j in 1..=dim {
        h.push_str(&format!(",s_mean_{j}"));
    }
    h.push_str(",y_mean");
    h
}

pub fn unit_header(dim: usize) -> String {
    let mut h = String::from("cell_id,fold_id");
    for j in 1..=dim {
        h.push_str(&format!(",s_{j}"));
    }
    h.push_str(",y");
    h
}

pub fn write_aggregates_to<W: Write>(aggregates: &[CellFoldAggregate], mut out: W) -> io::Result<()> {
    let dim = aggregates.first().map_or(0, |a| a.mean_surrogate.len());
    writeln!(out, "{}", aggregate_header(dim))?;
    for agg in aggregates {
        write!(out, "{},{},{}", agg.cell_id, agg.fold_id, agg.count)?;
        for s in &agg.mean_surrogate {
            write!(out, ",{}", format_float(*s))?;
        }
        writeln!(out, ",{}", format_float(agg.mean_outcome))?;
    }
    out.flush()
}

pub fn write_aggregates(aggregates: &[CellFoldAggregate], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_aggregates_to(aggregates, BufWriter::new(file)).map_err(|e| DataError::io(path, e))
}

pub fn write_units_to<W: Write>(dataset: &Dataset, mut out: W) -> io::Result<()> {
    writeln!(out, "{}", unit_header(dataset.surrogate_dim))?;
    for r in &dataset.records {
        match r.fold_id {
            Some(v) => write!(out, "{},{}", r.cell_id, v)?,
            None => write!(out, "{},", r.cell_id)?,
        }
        for s in &r.surrogate {
            write!(out, ",{}", format_float(*s))?;
        }
        writeln!(out, ",{}", format_float(r.outcome))?;
    }
    out.flush()
}

pub fn write_units(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_units_to(dataset, BufWriter::new(file)).map_err(|e| DataError::io(path, e))
}

/// Parses the `<prefix>_1, .., <prefix>_d` middle block of a header; returns `d`.
fn parse_header(fields: &[&str], lead: &[&str], prefix: &str, last: &str, expected_shape: &str) -> Result<usize, DataError> {
    let header_err = || DataError::Header { expected: expected_shape.to_string(), found: fields.join(",") };
    if fields.len() < lead.len() + 2 || fields[..lead.len()] != *lead || fields[fields.len() - 1] != last {
        return Err(header_err());
    }
    let middle = &fields[lead.len()..fields.len() - 1];
    for (j, name) in middle.iter().enumerate() {
        if *name != format!("{prefix}_{}", j + 1) {
            return Err(header_err());
        }
    }
    Ok(middle.len())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::None).from_reader(input)
}

fn parse_field<T: std::str::FromStr>(line: u64, column: &str, value: &str) -> Result<T, DataError> {
    value.parse().map_err(|_| DataError::Parse { line, column: column.to_string(), value: value.to_string() })
}

struct ParsedRows {
    dim: usize,
    rows: Vec<(u64, csv::StringRecord)>,
}

fn read_rows<R: Read>(input: R, lead: &[&str], prefix: &str, last: &str, shape: &str) -> Result<ParsedRows, DataError> {
    let mut reader = csv_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_error)?,
        None => {
            return Err(DataError::Header { expected: shape.into(), found: String::new() });
        }
    };
    let fields: Vec<&str> = header.iter().collect();
    let dim = parse_header(&fields, lead, prefix, last, shape)?;
    let width = lead.len() + dim + 1;
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(DataError::Dimension { line, expected: dim, found: rec.len().saturating_sub(lead.len() + 1) });
        }
        rows.push((line, rec));
    }
    Ok(ParsedRows { dim, rows })
}

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    DataError::Csv { line, message: e.to_string() }
}

pub fn read_aggregates_from<R: Read>(input: R) -> Result<Vec<CellFoldAggregate>, DataError> {
    let parsed =
        read_rows(input, &["cell_id", "fold_id", "count"], "s_mean", "y_mean", "cell_id,fold_id,count,s_mean_1,...,s_mean_d,y_mean")?;
    let dim = parsed.dim;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(parsed.rows.len());
    for (line, rec) in &parsed.rows {
        let line = *line;
        let cell_id: usize = parse_field(line, "cell_id", &rec[0])?;
        let fold_id: usize = parse_field(line, "fold_id", &rec[1])?;
        let count: usize = parse_field(line, "count", &rec[2])?;
        if count == 0 {
            return Err(DataError::Parse { line, column: "count".into(), value: "0".into() });
        }
        if !seen.insert((cell_id, fold_id)) {
            return Err(DataError::DuplicateKey { line, cell_id, fold_id });
        }
        let mean_surrogate =
            (0..dim).map(|j| parse_field(line, &format!("s_mean_{}", j + 1), &rec[3 + j])).collect::<Result<Vec<f64>, _>>()?;
        let mean_outcome = parse_field(line, "y_mean", &rec[3 + dim])?;
        out.push(CellFoldAggregate { cell_id, fold_id, count, mean_surrogate, mean_outcome });
    }
    Ok(out)
}

pub fn read_aggregates(path: &Path) -> Result<Vec<CellFoldAggregate>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_aggregates_from(io::BufReader::new(file))
}

/// Reads a unit-level CSV. `K` is the largest cell id; an empty `fold_id`
/// column means folds are unassigned.
pub fn read_units_from<R: Read>(input: R) -> Result<Dataset, DataError> {
    let parsed = read_rows(input, &["cell_id", "fold_id"], "s", "y", "cell_id,fold_id,s_1,...,s_d,y")?;
    let dim = parsed.dim;
    let mut records = Vec::with_capacity(parsed.rows.len());
    for (line, rec) in &parsed.rows {
        let line = *line;
        let cell_id: usize = parse_field(line, "cell_id", &rec[0])?;
        let fold_id = if rec[1].is_empty() { None } else { Some(parse_field::<usize>(line, "fold_id", &rec[1])?) };
        let surrogate = (0..dim).map(|j| parse_field(line, &format!("s_{}", j + 1), &rec[2 + j])).collect::<Result<Vec<f64>, _>>()?;
        let outcome = parse_field(line, "y", &rec[2 + dim])?;
        records.push(UnitRecord { cell_id, fold_id, surrogate, outcome });
    }
    let num_cells = records.iter().map(|r| r.cell_id).max().unwrap_or(0);
    Dataset::new(records, num_cells, dim)
}

pub fn read_units(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_units_from(io::BufReader::new(file))
}
