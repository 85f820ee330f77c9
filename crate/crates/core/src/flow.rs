//! Origin-destination flow series: ingestion, normalization, export,
//! and exploratory statistics.
//!
//! A [`FlowSeries`] is a time-ordered stack of square matrices; entry
//! `(u, v)` of step `t` is the flow from source city `u` to target city
//! `v`. Self-flows on the diagonal are data, not artifacts, and are kept
//! throughout.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{CitySet, DistanceMatrix};
use crate::metrics::pearson;
use crate::tensor::Tensor;

/// One raw observation: at `step`, `value` units flowed `source -> target`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub step: String,
    pub source: usize,
    pub target: usize,
    pub value: f64,
}

/// How aggregated counts are mapped into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    /// Divide every entry by the single maximum over the whole series.
    /// Preserves cross-step comparability.
    GlobalMax,
    /// Divide each step by its own maximum.
    PerStep,
    /// Leave the aggregated values untouched.
    None,
}

/// Time-indexed stack of square flow matrices in a fixed city order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSeries {
    labels: Vec<String>,
    matrices: Vec<Tensor>,
    /// Multiplier that recovers raw units (1.0 for unnormalized series).
    scale: f64,
}

/// Sort key for `YYYY-MM` labels.
fn parse_step_label(label: &str) -> Result<(i32, u32)> {
    let bad = || Error::BadStepLabel {
        label: label.to_string(),
    };
    let (y, m) = label.split_once('-').ok_or_else(bad)?;
    if y.len() != 4 {
        return Err(bad());
    }
    let year: i32 = y.parse().map_err(|_| bad())?;
    let month: u32 = m.parse().map_err(|_| bad())?;
    if !(1..=12).contains(&month) {
        return Err(bad());
    }
    Ok((year, month))
}

impl FlowSeries {
    /// Builds a series from pre-assembled matrices (no normalization).
    pub fn from_matrices(labels: Vec<String>, matrices: Vec<Tensor>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::EmptyInput { what: "flow series" });
        }
        let n = matrices[0].rows();
        for m in &matrices {
            if m.shape() != (n, n) {
                return Err(Error::ShapeMismatch {
                    op: "flow_series",
                    lhs: (n, n),
                    rhs: m.shape(),
                });
            }
            if m.data().iter().any(|&v| v < 0.0) {
                return Err(Error::NonFinite { op: "flow_series" });
            }
        }
        assert_eq!(labels.len(), matrices.len());
        Ok(FlowSeries {
            labels,
            matrices,
            scale: 1.0,
        })
    }

    /// Aggregates raw records into per-step matrices and normalizes by
    /// the global maximum. Missing pairs are zero.
    pub fn ingest(records: &[FlowRecord], cities: &CitySet) -> Result<Self> {
        Self::ingest_with_mode(records, cities, NormalizeMode::GlobalMax)
    }

    pub fn ingest_with_mode(
        records: &[FlowRecord],
        cities: &CitySet,
        mode: NormalizeMode,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput { what: "flow records" });
        }
        let n = cities.len();
        let mut keys: Vec<((i32, u32), String)> = Vec::new();
        for r in records {
            if r.source >= n {
                return Err(Error::UnknownCity { id: r.source });
            }
            if r.target >= n {
                return Err(Error::UnknownCity { id: r.target });
            }
            if r.value < 0.0 || !r.value.is_finite() {
                return Err(Error::NonFinite { op: "ingest" });
            }
            let key = parse_step_label(&r.step)?;
            if !keys.iter().any(|(k, _)| *k == key) {
                keys.push((key, r.step.clone()));
            }
        }
        keys.sort_by_key(|(k, _)| *k);
        let mut matrices = vec![Tensor::zeros(n, n); keys.len()];
        for r in records {
            let key = parse_step_label(&r.step)?;
            let t = keys.iter().position(|(k, _)| *k == key).unwrap();
            let cur = matrices[t].get(r.source, r.target);
            matrices[t].set(r.source, r.target, cur + r.value);
        }
        let mut series = FlowSeries {
            labels: keys.into_iter().map(|(_, l)| l).collect(),
            matrices,
            scale: 1.0,
        };
        series.normalize(mode);
        Ok(series)
    }

    /// Applies the requested normalization in place.
    pub fn normalize(&mut self, mode: NormalizeMode) {
        match mode {
            NormalizeMode::None => {}
            NormalizeMode::GlobalMax => {
                let max = self
                    .matrices
                    .iter()
                    .flat_map(|m| m.data().iter().copied())
                    .fold(0.0_f64, f64::max);
                if max > 0.0 {
                    // true division: max/max == 1.0, so re-normalizing a
                    // normalized series is exactly the identity
                    for m in &mut self.matrices {
                        *m = m.map(|v| v / max);
                    }
                    self.scale *= max;
                }
            }
            NormalizeMode::PerStep => {
                for m in &mut self.matrices {
                    let max = m.data().iter().copied().fold(0.0_f64, f64::max);
                    if max > 0.0 {
                        *m = m.map(|v| v / max);
                    }
                }
                self.scale = 1.0;
            }
        }
    }

    pub fn steps(&self) -> usize {
        self.matrices.len()
    }

    pub fn num_cities(&self) -> usize {
        self.matrices[0].rows()
    }

    pub fn matrix(&self, t: usize) -> &Tensor {
        &self.matrices[t]
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn label(&self, t: usize) -> &str {
        &self.labels[t]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Multiplier that converts stored values back to raw units.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Sub-series over steps `from..to`.
    pub fn slice_steps(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.steps() {
            return Err(Error::InsufficientHistory {
                needed: to,
                got: self.steps(),
            });
        }
        Ok(FlowSeries {
            labels: self.labels[from..to].to_vec(),
            matrices: self.matrices[from..to].to_vec(),
            scale: self.scale,
        })
    }

    /// Column sum of step `t` for each city (inflow, diagonal included).
    pub fn inflow_totals(&self, t: usize) -> Vec<f64> {
        let m = &self.matrices[t];
        let n = m.rows();
        let mut out = vec![0.0; n];
        for u in 0..n {
            for (v, slot) in out.iter_mut().enumerate() {
                *slot += m.get(u, v);
            }
        }
        out
    }

    /// Row sum of step `t` for each city (outflow, diagonal included).
    pub fn outflow_totals(&self, t: usize) -> Vec<f64> {
        let m = &self.matrices[t];
        (0..m.rows()).map(|u| m.row(u).iter().sum()).collect()
    }

    /// Writes the `step,source_id,target_id,value` schema (all pairs).
    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,source_id,target_id,value")?;
        for (t, m) in self.matrices.iter().enumerate() {
            for u in 0..m.rows() {
                for v in 0..m.cols() {
                    writeln!(w, "{},{},{},{:?}", self.labels[t], u, v, m.get(u, v))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.to_csv(&mut f)
    }
}

/// Reads `step,source_id,target_id,value` records.
pub fn records_from_csv_reader<R: Read>(reader: R, path: &str) -> Result<Vec<FlowRecord>> {
    let mut records = Vec::new();
    let mut lines = BufReader::new(reader).lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let header = line?;
            if header.trim() != "step,source_id,target_id,value" {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: 1,
                    reason: format!(
                        "expected header `step,source_id,target_id,value`, got `{header}`"
                    ),
                });
            }
        }
        None => return Err(Error::EmptyInput { what: "flows csv" }),
    }
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                reason: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let id = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                reason: format!("bad {what} `{s}`"),
            })
        };
        let value: f64 = parts[3].trim().parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: idx + 1,
            reason: format!("bad value `{}`", parts[3]),
        })?;
        records.push(FlowRecord {
            step: parts[0].trim().to_string(),
            source: id(parts[1], "source id")?,
            target: id(parts[2], "target id")?,
            value,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput { what: "flows csv" });
    }
    Ok(records)
}

pub fn records_from_csv_path(path: &Path) -> Result<Vec<FlowRecord>> {
    let file = std::fs::File::open(path)?;
    records_from_csv_reader(file, &path.display().to_string())
}

/// Writes a square matrix in the prediction schema
/// `source_id,target_id,value` (all pairs).
pub fn matrix_to_pairs_csv<W: Write>(mut w: W, m: &Tensor) -> Result<()> {
    writeln!(w, "source_id,target_id,value")?;
    for u in 0..m.rows() {
        for v in 0..m.cols() {
            writeln!(w, "{},{},{:?}", u, v, m.get(u, v))?;
        }
    }
    Ok(())
}

/// Reads the prediction schema back into a square matrix; the order is
/// one past the largest id seen, and missing pairs are zero.
pub fn matrix_from_pairs_csv<R: Read>(reader: R, path: &str) -> Result<Tensor> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let header = line?;
            if header.trim() != "source_id,target_id,value" {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: 1,
                    reason: format!("expected header `source_id,target_id,value`, got `{header}`"),
                });
            }
        }
        None => return Err(Error::EmptyInput { what: "matrix csv" }),
    }
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut order = 0;
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                reason: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let bad = |what: &str, s: &str| Error::Parse {
            path: path.to_string(),
            line: idx + 1,
            reason: format!("bad {what} `{s}`"),
        };
        let u: usize = parts[0].trim().parse().map_err(|_| bad("source id", parts[0]))?;
        let v: usize = parts[1].trim().parse().map_err(|_| bad("target id", parts[1]))?;
        let value: f64 = parts[2].trim().parse().map_err(|_| bad("value", parts[2]))?;
        order = order.max(u + 1).max(v + 1);
        entries.push((u, v, value));
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput { what: "matrix csv" });
    }
    let mut m = Tensor::zeros(order, order);
    for (u, v, value) in entries {
        m.set(u, v, value);
    }
    m.check_finite("matrix_from_pairs_csv")?;
    Ok(m)
}

/// Summary statistics over a flow series.
#[derive(Clone, Debug)]
pub struct ExplorationStats {
    /// Pearson correlation between pair distance and mean flow (u != v).
    pub intention_distance_corr: f64,
    /// Pearson correlation between per-city total inflow and outflow.
    pub inflow_outflow_corr: f64,
    /// Per-city `(inflow, outflow)` totals summed over all steps.
    pub per_city_totals: Vec<(f64, f64)>,
}

/// Correlation statistics used to sanity-check a dataset: flows should
/// shrink with distance, and busy cities should be busy in both
/// directions.
pub fn exploration_stats(
    series: &FlowSeries,
    distances: &DistanceMatrix,
) -> Result<ExplorationStats> {
    let n = series.num_cities();
    let steps = series.steps() as f64;

    let mut ds = Vec::new();
    let mut flows = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let mean = series
                .matrices
                .iter()
                .map(|m| m.get(u, v))
                .sum::<f64>()
                / steps;
            ds.push(distances.get(u, v));
            flows.push(mean);
        }
    }
    let intention_distance_corr = pearson(&ds, &flows, "distance/flow")?;

    let mut inflows = vec![0.0; n];
    let mut outflows = vec![0.0; n];
    for t in 0..series.steps() {
        for (c, v) in series.inflow_totals(t).into_iter().enumerate() {
            inflows[c] += v;
        }
        for (c, v) in series.outflow_totals(t).into_iter().enumerate() {
            outflows[c] += v;
        }
    }
    let inflow_outflow_corr = pearson(&inflows, &outflows, "inflow/outflow")?;

    Ok(ExplorationStats {
        intention_distance_corr,
        inflow_outflow_corr,
        per_city_totals: inflows.into_iter().zip(outflows).collect(),
    })
}
