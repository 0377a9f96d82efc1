//! Case-count ingestion, chronological splitting, min-max scaling, and
//! sliding-window sample construction.
//!
//! Feature layout is `N x T x C` with channels `(active, recovered,
//! susceptible)` in person counts. Scalers are fit on the training span
//! only; raw counts cross into normalized space exactly once, at the network
//! boundary.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PatchMeta;

/// Channel indices of the feature array.
pub const CH_ACTIVE: usize = 0;
pub const CH_RECOVERED: usize = 1;
pub const CH_SUSCEPTIBLE: usize = 2;
pub const N_CHANNELS: usize = 3;

/// A dense daily panel of per-patch case counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicDataset {
    pub patches: Vec<PatchMeta>,
    /// Contiguous ascending day grid.
    pub dates: Vec<NaiveDate>,
    /// `N x T x 3` person counts, channels (active, recovered, susceptible).
    pub features: Array3<f64>,
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    date: NaiveDate,
    patch_id: String,
    active: f64,
    recovered: f64,
    susceptible: f64,
}

/// Read patch metadata from a CSV with header
/// `patch_id,name,population,latitude,longitude`.
pub fn read_meta_csv(path: &Path) -> Result<Vec<PatchMeta>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut patches = Vec::new();
    for row in reader.deserialize::<PatchMeta>() {
        patches.push(row?);
    }
    if patches.is_empty() {
        return Err(Error::Input(format!("{}: no patches in meta file", path.display())));
    }
    Ok(patches)
}

/// Ingest a cases CSV (`date,patch_id,active,recovered,susceptible`) and a
/// meta CSV into a dense dataset ordered by the meta file's patch order and
/// ascending date.
///
/// The day grid must be complete: every (patch, date) pair between the
/// earliest and latest date needs exactly one row.
pub fn ingest(cases_path: &Path, meta_path: &Path) -> Result<EpidemicDataset> {
    let patches = read_meta_csv(meta_path)?;
    let mut index_of: HashMap<&str, usize> = HashMap::new();
    for (k, p) in patches.iter().enumerate() {
        if index_of.insert(p.patch_id.as_str(), k).is_some() {
            return Err(Error::Input(format!(
                "duplicate patch_id {:?} in {}",
                p.patch_id,
                meta_path.display()
            )));
        }
        if !(p.population > 0.0) {
            return Err(Error::Input(format!(
                "patch {:?} has non-positive population {}",
                p.patch_id, p.population
            )));
        }
    }

    let mut reader = csv::Reader::from_path(cases_path)?;
    let mut rows: Vec<CaseRow> = Vec::new();
    for row in reader.deserialize::<CaseRow>() {
        let row = row?;
        if !index_of.contains_key(row.patch_id.as_str()) {
            return Err(Error::Input(format!(
                "cases file references unknown patch_id {:?} on {}",
                row.patch_id, row.date
            )));
        }
        for (label, v) in [
            ("active", row.active),
            ("recovered", row.recovered),
            ("susceptible", row.susceptible),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!(
                    "patch {:?} on {}: {label} = {v} is not a valid count",
                    row.patch_id, row.date
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no case rows", cases_path.display())));
    }

    let start = rows.iter().map(|r| r.date).min().unwrap();
    let end = rows.iter().map(|r| r.date).max().unwrap();
    let t_len = (end - start).num_days() as usize + 1;
    let dates: Vec<NaiveDate> = (0..t_len)
        .map(|d| start + chrono::Duration::days(d as i64))
        .collect();

    let n = patches.len();
    let mut features = Array3::from_elem((n, t_len, N_CHANNELS), f64::NAN);
    for row in &rows {
        let k = index_of[row.patch_id.as_str()];
        let t = (row.date - start).num_days() as usize;
        if !features[[k, t, CH_ACTIVE]].is_nan() {
            return Err(Error::Input(format!(
                "duplicate row for patch {:?} on {}",
                row.patch_id, row.date
            )));
        }
        features[[k, t, CH_ACTIVE]] = row.active;
        features[[k, t, CH_RECOVERED]] = row.recovered;
        features[[k, t, CH_SUSCEPTIBLE]] = row.susceptible;
    }
    for (k, p) in patches.iter().enumerate() {
        for (t, date) in dates.iter().enumerate() {
            if features[[k, t, CH_ACTIVE]].is_nan() {
                return Err(Error::Input(format!(
                    "missing row for patch {:?} on {date}",
                    p.patch_id
                )));
            }
        }
    }

    // Soft sanity: compartments should not exceed the census population.
    let mut violations = 0usize;
    let mut first: Option<(String, NaiveDate)> = None;
    for (k, p) in patches.iter().enumerate() {
        for (t, date) in dates.iter().enumerate() {
            let total = features[[k, t, CH_ACTIVE]]
                + features[[k, t, CH_RECOVERED]]
                + features[[k, t, CH_SUSCEPTIBLE]];
            if total > p.population * (1.0 + 1e-9) {
                violations += 1;
                if first.is_none() {
                    first = Some((p.patch_id.clone(), *date));
                }
            }
        }
    }
    if let Some((pid, date)) = first {
        log::warn!(
            "{violations} patch-day(s) have S+I+R above the census population \
             (first: patch {pid:?} on {date})"
        );
    }

    Ok(EpidemicDataset {
        patches,
        dates,
        features,
    })
}

impl EpidemicDataset {
    pub fn n(&self) -> usize {
        self.patches.len()
    }

    pub fn t(&self) -> usize {
        self.dates.len()
    }

    /// Census populations in patch order.
    pub fn populations(&self) -> ndarray::Array1<f64> {
        ndarray::Array1::from_iter(self.patches.iter().map(|p| p.population))
    }

    /// Write the dataset as a single JSON snapshot; `load_snapshot` restores
    /// it bit-exactly (floats round-trip through their shortest decimal
    /// representation).
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<EpidemicDataset> {
        let file = std::fs::File::open(path)?;
        let ds: EpidemicDataset = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ds.features.dim() != (ds.patches.len(), ds.dates.len(), N_CHANNELS) {
            return Err(Error::Input(format!(
                "snapshot feature shape {:?} inconsistent with {} patches x {} dates",
                ds.features.dim(),
                ds.patches.len(),
                ds.dates.len()
            )));
        }
        Ok(ds)
    }

    pub fn summary(&self) -> DatasetSummary {
        let channel = |c: usize| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            let mut count = 0usize;
            for k in 0..self.n() {
                for t in 0..self.t() {
                    let v = self.features[[k, t, c]];
                    min = min.min(v);
                    max = max.max(v);
                    sum += v;
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for k in 0..self.n() {
                for t in 0..self.t() {
                    ss += (self.features[[k, t, c]] - mean).powi(2);
                }
            }
            ChannelStats {
                min,
                max,
                mean,
                std: (ss / count as f64).sqrt(),
            }
        };
        DatasetSummary {
            n_patches: self.n(),
            n_days: self.t(),
            start_date: self.dates[0],
            end_date: *self.dates.last().unwrap(),
            active: channel(CH_ACTIVE),
            recovered: channel(CH_RECOVERED),
            susceptible: channel(CH_SUSCEPTIBLE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_patches: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub active: ChannelStats,
    pub recovered: ChannelStats,
    pub susceptible: ChannelStats,
}

/// Chronological split fractions; must be positive and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Contiguous day-index ranges for train/val/test, train earliest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpans {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Split `t_total` days chronologically at floors of the cumulative ratios
/// and verify every span can hold at least one window.
pub fn chronological_split(
    t_total: usize,
    ratios: &SplitRatios,
    t_in: usize,
    t_out: usize,
) -> Result<SplitSpans> {
    for (label, r) in [("train", ratios.train), ("val", ratios.val), ("test", ratios.test)] {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Config(format!("split ratio {label} = {r} must be positive")));
        }
    }
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
    }
    let b1 = (t_total as f64 * ratios.train).floor() as usize;
    let b2 = (t_total as f64 * (ratios.train + ratios.val)).floor() as usize;
    let spans = SplitSpans {
        train: 0..b1,
        val: b1..b2,
        test: b2..t_total,
    };
    let min_len = t_in + t_out;
    for (label, span) in [("train", &spans.train), ("val", &spans.val), ("test", &spans.test)] {
        if span.len() < min_len {
            return Err(Error::Config(format!(
                "{label} span has {} day(s), below the {min_len} needed for t_in={t_in}, t_out={t_out}",
                span.len()
            )));
        }
    }
    Ok(spans)
}

/// Per-patch, per-channel min-max ranges fit on the training span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    /// `N x 3` minima.
    pub min: Array2<f64>,
    /// `N x 3` maxima.
    pub max: Array2<f64>,
}

impl Scaler {
    /// Fit on `features[:, span, :]` only.
    pub fn fit(dataset: &EpidemicDataset, span: &Range<usize>) -> Result<Scaler> {
        if span.end > dataset.t() || span.is_empty() {
            return Err(Error::Input(format!(
                "scaler span {span:?} invalid for {} days",
                dataset.t()
            )));
        }
        let n = dataset.n();
        let mut min = Array2::from_elem((n, N_CHANNELS), f64::INFINITY);
        let mut max = Array2::from_elem((n, N_CHANNELS), f64::NEG_INFINITY);
        for k in 0..n {
            for t in span.clone() {
                for c in 0..N_CHANNELS {
                    let v = dataset.features[[k, t, c]];
                    min[[k, c]] = min[[k, c]].min(v);
                    max[[k, c]] = max[[k, c]].max(v);
                }
            }
        }
        Ok(Scaler { min, max })
    }

    /// A channel whose training span was constant; it normalizes to 0.
    pub fn is_degenerate(&self, patch: usize, channel: usize) -> bool {
        self.max[[patch, channel]] == self.min[[patch, channel]]
    }

    pub fn normalize_value(&self, patch: usize, channel: usize, x: f64) -> f64 {
        let lo = self.min[[patch, channel]];
        let hi = self.max[[patch, channel]];
        if hi == lo {
            0.0
        } else {
            (x - lo) / (hi - lo)
        }
    }

    pub fn denormalize_value(&self, patch: usize, channel: usize, y: f64) -> f64 {
        let lo = self.min[[patch, channel]];
        let hi = self.max[[patch, channel]];
        if hi == lo {
            lo
        } else {
            y * (hi - lo) + lo
        }
    }

    /// Normalize an `N x 3` raw snapshot (columns in channel order).
    pub fn normalize_snapshot(&self, raw: &Array2<f64>) -> Array2<f64> {
        let (n, c) = raw.dim();
        let mut out = Array2::zeros((n, c));
        for k in 0..n {
            for ch in 0..c {
                out[[k, ch]] = self.normalize_value(k, ch, raw[[k, ch]]);
            }
        }
        out
    }

    /// Normalize per-patch active-case values, `rows x N` (row = day).
    pub fn normalize_active(&self, raw: &Array2<f64>) -> Array2<f64> {
        let (rows, n) = raw.dim();
        let mut out = Array2::zeros((rows, n));
        for t in 0..rows {
            for k in 0..n {
                out[[t, k]] = self.normalize_value(k, CH_ACTIVE, raw[[t, k]]);
            }
        }
        out
    }
}

/// One training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `N x t_in x 3`, normalized.
    pub input: Array3<f64>,
    /// `N x t_out` normalized active cases for the days after the window.
    pub target: Array2<f64>,
    /// `N x 3` raw counts at the final input day, for the physical rollout.
    pub raw_last_day: Array2<f64>,
    /// Date of the final input day.
    pub anchor_date: NaiveDate,
    /// Day index (into the dataset) of the first input day.
    pub start_index: usize,
}

/// Stride-1 windows fully inside `span`; count = `len - t_in - t_out + 1`.
pub fn make_windows(
    dataset: &EpidemicDataset,
    scaler: &Scaler,
    span: &Range<usize>,
    t_in: usize,
    t_out: usize,
) -> Result<Vec<WindowSample>> {
    if t_in == 0 || t_out == 0 {
        return Err(Error::Config(format!(
            "window sizes must be positive, got t_in={t_in}, t_out={t_out}"
        )));
    }
    if span.end > dataset.t() {
        return Err(Error::Input(format!(
            "span {span:?} exceeds {} days",
            dataset.t()
        )));
    }
    if span.len() < t_in + t_out {
        return Err(Error::Config(format!(
            "span of {} day(s) cannot hold a window of t_in={t_in} + t_out={t_out}",
            span.len()
        )));
    }
    let n = dataset.n();
    let count = span.len() - t_in - t_out + 1;
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start = span.start + w;
        let mut input = Array3::zeros((n, t_in, N_CHANNELS));
        let mut target = Array2::zeros((n, t_out));
        let mut raw_last_day = Array2::zeros((n, N_CHANNELS));
        for k in 0..n {
            for (step, t) in (start..start + t_in).enumerate() {
                for c in 0..N_CHANNELS {
                    input[[k, step, c]] =
                        scaler.normalize_value(k, c, dataset.features[[k, t, c]]);
                }
            }
            for (step, t) in (start + t_in..start + t_in + t_out).enumerate() {
                target[[k, step]] =
                    scaler.normalize_value(k, CH_ACTIVE, dataset.features[[k, t, CH_ACTIVE]]);
            }
            for c in 0..N_CHANNELS {
                raw_last_day[[k, c]] = dataset.features[[k, start + t_in - 1, c]];
            }
        }
        windows.push(WindowSample {
            input,
            target,
            raw_last_day,
            anchor_date: dataset.dates[start + t_in - 1],
            start_index: start,
        });
    }
    Ok(windows)
}
