//! Synthetic multi-scale changepoint series, scale-split protocols, target
//! construction, dataset archives, and generic CSV ingestion.
//!
//! A generated series is Brownian drift plus white noise; each change event
//! ramps the mean of its affected dimensions linearly from 0 to a signed
//! magnitude over its duration (a step function at duration 0) and holds it
//! afterwards. Events are placed uniformly at random with a minimum gap of
//! the maximum duration between them, so they never overlap.

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, splitmix64};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChangeEvent {
    pub onset: usize,
    /// Steps over which the mean ramps; 0 is an abrupt change.
    pub duration: usize,
    /// Affected variable indices, sorted, non-empty.
    pub dims: Vec<usize>,
    /// Signed mean shift per entry of `dims`.
    pub magnitude: Vec<f64>,
}

impl ChangeEvent {
    pub fn validate(&self, t: usize, channels: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Data("event affects no dimensions".into()));
        }
        if self.onset + self.duration >= t {
            return Err(Error::Data(format!(
                "event at {} with duration {} exceeds series length {t}",
                self.onset, self.duration
            )));
        }
        if self.dims.iter().any(|&d| d >= channels) {
            return Err(Error::Data("event dimension out of range".into()));
        }
        if self.dims.len() != self.magnitude.len() {
            return Err(Error::Data("event dims and magnitudes differ in length".into()));
        }
        Ok(())
    }

    /// Midpoint of the transition in input time.
    pub fn anchor(&self) -> usize {
        self.onset + self.duration / 2
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSeries {
    /// `[T x c]`.
    pub data: Tensor,
    /// Sorted by onset, non-overlapping.
    pub events: Vec<ChangeEvent>,
    /// Per-step activity labels when the source provides them.
    pub activities: Option<Vec<i64>>,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn truth_times(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.anchor()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Mixed,
    AbruptTrainGradualTest,
    GradualTrainAbruptTest,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    /// Total series count; half train, half test.
    pub n_series: usize,
    /// Steps per series (T).
    pub series_len: usize,
    pub channels: usize,
    pub n_events: usize,
    /// Inclusive duration bounds; the upper bound is also the minimum gap
    /// between events.
    pub duration_range: (usize, usize),
    /// Unsigned magnitude bounds; signs are drawn at random.
    pub magnitude_range: (f64, f64),
    pub noise_scale: f64,
    pub brownian_scale: f64,
    /// Dimensions shifted per event.
    pub n_change_dims: usize,
    pub split: SplitKind,
    /// Durations strictly below go to the abrupt side of a scale split.
    pub duration_threshold: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Desk-scale defaults: minutes of training rather than hours.
    pub fn desk() -> Self {
        DatasetSpec {
            n_series: 400,
            series_len: 1024,
            channels: 4,
            n_events: 2,
            duration_range: (0, 256),
            magnitude_range: (1.0, 3.0),
            noise_scale: 1.0,
            brownian_scale: 0.1,
            n_change_dims: 2,
            split: SplitKind::Mixed,
            duration_threshold: 64,
            seed: 0,
        }
    }

    /// Dimensions of the full synthetic corpus.
    pub fn full() -> Self {
        DatasetSpec {
            n_series: 2000,
            series_len: 8192,
            channels: 12,
            n_events: 4,
            duration_range: (0, 512),
            magnitude_range: (1.0, 3.0),
            noise_scale: 1.0,
            brownian_scale: 0.1,
            n_change_dims: 4,
            split: SplitKind::Mixed,
            duration_threshold: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dlo, dhi) = self.duration_range;
        if self.channels < 1 || self.series_len < 2 {
            return Err(Error::Config("series need at least 2 steps and 1 channel".into()));
        }
        if dlo > dhi {
            return Err(Error::Config("duration range is inverted".into()));
        }
        if self.magnitude_range.0 > self.magnitude_range.1 || self.magnitude_range.0 < 0.0 {
            return Err(Error::Config("magnitude range must be 0 <= lo <= hi".into()));
        }
        if self.n_change_dims < 1 || self.n_change_dims > self.channels {
            return Err(Error::Config(format!(
                "n_change_dims must be in 1..={}",
                self.channels
            )));
        }
        if self.noise_scale < 0.0 || self.brownian_scale < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.n_events > 0 && self.series_len < self.n_events * (dhi + self.min_gap()) {
            return Err(Error::Config(format!(
                "series length {} cannot host {} events of duration up to {dhi} with gap {}",
                self.series_len,
                self.n_events,
                self.min_gap()
            )));
        }
        if self.split != SplitKind::Mixed
            && !(dlo < self.duration_threshold && self.duration_threshold <= dhi)
        {
            return Err(Error::Config(format!(
                "scale-split threshold {} must lie inside the duration range ({dlo}, {dhi}]",
                self.duration_threshold
            )));
        }
        Ok(())
    }

    /// Minimum spacing between the end of one event and the next onset.
    pub fn min_gap(&self) -> usize {
        self.duration_range.1.max(1)
    }
}

const PLACEMENT_RETRIES: usize = 1000;

/// Generate one labeled series from its own seed.
pub fn gen_series(spec: &DatasetSpec, seed: u64) -> Result<LabeledSeries> {
    spec.validate()?;
    let (t, c) = (spec.series_len, spec.channels);
    let mut rng = rng_from_seed(seed);

    // Event shapes first, then placement, then the signal draws; zeroing a
    // scale never changes what the other draws produce.
    let (dlo, dhi) = spec.duration_range;
    let mut events = Vec::with_capacity(spec.n_events);
    for _ in 0..spec.n_events {
        let duration = rng.random_range(dlo..=dhi);
        let mut dims: Vec<usize> = (0..c).collect();
        dims.shuffle(&mut rng);
        let mut dims: Vec<usize> = dims.into_iter().take(spec.n_change_dims).collect();
        dims.sort_unstable();
        let magnitude = dims
            .iter()
            .map(|_| {
                let m = rng.random_range(spec.magnitude_range.0..=spec.magnitude_range.1);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        events.push(ChangeEvent { onset: 0, duration, dims, magnitude });
    }

    if !events.is_empty() {
        let gap = spec.min_gap();
        let mut placed = false;
        'retry: for _ in 0..PLACEMENT_RETRIES {
            let mut onsets: Vec<usize> =
                (0..events.len()).map(|_| rng.random_range(1..t)).collect();
            onsets.sort_unstable();
            for (i, e) in events.iter().enumerate() {
                if onsets[i] + e.duration >= t {
                    continue 'retry;
                }
                if i + 1 < onsets.len() && onsets[i] + e.duration + gap > onsets[i + 1] {
                    continue 'retry;
                }
            }
            for (e, onset) in events.iter_mut().zip(onsets) {
                e.onset = onset;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {} events in {t} steps after {PLACEMENT_RETRIES} retries",
                events.len()
            )));
        }
    }

    let mut data = vec![0.0; t * c];
    for ch in 0..c {
        let mut level = 0.0;
        for ti in 0..t {
            let b: f64 = rng.sample(StandardNormal);
            level += b * spec.brownian_scale;
            let n: f64 = rng.sample(StandardNormal);
            data[ti * c + ch] = level + n * spec.noise_scale;
        }
    }
    for e in &events {
        for (d_idx, &ch) in e.dims.iter().enumerate() {
            let m = e.magnitude[d_idx];
            for ti in e.onset..t {
                let ramp = if e.duration == 0 || ti >= e.onset + e.duration {
                    m
                } else {
                    m * (ti - e.onset) as f64 / e.duration as f64
                };
                data[ti * c + ch] += ramp;
            }
        }
    }

    for e in &events {
        e.validate(t, c)?;
    }
    Ok(LabeledSeries {
        data: Tensor::new(vec![t, c], data)?,
        events,
        activities: None,
    })
}

/// 0/1 target vector of length `t_out`: each event marks the output step
/// containing its transition midpoint, smeared to `smear` neighbors on each
/// side.
pub fn make_targets(
    series: &LabeledSeries,
    t_out: usize,
    t: usize,
    smear: usize,
) -> Result<Vec<f64>> {
    if t_out == 0 || t == 0 {
        return Err(Error::Argument("targets need positive lengths".into()));
    }
    let mut targets = vec![0.0; t_out];
    for e in &series.events {
        let anchor = (2 * e.onset + e.duration) * t_out / (2 * t);
        if anchor >= t_out {
            return Err(Error::Data(format!(
                "event anchored at {} maps to output index {anchor} >= {t_out}",
                e.anchor()
            )));
        }
        let lo = anchor.saturating_sub(smear);
        let hi = (anchor + smear).min(t_out - 1);
        for v in &mut targets[lo..=hi] {
            *v = 1.0;
        }
    }
    Ok(targets)
}

/// Generate the train/test corpus. Mixed splits halve the series at random;
/// scale splits draw every training duration strictly on one side of the
/// threshold and every test duration on the other.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Vec<LabeledSeries>, Vec<LabeledSeries>)> {
    spec.validate()?;
    let n = spec.n_series;
    let n_train = n / 2;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng_from_seed(splitmix64(spec.seed, 0x51DE));
    indices.shuffle(&mut shuffle_rng);

    let (dlo, dhi) = spec.duration_range;
    let thr = spec.duration_threshold;
    let (train_range, test_range) = match spec.split {
        SplitKind::Mixed => ((dlo, dhi), (dlo, dhi)),
        SplitKind::AbruptTrainGradualTest => ((dlo, thr - 1), (thr, dhi)),
        SplitKind::GradualTrainAbruptTest => ((thr, dhi), (dlo, thr - 1)),
    };

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (pos, &idx) in indices.iter().enumerate() {
        let is_train = pos < n_train;
        let mut side_spec = spec.clone();
        side_spec.duration_range = if is_train { train_range } else { test_range };
        let series = gen_series(&side_spec, splitmix64(spec.seed, idx as u64))?;
        if is_train {
            train.push(series);
        } else {
            test.push(series);
        }
    }
    Ok((train, test))
}

// ── CSV ingestion ────────────────────────────────────────────────────

/// Parse a rectangular numeric CSV into a series. An optional integer label
/// column yields activity labels; every label transition becomes an abrupt
/// change event covering all variables.
pub fn load_csv(path: &Path, label_column: Option<usize>) -> Result<LabeledSeries> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, label_column)
}

pub fn parse_csv(text: &str, label_column: Option<usize>) -> Result<LabeledSeries> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let (_, first) = *lines.peek().ok_or_else(|| Error::Parse {
        row: 1,
        col: 1,
        msg: "empty CSV".into(),
    })?;
    // A header is any first row with a non-numeric cell.
    let has_header = first.split(',').any(|cell| cell.trim().parse::<f64>().is_err());
    if has_header {
        lines.next();
    }

    let mut width = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (line_idx, line) in lines {
        let row_no = line_idx + 1; // 1-based, counting the header
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    row: row_no,
                    col: cells.len().min(w) + 1,
                    msg: format!("ragged row: expected {w} cells, got {}", cells.len()),
                });
            }
            _ => {}
        }
        if let Some(lc) = label_column {
            if lc >= cells.len() {
                return Err(Error::Parse {
                    row: row_no,
                    col: lc + 1,
                    msg: format!("label column {lc} out of bounds"),
                });
            }
        }
        let mut row = Vec::with_capacity(cells.len());
        for (ci, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if Some(ci) == label_column {
                let label: i64 = cell.parse().map_err(|_| Error::Parse {
                    row: row_no,
                    col: ci + 1,
                    msg: format!("label {cell:?} is not an integer"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: row_no,
                    col: ci + 1,
                    msg: format!("cell {cell:?} is not numeric"),
                })?;
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { row: 1, col: 1, msg: "CSV has no data rows".into() });
    }
    let t = rows.len();
    let c = rows[0].len();
    if c == 0 {
        return Err(Error::Parse { row: 1, col: 1, msg: "CSV has no feature columns".into() });
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();

    let mut events = Vec::new();
    let activities = if label_column.is_some() {
        for i in 1..labels.len() {
            if labels[i] != labels[i - 1] {
                events.push(ChangeEvent {
                    onset: i,
                    duration: 0,
                    dims: (0..c).collect(),
                    magnitude: vec![0.0; c],
                });
            }
        }
        Some(labels)
    } else {
        None
    };

    Ok(LabeledSeries { data: Tensor::new(vec![t, c], data)?, events, activities })
}

// ── Dataset archives ─────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArchiveManifest {
    pub spec: DatasetSpec,
    pub n_train: usize,
    pub n_test: usize,
}

pub fn write_series_csv(series: &LabeledSeries) -> String {
    let (t, c) = (series.len(), series.channels());
    let mut out = String::new();
    for ch in 0..c {
        if ch > 0 {
            out.push(',');
        }
        let _ = write!(out, "x{ch}");
    }
    if series.activities.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for ti in 0..t {
        for ch in 0..c {
            if ch > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", series.data.data()[ti * c + ch]);
        }
        if let Some(acts) = &series.activities {
            let _ = write!(out, ",{}", acts[ti]);
        }
        out.push('\n');
    }
    out
}

/// Write `train/` and `test/` series plus a manifest under `dir`.
pub fn save_archive(
    dir: &Path,
    spec: &DatasetSpec,
    train: &[LabeledSeries],
    test: &[LabeledSeries],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = ArchiveManifest {
        spec: spec.clone(),
        n_train: train.len(),
        n_test: test.len(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), manifest_json + "\n")?;
    for (name, side) in [("train", train), ("test", test)] {
        let side_dir = dir.join(name);
        std::fs::create_dir_all(&side_dir)?;
        for (i, series) in side.iter().enumerate() {
            std::fs::write(side_dir.join(format!("series-{i:04}.csv")), write_series_csv(series))?;
            let events_json = serde_json::to_string_pretty(&series.events)
                .map_err(|e| Error::Data(format!("event serialization: {e}")))?;
            std::fs::write(side_dir.join(format!("events-{i:04}.json")), events_json + "\n")?;
        }
    }
    Ok(())
}

pub fn load_archive(dir: &Path) -> Result<(ArchiveManifest, Vec<LabeledSeries>, Vec<LabeledSeries>)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Data(format!("no manifest.json under {}", dir.display())));
    }
    let manifest: ArchiveManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
    let mut sides = Vec::new();
    for (name, count) in [("train", manifest.n_train), ("test", manifest.n_test)] {
        let side_dir = dir.join(name);
        let mut series_list = Vec::with_capacity(count);
        for i in 0..count {
            let csv_path = side_dir.join(format!("series-{i:04}.csv"));
            let mut series = load_csv(&csv_path, None)?;
            let events_path = side_dir.join(format!("events-{i:04}.json"));
            let events: Vec<ChangeEvent> =
                serde_json::from_str(&std::fs::read_to_string(&events_path)?)
                    .map_err(|e| Error::Data(format!("bad events file: {e}")))?;
            for e in &events {
                e.validate(series.len(), series.channels())?;
            }
            series.events = events;
            series_list.push(series);
        }
        sides.push(series_list);
    }
    let test = sides.pop().unwrap();
    let train = sides.pop().unwrap();
    Ok((manifest, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> DatasetSpec {
        DatasetSpec {
            noise_scale: 0.0,
            brownian_scale: 0.0,
            ..DatasetSpec::desk()
        }
    }

    #[test]
    fn abrupt_event_is_a_unit_step() {
        let mut spec = quiet_spec();
        spec.n_events = 1;
        spec.duration_range = (0, 0);
        spec.magnitude_range = (1.0, 1.0);
        spec.n_change_dims = 1;
        spec.series_len = 64;
        spec.channels = 2;
        let s = gen_series(&spec, 3).unwrap();
        let e = &s.events[0];
        assert_eq!(e.duration, 0);
        let ch = e.dims[0];
        let sign = e.magnitude[0];
        for ti in 0..64 {
            let v = s.data.data()[ti * 2 + ch];
            let expect = if ti >= e.onset { sign } else { 0.0 };
            assert_eq!(v, expect, "step {ti}");
        }
        // The untouched channel stays exactly zero.
        let other = 1 - ch;
        assert!(s.data.data().iter().skip(other).step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_midpoint_is_half_the_magnitude() {
        let mut spec = quiet_spec();
        spec.n_events = 1;
        spec.duration_range = (4, 4);
        spec.magnitude_range = (2.0, 2.0);
        spec.n_change_dims = 1;
        spec.series_len = 64;
        let s = gen_series(&spec, 11).unwrap();
        let e = &s.events[0];
        let ch = e.dims[0];
        let mid = s.data.data()[(e.onset + 2) * spec.channels + ch];
        assert!((mid.abs() - 1.0).abs() < 1e-15, "midpoint {mid}");
    }

    #[test]
    fn quiet_series_equals_analytic_ramp_exactly() {
        let mut spec = quiet_spec();
        spec.series_len = 512;
        let s = gen_series(&spec, 29).unwrap();
        // Independent piecewise-linear evaluation.
        let (t, c) = (spec.series_len, spec.channels);
        for ti in 0..t {
            for ch in 0..c {
                let mut expect = 0.0;
                for e in &s.events {
                    if let Some(pos) = e.dims.iter().position(|&d| d == ch) {
                        let m = e.magnitude[pos];
                        expect += if ti < e.onset {
                            0.0
                        } else if e.duration == 0 || ti >= e.onset + e.duration {
                            m
                        } else {
                            m * (ti - e.onset) as f64 / e.duration as f64
                        };
                    }
                }
                assert_eq!(s.data.data()[ti * c + ch], expect);
            }
        }
    }

    #[test]
    fn full_scale_spec_matches_published_dimensions() {
        let spec = DatasetSpec::full();
        assert_eq!(spec.n_series, 2000);
        assert_eq!(spec.series_len, 8192);
        assert_eq!(spec.channels, 12);
        assert_eq!(spec.n_events, 4);
        assert_eq!(spec.n_series / 2, 1000);
        spec.validate().unwrap();
    }

    #[test]
    fn events_respect_gap_over_many_seeds() {
        let mut spec = quiet_spec();
        spec.series_len = 128;
        spec.n_events = 2;
        spec.duration_range = (0, 16);
        spec.channels = 2;
        spec.n_change_dims = 1;
        for seed in 0..1000 {
            let s = gen_series(&spec, seed).unwrap();
            assert_eq!(s.events.len(), 2);
            let gap = spec.min_gap();
            for w in s.events.windows(2) {
                assert!(
                    w[0].onset + w[0].duration + gap <= w[1].onset,
                    "seed {seed}: events {w:?} violate the gap"
                );
            }
            for e in &s.events {
                assert!(e.onset + e.duration < spec.series_len);
            }
        }
    }

    #[test]
    fn target_anchor_examples() {
        let mk = |onset, duration, t| LabeledSeries {
            data: Tensor::zeros(vec![t, 1]),
            events: vec![ChangeEvent {
                onset,
                duration,
                dims: vec![0],
                magnitude: vec![1.0],
            }],
            activities: None,
        };
        // Abrupt event at 512 of 8192 steps, 512 outputs, no smear.
        let targets = make_targets(&mk(512, 0, 8192), 512, 8192, 0).unwrap();
        assert_eq!(targets.iter().position(|&v| v == 1.0), Some(32));
        assert_eq!(targets.iter().filter(|&&v| v == 1.0).count(), 1);

        // Duration-128 event at onset 0: midpoint 64 -> index 4 at 1/16.
        let targets = make_targets(&mk(0, 128, 8192), 512, 8192, 0).unwrap();
        assert_eq!(targets.iter().position(|&v| v == 1.0), Some(4));

        // No events: all zero.
        let empty = LabeledSeries {
            data: Tensor::zeros(vec![64, 1]),
            events: vec![],
            activities: None,
        };
        assert!(make_targets(&empty, 4, 64, 1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_events_mark_smear_width_ones() {
        let mut spec = quiet_spec();
        spec.series_len = 1024;
        let s = gen_series(&spec, 17).unwrap();
        let targets = make_targets(&s, 64, 1024, 1).unwrap();
        let ones = targets.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, spec.n_events * 3);
    }

    #[test]
    fn mixed_split_is_reproducible_and_halved() {
        let mut spec = quiet_spec();
        spec.n_series = 10;
        spec.series_len = 1024;
        let (train_a, test_a) = gen_dataset(&spec).unwrap();
        let (train_b, test_b) = gen_dataset(&spec).unwrap();
        assert_eq!(train_a.len(), 5);
        assert_eq!(test_a.len(), 5);
        for (a, b) in train_a.iter().zip(&train_b).chain(test_a.iter().zip(&test_b)) {
            assert_eq!(a.data.data(), b.data.data());
            assert_eq!(a.events, b.events);
        }
    }

    #[test]
    fn scale_split_separates_durations_strictly() {
        let mut spec = quiet_spec();
        spec.n_series = 12;
        spec.series_len = 1024;
        spec.duration_range = (0, 256);
        spec.duration_threshold = 64;
        spec.split = SplitKind::AbruptTrainGradualTest;
        let (train, test) = gen_dataset(&spec).unwrap();
        let max_train = train
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.duration))
            .max()
            .unwrap();
        let min_test = test
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.duration))
            .min()
            .unwrap();
        assert!(max_train < 64, "train duration {max_train}");
        assert!(min_test >= 64, "test duration {min_test}");

        spec.split = SplitKind::GradualTrainAbruptTest;
        let (train, test) = gen_dataset(&spec).unwrap();
        let min_train = train
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.duration))
            .min()
            .unwrap();
        let max_test = test
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.duration))
            .max()
            .unwrap();
        assert!(min_train >= 64);
        assert!(max_test < 64);
    }

    #[test]
    fn csv_label_transitions_become_events() {
        let s = parse_csv("1.0,7\n2.0,7\n3.0,8\n", Some(1)).unwrap();
        assert_eq!(s.channels(), 1);
        assert_eq!(s.events.len(), 1);
        assert_eq!(s.events[0].onset, 2);
        assert_eq!(s.activities.as_deref(), Some(&[7, 7, 8][..]));

        let s = parse_csv("0.1,0\n0.2,0\n0.3,1\n0.4,1\n0.5,0\n", Some(1)).unwrap();
        let onsets: Vec<usize> = s.events.iter().map(|e| e.onset).collect();
        assert_eq!(onsets, vec![2, 4]);
    }

    #[test]
    fn csv_without_labels_has_no_events() {
        let s = parse_csv("x0,x1\n1.0,2.0\n3.0,4.0\n", None).unwrap();
        assert!(s.events.is_empty());
        assert!(s.activities.is_none());
        assert_eq!(s.data.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_errors_carry_row_and_column() {
        match parse_csv("1.0,2.0\n3.0\n", None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected ragged-row error, got {other:?}"),
        }
        match parse_csv("1.0,2.0\n3.0,oops\n", None) {
            Err(Error::Parse { row, col, .. }) => {
                assert_eq!((row, col), (2, 2));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_csv("", None), Err(Error::Parse { .. })));
    }

    #[test]
    fn archive_roundtrip_preserves_series_and_events() {
        let mut spec = quiet_spec();
        spec.n_series = 4;
        spec.series_len = 1024;
        spec.noise_scale = 1.0; // real-looking values through the CSV path
        let (train, test) = gen_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_archive(dir.path(), &spec, &train, &test).unwrap();
        let (manifest, train_b, test_b) = load_archive(dir.path()).unwrap();
        assert_eq!(manifest.spec, spec);
        for (a, b) in train.iter().zip(&train_b).chain(test.iter().zip(&test_b)) {
            assert_eq!(a.events, b.events);
            assert_eq!(a.data.shape(), b.data.shape());
            for (x, y) in a.data.data().iter().zip(b.data.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "CSV float round-trip");
            }
        }
    }
}
