//! Record collections: synthetic generation, CSV + manifest persistence,
//! seeded splits, and train-split normalization.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    generate_ground_motion, simulate_response, GroundMotionConfig, OscillatorParams,
    StateTrajectory,
};
use crate::error::DataError;

/// Split membership of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One excitation time series with optional measured response channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundMotionRecord {
    pub id: String,
    pub dt: f64,
    pub ag: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
    pub a: Option<Vec<f64>>,
    pub g: Option<Vec<f64>>,
    pub split: Split,
}

impl GroundMotionRecord {
    pub fn len(&self) -> usize {
        self.ag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ag.is_empty()
    }

    pub fn from_trajectory(id: impl Into<String>, tr: &StateTrajectory) -> Self {
        GroundMotionRecord {
            id: id.into(),
            dt: tr.dt,
            ag: tr.ag.clone(),
            x: Some(tr.x.clone()),
            v: Some(tr.v.clone()),
            a: Some(tr.a.clone()),
            g: Some(tr.g.clone()),
            split: Split::Test,
        }
    }

    /// True when all of x, v, g are present.
    pub fn has_full_state(&self) -> bool {
        self.x.is_some() && self.v.is_some() && self.g.is_some()
    }

    fn validate(&self, path: &str) -> Result<(), DataError> {
        let n = self.ag.len();
        for (name, col) in [("x", &self.x), ("v", &self.v), ("a", &self.a), ("g", &self.g)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(DataError::Format {
                        path: path.to_string(),
                        what: format!("column {name} has {} rows, ag has {n}", c.len()),
                    });
                }
            }
        }
        if !(self.dt > 0.0) {
            return Err(DataError::Format {
                path: path.to_string(),
                what: format!("dt must be positive, got {}", self.dt),
            });
        }
        Ok(())
    }
}

/// A collection of records plus generation metadata. Record accesses made
/// through [`RecordSet::record`] / [`RecordSet::split_records`] are logged
/// so tests can assert which splits a consumer actually touched.
#[derive(Debug)]
pub struct RecordSet {
    pub records: Vec<GroundMotionRecord>,
    pub dt: f64,
    pub seed: u64,
    pub oscillator: OscillatorParams,
    access_log: Mutex<Vec<String>>,
}

impl RecordSet {
    pub fn new(records: Vec<GroundMotionRecord>, dt: f64, seed: u64, oscillator: OscillatorParams) -> Self {
        RecordSet {
            records,
            dt,
            seed,
            oscillator,
            access_log: Mutex::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fetch one record by index, logging the access.
    pub fn record(&self, idx: usize) -> &GroundMotionRecord {
        let r = &self.records[idx];
        self.access_log.lock().unwrap().push(r.id.clone());
        r
    }

    /// All records of one split, logging the accesses.
    pub fn split_records(&self, split: Split) -> Vec<&GroundMotionRecord> {
        let out: Vec<&GroundMotionRecord> =
            self.records.iter().filter(|r| r.split == split).collect();
        let mut log = self.access_log.lock().unwrap();
        for r in &out {
            log.push(r.id.clone());
        }
        out
    }

    /// Ids accessed so far through the logging accessors.
    pub fn accessed_ids(&self) -> Vec<String> {
        self.access_log.lock().unwrap().clone()
    }

    pub fn clear_access_log(&self) {
        self.access_log.lock().unwrap().clear();
    }

    /// Seeded random selection of `n_train` records for the train split;
    /// the remainder is tagged test.
    pub fn split(&mut self, n_train: usize, seed: u64) -> Result<(), DataError> {
        if n_train >= self.records.len() {
            return Err(DataError::InvalidRequest(format!(
                "n_train = {n_train} must be smaller than the record count {}",
                self.records.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates shuffle.
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        for r in self.records.iter_mut() {
            r.split = Split::Test;
        }
        for &i in idx.iter().take(n_train) {
            self.records[i].split = Split::Train;
        }
        Ok(())
    }
}

/// Generate `n_records` simulated responses to independent seeded ground
/// motions. Record `i` uses the derived seed `seed * 1000 + i` for its
/// motion and an intensity jitter drawn from the collection RNG.
pub fn generate_synthetic_dataset(
    n_records: usize,
    duration: f64,
    dt: f64,
    params: &OscillatorParams,
    intensity: f64,
    seed: u64,
    motion: &GroundMotionConfig,
) -> Result<RecordSet, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_records);
    for i in 0..n_records {
        // Vary the peak amplitude between records so the dataset spans a
        // range of response levels.
        let jitter: f64 = rng.gen_range(0.5..1.5);
        let ag = generate_ground_motion(duration, dt, seed.wrapping_mul(1000).wrapping_add(i as u64), intensity * jitter, motion);
        let tr = simulate_response(&ag, params, dt)
            .map_err(|e| DataError::InvalidRequest(e.to_string()))?;
        let mut rec = GroundMotionRecord::from_trajectory(format!("rec{i:04}"), &tr);
        rec.split = Split::Test;
        records.push(rec);
    }
    Ok(RecordSet::new(records, dt, seed, *params))
}

/// Per-channel affine constants `physical = normalized * scale + offset`,
/// fitted on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub scale: f64,
    pub offset: f64,
}

impl ChannelNorm {
    pub const IDENTITY: ChannelNorm = ChannelNorm {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Input peak scaling plus output standardization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Input scaling: normalized ag = ag / ag_scale.
    pub ag_scale: f64,
    /// Output channels in (x, v, g) order.
    pub x: ChannelNorm,
    pub v: ChannelNorm,
    pub g: ChannelNorm,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            ag_scale: 1.0,
            x: ChannelNorm::IDENTITY,
            v: ChannelNorm::IDENTITY,
            g: ChannelNorm::IDENTITY,
        }
    }

    pub fn channel(&self, idx: usize) -> ChannelNorm {
        match idx {
            0 => self.x,
            1 => self.v,
            _ => self.g,
        }
    }

    /// Scales and offsets of the three output channels, in channel order.
    pub fn output_scales(&self) -> ([f64; 3], [f64; 3]) {
        (
            [self.x.scale, self.v.scale, self.g.scale],
            [self.x.offset, self.v.offset, self.g.offset],
        )
    }
}

fn standardize(values: impl Iterator<Item = f64> + Clone, channel: &str) -> ChannelNorm {
    let mut n = 0usize;
    let mut mean = 0.0;
    for v in values.clone() {
        mean += v;
        n += 1;
    }
    if n == 0 {
        return ChannelNorm::IDENTITY;
    }
    mean /= n as f64;
    let mut var = 0.0;
    for v in values {
        var += (v - mean) * (v - mean);
    }
    var /= n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        log::warn!("channel {channel} has zero variance on the train split; scale falls back to 1");
        return ChannelNorm {
            scale: 1.0,
            offset: mean,
        };
    }
    ChannelNorm {
        scale: std,
        offset: mean,
    }
}

/// Fit the normalizer on the train split: ag scaled by its peak magnitude,
/// each available output channel standardized to zero mean / unit variance.
/// Channels absent from the training records fall back to the identity map.
pub fn fit_normalizer(train: &[&GroundMotionRecord]) -> Result<Normalizer, DataError> {
    if train.is_empty() {
        return Err(DataError::InvalidRequest(
            "cannot fit a normalizer on an empty training split".into(),
        ));
    }
    let peak = train
        .iter()
        .flat_map(|r| r.ag.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let ag_scale = if peak > 0.0 {
        peak
    } else {
        log::warn!("train split has all-zero ag; input scale falls back to 1");
        1.0
    };

    let channel = |get: fn(&GroundMotionRecord) -> Option<&Vec<f64>>, name: &str| -> ChannelNorm {
        if train.iter().all(|r| get(r).is_some()) {
            let values = train.iter().flat_map(move |r| get(r).unwrap().iter().copied());
            standardize(values, name)
        } else {
            ChannelNorm::IDENTITY
        }
    };

    Ok(Normalizer {
        ag_scale,
        x: channel(|r| r.x.as_ref(), "x"),
        v: channel(|r| r.v.as_ref(), "v"),
        g: channel(|r| r.g.as_ref(), "g"),
    })
}

// ── Persistence: one CSV per record plus a JSON manifest ───────────────

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    file: String,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dt: f64,
    seed: u64,
    units: String,
    oscillator: OscillatorParams,
    records: Vec<ManifestRecord>,
}

const MANIFEST_VERSION: u32 = 1;

/// Write the collection as `manifest.json` plus one CSV per record.
/// Reals are written with 17 significant digits, enough to round-trip f64.
pub fn save_records(dir: &Path, set: &RecordSet) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir.display().to_string(), e))?;
    let mut manifest = Manifest {
        format_version: MANIFEST_VERSION,
        dt: set.dt,
        seed: set.seed,
        units: "t:s, ag:m/s^2, x:m, v:m/s, a:m/s^2, g:m/s^2".into(),
        oscillator: set.oscillator,
        records: Vec::new(),
    };
    for rec in &set.records {
        let file = format!("{}.csv", rec.id);
        let path = dir.join(&file);
        write_record_csv(&path, rec)?;
        manifest.records.push(ManifestRecord {
            id: rec.id.clone(),
            file,
            split: rec.split,
        });
    }
    let mpath = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Format {
            path: mpath.display().to_string(),
            what: e.to_string(),
        })?;
    fs::write(&mpath, body).map_err(|e| DataError::io(mpath.display().to_string(), e))?;
    Ok(())
}

fn write_record_csv(path: &PathBuf, rec: &GroundMotionRecord) -> Result<(), DataError> {
    let mut cols: Vec<(&str, &[f64])> = vec![("ag", &rec.ag)];
    if let Some(x) = &rec.x {
        cols.push(("x", x));
    }
    if let Some(v) = &rec.v {
        cols.push(("v", v));
    }
    if let Some(a) = &rec.a {
        cols.push(("a", a));
    }
    if let Some(g) = &rec.g {
        cols.push(("g", g));
    }
    let mut out = String::new();
    out.push('t');
    for (name, _) in &cols {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..rec.ag.len() {
        out.push_str(&format!("{:.16e}", i as f64 * rec.dt));
        for (_, col) in &cols {
            out.push_str(&format!(",{:.16e}", col[i]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| DataError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load a collection previously written by [`save_records`].
pub fn load_records(dir: &Path) -> Result<RecordSet, DataError> {
    let mpath = dir.join("manifest.json");
    let body =
        fs::read_to_string(&mpath).map_err(|e| DataError::io(mpath.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&body).map_err(|e| DataError::Format {
        path: mpath.display().to_string(),
        what: e.to_string(),
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DataError::Format {
            path: mpath.display().to_string(),
            what: format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            ),
        });
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for mr in &manifest.records {
        let path = dir.join(&mr.file);
        let mut rec = read_record_csv(&path, manifest.dt)?;
        rec.id = mr.id.clone();
        rec.split = mr.split;
        records.push(rec);
    }
    Ok(RecordSet::new(
        records,
        manifest.dt,
        manifest.seed,
        manifest.oscillator,
    ))
}

/// Parse one record CSV. Errors carry the file and 1-based line number.
pub fn read_record_csv(path: &Path, expected_dt: f64) -> Result<GroundMotionRecord, DataError> {
    let p = path.display().to_string();
    let body = fs::read_to_string(path).map_err(|e| DataError::io(p.clone(), e))?;
    let mut lines = body.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| DataError::Format {
        path: p.clone(),
        what: "empty file".into(),
    })?;
    let names: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    if names.first() != Some(&"t") || !names.contains(&"ag") {
        return Err(DataError::Parse {
            path: p.clone(),
            line: 1,
            what: format!("header must start with 't' and contain 'ag', got '{header}'"),
        });
    }
    let ncols = names.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); ncols];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(DataError::Parse {
                path: p.clone(),
                line: lineno + 1,
                what: format!("expected {ncols} columns, found {}", fields.len()),
            });
        }
        for (ci, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                path: p.clone(),
                line: lineno + 1,
                what: format!("cannot parse '{field}' as a real number"),
            })?;
            cols[ci].push(v);
        }
    }
    if cols[0].len() < 2 {
        return Err(DataError::Format {
            path: p.clone(),
            what: "record needs at least two samples".into(),
        });
    }

    // Time stamps must be uniform with the manifest dt.
    let t = &cols[0];
    let t0 = t[0];
    for (i, ti) in t.iter().enumerate() {
        let expected = t0 + i as f64 * expected_dt;
        if (ti - expected).abs() > 1e-9 * expected_dt {
            return Err(DataError::Parse {
                path: p.clone(),
                line: i + 2,
                what: format!(
                    "non-uniform time stamp {ti} (expected {expected} for dt = {expected_dt})"
                ),
            });
        }
    }

    let take = |name: &str| -> Option<Vec<f64>> {
        names
            .iter()
            .position(|n| *n == name)
            .map(|idx| cols[idx].clone())
    };
    let rec = GroundMotionRecord {
        id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        dt: expected_dt,
        ag: take("ag").expect("checked above"),
        x: take("x"),
        v: take("v"),
        a: take("a"),
        g: take("g"),
        split: Split::Test,
    };
    rec.validate(&p)?;
    Ok(rec)
}
