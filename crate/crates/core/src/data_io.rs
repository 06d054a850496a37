//! Trial containers, CSV import/export and decimation.
//!
//! Container layout (`FACT`, version 1, little-endian throughout):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `FACT` |
//! | 2 | version (u16) |
//! | 4 × 4 | `n_trials`, `eeg_channels`, `emg_channels`, `time_points` (u32) |
//! | 4 | sampling rate (f32) |
//! | 2 | `n_classes` (u16) |
//! | 2 × n_trials | labels (u16) |
//! | 4 × n_trials × C × T | EEG samples (f32), trial-major, channel-major, time-minor |
//! | 4 × n_trials × E × T | EMG samples, same order |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::filterbank::{design_cheby2_lowpass, filtfilt};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"FACT";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4 * 4 + 4 + 2;

/// Order of the Chebyshev type II anti-alias low-pass used by [`decimate`].
pub const ANTI_ALIAS_ORDER: usize = 12;
pub const ANTI_ALIAS_ATTEN_DB: f64 = 30.0;

/// Paired EEG/EMG trials with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    /// Per trial, `[eeg_channels, time_points]`.
    pub eeg: Vec<Tensor>,
    /// Per trial, `[emg_channels, time_points]`.
    pub emg: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub fs_hz: f64,
    pub class_names: Vec<String>,
    pub subject_id: Option<String>,
    pub eeg_channels: usize,
    pub emg_channels: usize,
    pub time_points: usize,
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}

impl TrialSet {
    /// Empty set with fixed per-trial dimensions.
    pub fn empty(
        eeg_channels: usize,
        emg_channels: usize,
        time_points: usize,
        fs_hz: f64,
        n_classes: usize,
    ) -> Self {
        Self {
            eeg: Vec::new(),
            emg: Vec::new(),
            labels: Vec::new(),
            fs_hz,
            class_names: default_class_names(n_classes),
            subject_id: None,
            eeg_channels,
            emg_channels,
            time_points,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn push(&mut self, eeg: Tensor, emg: Tensor, label: usize) -> Result<()> {
        if eeg.shape() != [self.eeg_channels, self.time_points]
            || emg.shape() != [self.emg_channels, self.time_points]
        {
            return Err(Error::Shape(format!(
                "trial shapes {:?}/{:?} do not match set [{}, {}]/[{}, {}]",
                eeg.shape(),
                emg.shape(),
                self.eeg_channels,
                self.time_points,
                self.emg_channels,
                self.time_points
            )));
        }
        if label >= self.n_classes() {
            return Err(Error::Index(format!(
                "label {label} outside 0..{}",
                self.n_classes()
            )));
        }
        self.eeg.push(eeg);
        self.emg.push(emg);
        self.labels.push(label);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eeg.len() != self.labels.len() || self.emg.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} EEG trials, {} EMG trials, {} labels",
                self.eeg.len(),
                self.emg.len(),
                self.labels.len()
            )));
        }
        if !(self.fs_hz > 0.0) {
            return Err(Error::Data(format!(
                "sampling rate {} must be positive",
                self.fs_hz
            )));
        }
        if self.eeg_channels == 0 || self.emg_channels == 0 || self.time_points == 0 {
            return Err(Error::Data(
                "channel and time dimensions must be positive".into(),
            ));
        }
        for (i, (e, m)) in self.eeg.iter().zip(&self.emg).enumerate() {
            if e.shape() != [self.eeg_channels, self.time_points]
                || m.shape() != [self.emg_channels, self.time_points]
            {
                return Err(Error::Data(format!(
                    "trial {i} has shapes {:?}/{:?}",
                    e.shape(),
                    m.shape()
                )));
            }
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= self.n_classes()) {
            return Err(Error::Data(format!(
                "trial {i} label {} outside 0..{}",
                self.labels[i],
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        TrialSet {
            eeg: indices.iter().map(|&i| self.eeg[i].clone()).collect(),
            emg: indices.iter().map(|&i| self.emg[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            subject_id: self.subject_id.clone(),
            ..*self
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Exact byte size of a container holding `set`.
pub fn container_size(
    n_trials: usize,
    eeg_channels: usize,
    emg_channels: usize,
    time_points: usize,
) -> usize {
    HEADER_BYTES + 2 * n_trials + 4 * n_trials * (eeg_channels + emg_channels) * time_points
}

pub fn encode_container(set: &TrialSet) -> Result<Vec<u8>> {
    set.validate()?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
    };
    let n_classes = u16::try_from(set.n_classes())
        .map_err(|_| Error::Format(format!("{} classes do not fit in u16", set.n_classes())))?;
    let mut buf = Vec::with_capacity(container_size(
        set.len(),
        set.eeg_channels,
        set.emg_channels,
        set.time_points,
    ));
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    for (v, what) in [
        (set.len(), "n_trials"),
        (set.eeg_channels, "eeg_channels"),
        (set.emg_channels, "emg_channels"),
        (set.time_points, "time_points"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    buf.extend_from_slice(&(set.fs_hz as f32).to_le_bytes());
    buf.extend_from_slice(&n_classes.to_le_bytes());
    for &l in &set.labels {
        buf.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for t in set.eeg.iter().chain(&set.emg) {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_container(set: &TrialSet, path: &Path) -> Result<()> {
    let bytes = encode_container(set)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N]
            .try_into()
            .expect("length checked");
        self.pos += N;
        out
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<TrialSet> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!(
            "header truncated: expected {HEADER_BYTES} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FACT\"",
            &bytes[..4]
        )));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16();
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {CONTAINER_VERSION}"
        )));
    }
    let n = r.u32() as usize;
    let c = r.u32() as usize;
    let e = r.u32() as usize;
    let t = r.u32() as usize;
    let fs = r.f32() as f64;
    let n_classes = r.u16() as usize;
    let expected = container_size(n, c, e, t);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut set = TrialSet::empty(c, e, t, fs, n_classes);
    let labels: Vec<usize> = (0..n).map(|_| r.u16() as usize).collect();
    let mut read_block = |rows: usize| -> Result<Vec<Tensor>> {
        (0..n)
            .map(|_| Tensor::new(&[rows, t], (0..rows * t).map(|_| r.f32() as f64).collect()))
            .collect()
    };
    set.eeg = read_block(c)?;
    set.emg = read_block(e)?;
    set.labels = labels;
    set.validate()
        .map_err(|err| Error::Format(err.to_string()))?;
    Ok(set)
}

pub fn read_container(path: &Path) -> Result<TrialSet> {
    decode_container(&fs::read(path)?)
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut width = None;
    for (li, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(ci, cell)| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{}: row {}, column {}: cannot parse {:?}",
                        path.display(),
                        li + 1,
                        ci + 1,
                        cell
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format(format!(
                    "{}: row {} has {} columns, expected {w}",
                    path.display(),
                    li + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(rows)
}

fn split_trials(
    rows: Vec<Vec<f64>>,
    n_trials: usize,
    what: &str,
) -> Result<(usize, usize, Vec<Tensor>)> {
    if n_trials == 0 || !rows.len().is_multiple_of(n_trials) || rows.is_empty() {
        return Err(Error::Format(format!(
            "{what}: {} rows are not a whole number of channels for {n_trials} trials",
            rows.len()
        )));
    }
    let channels = rows.len() / n_trials;
    let t = rows[0].len();
    let trials = rows
        .chunks(channels)
        .map(|chunk| Tensor::new(&[channels, t], chunk.concat()))
        .collect::<Result<Vec<_>>>()?;
    Ok((channels, t, trials))
}

/// Reads one-row-per-(trial, channel) CSVs (trial-major, channel-minor,
/// columns are time samples) and a labels file with one class id per line.
pub fn import_csv(
    eeg_path: &Path,
    emg_path: &Path,
    labels_path: &Path,
    fs: f64,
) -> Result<TrialSet> {
    let labels_text = fs::read_to_string(labels_path)?;
    let labels = labels_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                Error::Format(format!(
                    "{}: line {}: bad label {:?}",
                    labels_path.display(),
                    i + 1,
                    l
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = labels.len();
    let (c, t, eeg) = split_trials(parse_rows(eeg_path)?, n, "EEG")?;
    let (e, t_emg, emg) = split_trials(parse_rows(emg_path)?, n, "EMG")?;
    if t != t_emg {
        return Err(Error::Format(format!(
            "EEG has {t} samples per row, EMG has {t_emg}"
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let set = TrialSet {
        eeg,
        emg,
        labels,
        fs_hz: fs,
        class_names: default_class_names(n_classes),
        subject_id: None,
        eeg_channels: c,
        emg_channels: e,
        time_points: t,
    };
    set.validate()?;
    Ok(set)
}

/// Inverse of [`import_csv`]; values are written with full round-trip precision.
pub fn export_csv(
    set: &TrialSet,
    eeg_path: &Path,
    emg_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let write_block = |trials: &[Tensor], path: &Path| -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for trial in trials {
            for ch in 0..trial.shape()[0] {
                let line: Vec<String> = trial.row(ch).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    };
    write_block(&set.eeg, eeg_path)?;
    write_block(&set.emg, emg_path)?;
    let mut w = BufWriter::new(fs::File::create(labels_path)?);
    for l in &set.labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Anti-alias low-pass (stopband from the new Nyquist rate) then keep every
/// `factor`-th sample. `factor == 1` cannot alias and returns a copy.
pub fn decimate(set: &TrialSet, factor: usize) -> Result<TrialSet> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be at least 1".into()));
    }
    if !set.time_points.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "{} samples not divisible by decimation factor {factor}",
            set.time_points
        )));
    }
    if factor == 1 {
        return Ok(set.clone());
    }
    let new_fs = set.fs_hz / factor as f64;
    let lowpass = design_cheby2_lowpass(
        new_fs / 2.0,
        ANTI_ALIAS_ORDER,
        ANTI_ALIAS_ATTEN_DB,
        set.fs_hz,
    )?;
    let t_new = set.time_points / factor;
    let shrink = |trial: &Tensor| -> Result<Tensor> {
        let rows = trial.shape()[0];
        let mut out = Vec::with_capacity(rows * t_new);
        for ch in 0..rows {
            let y = filtfilt(trial.row(ch), &lowpass)?;
            out.extend(y.iter().step_by(factor));
        }
        Tensor::new(&[rows, t_new], out)
    };
    Ok(TrialSet {
        eeg: set.eeg.iter().map(shrink).collect::<Result<_>>()?,
        emg: set.emg.iter().map(shrink).collect::<Result<_>>()?,
        labels: set.labels.clone(),
        fs_hz: new_fs,
        class_names: set.class_names.clone(),
        subject_id: set.subject_id.clone(),
        time_points: t_new,
        ..*set
    })
}
