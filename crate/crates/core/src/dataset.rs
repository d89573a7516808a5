//! Canonical dataset types and their on-disk format.
//!
//! A dataset directory holds:
//!
//! - `manifest.json` — shape, sample rate, target name, channel names,
//!   normalization stats and a payload checksum,
//! - `epochs.f32le` — row-major `epoch x channel x time` little-endian f32,
//! - `labels.u8` — one binary label per epoch,
//! - `subjects.u16` — little-endian subject id per epoch,
//! - `provenance.u8` — 0 = real, 1 = synthetic, 2 = noise-control.
//!
//! Epoch samples are held as `f64` in memory for the diffusion math but are
//! quantized to f32 precision when they enter a [`LabeledDataset`], so
//! `load(save(d))` reproduces `d` bit for bit.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One EEG epoch: a `(channels x timesteps)` grid of real samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EegEpoch {
    pub data: Array2<f64>,
}

impl EegEpoch {
    /// Wraps a grid, rejecting non-finite samples.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::data("epoch contains non-finite samples"));
        }
        Ok(EegEpoch { data })
    }

    pub fn zeros(channels: usize, timesteps: usize) -> Self {
        EegEpoch {
            data: Array2::zeros((channels, timesteps)),
        }
    }

    /// `(channels, timesteps)`.
    pub fn shape(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.0, d.1)
    }

    /// Rounds every sample to the nearest f32, in place.
    pub fn quantize_f32(&mut self) {
        self.data.mapv_inplace(|v| v as f32 as f64);
    }
}

/// The rating dimension (or vigilance state) a dataset is labeled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetName {
    Arousal,
    Dominance,
    Liking,
    Valence,
    Vigilance,
}

impl TargetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arousal" => Ok(TargetName::Arousal),
            "dominance" => Ok(TargetName::Dominance),
            "liking" => Ok(TargetName::Liking),
            "valence" => Ok(TargetName::Valence),
            "vigilance" => Ok(TargetName::Vigilance),
            other => Err(Error::config(format!("unknown target name `{other}`"))),
        }
    }
}

impl fmt::Display for TargetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TargetName::Arousal => "arousal",
            TargetName::Dominance => "dominance",
            TargetName::Liking => "liking",
            TargetName::Valence => "valence",
            TargetName::Vigilance => "vigilance",
        };
        f.write_str(s)
    }
}

/// Where an epoch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Synthetic,
    NoiseControl,
}

impl Provenance {
    pub fn to_u8(self) -> u8 {
        match self {
            Provenance::Real => 0,
            Provenance::Synthetic => 1,
            Provenance::NoiseControl => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Provenance::Real),
            1 => Ok(Provenance::Synthetic),
            2 => Ok(Provenance::NoiseControl),
            other => Err(Error::data(format!("invalid provenance byte {other}"))),
        }
    }
}

/// Per-channel z-score statistics, computed on the training split and reused
/// verbatim for validation, test and synthetic data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Guards against double application.
    pub applied: bool,
    /// Seed of the subject split the statistics were computed on.
    pub split_seed: u64,
    pub ratios: (f64, f64, f64),
}

/// Epochs plus labels, subject ids and provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    epochs: Vec<EegEpoch>,
    labels: Vec<u8>,
    subject_ids: Vec<u16>,
    provenance: Vec<Provenance>,
    pub target_name: TargetName,
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    pub normalization: Option<NormStats>,
}

impl LabeledDataset {
    pub fn new(target_name: TargetName, sample_rate: f64, channel_names: Vec<String>) -> Self {
        LabeledDataset {
            epochs: Vec::new(),
            labels: Vec::new(),
            subject_ids: Vec::new(),
            provenance: Vec::new(),
            target_name,
            sample_rate,
            channel_names,
            normalization: None,
        }
    }

    /// Appends one epoch. Samples are quantized to f32 precision so the
    /// on-disk format round-trips bitwise.
    pub fn push(
        &mut self,
        mut epoch: EegEpoch,
        label: u8,
        subject: u16,
        provenance: Provenance,
    ) -> Result<()> {
        if label > 1 {
            return Err(Error::data(format!("label {label} is not binary")));
        }
        if let Some(first) = self.epochs.first() {
            if first.shape() != epoch.shape() {
                return Err(Error::shape(format!(
                    "epoch shape {:?} differs from dataset shape {:?}",
                    epoch.shape(),
                    first.shape()
                )));
            }
        } else if epoch.shape().0 != self.channel_names.len() {
            return Err(Error::shape(format!(
                "epoch has {} channels but {} channel names were given",
                epoch.shape().0,
                self.channel_names.len()
            )));
        }
        epoch.quantize_f32();
        self.epochs.push(epoch);
        self.labels.push(label);
        self.subject_ids.push(subject);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `(channels, timesteps)` shared by all epochs.
    pub fn epoch_shape(&self) -> Option<(usize, usize)> {
        self.epochs.first().map(|e| e.shape())
    }

    pub fn epochs(&self) -> &[EegEpoch] {
        &self.epochs
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn subject_ids(&self) -> &[u16] {
        &self.subject_ids
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn subjects(&self) -> BTreeSet<u16> {
        self.subject_ids.iter().copied().collect()
    }

    /// Mutable access for in-place transforms (normalization).
    pub(crate) fn epochs_mut(&mut self) -> &mut [EegEpoch] {
        &mut self.epochs
    }

    /// A new dataset containing the epochs selected by `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let mut out = LabeledDataset::new(
            self.target_name,
            self.sample_rate,
            self.channel_names.clone(),
        );
        out.normalization = self.normalization.clone();
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!("index {i} out of range")));
            }
            out.push(
                self.epochs[i].clone(),
                self.labels[i],
                self.subject_ids[i],
                self.provenance[i],
            )?;
        }
        Ok(out)
    }

    /// Concatenates two datasets with identical shape and target.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.target_name != other.target_name {
            return Err(Error::data("target names differ"));
        }
        if !self.is_empty() && !other.is_empty() && self.epoch_shape() != other.epoch_shape() {
            return Err(Error::shape("epoch shapes differ between datasets"));
        }
        let mut out = self.clone();
        for i in 0..other.len() {
            out.push(
                other.epochs[i].clone(),
                other.labels[i],
                other.subject_ids[i],
                other.provenance[i],
            )?;
        }
        Ok(out)
    }

    fn payload_bytes(&self) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
        let mut epochs = Vec::with_capacity(self.len() * 4);
        for e in &self.epochs {
            for &v in e.data.iter() {
                epochs.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let labels = self.labels.clone();
        let mut subjects = Vec::with_capacity(self.len() * 2);
        for &s in &self.subject_ids {
            subjects.extend_from_slice(&s.to_le_bytes());
        }
        let provenance: Vec<u8> = self.provenance.iter().map(|p| p.to_u8()).collect();
        (epochs, labels, subjects, provenance)
    }

    /// Writes the dataset directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (channels, timesteps) = self
            .epoch_shape()
            .ok_or_else(|| Error::data("cannot save an empty dataset"))?;
        fs::create_dir_all(dir)?;
        let (epochs, labels, subjects, provenance) = self.payload_bytes();
        let checksum = payload_checksum(&epochs, &labels, &subjects, &provenance);
        let manifest = Manifest {
            shape: (channels, timesteps),
            sample_rate: self.sample_rate,
            target_name: self.target_name,
            channel_names: self.channel_names.clone(),
            normalization: self.normalization.clone(),
            epoch_count: self.len(),
            checksum,
        };
        write_file(&dir.join("epochs.f32le"), &epochs)?;
        write_file(&dir.join("labels.u8"), &labels)?;
        write_file(&dir.join("subjects.u16"), &subjects)?;
        write_file(&dir.join("provenance.u8"), &provenance)?;
        let json = serde_json::to_string_pretty(&manifest)?;
        write_file(&dir.join("manifest.json"), json.as_bytes())?;
        Ok(())
    }

    /// Loads a dataset directory, verifying sizes and the payload checksum.
    pub fn load(dir: &Path) -> Result<LabeledDataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let epochs = read_file(&dir.join("epochs.f32le"))?;
        let labels = read_file(&dir.join("labels.u8"))?;
        let subjects = read_file(&dir.join("subjects.u16"))?;
        let provenance = read_file(&dir.join("provenance.u8"))?;

        let (channels, timesteps) = manifest.shape;
        let n = manifest.epoch_count;
        let expected = n * channels * timesteps * 4;
        if epochs.len() != expected {
            return Err(Error::data(format!(
                "epochs payload is {} bytes, manifest implies {} ({} epochs of {}x{})",
                epochs.len(),
                expected,
                n,
                channels,
                timesteps
            )));
        }
        if labels.len() != n || subjects.len() != n * 2 || provenance.len() != n {
            return Err(Error::data("label/subject/provenance payload size mismatch"));
        }
        let checksum = payload_checksum(&epochs, &labels, &subjects, &provenance);
        if checksum != manifest.checksum {
            return Err(Error::data(format!(
                "checksum mismatch: manifest {}, payload {}",
                manifest.checksum, checksum
            )));
        }

        let mut out = LabeledDataset::new(
            manifest.target_name,
            manifest.sample_rate,
            manifest.channel_names,
        );
        out.normalization = manifest.normalization;
        for i in 0..n {
            let mut grid = Array2::zeros((channels, timesteps));
            let base = i * channels * timesteps * 4;
            for (j, v) in grid.iter_mut().enumerate() {
                let o = base + j * 4;
                *v = f32::from_le_bytes([epochs[o], epochs[o + 1], epochs[o + 2], epochs[o + 3]])
                    as f64;
            }
            let subject = u16::from_le_bytes([subjects[i * 2], subjects[i * 2 + 1]]);
            out.push(
                EegEpoch::new(grid)?,
                labels[i],
                subject,
                Provenance::from_u8(provenance[i])?,
            )?;
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    shape: (usize, usize),
    sample_rate: f64,
    target_name: TargetName,
    channel_names: Vec<String>,
    normalization: Option<NormStats>,
    epoch_count: usize,
    checksum: String,
}

fn payload_checksum(epochs: &[u8], labels: &[u8], subjects: &[u8], provenance: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(epochs);
    hasher.update(labels);
    hasher.update(subjects);
    hasher.update(provenance);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_dataset(n: usize) -> LabeledDataset {
        let names = vec!["C1".to_string(), "C2".to_string()];
        let mut d = LabeledDataset::new(TargetName::Arousal, 128.0, names);
        let mut rng = crate::rng::stream(11, 0);
        for i in 0..n {
            let grid = Array2::from_shape_fn((2, 8), |_| rng.random::<f64>() * 2.0 - 1.0);
            d.push(
                EegEpoch::new(grid).unwrap(),
                (i % 2) as u8,
                (i % 3) as u16,
                Provenance::Real,
            )
            .unwrap();
        }
        d
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let d = toy_dataset(10);
        d.save(dir.path()).unwrap();
        let back = LabeledDataset::load(dir.path()).unwrap();
        assert_eq!(d, back);
        for (a, b) in d.epochs().iter().zip(back.epochs()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        toy_dataset(4).save(dir.path()).unwrap();
        let path = dir.path().join("epochs.f32le");
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        let err = LabeledDataset::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(msg) if msg.contains("checksum")));
    }

    #[test]
    fn manifest_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        toy_dataset(4).save(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        // Claim 16 timesteps over an 8-timestep payload.
        value["shape"][1] = serde_json::json!(16);
        fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = LabeledDataset::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(msg) if msg.contains("payload")));
    }

    #[test]
    fn non_finite_epochs_are_rejected() {
        let mut grid = Array2::zeros((2, 4));
        grid[[0, 0]] = f64::NAN;
        assert!(EegEpoch::new(grid).is_err());
    }

    #[test]
    fn mismatched_shape_push_is_rejected() {
        let mut d = toy_dataset(2);
        let bad = EegEpoch::zeros(2, 9);
        assert!(d.push(bad, 0, 0, Provenance::Real).is_err());
    }
}
