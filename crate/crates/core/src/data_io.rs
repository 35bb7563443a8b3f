//! Recording files, synthetic corpora and batch collation.
//!
//! Recording file layout (little-endian):
//!
//! ```text
//! "EEGW"  version:u32  C:u16  T:u64  sampling_rate:f32
//! C × (id_len:u16  id:utf8)
//! T × C × f32, time-major
//! ```
//!
//! Synthetic corpora are drawn from ChaCha8 (8-round ChaCha keystream,
//! seeded via `seed_from_u64`), so a seed fixes the corpus on every
//! platform.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Scalar;
use crate::tokenizer::{patch, PatchBatch, Recording};

pub const RECORDING_MAGIC: &[u8; 4] = b"EEGW";
pub const RECORDING_VERSION: u32 = 1;

pub fn encode_recording(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::with_capacity(26 + rec.samples().len() * 4);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.n_channels() as u16).to_le_bytes());
    out.extend_from_slice(&(rec.n_samples() as u64).to_le_bytes());
    out.extend_from_slice(&rec.sampling_rate().to_le_bytes());
    for id in rec.channel_ids() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for s in rec.samples() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_recording(bytes: &[u8]) -> Result<Recording> {
    let need = |end: usize| -> Result<()> {
        if end > bytes.len() {
            Err(Error::Truncated {
                expected: end as u64,
                actual: bytes.len() as u64,
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != RECORDING_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected {RECORDING_MAGIC:?}", &bytes[..4])));
    }
    need(22)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version == 0 || version > RECORDING_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "recording",
            found: version,
            supported: RECORDING_VERSION,
        });
    }
    let c = u16::from_le_bytes(bytes[8..10].try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let rate = f32::from_le_bytes(bytes[18..22].try_into().unwrap());
    if c == 0 {
        return Err(format_err(8, "recording declares zero channels"));
    }
    if !(rate.is_finite() && rate > 0.0) {
        return Err(format_err(18, format!("sampling rate {rate} must be positive")));
    }
    let mut pos = 22;
    let mut ids = Vec::with_capacity(c);
    for _ in 0..c {
        need(pos + 2)?;
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        need(pos + 2 + len)?;
        let id = std::str::from_utf8(&bytes[pos + 2..pos + 2 + len])
            .map_err(|e| format_err(pos + 2, format!("channel id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
        pos += 2 + len;
    }
    let payload = (t as u128) * (c as u128) * 4;
    let end = pos as u128 + payload;
    if end != bytes.len() as u128 {
        return Err(if end > bytes.len() as u128 {
            Error::Truncated {
                expected: u64::try_from(end).unwrap_or(u64::MAX),
                actual: bytes.len() as u64,
            }
        } else {
            format_err(end as usize, format!("{} trailing bytes after payload", bytes.len() as u128 - end))
        });
    }
    if t == 0 {
        return Err(format_err(10, "recording declares zero samples"));
    }
    let mut samples = Vec::with_capacity(payload as usize / 4);
    for (i, b) in bytes[pos..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(format_err(pos + 4 * i, format!("non-finite sample {v}")));
        }
        samples.push(v);
    }
    Recording::new(samples, rate, ids)
}

pub fn save_recording(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_recording(rec)).map_err(|e| Error::io(path, e))
}

/// Reads a recording exactly as stored; normalization is left to
/// [`Recording::zscore`].
pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_recording(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_examples: usize,
    pub channels: usize,
    pub n_samples: usize,
    pub sampling_rate: f64,
    /// Dominant frequency of each class, in Hz.
    pub frequencies: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_examples: 10_000,
            channels: 4,
            n_samples: 1280,
            sampling_rate: 256.0,
            frequencies: vec![6.0, 24.0],
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(Error::config("at least one class frequency is required"));
        }
        if !(self.sampling_rate.is_finite() && self.sampling_rate > 0.0) {
            return Err(Error::config(format!("sampling rate {} must be positive", self.sampling_rate)));
        }
        let nyquist = self.sampling_rate / 2.0;
        if let Some(f) = self.frequencies.iter().find(|&&f| !(f >= 0.0 && f < nyquist)) {
            return Err(Error::config(format!(
                "class frequency {f} Hz must lie in [0, {nyquist}) Hz"
            )));
        }
        if self.channels == 0 || self.n_samples == 0 || self.n_examples == 0 {
            return Err(Error::config("n_examples, channels and n_samples must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

/// Recordings with integer class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub recordings: Vec<Recording>,
    pub labels: Vec<usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.len());
        (
            Corpus {
                recordings: self.recordings[..n].to_vec(),
                labels: self.labels[..n].to_vec(),
            },
            Corpus {
                recordings: self.recordings[n..].to_vec(),
                labels: self.labels[n..].to_vec(),
            },
        )
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn zscore(&mut self) {
        for r in &mut self.recordings {
            r.zscore();
        }
    }
}

/// Example `k` has label `k % classes`; every channel carries the class
/// sinusoid at unit amplitude with its own uniform random phase, plus white
/// Gaussian noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let classes = spec.frequencies.len();
    let mut corpus = Corpus::default();
    for k in 0..spec.n_examples {
        let label = k % classes;
        let omega = 2.0 * PI * spec.frequencies[label] / spec.sampling_rate;
        let phases: Vec<f64> = (0..spec.channels).map(|_| 2.0 * PI * rng.uniform()).collect();
        let mut samples = Vec::with_capacity(spec.n_samples * spec.channels);
        for t in 0..spec.n_samples {
            for &phase in &phases {
                let clean = (omega * t as f64 + phase).sin();
                samples.push((clean + spec.noise_std * rng.normal()) as f32);
            }
        }
        corpus
            .recordings
            .push(Recording::with_default_ids(samples, spec.sampling_rate as f32, spec.channels)?);
        corpus.labels.push(label);
    }
    Ok(corpus)
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `rec_NNNNN.eegw` files and a `path,label` manifest into `dir`.
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut csv = String::from("path,label\n");
    for (k, (rec, label)) in corpus.recordings.iter().zip(&corpus.labels).enumerate() {
        let name = format!("rec_{k:05}.eegw");
        save_recording(dir.join(&name), rec)?;
        csv.push_str(&format!("{name},{label}\n"));
    }
    let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(csv.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a manifest; relative paths resolve against its directory.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<Corpus> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut corpus = Corpus::default();
    let mut offset = 0usize;
    for (n, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() + 1;
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "path,label") {
            continue;
        }
        let (path, label) = line
            .rsplit_once(',')
            .ok_or_else(|| format_err(at, format!("line {}: expected 'path,label'", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| format_err(at, format!("line {}: bad label '{label}'", n + 1)))?;
        corpus.recordings.push(load_recording(base.join(path.trim()))?);
        corpus.labels.push(label);
    }
    Ok(corpus)
}

/// Patches a batch of recordings into one grid padded to `c_max` channels.
/// Recordings are cropped to the shortest one; example `k` of the batch is
/// recording `k`.
pub fn collate<T: Scalar>(recordings: &[&Recording], patch_len: usize, stride: usize, c_max: usize) -> Result<PatchBatch<T>> {
    if recordings.is_empty() {
        return Err(Error::contract("cannot collate an empty batch"));
    }
    if let Some(r) = recordings.iter().find(|r| r.n_channels() > c_max) {
        return Err(Error::Range {
            what: "channel count",
            value: r.n_channels(),
            limit: c_max,
        });
    }
    let t_min = recordings.iter().map(|r| r.n_samples()).min().unwrap_or(0);
    let grids = recordings
        .iter()
        .map(|&r| {
            if r.n_samples() == t_min {
                patch(r, patch_len, stride)
            } else {
                let mut cropped = r.clone();
                cropped.crop(t_min);
                patch(&cropped, patch_len, stride)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PatchBatch::from_grids(&grids, c_max)
}

/// Power of `signal` at `freq` Hz (single-bin DFT, normalized by length).
pub fn bandpower(signal: impl Iterator<Item = f32>, sampling_rate: f64, freq: f64) -> f64 {
    let omega = 2.0 * PI * freq / sampling_rate;
    let (mut re, mut im, mut n) = (0.0, 0.0, 0usize);
    for (t, x) in signal.enumerate() {
        let x = f64::from(x);
        re += x * (omega * t as f64).cos();
        im -= x * (omega * t as f64).sin();
        n += 1;
    }
    (re * re + im * im) / (n.max(1) as f64).powi(2)
}

/// Picks the class whose frequency carries the most channel-averaged power.
pub fn bandpower_classify(rec: &Recording, frequencies: &[f64]) -> usize {
    let fs = f64::from(rec.sampling_rate());
    let power = |f: f64| (0..rec.n_channels()).map(|c| bandpower(rec.channel(c), fs, f)).sum::<f64>();
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &f) in frequencies.iter().enumerate() {
        let p = power(f);
        if p > best.1 {
            best = (k, p);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_examples: 6,
            channels: 3,
            n_samples: 256,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let corpus = generate_synthetic(&small_spec()).unwrap();
        for rec in &corpus.recordings {
            let bytes = encode_recording(rec);
            let back = decode_recording(&bytes).unwrap();
            assert_eq!(&back, rec);
            assert_eq!(encode_recording(&back), bytes);
        }
    }

    #[test]
    fn decode_errors() {
        let rec = Recording::with_default_ids(vec![1.0; 8], 100.0, 2).unwrap();
        let bytes = encode_recording(&rec);
        let header = bytes.len() - 32;
        let cut = &bytes[..bytes.len() - 5];
        match decode_recording(cut) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, (header + 32) as u64);
                assert_eq!(actual, cut.len() as u64);
            }
            other => panic!("{other:?}"),
        }
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(matches!(decode_recording(&newer), Err(Error::UnsupportedVersion { found: 9, .. })));
        let mut magic = bytes.clone();
        magic[1] = 0;
        assert!(matches!(decode_recording(&magic), Err(Error::Format { offset: 0, .. })));
        let mut nan = bytes.clone();
        nan[header + 4..header + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_recording(&nan), Err(Error::Format { offset, .. }) if offset == (header + 4) as u64));
    }

    #[test]
    fn nyquist_is_checked() {
        let spec = SynthSpec {
            frequencies: vec![200.0],
            ..small_spec()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn labels_are_balanced_and_seeded() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn collate_pads_and_crops() {
        let r19 = Recording::with_default_ids(vec![0.5; 19 * 200], 100.0, 19).unwrap();
        let r23 = Recording::with_default_ids(vec![0.5; 23 * 130], 100.0, 23).unwrap();
        let b: PatchBatch<f32> = collate(&[&r19, &r23], 64, 64, 64).unwrap();
        assert_eq!(b.patches.shape(), &[2, 64, 2, 64]);
        assert_eq!(b.pad_mask[..64].iter().filter(|&&r| r).count(), 19);
        assert_eq!(b.pad_mask[64..].iter().filter(|&&r| r).count(), 23);
        assert!(collate::<f32>(&[], 64, 64, 64).is_err());
        assert!(matches!(collate::<f32>(&[&r23], 64, 64, 16), Err(Error::Range { .. })));
    }
}
