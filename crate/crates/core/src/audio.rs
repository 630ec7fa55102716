//! PCM16 WAV files, framing helpers and the synthetic two-source generator.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn fmt_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| fmt_err(at, "truncated field"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| fmt_err(at, "truncated field"))
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit mono PCM.
pub fn parse_wav(b: &[u8]) -> Result<Waveform> {
    if b.len() < 12 {
        return Err(fmt_err(b.len(), "file shorter than the RIFF header"));
    }
    if &b[0..4] != b"RIFF" {
        return Err(fmt_err(0, "missing RIFF tag"));
    }
    if &b[8..12] != b"WAVE" {
        return Err(fmt_err(8, "missing WAVE tag"));
    }
    let mut at = 12;
    let mut format: Option<(u32, usize)> = None;
    while at + 8 <= b.len() {
        let id = &b[at..at + 4];
        let size = u32_at(b, at + 4)? as usize;
        let body = at + 8;
        if id == b"fmt " {
            if size < 16 {
                return Err(fmt_err(at + 4, format!("fmt chunk of {size} bytes is too small")));
            }
            let tag = u16_at(b, body)?;
            if tag != 1 {
                return Err(fmt_err(body, format!("encoding tag {tag} is not PCM")));
            }
            let channels = u16_at(b, body + 2)?;
            if channels != 1 {
                return Err(fmt_err(body + 2, format!("{channels} channels, expected mono")));
            }
            let rate = u32_at(b, body + 4)?;
            if rate == 0 {
                return Err(fmt_err(body + 4, "sample rate is zero"));
            }
            let bits = u16_at(b, body + 14)?;
            if bits != 16 {
                return Err(fmt_err(body + 14, format!("{bits} bits per sample, expected 16")));
            }
            format = Some((rate, body));
        } else if id == b"data" {
            let (rate, _) = format.ok_or_else(|| fmt_err(at, "data chunk before fmt chunk"))?;
            let end = body + size;
            if end > b.len() {
                return Err(fmt_err(at + 4, format!("data chunk claims {size} bytes, {} remain", b.len() - body)));
            }
            if !size.is_multiple_of(2) {
                return Err(fmt_err(at + 4, "odd data size for 16-bit samples"));
            }
            let samples = b[body..end]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                .collect();
            if rate != DEFAULT_SAMPLE_RATE {
                log::warn!("sample rate {rate} Hz differs from the expected {DEFAULT_SAMPLE_RATE} Hz");
            }
            return Ok(Waveform::new(samples, rate));
        }
        at = body + size + (size & 1);
    }
    Err(fmt_err(at.min(b.len()), "no data chunk"))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Quantizes to 16 bits with round-to-nearest and clipping.
pub fn quantize(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut b = Vec::with_capacity(44 + data_len as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&w.sample_rate.to_le_bytes());
    b.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        b.extend_from_slice(&quantize(s).to_le_bytes());
    }
    b
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_wav(w)).map_err(|e| Error::io(path, e))
}

/// Number of frames covering `t` samples, with right padding when needed.
pub fn frame_count(t: usize, len: usize, stride: usize) -> usize {
    t.saturating_sub(len).div_ceil(stride) + 1
}

/// `K x L` frames starting at multiples of `stride`; samples past the end read as zero.
pub fn segment<T: Scalar>(x: &[T], len: usize, stride: usize) -> Result<Vec<Vec<T>>> {
    if stride == 0 || len <= stride {
        return Err(Error::Config(format!("segment needs len > stride >= 1, got {len}/{stride}")));
    }
    let k = frame_count(x.len(), len, stride);
    Ok((0..k)
        .map(|f| {
            (0..len)
                .map(|j| x.get(f * stride + j).copied().unwrap_or_else(T::zero))
                .collect()
        })
        .collect())
}

/// Sums frames at `stride` and trims to `t` samples.
pub fn overlap_add<T: Scalar>(frames: &[Vec<T>], stride: usize, t: usize) -> Result<Vec<T>> {
    let len = frames.first().map_or(0, |f| f.len());
    if len == 0 || frames.iter().any(|f| f.len() != len) {
        return Err(Error::dim("overlap_add", "frame length", "frames must be non-empty and rectangular"));
    }
    let natural = (frames.len() - 1) * stride + len;
    if t == 0 || frame_count(t, len, stride) != frames.len() {
        return Err(Error::dim(
            "overlap_add",
            "samples",
            format!("{t} samples inconsistent with {} frames of {len} at stride {stride}", frames.len()),
        ));
    }
    let mut y = vec![T::zero(); natural];
    for (f, frame) in frames.iter().enumerate() {
        for (j, &v) in frame.iter().enumerate() {
            y[f * stride + j] += v;
        }
    }
    y.truncate(t);
    Ok(y)
}

/// Number of frames containing sample `i`.
pub fn coverage(i: usize, frames: usize, len: usize, stride: usize) -> usize {
    (0..frames).filter(|&f| f * stride <= i && i < f * stride + len).count()
}

/// One synthetic mixture and its two sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mix: Waveform,
    pub sources: Vec<Waveform>,
    pub snr_db: f64,
    pub seed: u64,
}

/// Harmonic stack with a wandering fundamental, gated into syllable-like bursts.
fn voiced_source(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let base = rng.random_range(100.0..250.0);
    let drifts: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.2..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.2),
            )
        })
        .collect();
    let max_h = 20usize;
    let gains: Vec<f64> = (1..=max_h)
        .map(|k| rng.random_range(0.5..1.0) / k as f64)
        .collect();
    let envelope = bursts(rng, n, sr);
    let mut phase = 0.0;
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let wobble: f64 = drifts
            .iter()
            .map(|(rate, ph, depth)| depth * (std::f64::consts::TAU * rate * t + ph).sin())
            .sum();
        let f0 = (base * (1.0 + wobble)).clamp(80.0, 300.0);
        phase += std::f64::consts::TAU * f0 / sr;
        let mut v = 0.0;
        for (k, g) in gains.iter().enumerate() {
            let h = (k + 1) as f64;
            if h * f0 >= 0.45 * sr {
                break;
            }
            v += g * (h * phase).sin();
        }
        *o = v * envelope[i];
    }
    out
}

/// Raised-cosine gated bursts with random onsets; always at least one burst.
fn bursts(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = (0.01 * sr) as usize;
    let mut at = (rng.random_range(0.0..0.2) * sr) as usize;
    while at < n {
        let dur = (rng.random_range(0.15..0.5) * sr) as usize;
        let end = (at + dur).min(n);
        for (i, e) in env.iter_mut().enumerate().take(end).skip(at) {
            let edge = (i - at).min(end - 1 - i);
            *e = if edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
        }
        at = end + (rng.random_range(0.05..0.3) * sr) as usize;
    }
    env
}

/// Second-order band-pass section (constant peak gain).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn band_pass(center: f64, q: f64, sr: f64) -> Self {
        let w = std::f64::consts::TAU * center / sr;
        let alpha = w.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }
}

/// Band-limited noise with a slow amplitude modulation.
fn noise_source(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let hi = 3400.0f64.min(0.45 * sr);
    let lo = 1200.0f64.min(hi * 0.5);
    let center = (lo * hi).sqrt();
    let bp = Biquad::band_pass(center, center / (hi - lo), sr);
    let shaped = bp.run(&bp.run(&white));
    let rate = rng.random_range(2.0..6.0);
    let ph = rng.random_range(0.0..std::f64::consts::TAU);
    shaped
        .iter()
        .enumerate()
        .map(|(i, v)| v * (0.6 + 0.4 * (std::f64::consts::TAU * rate * i as f64 / sr + ph).sin()))
        .collect()
}

fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum()
}

/// Measured level ratio of two sources in dB.
pub fn snr_db(a: &[f32], b: &[f32]) -> f64 {
    10.0 * (energy(a) / energy(b)).log10()
}

pub fn synth_mixture(seed: u64, duration_s: f64, sample_rate: u32, snr_range: (f64, f64)) -> Result<MixtureSample> {
    if duration_s.is_nan() || duration_s < 0.5 {
        return Err(Error::Config(format!("duration {duration_s} s is below the 0.5 s minimum")));
    }
    if sample_rate == 0 || snr_range.0 > snr_range.1 {
        return Err(Error::Config("invalid sample rate or SNR range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let a = voiced_source(&mut rng, n, sr);
    let b = noise_source(&mut rng, n, sr);
    let snr = if snr_range.0 == snr_range.1 {
        snr_range.0
    } else {
        rng.random_range(snr_range.0..snr_range.1)
    };
    let ea: f64 = a.iter().map(|v| v * v).sum();
    let eb: f64 = b.iter().map(|v| v * v).sum();
    let gb = (ea / (eb * 10f64.powf(snr / 10.0))).sqrt();
    let peak = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x + gb * y).abs())
        .fold(0.0, f64::max);
    let g = 0.9 / peak;
    let s1: Vec<f32> = a.iter().map(|v| (g * v) as f32).collect();
    let s2: Vec<f32> = b.iter().map(|v| (g * gb * v) as f32).collect();
    let mix: Vec<f32> = s1.iter().zip(&s2).map(|(x, y)| x + y).collect();
    Ok(MixtureSample {
        mix: Waveform::new(mix, sample_rate),
        sources: vec![Waveform::new(s1, sample_rate), Waveform::new(s2, sample_rate)],
        snr_db: snr,
        seed,
    })
}

/// Per-item seed derived from a dataset seed.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Mixture plus references, as used for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mix: Vec<f32>,
    pub sources: Vec<Vec<f32>>,
    pub sample_rate: u32,
}

impl From<(String, MixtureSample)> for Utterance {
    fn from((id, m): (String, MixtureSample)) -> Self {
        Utterance {
            id,
            sample_rate: m.mix.sample_rate,
            mix: m.mix.samples,
            sources: m.sources.into_iter().map(|s| s.samples).collect(),
        }
    }
}

/// Generates `count` mixtures in memory.
pub fn synth_dataset(count: usize, seed: u64, duration_s: f64, sample_rate: u32, snr_range: (f64, f64)) -> Result<Vec<Utterance>> {
    (0..count)
        .map(|i| {
            let m = synth_mixture(item_seed(seed, i), duration_s, sample_rate, snr_range)?;
            Ok(Utterance::from((format!("utt{i:04}"), m)))
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.tsv";

/// Writes `<root>/<id>/{mix,s1,s2}.wav` and the manifest.
pub fn write_dataset(root: &Path, count: usize, seed: u64, duration_s: f64, sample_rate: u32, snr_range: (f64, f64)) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    let mut dirs = Vec::new();
    for i in 0..count {
        let s = item_seed(seed, i);
        let m = synth_mixture(s, duration_s, sample_rate, snr_range)?;
        let id = format!("utt{i:04}");
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_wav(dir.join("mix.wav"), &m.mix)?;
        for (k, src) in m.sources.iter().enumerate() {
            write_wav(dir.join(format!("s{}.wav", k + 1)), src)?;
        }
        manifest.push_str(&format!("{id}\t{s}\t{:.6}\n", m.snr_db));
        dirs.push(dir);
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(dirs)
}

/// Reads every item listed in `<root>/manifest.tsv`.
pub fn load_dataset(root: &Path) -> Result<Vec<Utterance>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let id = line.split('\t').next().unwrap_or_default().to_string();
        let dir = root.join(&id);
        let mix = read_wav(dir.join("mix.wav"))?;
        let mut sources = Vec::new();
        for k in 1.. {
            let p = dir.join(format!("s{k}.wav"));
            if !p.exists() {
                break;
            }
            let s = read_wav(&p)?;
            if s.len() != mix.len() {
                return Err(Error::Usage(format!("{}: length differs from mix", p.display())));
            }
            sources.push(s.samples);
        }
        if sources.is_empty() {
            return Err(Error::Usage(format!("{}: no source files", dir.display())));
        }
        out.push(Utterance {
            id,
            mix: mix.samples,
            sources,
            sample_rate: mix.sample_rate,
        });
    }
    if out.is_empty() {
        return Err(Error::Usage(format!("{} lists no items", path.display())));
    }
    Ok(out)
}
