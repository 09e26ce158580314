//! Fixed-length 3-axis accelerometer windows: synthesis, CSV exchange,
//! normalization and subject-aware splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use flowfm_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const NUM_CHANNELS: usize = 3;
/// 10 s at 30 Hz.
pub const WINDOW_LEN: usize = 300;
pub const SAMPLE_RATE_HZ: f64 = 30.0;
pub const CSV_HEADER: [&str; 7] = ["window_id", "class_id", "subject_id", "step", "ax", "ay", "az"];

/// One window, stored channel-major: `samples[c * WINDOW_LEN + step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalWindow {
    pub samples: Vec<f64>,
    pub class_id: usize,
    pub subject_id: usize,
}

impl SignalWindow {
    pub fn new(samples: Vec<f64>, class_id: usize, subject_id: usize) -> Result<Self> {
        if samples.len() != NUM_CHANNELS * WINDOW_LEN {
            return Err(Error::Data(format!(
                "window needs {} values, got {}",
                NUM_CHANNELS * WINDOW_LEN,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("window contains a non-finite value".into()));
        }
        Ok(Self {
            samples,
            class_id,
            subject_id,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * WINDOW_LEN..(c + 1) * WINDOW_LEN]
    }
}

/// Per-channel z-score parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; NUM_CHANNELS],
        std: [1.0; NUM_CHANNELS],
    };

    /// Maps normalized samples back to the original scale.
    pub fn denormalize(&self, samples: &mut [f64]) {
        for (c, chunk) in samples.chunks_mut(WINDOW_LEN).enumerate() {
            let (m, s) = (self.mean[c % NUM_CHANNELS], self.std[c % NUM_CHANNELS]);
            chunk.iter_mut().for_each(|v| *v = *v * s + m);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SignalBatch {
    pub windows: Vec<SignalWindow>,
    /// Statistics applied to these windows, if they were normalized.
    pub normalization: Option<NormStats>,
}

impl SignalBatch {
    pub fn new(windows: Vec<SignalWindow>) -> Self {
        Self {
            windows,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.class_id).collect()
    }

    /// One more than the largest class id.
    pub fn num_classes(&self) -> usize {
        self.windows.iter().map(|w| w.class_id + 1).max().unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
            normalization: self.normalization,
        }
    }

    /// Windows at `indices` as a `[B, 3, 300]` tensor.
    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * NUM_CHANNELS * WINDOW_LEN);
        for &i in indices {
            data.extend_from_slice(&self.windows[i].samples);
        }
        Tensor::new([indices.len(), NUM_CHANNELS, WINDOW_LEN], data).expect("window extents are fixed")
    }

    pub fn all_tensor(&self) -> Tensor {
        self.tensor(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Builds windows from a `[B, 3, 300]` tensor with the given labels.
    pub fn from_tensor(x: &Tensor, class_ids: &[usize], subject_ids: &[usize]) -> Result<Self> {
        let per = NUM_CHANNELS * WINDOW_LEN;
        if x.shape() != [class_ids.len(), NUM_CHANNELS, WINDOW_LEN] || subject_ids.len() != class_ids.len() {
            return Err(Error::Data(format!(
                "tensor {:?} does not match {} labelled windows",
                x.shape(),
                class_ids.len()
            )));
        }
        let windows = x
            .data()
            .chunks(per)
            .zip(class_ids.iter().zip(subject_ids))
            .map(|(s, (&c, &sub))| SignalWindow::new(s.to_vec(), c, sub))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(windows))
    }
}

/// Parameters of the synthetic activity generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub subjects_per_class: usize,
    pub windows_per_subject: usize,
    /// Fundamental frequency of each class in Hz.
    pub base_freqs: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Three classes without noise.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            num_classes: 3,
            subjects_per_class: 4,
            windows_per_subject: 16,
            base_freqs: vec![1.0, 1.7, 2.5],
            noise_std: 0.0,
            seed,
        }
    }

    /// The default task used for representation experiments.
    pub fn standard(seed: u64) -> Self {
        Self {
            noise_std: 0.1,
            ..Self::noiseless(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data("need at least two classes".into()));
        }
        if self.base_freqs.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} base frequencies for {} classes",
                self.base_freqs.len(),
                self.num_classes
            )));
        }
        let nyquist = SAMPLE_RATE_HZ / 2.0;
        for (i, &f) in self.base_freqs.iter().enumerate() {
            if !(f > 0.0 && 2.0 * f < nyquist) {
                return Err(Error::Data(format!("base frequency {f} Hz has its harmonic above Nyquist")));
            }
            if self.base_freqs[..i].iter().any(|&g| (g - f).abs() < 1e-9) {
                return Err(Error::Data(format!("duplicate base frequency {f} Hz")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Data("noise_std must be non-negative".into()));
        }
        if self.subjects_per_class == 0 || self.windows_per_subject == 0 {
            return Err(Error::Data("empty synthetic spec".into()));
        }
        Ok(())
    }
}

struct SubjectStyle {
    gain: [f64; NUM_CHANNELS],
    phase: [f64; NUM_CHANNELS],
    harmonic_ratio: f64,
    harmonic_phase: [f64; NUM_CHANNELS],
}

/// Generates `num_classes × subjects_per_class × windows_per_subject`
/// windows. Every subject performs every class; a subject's per-channel gain
/// and phase offsets are shared across its windows, and each window starts at
/// a random point of the cycle. Class `k` is a fundamental at
/// `base_freqs[k]` plus a weaker second harmonic.
pub fn synthesize(spec: &SynthSpec) -> Result<SignalBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles: Vec<SubjectStyle> = (0..spec.subjects_per_class)
        .map(|_| SubjectStyle {
            gain: std::array::from_fn(|_| rng.random_range(0.6..1.4)),
            phase: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
            harmonic_ratio: rng.random_range(0.2..0.5),
            harmonic_phase: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
        })
        .collect();
    let mut windows = Vec::with_capacity(spec.num_classes * spec.subjects_per_class * spec.windows_per_subject);
    for (class_id, &freq) in spec.base_freqs.iter().enumerate() {
        for (subject_id, style) in styles.iter().enumerate() {
            for _ in 0..spec.windows_per_subject {
                let start = rng.random_range(0.0..TAU);
                let mut samples = vec![0.0; NUM_CHANNELS * WINDOW_LEN];
                for c in 0..NUM_CHANNELS {
                    for n in 0..WINDOW_LEN {
                        let w = TAU * freq * n as f64 / SAMPLE_RATE_HZ;
                        let base = (w + start + style.phase[c]).sin();
                        let harm = (2.0 * (w + start) + style.harmonic_phase[c]).sin();
                        samples[c * WINDOW_LEN + n] = style.gain[c] * (base + style.harmonic_ratio * harm);
                    }
                }
                if spec.noise_std > 0.0 {
                    for v in &mut samples {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += spec.noise_std * z;
                    }
                }
                windows.push(SignalWindow {
                    samples,
                    class_id,
                    subject_id,
                });
            }
        }
    }
    Ok(SignalBatch::new(windows))
}

/// Fits per-channel mean and standard deviation and z-scores the batch.
pub fn normalize(batch: &SignalBatch) -> Result<(SignalBatch, NormStats)> {
    if batch.is_empty() {
        return Err(Error::Data("cannot fit normalization on an empty batch".into()));
    }
    let mut stats = NormStats::IDENTITY;
    let count = (batch.len() * WINDOW_LEN) as f64;
    for c in 0..NUM_CHANNELS {
        let mean = batch.windows.iter().flat_map(|w| w.channel(c)).sum::<f64>() / count;
        let var = batch
            .windows
            .iter()
            .flat_map(|w| w.channel(c))
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count;
        let mut std = var.sqrt();
        if std < 1e-8 {
            log::warn!("channel {c} has zero variance; clamping std to 1e-8");
            std = 1e-8;
        }
        stats.mean[c] = mean;
        stats.std[c] = std;
    }
    Ok((apply_stats(batch, &stats), stats))
}

/// Z-scores with previously fitted statistics.
pub fn apply_stats(batch: &SignalBatch, stats: &NormStats) -> SignalBatch {
    let windows = batch
        .windows
        .iter()
        .map(|w| {
            let mut samples = w.samples.clone();
            for (c, chunk) in samples.chunks_mut(WINDOW_LEN).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - stats.mean[c]) / stats.std[c]);
            }
            SignalWindow { samples, ..*w }
        })
        .collect();
    SignalBatch {
        windows,
        normalization: Some(*stats),
    }
}

/// Splits into (train, eval). Subject-disjoint when every class has at
/// least two subjects, window-level otherwise.
pub fn split(batch: &SignalBatch, train_frac: f64, seed: u64) -> Result<(SignalBatch, SignalBatch)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Data(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for w in &batch.windows {
        per_class.entry(w.class_id).or_default().insert(w.subject_id);
    }
    let subject_level = !per_class.is_empty() && per_class.values().all(|s| s.len() >= 2);
    let (train_idx, eval_idx): (Vec<usize>, Vec<usize>) = if subject_level {
        let mut subjects: Vec<usize> = per_class.values().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let n_train = split_count(subjects.len(), train_frac);
        // Reshuffle until both sides see every class, when some draw allows it.
        let mut train_subjects = BTreeSet::new();
        for _ in 0..SPLIT_ATTEMPTS {
            subjects.shuffle(&mut rng);
            train_subjects = subjects[..n_train].iter().copied().collect();
            let covers = per_class
                .values()
                .all(|s| s.iter().any(|x| train_subjects.contains(x)) && s.iter().any(|x| !train_subjects.contains(x)));
            if covers {
                break;
            }
        }
        (0..batch.len()).partition(|&i| train_subjects.contains(&batch.windows[i].subject_id))
    } else {
        if batch.len() < 2 {
            return Err(Error::Data(format!("cannot split {} window(s) into two non-empty sides", batch.len())));
        }
        let mut idx: Vec<usize> = (0..batch.len()).collect();
        idx.shuffle(&mut rng);
        let n_train = split_count(idx.len(), train_frac);
        let eval = idx.split_off(n_train);
        idx.sort_unstable();
        let mut eval = eval;
        eval.sort_unstable();
        (idx, eval)
    };
    if train_idx.is_empty() || eval_idx.is_empty() {
        return Err(Error::Data("split left one side empty".into()));
    }
    Ok((batch.subset(&train_idx), batch.subset(&eval_idx)))
}

/// Subject shuffles tried before accepting a split that misses a class.
const SPLIT_ATTEMPTS: usize = 64;

fn split_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// File contents with `#` comment lines removed, and the 1-based file line
/// of each kept line. The csv reader's own line count skips comments, so
/// callers map reported lines back through the second value.
pub(crate) fn read_without_comments(path: &Path) -> Result<(String, Vec<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::with_capacity(text.len());
    let mut lines = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if !l.trim_start().starts_with('#') {
            kept.push_str(l);
            kept.push('\n');
            lines.push(i as u64 + 1);
        }
    }
    Ok((kept, lines))
}

/// Reads windows in the `window_id,class_id,subject_id,step,ax,ay,az` schema.
/// An optional trailing `origin` column is accepted and ignored. Lines
/// starting with `#` are comments.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SignalBatch> {
    let path = path.as_ref();
    let (kept, file_lines) = read_without_comments(path)?;
    let csv_err = |line: u64, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line: match line {
            0 => 0,
            l => file_lines.get(l as usize - 1).copied().unwrap_or(l),
        },
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(kept.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let header_line = header.position().map_or(1, |p| p.line());
    let names: Vec<&str> = header.iter().collect();
    let columns = if names == CSV_HEADER {
        7
    } else if names.len() == 8 && names[..7] == CSV_HEADER && names[7] == "origin" {
        8
    } else {
        return Err(csv_err(header_line, format!("unexpected header {names:?}")));
    };

    let mut windows = Vec::new();
    let mut current: Option<(String, usize, usize, Vec<[f64; NUM_CHANNELS]>)> = None;
    let finish = |cur: (String, usize, usize, Vec<[f64; NUM_CHANNELS]>), index: usize, line: u64| -> Result<SignalWindow> {
        let (id, class_id, subject_id, rows) = cur;
        if rows.len() != WINDOW_LEN {
            return Err(csv_err(
                line,
                format!("window {index} (id {id}) has {} rows, expected {WINDOW_LEN}", rows.len()),
            ));
        }
        let mut samples = vec![0.0; NUM_CHANNELS * WINDOW_LEN];
        for (n, r) in rows.iter().enumerate() {
            for c in 0..NUM_CHANNELS {
                samples[c * WINDOW_LEN + n] = r[c];
            }
        }
        Ok(SignalWindow {
            samples,
            class_id,
            subject_id,
        })
    };
    let mut last_line = header_line;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        last_line = line;
        if record.len() != columns {
            return Err(csv_err(line, format!("expected {columns} columns, found {}", record.len())));
        }
        let int = |i: usize| -> Result<usize> {
            record[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| csv_err(line, format!("column {} is not a non-negative integer: {:?}", CSV_HEADER[i], &record[i])))
        };
        let id = record[0].trim().to_string();
        let (class_id, subject_id, step) = (int(1)?, int(2)?, int(3)?);
        let mut values = [0.0; NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            let v: f64 = record[4 + c]
                .trim()
                .parse()
                .map_err(|_| csv_err(line, format!("column {} is not a number: {:?}", CSV_HEADER[4 + c], &record[4 + c])))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("non-finite value in column {}", CSV_HEADER[4 + c])));
            }
            values[c] = v;
        }
        if current.as_ref().is_some_and(|c| c.0 != id) {
            let done = current.take().unwrap();
            windows.push(finish(done, windows.len(), line)?);
        }
        let cur = current.get_or_insert_with(|| (id.clone(), class_id, subject_id, Vec::with_capacity(WINDOW_LEN)));
        if cur.1 != class_id || cur.2 != subject_id {
            return Err(csv_err(line, format!("labels change inside window {}", windows.len())));
        }
        if step != cur.3.len() {
            return Err(csv_err(
                line,
                format!("window {} expects step {} but found {step}", windows.len(), cur.3.len()),
            ));
        }
        cur.3.push(values);
    }
    if let Some(done) = current.take() {
        windows.push(finish(done, windows.len(), last_line)?);
    }
    Ok(SignalBatch::new(windows))
}

/// Writes windows in the CSV schema, each `comments` line prefixed by `# `.
/// With `origin`, an extra `origin` column carries that tag on every row.
pub fn save_csv(batch: &SignalBatch, path: impl AsRef<Path>, comments: &[String], origin: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for c in comments {
        writeln!(out, "# {c}").map_err(io)?;
    }
    let mut header = CSV_HEADER.join(",");
    if origin.is_some() {
        header.push_str(",origin");
    }
    writeln!(out, "{header}").map_err(io)?;
    for (id, w) in batch.windows.iter().enumerate() {
        for n in 0..WINDOW_LEN {
            write!(
                out,
                "{id},{},{},{n},{},{},{}",
                w.class_id,
                w.subject_id,
                w.samples[n],
                w.samples[WINDOW_LEN + n],
                w.samples[2 * WINDOW_LEN + n]
            )
            .map_err(io)?;
            if let Some(o) = origin {
                write!(out, ",{o}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Magnitude spectrum summed over channels for bins `0..=WINDOW_LEN/2`.
pub fn magnitude_spectrum(window: &SignalWindow) -> Vec<f64> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW_LEN);
    let mut total = vec![0.0; WINDOW_LEN / 2 + 1];
    for c in 0..NUM_CHANNELS {
        let mut buf: Vec<Complex<f64>> = window.channel(c).iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (t, b) in total.iter_mut().zip(&buf) {
            *t += b.norm();
        }
    }
    total
}

/// Frequency in Hz of the strongest non-DC spectral bin.
pub fn dominant_frequency(window: &SignalWindow) -> f64 {
    let spec = magnitude_spectrum(window);
    let bin = (1..spec.len())
        .max_by(|&a, &b| spec[a].total_cmp(&spec[b]))
        .unwrap_or(1);
    bin as f64 * SAMPLE_RATE_HZ / WINDOW_LEN as f64
}

/// FFT bin index holding `freq`.
pub fn frequency_bin(freq: f64) -> usize {
    (freq * WINDOW_LEN as f64 / SAMPLE_RATE_HZ).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            subjects_per_class: 2,
            windows_per_subject: 10,
            base_freqs: vec![1.0, 1.7, 2.5],
            noise_std: 0.05,
            seed,
        }
    }

    #[test]
    fn synthesize_counts_windows() {
        let b = synthesize(&tiny(1)).unwrap();
        assert_eq!(b.len(), 60);
        assert!(b.windows.iter().all(|w| w.samples.len() == 900 && w.samples.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn synthesize_is_deterministic() {
        assert_eq!(synthesize(&tiny(9)).unwrap(), synthesize(&tiny(9)).unwrap());
        assert_ne!(synthesize(&tiny(9)).unwrap(), synthesize(&tiny(10)).unwrap());
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny(0);
        s.base_freqs = vec![1.0, 1.0, 2.0];
        assert!(synthesize(&s).is_err());
        s.base_freqs = vec![1.0];
        s.num_classes = 1;
        assert!(synthesize(&s).is_err());
        let mut s = tiny(0);
        s.noise_std = -1.0;
        assert!(synthesize(&s).is_err());
    }

    #[test]
    fn zero_batch_normalizes_to_zero() {
        let w = SignalWindow::new(vec![0.0; 900], 0, 0).unwrap();
        let (n, stats) = normalize(&SignalBatch::new(vec![w.clone()])).unwrap();
        assert_eq!(n.windows[0].samples, w.samples);
        assert_eq!(stats.std, [1e-8; 3]);
    }

    #[test]
    fn identity_stats_are_identity() {
        let b = synthesize(&tiny(2)).unwrap();
        let a = apply_stats(&b, &NormStats::IDENTITY);
        assert_eq!(a.windows, b.windows);
    }

    #[test]
    fn normalize_rejects_empty() {
        assert!(normalize(&SignalBatch::default()).is_err());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let b = synthesize(&tiny(2)).unwrap();
        assert!(split(&b, 0.0, 1).is_err());
        assert!(split(&b, 1.0, 1).is_err());
    }

    #[test]
    fn frequency_bins() {
        assert_eq!(frequency_bin(1.0), 10);
        assert_eq!(frequency_bin(1.7), 17);
    }
}
