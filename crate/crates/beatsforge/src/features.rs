//! Acoustic feature frontend: WAV decoding, 128-bin log-mel filterbanks,
//! corpus normalization statistics, and 16x16 patch extraction.
//!
//! The filterbank contract, fixed here bit-exactly: 16 kHz input, frames
//! of 400 samples hopped by 160 (snip-edges, so `T_f = (N-400)/160 + 1`),
//! per-frame DC removal, Povey window `(0.5 - 0.5 cos(2 pi n/(N-1)))^0.85`,
//! 512-point FFT power spectrum, 128 triangular filters equally spaced on
//! the HTK mel scale `mel(f) = 1127 ln(1 + f/700)` between 20 Hz and
//! 8000 Hz, natural-log energies floored at 1e-10.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};
use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400; // 25 ms
pub const FRAME_HOP: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 128;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const PATCH: usize = 16;
/// Frequency patches per time block: 128 / 16.
pub const FREQ_PATCHES: usize = N_MELS / PATCH;
/// Flattened patch width.
pub const PATCH_DIM: usize = PATCH * PATCH;

// ── waveform ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a 16-bit PCM RIFF/WAVE file, take the first channel, scale by
/// 1/32768, and resample to 16 kHz by linear interpolation if needed.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let wav = parse_wav(&bytes).map_err(|(offset, what)| Error::format(path, offset, what))?;
    Ok(resample_to_16k(wav))
}

struct RawWav {
    samples: Vec<f64>,
    sample_rate: u32,
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<RawWav, (u64, String)> {
    let need = |off: usize, len: usize| -> std::result::Result<&[u8], (u64, String)> {
        bytes
            .get(off..off + len)
            .ok_or((off as u64, format!("truncated: need {len} bytes")))
    };
    if need(0, 4)? != b"RIFF" {
        return Err((0, "missing RIFF magic".into()));
    }
    if need(8, 4)? != b"WAVE" {
        return Err((8, "missing WAVE form type".into()));
    }

    let mut off = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, len
    while off + 8 <= bytes.len() {
        let id: [u8; 4] = need(off, 4)?.try_into().unwrap();
        let size = u32::from_le_bytes(need(off + 4, 4)?.try_into().unwrap()) as usize;
        let body = off + 8;
        match &id {
            b"fmt " => {
                let f = need(body, 16)?;
                fmt = Some((
                    u16::from_le_bytes(f[0..2].try_into().unwrap()),
                    u16::from_le_bytes(f[2..4].try_into().unwrap()),
                    u32::from_le_bytes(f[4..8].try_into().unwrap()),
                    u16::from_le_bytes(f[14..16].try_into().unwrap()),
                ));
            }
            b"data" => {
                need(body, size)?;
                data = Some((body, size));
            }
            _ => {}
        }
        off = body + size + (size & 1); // chunks are word-aligned
    }

    let (codec, channels, rate, bits) =
        fmt.ok_or((12u64, "no fmt chunk".to_string()))?;
    if codec != 1 {
        return Err((12, format!("unsupported codec {codec}, want PCM (1)")));
    }
    if bits != 16 {
        return Err((12, format!("unsupported bit depth {bits}, want 16")));
    }
    if channels == 0 {
        return Err((12, "zero channels".into()));
    }
    let (dstart, dlen) = data.ok_or((off as u64, "no data chunk".to_string()))?;

    let frame_bytes = 2 * channels as usize;
    let n = dlen / frame_bytes;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let p = dstart + i * frame_bytes;
        let v = i16::from_le_bytes(bytes[p..p + 2].try_into().unwrap());
        samples.push(v as f64 / 32768.0);
    }
    Ok(RawWav {
        samples,
        sample_rate: rate,
    })
}

fn resample_to_16k(raw: RawWav) -> Waveform {
    if raw.sample_rate == SAMPLE_RATE {
        return Waveform {
            samples: raw.samples,
            sample_rate: SAMPLE_RATE,
        };
    }
    // linear interpolation; adequate at desk scale, documented as lossy
    let ratio = raw.sample_rate as f64 / SAMPLE_RATE as f64;
    let out_len = if raw.samples.is_empty() {
        0
    } else {
        (((raw.samples.len() - 1) as f64 / ratio).floor() as usize) + 1
    };
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let a = raw.samples[i0];
        let b = *raw.samples.get(i0 + 1).unwrap_or(&a);
        out.push(a + frac * (b - a));
    }
    Waveform {
        samples: out,
        sample_rate: SAMPLE_RATE,
    }
}

/// Write a mono 16-bit PCM WAV; samples are clamped to [-1, 1].
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ── filterbank ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    /// T_f x 128, row-major.
    pub frames: Vec<f64>,
    pub n_frames: usize,
}

impl FbankMatrix {
    pub fn new(n_frames: usize, frames: Vec<f64>) -> Self {
        debug_assert_eq!(frames.len(), n_frames * N_MELS);
        FbankMatrix { frames, n_frames }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.frames[t * N_MELS..(t + 1) * N_MELS]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < FRAME_LEN {
        0
    } else {
        (n_samples - FRAME_LEN) / FRAME_HOP + 1
    }
}

pub fn povey_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let raised = 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / (len - 1) as f64).cos();
            raised.powf(0.85)
        })
        .collect()
}

/// Center frequency (Hz) of mel filter `m` under this module's filterbank
/// layout. Filter m peaks at mel point m+1 of 130 equally spaced points.
pub fn mel_bin_center_hz(m: usize) -> f64 {
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    let step = (hi - lo) / (N_MELS + 1) as f64;
    mel_to_hz(lo + step * (m + 1) as f64)
}

/// Triangular filter weights over the FFT power bins, in the mel domain.
fn mel_filters() -> Vec<Vec<(usize, f64)>> {
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    let step = (hi - lo) / (N_MELS + 1) as f64;
    let n_bins = FFT_SIZE / 2 + 1;
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64))
        .collect();

    (0..N_MELS)
        .map(|m| {
            let left = lo + step * m as f64;
            let center = left + step;
            let right = center + step;
            let mut taps = Vec::new();
            for (k, &bm) in bin_mel.iter().enumerate() {
                if bm > left && bm < right {
                    let w = if bm <= center {
                        (bm - left) / step
                    } else {
                        (right - bm) / step
                    };
                    if w > 0.0 {
                        taps.push((k, w));
                    }
                }
            }
            taps
        })
        .collect()
}

/// Log-mel filterbank of a 16 kHz waveform.
pub fn compute_fbank(w: &Waveform) -> Result<FbankMatrix> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Shape {
            op: "compute_fbank",
            what: format!("expected {SAMPLE_RATE} Hz input, got {}", w.sample_rate),
        });
    }
    if w.samples.len() < FRAME_LEN {
        return Err(Error::Invalid(format!(
            "compute_fbank needs at least {FRAME_LEN} samples, got {}",
            w.samples.len()
        )));
    }
    let n_frames = frame_count(w.samples.len());
    let window = povey_window(FRAME_LEN);
    let filters = mel_filters();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut frames = vec![0.0; n_frames * N_MELS];
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    for t in 0..n_frames {
        let start = t * FRAME_HOP;
        let frame = &w.samples[start..start + FRAME_LEN];
        let mean = frame.iter().sum::<f64>() / FRAME_LEN as f64;
        for i in 0..FFT_SIZE {
            let v = if i < FRAME_LEN {
                (frame[i] - mean) * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);

        let out = &mut frames[t * N_MELS..(t + 1) * N_MELS];
        for (m, taps) in filters.iter().enumerate() {
            let mut energy = 0.0;
            for &(k, wgt) in taps {
                energy += wgt * buf[k].norm_sqr();
            }
            out[m] = energy.max(LOG_FLOOR).ln();
        }
    }
    Ok(FbankMatrix::new(n_frames, frames))
}

// ── normalization ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub corpus_id: String,
}

/// Normalize to zero mean and a standard deviation of one half:
/// `(x - mean) / (2 std)`.
pub fn normalize_fbank(f: &FbankMatrix, s: &NormStats) -> Result<FbankMatrix> {
    if s.std <= 0.0 {
        return Err(Error::Stats(format!(
            "normalization std must be positive, got {} (corpus {})",
            s.std, s.corpus_id
        )));
    }
    let denom = 2.0 * s.std;
    let frames = f.frames.iter().map(|x| (x - s.mean) / denom).collect();
    Ok(FbankMatrix::new(f.n_frames, frames))
}

/// Single-pass (Welford) mean and population std over every filterbank
/// cell of a corpus. A zero std is reported, with a warning on stderr,
/// and rejected later at use.
pub fn compute_dataset_stats<'a>(
    fbanks: impl Iterator<Item = &'a FbankMatrix>,
    corpus_id: &str,
) -> Result<NormStats> {
    let mut count = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for f in fbanks {
        for &x in &f.frames {
            count += 1;
            let delta = x - mean;
            mean += delta / count as f64;
            m2 += delta * (x - mean);
        }
    }
    if count == 0 {
        return Err(Error::Stats("empty corpus".into()));
    }
    let std = (m2 / count as f64).sqrt();
    if std <= 0.0 {
        eprintln!("warning: corpus {corpus_id} has zero feature variance; stats unusable for normalization");
    }
    Ok(NormStats {
        mean,
        std,
        corpus_id: corpus_id.to_string(),
    })
}

// ── patches ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// T x 256 row-major; each row is a flattened 16x16 patch
    /// (time-within-patch major).
    pub patches: Vec<f64>,
    pub n_patches: usize,
    /// (time blocks, frequency blocks); frequency blocks are always 8.
    pub grid: (usize, usize),
    /// Frame count before zero padding.
    pub source_frames: usize,
}

impl PatchSequence {
    pub fn patch(&self, t: usize) -> &[f64] {
        &self.patches[t * PATCH_DIM..(t + 1) * PATCH_DIM]
    }
}

/// Split a (normalized) filterbank into flattened 16x16 patches. The time
/// axis is zero padded to a multiple of 16 — zero is the corpus mean
/// after normalization. Patches are ordered time-major: the 8 frequency
/// patches of a time block are consecutive.
pub fn patchify(f: &FbankMatrix) -> Result<PatchSequence> {
    if f.n_frames == 0 {
        return Err(Error::Shape {
            op: "patchify",
            what: "empty filterbank".into(),
        });
    }
    debug_assert_eq!(f.frames.len(), f.n_frames * N_MELS);
    let time_blocks = f.n_frames.div_ceil(PATCH);
    let n_patches = time_blocks * FREQ_PATCHES;
    let mut patches = vec![0.0; n_patches * PATCH_DIM];
    for tb in 0..time_blocks {
        for fb in 0..FREQ_PATCHES {
            let p = tb * FREQ_PATCHES + fb;
            let out = &mut patches[p * PATCH_DIM..(p + 1) * PATCH_DIM];
            for i in 0..PATCH {
                let frame = tb * PATCH + i;
                if frame >= f.n_frames {
                    break; // rows beyond the source stay zero
                }
                let src = &f.frames[frame * N_MELS + fb * PATCH..frame * N_MELS + (fb + 1) * PATCH];
                out[i * PATCH..(i + 1) * PATCH].copy_from_slice(src);
            }
        }
    }
    Ok(PatchSequence {
        patches,
        n_patches,
        grid: (time_blocks, FREQ_PATCHES),
        source_frames: f.n_frames,
    })
}

/// Inverse of [`patchify`] over the padded grid; the first
/// `source_frames` rows reproduce the input exactly.
pub fn unpatchify(p: &PatchSequence) -> FbankMatrix {
    let (time_blocks, freq_blocks) = p.grid;
    let padded = time_blocks * PATCH;
    let mut frames = vec![0.0; padded * N_MELS];
    for tb in 0..time_blocks {
        for fb in 0..freq_blocks {
            let patch = p.patch(tb * freq_blocks + fb);
            for i in 0..PATCH {
                let frame = tb * PATCH + i;
                frames[frame * N_MELS + fb * PATCH..frame * N_MELS + (fb + 1) * PATCH]
                    .copy_from_slice(&patch[i * PATCH..(i + 1) * PATCH]);
            }
        }
    }
    FbankMatrix::new(padded, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, amp: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64).round() as usize;
        Waveform {
            samples: (0..n)
                .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn one_second_gives_98_frames() {
        assert_eq!(frame_count(16_000), 98);
        let f = compute_fbank(&tone(440.0, 1.0, 0.5)).unwrap();
        assert_eq!(f.n_frames, 98);
    }

    #[test]
    fn frame_count_formula_holds_for_random_lengths() {
        let mut rng = numcore::Rng::new(4);
        for _ in 0..200 {
            let n = 400 + rng.below(40_000) as usize;
            assert_eq!(frame_count(n), (n - 400) / 160 + 1);
        }
    }

    #[test]
    fn all_zero_waveform_hits_log_floor() {
        let w = Waveform {
            samples: vec![0.0; 800],
            sample_rate: SAMPLE_RATE,
        };
        let f = compute_fbank(&w).unwrap();
        let expected = LOG_FLOOR.ln();
        assert!(f.frames.iter().all(|&x| x == expected));
    }

    #[test]
    fn too_short_input_names_minimum() {
        let w = Waveform {
            samples: vec![0.0; 399],
            sample_rate: SAMPLE_RATE,
        };
        let err = compute_fbank(&w).unwrap_err().to_string();
        assert!(err.contains("400"), "{err}");
    }

    #[test]
    fn one_khz_tone_peaks_at_nearest_mel_center() {
        let f = compute_fbank(&tone(1000.0, 1.0, 0.5)).unwrap();
        // oracle: compute filter centers directly from the mel scale
        let nearest_hz = (0..N_MELS)
            .min_by(|&a, &b| {
                let da = (mel_bin_center_hz(a) - 1000.0).abs();
                let db = (mel_bin_center_hz(b) - 1000.0).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let nearest_mel = (0..N_MELS)
            .min_by(|&a, &b| {
                let da = (hz_to_mel(mel_bin_center_hz(a)) - hz_to_mel(1000.0)).abs();
                let db = (hz_to_mel(mel_bin_center_hz(b)) - hz_to_mel(1000.0)).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(nearest_hz, nearest_mel);

        // mid-clip frame, away from onset
        let row = f.row(f.n_frames / 2);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, nearest_hz);
    }

    #[test]
    fn povey_window_is_symmetric() {
        let w = povey_window(FRAME_LEN);
        for n in 0..FRAME_LEN {
            assert!((w[n] - w[FRAME_LEN - 1 - n]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_input_is_zero() {
        let f = FbankMatrix::new(2, vec![3.5; 2 * N_MELS]);
        let s = NormStats {
            mean: 3.5,
            std: 1.0,
            corpus_id: "t".into(),
        };
        let out = normalize_fbank(&f, &s).unwrap();
        assert!(out.frames.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_reference_stats_cell() {
        // mean/std pair from the reference corpus row of the defaults table
        let f = FbankMatrix::new(1, {
            let mut v = vec![15.41663; N_MELS];
            v[0] = 22.0;
            v
        });
        let s = NormStats {
            mean: 15.41663,
            std: 6.55582,
            corpus_id: "ref".into(),
        };
        let out = normalize_fbank(&f, &s).unwrap();
        assert!((out.frames[0] - 0.5021).abs() < 1e-4, "{}", out.frames[0]);
    }

    #[test]
    fn normalize_rejects_nonpositive_std() {
        let f = FbankMatrix::new(1, vec![0.0; N_MELS]);
        let s = NormStats {
            mean: 0.0,
            std: 0.0,
            corpus_id: "t".into(),
        };
        assert!(normalize_fbank(&f, &s).is_err());
    }

    #[test]
    fn stats_of_two_constant_fbanks() {
        let a = FbankMatrix::new(1, vec![2.0; N_MELS]);
        let b = FbankMatrix::new(1, vec![6.0; N_MELS]);
        let s = compute_dataset_stats([&a, &b].into_iter(), "pair").unwrap();
        assert!((s.mean - 4.0).abs() < 1e-12);
        assert!((s.std - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stats_single_pass_matches_two_pass_oracle() {
        let mut rng = numcore::Rng::new(8);
        let fbanks: Vec<FbankMatrix> = (0..4)
            .map(|_| {
                let n = 3 + rng.below(5) as usize;
                FbankMatrix::new(n, (0..n * N_MELS).map(|_| 5.0 * rng.normal()).collect())
            })
            .collect();
        let s = compute_dataset_stats(fbanks.iter(), "rand").unwrap();

        let all: Vec<f64> = fbanks.iter().flat_map(|f| f.frames.clone()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
        assert!((s.mean - mean).abs() < 1e-9);
        assert!((s.std - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn stats_empty_corpus_is_an_error() {
        assert!(compute_dataset_stats(std::iter::empty(), "none").is_err());
    }

    #[test]
    fn patchify_exact_multiple() {
        let f = FbankMatrix::new(96, (0..96 * N_MELS).map(|i| i as f64).collect());
        let p = patchify(&f).unwrap();
        assert_eq!(p.n_patches, 48);
        assert_eq!(p.grid, (6, 8));
        assert_eq!(p.patch(0).len(), 256);
    }

    #[test]
    fn patchify_pads_to_multiple_of_16() {
        let f = FbankMatrix::new(100, vec![1.0; 100 * N_MELS]);
        let p = patchify(&f).unwrap();
        assert_eq!(p.grid, (7, 8));
        assert_eq!(p.n_patches, 56);
        // padded frames are zero: last time block rows 4..16 of any patch
        let last = p.patch(55);
        assert!(last[4 * PATCH..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unpatchify_round_trips_unpadded_region() {
        let mut rng = numcore::Rng::new(77);
        let n = 87;
        let f = FbankMatrix::new(n, (0..n * N_MELS).map(|_| rng.normal()).collect());
        let p = patchify(&f).unwrap();
        let back = unpatchify(&p);
        assert_eq!(&back.frames[..n * N_MELS], f.frames.as_slice());
    }

    #[test]
    fn patch_count_matches_grid_formula() {
        let mut rng = numcore::Rng::new(6);
        for _ in 0..50 {
            let n = 1 + rng.below(200) as usize;
            let f = FbankMatrix::new(n, vec![0.25; n * N_MELS]);
            let p = patchify(&f).unwrap();
            assert_eq!(p.n_patches, n.div_ceil(16) * 8);
        }
    }

    #[test]
    fn wav_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");

        // 16 kHz zeros round-trip
        let w = Waveform {
            samples: vec![0.0; 16_000],
            sample_rate: SAMPLE_RATE,
        };
        save_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples.len(), 16_000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn wav_min_sample_scales_to_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.wav");
        // hand-build a file holding the single sample -32768
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&38u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&(-32768i16).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let w = load_wav(&path).unwrap();
        assert_eq!(w.samples, vec![-1.0]);
    }

    #[test]
    fn wav_8k_resamples_to_about_double() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("8k.wav");
        let n = 4000;
        let w8 = Waveform {
            samples: (0..n).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(),
            sample_rate: 8000,
        };
        save_wav(&path, &w8).unwrap();
        let w16 = load_wav(&path).unwrap();
        assert_eq!(w16.sample_rate, SAMPLE_RATE);
        let expected = 2 * n - 1;
        assert!(
            (w16.samples.len() as i64 - expected as i64).abs() <= 1,
            "got {} want about {expected}",
            w16.samples.len()
        );
    }

    #[test]
    fn wav_malformed_header_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFFxxxxNOPE").unwrap();
        let err = load_wav(&path).unwrap_err().to_string();
        assert!(err.contains("byte 8"), "{err}");
    }

    #[test]
    fn identical_bytes_give_bit_identical_patches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.wav");
        save_wav(&path, &tone(700.0, 0.5, 0.4)).unwrap();
        let p1 = patchify(&compute_fbank(&load_wav(&path).unwrap()).unwrap()).unwrap();
        let p2 = patchify(&compute_fbank(&load_wav(&path).unwrap()).unwrap()).unwrap();
        assert_eq!(p1, p2);
    }
}
