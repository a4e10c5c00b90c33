//! Deterministic synthetic labeled audio, plus waveform disturbances.
//!
//! Stands in for a real tagged corpus at desk scale: five generator
//! families (tones, chirps, amplitude-modulated noise, click trains,
//! harmonic stacks) whose classes are acoustically distinct by
//! construction. Generation is a pure function of (specs, seed).

use crate::error::{Error, Result};
use crate::features::{save_wav, Waveform, SAMPLE_RATE};
use numcore::Rng;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorKind {
    /// Pure tone with fundamental drawn from [f_lo, f_hi].
    Tone { f_lo: f64, f_hi: f64 },
    /// Linear sweep from around f_start to around f_end.
    Chirp { f_start: f64, f_end: f64 },
    /// White noise, amplitude modulated at a rate in [rate_lo, rate_hi] Hz.
    AmNoise { rate_lo: f64, rate_hi: f64 },
    /// Decaying click train at a rate in [rate_lo, rate_hi] Hz.
    Clicks { rate_lo: f64, rate_hi: f64 },
    /// Harmonic stack with fundamental in [f_lo, f_hi].
    Harmonic { f_lo: f64, f_hi: f64, partials: usize },
}

impl GeneratorKind {
    /// Fundamental band for overlap checking; None for broadband kinds.
    fn band(&self) -> Option<(f64, f64)> {
        match *self {
            GeneratorKind::Tone { f_lo, f_hi } => Some((f_lo, f_hi)),
            GeneratorKind::Harmonic { f_lo, f_hi, .. } => Some((f_lo, f_hi)),
            _ => None,
        }
    }

    fn same_family(&self, other: &GeneratorKind) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClassSpec {
    pub class_id: usize,
    pub name: String,
    pub kind: GeneratorKind,
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub duration_lo_s: f64,
    pub duration_hi_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    Clean,
    /// Additive white Gaussian noise at a target signal-to-noise ratio.
    Noise { snr_db: f64 },
    /// Single decaying echo: y[n] = x[n] + gain * x[n - delay].
    Echo { delay_ms: f64, gain: f64 },
}

impl fmt::Display for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Disturbance::Clean => write!(f, "clean"),
            Disturbance::Noise { snr_db } => write!(f, "noise({snr_db}dB)"),
            Disturbance::Echo { delay_ms, gain } => write!(f, "echo({delay_ms}ms,{gain})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub wave: Waveform,
    pub class_id: usize,
    pub clip_id: String,
    pub disturbance: Disturbance,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub clips: Vec<LabeledClip>,
    pub n_classes: usize,
}

/// Stable 64-bit FNV-1a; the train/valid split must not depend on the
/// standard library's hasher, which is randomized.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic 80/20 split on the clip id hash.
pub fn is_train_clip(clip_id: &str) -> bool {
    fnv1a64(clip_id.as_bytes()) % 10 < 8
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &LabeledClip> {
        self.clips.iter().filter(|c| is_train_clip(&c.clip_id))
    }

    pub fn valid(&self) -> impl Iterator<Item = &LabeledClip> {
        self.clips.iter().filter(|c| !is_train_clip(&c.clip_id))
    }
}

/// Default five-class corpus specification.
///
/// Two narrow tone bands sit close together so that class identity is not
/// recoverable from coarse energy statistics alone, while remaining
/// trivially separable from full 128-bin mean filterbanks.
pub fn default_class_specs() -> Vec<SynthClassSpec> {
    let mk = |class_id: usize, name: &str, kind: GeneratorKind, seed: u64| SynthClassSpec {
        class_id,
        name: name.to_string(),
        kind,
        amp_lo: 0.25,
        amp_hi: 0.55,
        duration_lo_s: 0.64,
        duration_hi_s: 0.64,
        seed,
    };
    vec![
        mk(0, "tone_a", GeneratorKind::Tone { f_lo: 850.0, f_hi: 950.0 }, 101),
        mk(1, "tone_b", GeneratorKind::Tone { f_lo: 1150.0, f_hi: 1280.0 }, 102),
        mk(
            2,
            "harmonic",
            GeneratorKind::Harmonic { f_lo: 220.0, f_hi: 320.0, partials: 5 },
            103,
        ),
        mk(3, "chirp", GeneratorKind::Chirp { f_start: 500.0, f_end: 3500.0 }, 104),
        mk(4, "am_noise", GeneratorKind::AmNoise { rate_lo: 4.0, rate_hi: 8.0 }, 105),
    ]
}

fn validate_specs(specs: &[SynthClassSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        if a.amp_lo <= 0.0 || a.amp_hi > 1.0 || a.amp_lo > a.amp_hi {
            return Err(Error::Config(format!("class {}: bad amplitude range", a.name)));
        }
        if a.duration_lo_s <= 0.0 || a.duration_lo_s > a.duration_hi_s {
            return Err(Error::Config(format!("class {}: bad duration range", a.name)));
        }
        for b in specs.iter().skip(i + 1) {
            if a.class_id == b.class_id {
                return Err(Error::Config(format!(
                    "classes {} and {} share id {}",
                    a.name, b.name, a.class_id
                )));
            }
            if a.kind.same_family(&b.kind) {
                match (a.kind.band(), b.kind.band()) {
                    (Some((lo1, hi1)), Some((lo2, hi2))) => {
                        if lo1 <= hi2 && lo2 <= hi1 {
                            return Err(Error::Config(format!(
                                "classes {} and {} have overlapping frequency bands",
                                a.name, b.name
                            )));
                        }
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "classes {} and {} use the same broadband generator",
                            a.name, b.name
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn synth_clip(spec: &SynthClassSpec, rng: &mut Rng) -> Vec<f64> {
    let dur = rng.uniform_in(spec.duration_lo_s, spec.duration_hi_s);
    let n = (dur * SAMPLE_RATE as f64).round() as usize;
    let amp = rng.uniform_in(spec.amp_lo, spec.amp_hi);
    let sr = SAMPLE_RATE as f64;
    let tau = std::f64::consts::TAU;

    match spec.kind {
        GeneratorKind::Tone { f_lo, f_hi } => {
            let f = rng.uniform_in(f_lo, f_hi);
            let phase = rng.uniform_in(0.0, tau);
            (0..n).map(|i| amp * (tau * f * i as f64 / sr + phase).sin()).collect()
        }
        GeneratorKind::Chirp { f_start, f_end } => {
            let f0 = f_start * rng.uniform_in(0.9, 1.1);
            let f1 = f_end * rng.uniform_in(0.9, 1.1);
            let phase = rng.uniform_in(0.0, tau);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let inst = f0 * t + (f1 - f0) * t * t / (2.0 * dur);
                    amp * (tau * inst + phase).sin()
                })
                .collect()
        }
        GeneratorKind::AmNoise { rate_lo, rate_hi } => {
            let rate = rng.uniform_in(rate_lo, rate_hi);
            let phase = rng.uniform_in(0.0, tau);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let env = 0.5 + 0.5 * (tau * rate * t + phase).sin();
                    amp * env * rng.normal() * 0.5
                })
                .collect()
        }
        GeneratorKind::Clicks { rate_lo, rate_hi } => {
            let rate = rng.uniform_in(rate_lo, rate_hi);
            let period = (sr / rate) as usize;
            let offset = rng.below(period as u64) as usize;
            let mut out = vec![0.0; n];
            let decay = 64usize;
            let mut pos = offset;
            while pos < n {
                for d in 0..decay.min(n - pos) {
                    out[pos + d] += amp * (-(d as f64) / 12.0).exp();
                }
                pos += period;
            }
            out
        }
        GeneratorKind::Harmonic { f_lo, f_hi, partials } => {
            let f = rng.uniform_in(f_lo, f_hi);
            let phases: Vec<f64> = (0..partials).map(|_| rng.uniform_in(0.0, tau)).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let mut s = 0.0;
                    for (h, ph) in phases.iter().enumerate() {
                        let k = (h + 1) as f64;
                        s += (amp / k) * (tau * k * f * t + ph).sin();
                    }
                    s
                })
                .collect()
        }
    }
}

/// Generate `n_per_class` clips per class. Each clip draws from its own
/// stream derived from (seed, class seed, index), so the corpus is a pure
/// function of its inputs and insensitive to generation order.
pub fn generate_corpus(specs: &[SynthClassSpec], n_per_class: usize, seed: u64) -> Result<Corpus> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    validate_specs(specs)?;
    let mut clips = Vec::with_capacity(specs.len() * n_per_class);
    for spec in specs {
        for i in 0..n_per_class {
            let mut rng = Rng::for_stream(seed ^ spec.seed, i as u64);
            let samples = synth_clip(spec, &mut rng);
            clips.push(LabeledClip {
                wave: Waveform {
                    samples,
                    sample_rate: SAMPLE_RATE,
                },
                class_id: spec.class_id,
                clip_id: format!("{}_{i:04}", spec.name),
                disturbance: Disturbance::Clean,
            });
        }
    }
    Ok(Corpus {
        clips,
        n_classes: specs.iter().map(|s| s.class_id + 1).max().unwrap_or(0),
    })
}

/// Apply a disturbance, preserving class id and duration.
pub fn disturb(clip: &LabeledClip, disturbance: Disturbance, seed: u64) -> Result<LabeledClip> {
    let samples = match disturbance {
        Disturbance::Clean => clip.wave.samples.clone(),
        Disturbance::Noise { snr_db } => {
            if !(0.0..=40.0).contains(&snr_db) {
                return Err(Error::Config(format!("snr {snr_db} dB outside [0, 40]")));
            }
            let n = clip.wave.samples.len().max(1) as f64;
            let power = clip.wave.samples.iter().map(|x| x * x).sum::<f64>() / n;
            let target = power / 10f64.powf(snr_db / 10.0);
            let mut rng = Rng::for_stream(seed, fnv1a64(clip.clip_id.as_bytes()));
            let mut noise: Vec<f64> = clip.wave.samples.iter().map(|_| rng.normal()).collect();
            // rescale so the realised noise power hits the target exactly
            let realised = noise.iter().map(|x| x * x).sum::<f64>() / n;
            let scale = (target / realised.max(1e-300)).sqrt();
            for v in noise.iter_mut() {
                *v *= scale;
            }
            clip.wave
                .samples
                .iter()
                .zip(noise.iter())
                .map(|(x, e)| x + e)
                .collect()
        }
        Disturbance::Echo { delay_ms, gain } => {
            if !(10.0..=100.0).contains(&delay_ms) {
                return Err(Error::Config(format!("echo delay {delay_ms} ms outside [10, 100]")));
            }
            if !(gain > 0.0 && gain <= 0.9) {
                return Err(Error::Config(format!("echo gain {gain} outside (0, 0.9]")));
            }
            let delay = (delay_ms / 1000.0 * clip.wave.sample_rate as f64).round() as usize;
            clip.wave
                .samples
                .iter()
                .enumerate()
                .map(|(n, &x)| {
                    if n >= delay {
                        x + gain * clip.wave.samples[n - delay]
                    } else {
                        x
                    }
                })
                .collect()
        }
    };
    Ok(LabeledClip {
        wave: Waveform {
            samples,
            sample_rate: clip.wave.sample_rate,
        },
        class_id: clip.class_id,
        clip_id: format!("{}+{disturbance}", clip.clip_id),
        disturbance,
    })
}

// ── manifest io ──────────────────────────────────────────────────────

/// Write WAVs plus a `manifest.csv` (clip id, path, class, disturbance tag)
/// under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("clip_id,path,class,disturbance\n");
    for clip in &corpus.clips {
        let file = format!("{}.wav", clip.clip_id.replace(['(', ')', ',', '+'], "_"));
        save_wav(&dir.join(&file), &clip.wave)?;
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            clip.clip_id, file, clip.class_id, clip.disturbance
        ));
    }
    std::fs::write(dir.join("manifest.csv"), manifest).map_err(|e| Error::io(dir, e))
}

/// Read a corpus back from a manifest directory.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut clips = Vec::new();
    let mut n_classes = 0;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Invalid(format!(
                "{}: line {}: expected 4 fields",
                manifest_path.display(),
                lineno + 1
            )));
        }
        let class_id: usize = fields[2]
            .parse()
            .map_err(|_| Error::Invalid(format!("bad class id {:?}", fields[2])))?;
        n_classes = n_classes.max(class_id + 1);
        clips.push(LabeledClip {
            wave: crate::features::load_wav(&dir.join(fields[1]))?,
            class_id,
            clip_id: fields[0].to_string(),
            disturbance: Disturbance::Clean, // tag is informational on read
        });
    }
    Ok(Corpus { clips, n_classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_fbank, N_MELS};

    #[test]
    fn corpus_size_and_split() {
        let corpus = generate_corpus(&default_class_specs(), 20, 7).unwrap();
        assert_eq!(corpus.clips.len(), 100);
        let train = corpus.train().count();
        let valid = corpus.valid().count();
        assert_eq!(train + valid, 100);
        // 80/20 by hash; allow slack around the expected counts
        assert!((train as i64 - 80).abs() <= 10, "train {train}");
        assert!(valid >= 10, "valid {valid}");
    }

    #[test]
    fn same_seed_reproduces_sample_buffers() {
        let a = generate_corpus(&default_class_specs(), 3, 11).unwrap();
        let b = generate_corpus(&default_class_specs(), 3, 11).unwrap();
        for (x, y) in a.clips.iter().zip(b.clips.iter()) {
            assert_eq!(x.wave.samples, y.wave.samples);
        }
    }

    #[test]
    fn overlapping_tone_bands_rejected() {
        let mut specs = default_class_specs();
        specs[1].kind = GeneratorKind::Tone { f_lo: 900.0, f_hi: 1000.0 };
        assert!(generate_corpus(&specs, 2, 1).is_err());
    }

    #[test]
    fn distinct_tone_classes_have_distinct_fbank_peaks() {
        let specs = vec![
            SynthClassSpec {
                class_id: 0,
                name: "khz1".into(),
                kind: GeneratorKind::Tone { f_lo: 1000.0, f_hi: 1000.0 },
                amp_lo: 0.5,
                amp_hi: 0.5,
                duration_lo_s: 0.5,
                duration_hi_s: 0.5,
                seed: 1,
            },
            SynthClassSpec {
                class_id: 1,
                name: "khz3".into(),
                kind: GeneratorKind::Tone { f_lo: 3000.0, f_hi: 3000.0 },
                amp_lo: 0.5,
                amp_hi: 0.5,
                duration_lo_s: 0.5,
                duration_hi_s: 0.5,
                seed: 2,
            },
        ];
        let corpus = generate_corpus(&specs, 1, 0).unwrap();
        let peak = |clip: &LabeledClip| {
            let f = compute_fbank(&clip.wave).unwrap();
            let row = f.row(f.n_frames / 2);
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_ne!(peak(&corpus.clips[0]), peak(&corpus.clips[1]));
    }

    #[test]
    fn echo_with_tiny_gain_approaches_identity() {
        let corpus = generate_corpus(&default_class_specs(), 1, 3).unwrap();
        let clip = &corpus.clips[0];
        let echoed = disturb(clip, Disturbance::Echo { delay_ms: 50.0, gain: 1e-9 }, 0).unwrap();
        for (a, b) in clip.wave.samples.iter().zip(echoed.wave.samples.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(disturb(clip, Disturbance::Echo { delay_ms: 50.0, gain: 0.0 }, 0).is_err());
    }

    #[test]
    fn noise_snr_is_accurate() {
        let corpus = generate_corpus(&default_class_specs(), 20, 5).unwrap();
        for (i, clip) in corpus.clips.iter().enumerate().take(100) {
            let snr_db = 20.0;
            let noisy = disturb(clip, Disturbance::Noise { snr_db }, 42 + i as u64).unwrap();
            let ps = clip.wave.samples.iter().map(|x| x * x).sum::<f64>()
                / clip.wave.samples.len() as f64;
            let pn = clip
                .wave
                .samples
                .iter()
                .zip(noisy.wave.samples.iter())
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                / clip.wave.samples.len() as f64;
            let measured = 10.0 * (ps / pn).log10();
            assert!(
                (measured - snr_db).abs() < 0.5,
                "clip {i}: measured {measured} dB"
            );
        }
    }

    #[test]
    fn snr_40db_power_ratio() {
        let corpus = generate_corpus(&default_class_specs(), 1, 9).unwrap();
        let clip = &corpus.clips[0];
        let noisy = disturb(clip, Disturbance::Noise { snr_db: 40.0 }, 1).unwrap();
        let ps = clip.wave.samples.iter().map(|x| x * x).sum::<f64>()
            / clip.wave.samples.len() as f64;
        let pn = clip
            .wave
            .samples
            .iter()
            .zip(noisy.wave.samples.iter())
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            / clip.wave.samples.len() as f64;
        assert!((pn / (ps / 1e4) - 1.0).abs() < 0.01, "ratio {}", pn / (ps / 1e4));
    }

    #[test]
    fn disturbance_preserves_class_and_duration() {
        let corpus = generate_corpus(&default_class_specs(), 1, 2).unwrap();
        let clip = &corpus.clips[3];
        for d in [
            Disturbance::Noise { snr_db: 20.0 },
            Disturbance::Echo { delay_ms: 30.0, gain: 0.5 },
        ] {
            let out = disturb(clip, d, 5).unwrap();
            assert_eq!(out.class_id, clip.class_id);
            assert_eq!(out.wave.samples.len(), clip.wave.samples.len());
        }
    }

    #[test]
    fn out_of_range_disturbance_params_rejected() {
        let corpus = generate_corpus(&default_class_specs(), 1, 2).unwrap();
        let clip = &corpus.clips[0];
        assert!(disturb(clip, Disturbance::Noise { snr_db: 50.0 }, 0).is_err());
        assert!(disturb(clip, Disturbance::Echo { delay_ms: 5.0, gain: 0.5 }, 0).is_err());
        assert!(disturb(clip, Disturbance::Echo { delay_ms: 50.0, gain: 0.95 }, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&default_class_specs(), 2, 13).unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.clips.len(), corpus.clips.len());
        assert_eq!(back.n_classes, corpus.n_classes);
        for (a, b) in corpus.clips.iter().zip(back.clips.iter()) {
            assert_eq!(a.clip_id, b.clip_id);
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.wave.samples.len(), b.wave.samples.len());
        }
    }

    #[test]
    fn mean_fbank_vectors_are_linearly_separable() {
        // nearest-centroid on mean filterbank vectors must clear 90% on
        // the clean default corpus, so downstream experiments are solvable
        let corpus = generate_corpus(&default_class_specs(), 20, 7).unwrap();
        let feats: Vec<(Vec<f64>, usize)> = corpus
            .clips
            .iter()
            .map(|c| {
                let f = compute_fbank(&c.wave).unwrap();
                let mut mean = vec![0.0; N_MELS];
                for t in 0..f.n_frames {
                    for (m, v) in mean.iter_mut().zip(f.row(t)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= f.n_frames as f64);
                (mean, c.class_id)
            })
            .collect();

        // train a softmax regression with the workspace optimizer
        let n_classes = corpus.n_classes;
        let train: Vec<usize> = (0..corpus.clips.len())
            .filter(|&i| is_train_clip(&corpus.clips[i].clip_id))
            .collect();
        let valid: Vec<usize> = (0..corpus.clips.len())
            .filter(|&i| !is_train_clip(&corpus.clips[i].clip_id))
            .collect();

        let mut store = numcore::ParamStore::new();
        let w = store.add_zeros("w", vec![N_MELS, n_classes]);
        let b = store.add_zeros("b", vec![n_classes]);
        let mut opt = numcore::AdamW::new(0.05).with_weight_decay(0.0);
        let x_train: Vec<f64> = train.iter().flat_map(|&i| feats[i].0.clone()).collect();
        let y_train: Vec<usize> = train.iter().map(|&i| feats[i].1).collect();
        for _ in 0..300 {
            let mut tape = numcore::Tape::new();
            let bind = store.bind(&mut tape);
            let x = tape.leaf(x_train.clone(), vec![train.len(), N_MELS], false);
            let h = tape.matmul(x, bind.var(w)).unwrap();
            let logits = tape.add_row(h, bind.var(b)).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &y_train).unwrap();
            tape.backward(loss).unwrap();
            store.pull_grads(&tape, &bind).unwrap();
            opt.step(&mut store).unwrap();
        }

        let mut correct = 0;
        for &i in &valid {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..n_classes {
                let mut score = store.tensor(b).data[c];
                for (j, &x) in feats[i].0.iter().enumerate() {
                    score += x * store.tensor(w).data[j * n_classes + c];
                }
                if score > best.0 {
                    best = (score, c);
                }
            }
            if best.1 == feats[i].1 {
                correct += 1;
            }
        }
        let acc = correct as f64 / valid.len() as f64;
        assert!(acc > 0.9, "separability {acc}");
    }
}
