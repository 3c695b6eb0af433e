//! Synthetic multichannel gesture recordings.
//!
//! Classes come in pairs that activate the same region of the electrode
//! ring and differ only in the spectral shape of the activity, so channel
//! power alone separates at most half of them. Muscle activity is
//! band-limited noise (20–450 Hz) normalized to unit power, shaped by the
//! spatial template and a slow class-specific envelope. Sessions after a subject's first are rotated by one electrode
//! per session and carry per-channel gain drift. Common-mode 50 Hz
//! interference with random phase is added to every recording.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{RecordingSession, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub subjects: usize,
    pub sessions: usize,
    pub classes: usize,
    pub trials_per_class: usize,
    /// Samples per recording.
    pub samples: usize,
    pub channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, subjects: 9, sessions: 2, classes: 8, trials_per_class: 1, samples: 1000, channels: 16 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(Error::Config(format!("need at least 4 channels, got {}", self.channels)));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("class count must be in 2..=256, got {}", self.classes)));
        }
        if self.subjects == 0 || self.sessions == 0 || self.trials_per_class == 0 {
            return Err(Error::Config("subjects, sessions and trials must be positive".into()));
        }
        if self.subjects > u16::MAX as usize || self.sessions > u16::MAX as usize {
            return Err(Error::Config("subject and session counts must fit in 16 bits".into()));
        }
        if self.samples < 64 {
            return Err(Error::Config(format!("recordings need at least 64 samples, got {}", self.samples)));
        }
        Ok(())
    }
}

const SUBJECT_STREAM: u64 = 1 << 40;
const SESSION_STREAM: u64 = 2 << 40;

/// Spatial activation template of each class over the electrode ring;
/// classes `2m` and `2m + 1` share one.
pub fn class_templates(classes: usize, channels: usize) -> Vec<Vec<f64>> {
    let positions = classes.div_ceil(2);
    let spacing = channels as f64 / positions as f64;
    let width = spacing / 2.5;
    let ring_dist = |a: f64, b: f64| {
        let d = (a - b).rem_euclid(channels as f64);
        d.min(channels as f64 - d)
    };
    let bump = |v: usize, centre: f64| (-(ring_dist(v as f64, centre).powi(2)) / (2.0 * width * width)).exp();
    (0..classes)
        .map(|g| {
            let centre = (g / 2) as f64 * spacing;
            (0..channels)
                .map(|v| 0.1 + bump(v, centre))
                .collect()
        })
        .collect()
}

/// Relative spectral weight at `freq` for a class; zero outside 20–450 Hz.
fn spectral_weight(class: usize, freq: f64) -> f64 {
    if !(20.0..=450.0).contains(&freq) {
        return 0.0;
    }
    let (centre, width) = if class % 2 == 0 { (80.0, 50.0) } else { (250.0, 90.0) };
    0.15 + (-(freq - centre).powi(2) / (2.0 * width * width)).exp()
}

/// Unit-RMS band-limited Gaussian noise with the class's spectral shape.
fn shaped_noise(class: usize, len: usize, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut spectrum = vec![Complex64::new(0.0, 0.0); len];
    for k in 1..=len / 2 {
        let freq = k as f64 * SAMPLE_RATE_HZ / len as f64;
        let w = spectral_weight(class, freq);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        if w == 0.0 {
            continue;
        }
        let c = if 2 * k == len { Complex64::new(w * re, 0.0) } else { Complex64::new(w * re, w * im) };
        spectrum[k] = c;
        spectrum[len - k] = c.conj();
    }
    planner.plan_fft_inverse(len).process(&mut spectrum);
    let mut x: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic synthetic dataset; samples are rounded to f32 so the
/// container round-trip is exact.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<RecordingSession>> {
    cfg.validate()?;
    let (t_len, v) = (cfg.samples, cfg.channels);
    let templates = class_templates(cfg.classes, v);
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(cfg.subjects * cfg.sessions * cfg.classes * cfg.trials_per_class);
    let mut index = 0u64;
    for subject in 0..cfg.subjects {
        let mut srng = stream_rng(cfg.seed, Stream::Data, SUBJECT_STREAM + subject as u64);
        let subject_gain: f64 = srng.random_range(0.5..2.0);
        let subject_jitter: Vec<f64> = (0..v).map(|_| (0.15 * gauss(&mut srng)).exp()).collect();
        for session in 0..cfg.sessions {
            let mut erng = stream_rng(cfg.seed, Stream::Data, SESSION_STREAM + (subject * cfg.sessions + session) as u64);
            let shift = session % v;
            let drift: Vec<f64> =
                (0..v).map(|_| if session == 0 { 1.0 } else { (0.1 * gauss(&mut erng)).exp() }).collect();
            for class in 0..cfg.classes {
                for _trial in 0..cfg.trials_per_class {
                    let mut rng = stream_rng(cfg.seed, Stream::Data, index);
                    index += 1;
                    let env_freq = 1.0 + 0.5 * class as f64;
                    let env_phase = rng.random_range(0.0..2.0 * PI);
                    let line_amp = subject_gain * rng.random_range(0.3..0.8);
                    let line_phase = rng.random_range(0.0..2.0 * PI);
                    let mut samples = vec![0.0; t_len * v];
                    for ch in 0..v {
                        // electrodes rotated by `shift` see the pattern of channel ch - shift
                        let src = (ch + v - shift) % v;
                        let amp = subject_gain * templates[class][src] * subject_jitter[src] * drift[ch];
                        let noise = shaped_noise(class, t_len, &mut rng, &mut planner);
                        for (t, n) in noise.into_iter().enumerate() {
                            let time = t as f64 / SAMPLE_RATE_HZ;
                            let envelope = 1.0 + 0.5 * (2.0 * PI * env_freq * time + env_phase).sin();
                            let line = line_amp * (2.0 * PI * 50.0 * time + line_phase).sin();
                            let sensor = 0.05 * subject_gain * gauss(&mut rng);
                            samples[t * v + ch] = amp * envelope * n + line + sensor;
                        }
                    }
                    for s in samples.iter_mut() {
                        *s = *s as f32 as f64;
                    }
                    out.push(RecordingSession::new(
                        Tensor::new(&[t_len, v], samples)?,
                        class,
                        subject as u16,
                        session as u16,
                    )?);
                }
            }
        }
    }
    Ok(out)
}
