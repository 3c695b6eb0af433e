//! Recordings, the preprocessing chain (band-stop → segment → normalise),
//! dataset splits, the synthetic gesture generator and the container format.

pub mod container;
mod filter;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

pub use container::{dataset_digest, encode, decode, load, read_csv_recording, save};
pub use filter::{BandStop, Biquad};
pub use synth::{synth_dataset, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE_HZ: f64 = 1000.0;

/// One labelled multichannel recording, samples stored `[T×V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordingSession {
    pub samples: Tensor,
    pub label: usize,
    pub subject: u16,
    pub session: u16,
}

impl RecordingSession {
    pub fn new(samples: Tensor, label: usize, subject: u16, session: u16) -> Result<Self> {
        if samples.shape().len() != 2 {
            return Err(Error::Data(format!("recording must be [T, V], got {:?}", samples.shape())));
        }
        if label > u8::MAX as usize {
            return Err(Error::Data(format!("label {label} does not fit the container")));
        }
        Ok(Self { samples, label, subject, session })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }
}

/// Preprocessing settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub window: usize,
    pub step: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { window: 64, step: 8, low_hz: 45.0, high_hz: 55.0, order: 4 }
    }
}

/// Normalised windows cut from one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// Each `[window×V]`, values in `[-1, 1]`.
    pub patches: Vec<Tensor>,
    pub step: usize,
    /// Index of the originating recording, per patch.
    pub source_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub subject: u16,
    pub session: u16,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Apply the band-stop per channel of a `[T×V]` tensor, zero phase.
pub fn bandstop_filter(x: &Tensor, low_hz: f64, high_hz: f64, order: usize) -> Result<Tensor> {
    let (t, v) = shape2(x)?;
    if t <= 3 * order {
        return Err(Error::Data(format!("{t} samples is too short for an order-{order} filter")));
    }
    let filter = BandStop::design(low_hz, high_hz, order, SAMPLE_RATE_HZ)?;
    let mut out = Tensor::zeros(&[t, v]);
    let mut column = vec![0.0; t];
    for ch in 0..v {
        for (i, c) in column.iter_mut().enumerate() {
            *c = x.data()[i * v + ch];
        }
        for (i, y) in filter.filtfilt(&column).into_iter().enumerate() {
            out.data_mut()[i * v + ch] = y;
        }
    }
    Ok(out)
}

fn shape2(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        &[t, v] => Ok((t, v)),
        s => Err(Error::Data(format!("expected [T, V], got {s:?}"))),
    }
}

/// Overlapping windows; `floor((T - window) / step) + 1` of them.
pub fn segment(x: &Tensor, window: usize, step: usize) -> Result<Vec<Tensor>> {
    let (t, v) = shape2(x)?;
    if window == 0 || step == 0 {
        return Err(Error::Config("window and step must be positive".into()));
    }
    if t < window {
        return Err(Error::Data(format!("recording of {t} samples is shorter than the {window}-sample window")));
    }
    let count = (t - window) / step + 1;
    (0..count)
        .map(|i| {
            let start = i * step * v;
            Tensor::new(&[window, v], x.data()[start..start + window * v].to_vec())
        })
        .collect()
}

/// Affine map of the whole patch onto `[-1, 1]`; a constant patch maps to zeros.
pub fn normalize(patch: &Tensor) -> Tensor {
    let (lo, hi) = patch
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span == 0.0 || !span.is_finite() {
        return Tensor::zeros(patch.shape());
    }
    let scale = 2.0 / span;
    let mut out = patch.clone();
    for v in out.data_mut() {
        // pin the extremes so they land on ±1 exactly
        *v = if *v == lo {
            -1.0
        } else if *v == hi {
            1.0
        } else {
            ((*v - lo) * scale - 1.0).clamp(-1.0, 1.0)
        };
    }
    out
}

/// Full chain for one recording: filter, segment, normalise.
pub fn preprocess(rec: &RecordingSession, source_id: usize, cfg: &PreprocessConfig) -> Result<PatchSet> {
    let filtered = bandstop_filter(&rec.samples, cfg.low_hz, cfg.high_hz, cfg.order)?;
    let patches: Vec<Tensor> = segment(&filtered, cfg.window, cfg.step)?.iter().map(normalize).collect();
    let n = patches.len();
    Ok(PatchSet {
        patches,
        step: cfg.step,
        source_ids: vec![source_id; n],
        labels: vec![rec.label; n],
        subject: rec.subject,
        session: rec.session,
    })
}

/// Evaluation protocol used to split recordings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on each subject's first session, test on the remaining ones.
    InterSession,
    /// Within each (subject, session, class), alternate trials between sides.
    IntraSession,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter-session" => Ok(Protocol::InterSession),
            "intra-session" => Ok(Protocol::IntraSession),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::InterSession => "inter-session",
            Protocol::IntraSession => "intra-session",
        })
    }
}

/// Recording indices assigned to each side of a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub protocol: Protocol,
}

impl SplitPlan {
    pub fn new(recordings: &[RecordingSession], protocol: Protocol) -> Result<Self> {
        let plan = match protocol {
            Protocol::InterSession => inter_session_plan(recordings)?,
            Protocol::IntraSession => intra_session_plan(recordings)?,
        };
        plan.validate(recordings)?;
        Ok(plan)
    }

    /// Check the protocol's leakage invariant over every (subject, session) pair.
    pub fn validate(&self, recordings: &[RecordingSession]) -> Result<()> {
        if self.protocol != Protocol::InterSession {
            return Ok(());
        }
        let pairs = |idx: &[usize]| -> BTreeSet<(u16, u16)> {
            idx.iter().map(|&i| (recordings[i].subject, recordings[i].session)).collect()
        };
        let (train, test) = (pairs(&self.train), pairs(&self.test));
        if let Some((subject, session)) = train.intersection(&test).next() {
            return Err(Error::Data(format!(
                "session leakage: subject {subject} session {session} appears in both train and test"
            )));
        }
        let subjects = |p: &BTreeSet<(u16, u16)>| p.iter().map(|x| x.0).collect::<BTreeSet<_>>();
        if let Some(s) = subjects(&train).symmetric_difference(&subjects(&test)).next() {
            return Err(Error::Data(format!("subject {s} is not present on both sides of the inter-session split")));
        }
        Ok(())
    }
}

fn inter_session_plan(recordings: &[RecordingSession]) -> Result<SplitPlan> {
    let mut first_session: BTreeMap<u16, u16> = BTreeMap::new();
    for r in recordings {
        let e = first_session.entry(r.subject).or_insert(r.session);
        *e = (*e).min(r.session);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in recordings.iter().enumerate() {
        if r.session == first_session[&r.subject] {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    for (&subject, &session) in &first_session {
        if !test.iter().any(|&i| recordings[i].subject == subject) {
            return Err(Error::Data(format!(
                "subject {subject} only has session {session}; inter-session split needs two sessions"
            )));
        }
    }
    Ok(SplitPlan { train, test, protocol: Protocol::InterSession })
}

fn intra_session_plan(recordings: &[RecordingSession]) -> Result<SplitPlan> {
    let mut groups: BTreeMap<(u16, u16, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in recordings.iter().enumerate() {
        groups.entry((r.subject, r.session, r.label)).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((subject, session, label), idx) in groups {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "subject {subject} session {session} class {label} has one trial; intra-session split needs two"
            )));
        }
        for (k, i) in idx.into_iter().enumerate() {
            if k % 2 == 0 {
                train.push(i);
            } else {
                test.push(i);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan { train, test, protocol: Protocol::IntraSession })
}

/// Preprocessed train and test sides.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<PatchSet>,
    pub test: Vec<PatchSet>,
    pub protocol: Protocol,
}

impl DatasetSplit {
    /// Plan the split, then run the preprocessing chain on every recording.
    /// Source ids are indices into `recordings`.
    pub fn build(recordings: &[RecordingSession], protocol: Protocol, cfg: &PreprocessConfig) -> Result<Self> {
        if recordings.is_empty() {
            return Ok(Self { train: Vec::new(), test: Vec::new(), protocol });
        }
        let plan = SplitPlan::new(recordings, protocol)?;
        let side = |idx: &[usize]| -> Result<Vec<PatchSet>> {
            idx.iter().map(|&i| preprocess(&recordings[i], i, cfg)).collect()
        };
        Ok(Self { train: side(&plan.train)?, test: side(&plan.test)?, protocol })
    }
}
