//! Trials, sliding-window segmentation, window labeling, augmentation,
//! leave-one-subject-out splitting and the synthetic corpus generator.

mod augment;
mod io;
mod loso;
mod synth;

pub use augment::{augment, crop, jitter, AugmentConfig};
pub use io::{load_corpus, load_trial, parse_trial, save_trial, trial_to_csv, write_manifest};
pub use loso::{loso_splits, FoldPlan, LosoFold};
pub use synth::{synth_generate, SynthConfig, SynthSummary};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 60;
pub const JOINTS: usize = 22;
pub const CHANNELS: usize = 3;
pub const COORDS: usize = JOINTS * CHANNELS;
pub const RATERS: usize = 4;
pub const ACTIVITY_CLASSES: usize = 6;
/// 3 s at 60 Hz.
pub const WINDOW: usize = 180;
/// 50% overlap.
pub const STRIDE: usize = 90;

pub const ACTIVITY_NAMES: [&str; ACTIVITY_CLASSES] =
    ["transition", "one_leg_stand", "reach_forward", "sit_to_stand", "stand_to_sit", "bend_down"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Normal,
    Difficult,
}

impl TrialKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialKind::Normal => "normal",
            TrialKind::Difficult => "difficult",
        }
    }
}

impl fmt::Display for TrialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(TrialKind::Normal),
            "difficult" => Ok(TrialKind::Difficult),
            other => Err(format!("unknown trial kind `{other}`")),
        }
    }
}

/// One participant trial: joint coordinates per timestep with activity labels
/// and the protective flags of four raters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub subject_id: String,
    pub kind: TrialKind,
    pub sample_rate: u32,
    /// `len × 66`, joint-major `x1,y1,z1,…,x22,y22,z22` per row.
    pub frames: Vec<f64>,
    pub activity: Vec<u8>,
    pub raters: Vec<[bool; RATERS]>,
}

impl Trial {
    pub fn new(
        subject_id: impl Into<String>,
        kind: TrialKind,
        frames: Vec<f64>,
        activity: Vec<u8>,
        raters: Vec<[bool; RATERS]>,
    ) -> Result<Trial, DatasetError> {
        let t = Trial { subject_id: subject_id.into(), kind, sample_rate: SAMPLE_RATE, frames, activity, raters };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let len = self.activity.len();
        if self.frames.len() != len * COORDS || self.raters.len() != len {
            return Err(DatasetError::Contract(format!(
                "trial {}: per-timestep sequences have unequal lengths",
                self.id()
            )));
        }
        if let Some(bad) = self.activity.iter().find(|&&a| a as usize >= ACTIVITY_CLASSES) {
            return Err(DatasetError::Contract(format!("activity class {bad} out of range")));
        }
        if !self.frames.iter().all(|v| v.is_finite()) {
            return Err(DatasetError::Contract(format!("trial {}: non-finite coordinate", self.id())));
        }
        if self.subject_id.is_empty() || self.subject_id.contains([',', '\n', '\r']) {
            return Err(DatasetError::Contract(format!("invalid subject id `{}`", self.subject_id)));
        }
        Ok(())
    }

    /// Stable identifier `{subject}_{kind}`.
    pub fn id(&self) -> String {
        format!("{}_{}", self.subject_id, self.kind)
    }

    pub fn len(&self) -> usize {
        self.activity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activity.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * COORDS..(t + 1) * COORDS]
    }
}

/// A fixed-length block of frames with its window-level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `timesteps × JOINTS × CHANNELS`, row-major.
    pub features: Vec<f64>,
    pub timesteps: usize,
    pub activity: u8,
    pub protective: bool,
    pub subject_id: String,
    pub trial_kind: TrialKind,
    pub window_start: usize,
    pub is_augmented: bool,
    /// Position of the source window in corpus order; copies keep their source's id.
    pub window_id: usize,
}

impl WindowSample {
    pub fn trial_id(&self) -> String {
        format!("{}_{}", self.subject_id, self.trial_kind)
    }

    pub fn coord(&self, t: usize, joint: usize, channel: usize) -> f64 {
        self.features[(t * JOINTS + joint) * CHANNELS + channel]
    }
}

/// Windows at offsets `0, stride, 2·stride, …`; trailing partial windows are dropped.
pub fn window_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window > 0 && stride > 0 && stride <= window, "need 0 < stride <= window");
    if len < window {
        return Vec::new();
    }
    (0..=(len - window) / stride).map(|k| k * stride).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentOptions {
    pub window: usize,
    pub stride: usize,
    /// Subtract each window's per-channel mean over all timesteps and joints.
    pub mean_center: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions { window: WINDOW, stride: STRIDE, mean_center: false }
    }
}

/// Cuts a trial into labeled windows. `first_id` numbers the windows.
pub fn segment(trial: &Trial, opts: &SegmentOptions, first_id: usize) -> Vec<WindowSample> {
    window_offsets(trial.len(), opts.window, opts.stride)
        .into_iter()
        .enumerate()
        .map(|(k, start)| {
            let end = start + opts.window;
            let mut features = trial.frames[start * COORDS..end * COORDS].to_vec();
            if opts.mean_center {
                mean_center(&mut features);
            }
            WindowSample {
                features,
                timesteps: opts.window,
                activity: majority_activity_label(&trial.activity[start..end]),
                protective: protective_label(&trial.raters[start..end]),
                subject_id: trial.subject_id.clone(),
                trial_kind: trial.kind,
                window_start: start,
                is_augmented: false,
                window_id: first_id + k,
            }
        })
        .collect()
}

/// Segments every trial in order, numbering windows across the corpus.
pub fn segment_corpus(trials: &[Trial], opts: &SegmentOptions) -> Vec<WindowSample> {
    let mut out = Vec::new();
    for t in trials {
        let next = out.len();
        out.extend(segment(t, opts, next));
    }
    out
}

fn mean_center(features: &mut [f64]) {
    let rows = features.len() / CHANNELS;
    let mut mean = [0.0; CHANNELS];
    for row in features.chunks_exact(CHANNELS) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    for row in features.chunks_exact_mut(CHANNELS) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

/// Most frequent class; ties go to the lowest class id.
pub fn majority_activity_label(labels: &[u8]) -> u8 {
    let mut counts = [0usize; ACTIVITY_CLASSES];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best as u8
}

/// Protective when at least two raters each flagged at least half of the samples.
pub fn protective_label(flags: &[[bool; RATERS]]) -> bool {
    let n = flags.len();
    (0..RATERS)
        .filter(|&r| {
            let flagged = flags.iter().filter(|f| f[r]).count();
            2 * flagged >= n && n > 0
        })
        .count()
        >= 2
}
