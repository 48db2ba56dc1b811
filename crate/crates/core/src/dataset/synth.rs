//! Seeded synthetic motion corpus.
//!
//! Every activity class drives five joint groups (left leg, right leg, trunk,
//! left arm, right arm) with a class-specific sinusoid around a standing rest
//! pose. Protective spans of patient subjects compress the range of a
//! class-specific group subset, slow it down and lag its phase.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, Trial, TrialKind, ACTIVITY_CLASSES, COORDS, JOINTS, RATERS};
use crate::numerics::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    /// Share of subjects flagged as patients; the rest never behave protectively.
    pub patient_fraction: f64,
    /// 1 gives a normal trial per subject, 2 adds a difficult one.
    pub trials_per_subject: usize,
    /// Frames per trial at 60 Hz.
    pub trial_frames: usize,
    /// Target share of frames inside activities of interest.
    pub aoi_fraction: f64,
    /// Target share of a patient's frames that are protective.
    pub protective_prevalence: f64,
    /// Mean length of one activity-of-interest segment in frames.
    pub segment_frames: usize,
    /// Per-frame flip probability of each rater's flag.
    pub rater_noise: f64,
    /// Standard deviation of additive coordinate noise.
    pub coord_noise: f64,
    /// Range multiplier applied to the perturbed groups in protective spans.
    pub protective_compression: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 12,
            patient_fraction: 0.6,
            trials_per_subject: 1,
            trial_frames: 1800,
            aoi_fraction: 0.3171,
            protective_prevalence: 0.2109,
            segment_frames: 270,
            rater_noise: 0.05,
            coord_noise: 0.01,
            protective_compression: 0.5,
        }
    }
}

/// Realized statistics of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub subjects: Vec<String>,
    pub patients: Vec<String>,
    pub trials: usize,
    pub frames: usize,
    /// Share of all frames with activity class > 0.
    pub aoi_fraction: f64,
    /// Share of patient frames the ground truth marks protective.
    pub protective_prevalence: f64,
}

impl SynthConfig {
    pub fn patient_count(&self) -> usize {
        (self.subjects as f64 * self.patient_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.subjects == 0 {
            return bad("subjects must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.patient_fraction) {
            return bad(format!("patient_fraction {} outside [0, 1]", self.patient_fraction));
        }
        if !(1..=2).contains(&self.trials_per_subject) {
            return bad(format!("trials_per_subject {} must be 1 or 2", self.trials_per_subject));
        }
        if !(self.aoi_fraction > 0.0 && self.aoi_fraction < 1.0) {
            return bad(format!("aoi_fraction {} outside (0, 1)", self.aoi_fraction));
        }
        if !(0.0..=1.0).contains(&self.protective_prevalence) {
            return bad(format!("protective_prevalence {} outside [0, 1]", self.protective_prevalence));
        }
        if self.protective_prevalence > self.aoi_fraction {
            return bad(format!(
                "protective_prevalence {} exceeds aoi_fraction {}; protective frames only occur inside activities",
                self.protective_prevalence, self.aoi_fraction
            ));
        }
        if self.segment_frames < 2 {
            return bad("segment_frames must be at least 2".into());
        }
        if (self.trial_frames as f64 * self.aoi_fraction).round() < 1.0 {
            return bad(format!("trial_frames {} too short for any activity", self.trial_frames));
        }
        if !(0.0..=0.5).contains(&self.rater_noise) {
            return bad(format!("rater_noise {} outside [0, 0.5]", self.rater_noise));
        }
        if !(self.coord_noise >= 0.0 && self.coord_noise.is_finite()) {
            return bad(format!("coord_noise {} must be a finite non-negative value", self.coord_noise));
        }
        if !(self.protective_compression > 0.0 && self.protective_compression <= 1.0) {
            return bad(format!("protective_compression {} outside (0, 1]", self.protective_compression));
        }
        if self.protective_prevalence > 0.0 && self.patient_count() == 0 {
            return bad("protective_prevalence > 0 needs at least one patient subject".into());
        }
        Ok(())
    }
}

const GROUPS: usize = 5;
const LEFT_LEG: usize = 0;
const RIGHT_LEG: usize = 1;
const TRUNK: usize = 2;
const LEFT_ARM: usize = 3;
const RIGHT_ARM: usize = 4;

/// Rest pose in metres (x lateral, y up, z forward), group and chain weight per joint.
const JOINT_LAYOUT: [([f64; 3], usize, f64); JOINTS] = [
    ([0.0, 1.0, 0.0], TRUNK, 0.6),
    ([0.1, 0.95, 0.0], LEFT_LEG, 0.3),
    ([0.1, 0.5, 0.02], LEFT_LEG, 0.7),
    ([0.1, 0.05, 0.05], LEFT_LEG, 1.0),
    ([-0.1, 0.95, 0.0], RIGHT_LEG, 0.3),
    ([-0.1, 0.5, 0.02], RIGHT_LEG, 0.7),
    ([-0.1, 0.05, 0.05], RIGHT_LEG, 1.0),
    ([0.0, 1.2, 0.0], TRUNK, 0.7),
    ([0.0, 1.4, 0.0], TRUNK, 0.8),
    ([0.08, 1.45, 0.0], LEFT_ARM, 0.2),
    ([0.2, 1.45, 0.0], LEFT_ARM, 0.4),
    ([0.22, 1.2, 0.0], LEFT_ARM, 0.7),
    ([0.22, 0.95, 0.02], LEFT_ARM, 1.0),
    ([0.22, 0.87, 0.03], LEFT_ARM, 1.05),
    ([-0.08, 1.45, 0.0], RIGHT_ARM, 0.2),
    ([-0.2, 1.45, 0.0], RIGHT_ARM, 0.4),
    ([-0.22, 1.2, 0.0], RIGHT_ARM, 0.7),
    ([-0.22, 0.95, 0.02], RIGHT_ARM, 1.0),
    ([-0.22, 0.87, 0.03], RIGHT_ARM, 1.05),
    ([0.0, 1.55, 0.0], TRUNK, 0.9),
    ([0.0, 1.65, 0.01], TRUNK, 1.0),
    ([0.0, 1.8, 0.01], TRUNK, 1.0),
];

struct Template {
    amp: [f64; GROUPS],
    axis: [usize; GROUPS],
    phase: [f64; GROUPS],
    hz: f64,
    protective_groups: &'static [usize],
}

/// Class 0 is casual transition movement; classes 1..5 are the activities of interest.
/// Compressed protective trunk motion in sit-to-stand overlaps normal stand-to-sit.
const TEMPLATES: [Template; ACTIVITY_CLASSES] = [
    Template {
        amp: [0.04, 0.04, 0.02, 0.05, 0.05],
        axis: [2, 2, 0, 2, 2],
        phase: [0.0, PI, 0.0, PI, 0.0],
        hz: 0.9,
        protective_groups: &[],
    },
    Template {
        amp: [0.25, 0.02, 0.04, 0.08, 0.08],
        axis: [1, 1, 0, 0, 0],
        phase: [0.0, 0.0, 0.5, 0.0, PI],
        hz: 0.25,
        protective_groups: &[LEFT_LEG, TRUNK],
    },
    Template {
        amp: [0.02, 0.02, 0.10, 0.35, 0.35],
        axis: [2, 2, 2, 2, 2],
        phase: [0.0, 0.0, 0.3, 0.0, 0.0],
        hz: 0.4,
        protective_groups: &[LEFT_ARM, RIGHT_ARM, TRUNK],
    },
    Template {
        amp: [0.06, 0.06, 0.30, 0.06, 0.06],
        axis: [2, 2, 1, 2, 2],
        phase: [0.0, 0.0, 0.0, 0.6, 0.6],
        hz: 0.3,
        protective_groups: &[TRUNK, LEFT_LEG, RIGHT_LEG],
    },
    Template {
        amp: [0.06, 0.06, 0.15, 0.15, 0.15],
        axis: [2, 2, 1, 2, 2],
        phase: [PI, PI, PI, 0.0, 0.0],
        hz: 0.3,
        protective_groups: &[TRUNK],
    },
    Template {
        amp: [0.03, 0.03, 0.30, 0.20, 0.20],
        axis: [2, 2, 2, 1, 1],
        phase: [0.0, 0.0, 0.0, 0.4, 0.4],
        hz: 0.3,
        protective_groups: &[TRUNK, LEFT_ARM, RIGHT_ARM],
    },
];

const RAMP_FRAMES: f64 = 20.0;
const PROTECTIVE_LAG: f64 = 0.6;
const PROTECTIVE_SLOWDOWN: f64 = 0.85;

struct Subject {
    id: String,
    patient: bool,
    body_scale: f64,
    gain: f64,
    tempo: f64,
}

/// Generates the corpus and its realized statistics. Same config and seed give identical trials.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(Vec<Trial>, SynthSummary), DatasetError> {
    cfg.validate()?;
    let root = SeedStream::new(seed).derive("synth");
    let mut rng = root.derive("subjects").rng();

    let mut patient_flags: Vec<bool> = (0..cfg.subjects).map(|i| i < cfg.patient_count()).collect();
    patient_flags.shuffle(&mut rng);
    let width = cfg.subjects.to_string().len().max(2);
    let subjects: Vec<Subject> = patient_flags
        .iter()
        .enumerate()
        .map(|(i, &patient)| Subject {
            id: format!("S{:0width$}", i + 1),
            patient,
            body_scale: rng.random_range(0.9..1.1),
            gain: rng.random_range(0.85..1.15),
            tempo: rng.random_range(0.9..1.1),
        })
        .collect();

    let kinds = [TrialKind::Normal, TrialKind::Difficult];
    let mut trials = Vec::new();
    let (mut aoi, mut frames, mut prot, mut patient_frames) = (0usize, 0usize, 0usize, 0usize);
    for s in &subjects {
        for &kind in &kinds[..cfg.trials_per_subject] {
            let mut trng = root.derive(&format!("trial/{}/{}", s.id, kind)).rng();
            let (trial, truth) = generate_trial(cfg, s, kind, &mut trng)?;
            aoi += trial.activity.iter().filter(|&&a| a > 0).count();
            frames += trial.len();
            if s.patient {
                patient_frames += trial.len();
                prot += truth;
            }
            trials.push(trial);
        }
    }
    let summary = SynthSummary {
        subjects: subjects.iter().map(|s| s.id.clone()).collect(),
        patients: subjects.iter().filter(|s| s.patient).map(|s| s.id.clone()).collect(),
        trials: trials.len(),
        frames,
        aoi_fraction: aoi as f64 / frames as f64,
        protective_prevalence: if patient_frames > 0 { prot as f64 / patient_frames as f64 } else { 0.0 },
    };
    Ok((trials, summary))
}

struct Segment {
    start: usize,
    len: usize,
    class: u8,
}

fn split_evenly(total: usize, parts: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..parts).map(|_| 1.0 + rng.random_range(-jitter..=jitter)).collect();
    let sum: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights.iter().map(|w| (w / sum * total as f64).floor() as usize).collect();
    let mut rest = total - sizes.iter().sum::<usize>();
    let mut k = 0;
    while rest > 0 {
        sizes[k % parts] += 1;
        rest -= 1;
        k += 1;
    }
    sizes
}

fn schedule(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let len = cfg.trial_frames;
    let aoi_frames = (len as f64 * cfg.aoi_fraction).round() as usize;
    let count = ((aoi_frames as f64 / cfg.segment_frames as f64).round() as usize).clamp(1, aoi_frames);
    let seg_lens = split_evenly(aoi_frames, count, 0.2, rng);
    let gaps = split_evenly(len - aoi_frames, count + 1, 0.5, rng);

    let mut classes = Vec::with_capacity(count);
    while classes.len() < count {
        let mut cycle: Vec<u8> = (1..ACTIVITY_CLASSES as u8).collect();
        cycle.shuffle(rng);
        classes.extend(cycle);
    }
    let mut t = 0;
    let mut segs = Vec::with_capacity(count);
    for k in 0..count {
        t += gaps[k];
        segs.push(Segment { start: t, len: seg_lens[k], class: classes[k] });
        t += seg_lens[k];
    }
    segs
}

/// Marks whole segments protective in random order, finishing with one partial span.
fn protective_mask(cfg: &SynthConfig, segs: &[Segment], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; cfg.trial_frames];
    let mut remaining = (cfg.trial_frames as f64 * cfg.protective_prevalence).round() as usize;
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.shuffle(rng);
    for k in order {
        if remaining == 0 {
            break;
        }
        let s = &segs[k];
        let take = remaining.min(s.len);
        let offset = if take < s.len { rng.random_range(0..=s.len - take) } else { 0 };
        mask[s.start + offset..s.start + offset + take].fill(true);
        remaining -= take;
    }
    mask
}

fn envelope(i: usize, len: usize) -> f64 {
    let edge = (i.min(len - 1 - i) as f64 + 0.5) / RAMP_FRAMES;
    if edge >= 1.0 { 1.0 } else { (edge * PI / 2.0).sin().powi(2) }
}

/// The trial and its number of ground-truth protective frames.
fn generate_trial(
    cfg: &SynthConfig,
    s: &Subject,
    kind: TrialKind,
    rng: &mut ChaCha8Rng,
) -> Result<(Trial, usize), DatasetError> {
    let len = cfg.trial_frames;
    let segs = schedule(cfg, rng);
    let protective = if s.patient { protective_mask(cfg, &segs, rng) } else { vec![false; len] };
    let effort = if kind == TrialKind::Difficult { 1.15 } else { 1.0 };

    let mut activity = vec![0u8; len];
    for seg in &segs {
        activity[seg.start..seg.start + seg.len].fill(seg.class);
    }

    // Displacement of each group at each frame; transitions run continuously underneath.
    let mut disp = vec![[[0.0f64; 3]; GROUPS]; len];
    let base = &TEMPLATES[0];
    let sway_phase = rng.random_range(0.0..2.0 * PI);
    for (t, d) in disp.iter_mut().enumerate() {
        let w = 2.0 * PI * base.hz * s.tempo * t as f64 / 60.0 + sway_phase;
        for g in 0..GROUPS {
            d[g][base.axis[g]] += base.amp[g] * s.gain * (w + base.phase[g]).sin();
        }
    }
    for seg in &segs {
        let tpl = &TEMPLATES[seg.class as usize];
        for i in 0..seg.len {
            let t = seg.start + i;
            let env = envelope(i, seg.len);
            let prot = protective[t];
            for g in 0..GROUPS {
                let perturbed = prot && tpl.protective_groups.contains(&g);
                let (scale, hz, lag) = if perturbed {
                    (cfg.protective_compression, tpl.hz * PROTECTIVE_SLOWDOWN, PROTECTIVE_LAG)
                } else {
                    (1.0, tpl.hz, 0.0)
                };
                let w = 2.0 * PI * hz * s.tempo * effort * i as f64 / 60.0;
                let amp = tpl.amp[g] * s.gain * effort * scale;
                // Sub-transition sway is damped while an activity runs.
                let d = &mut disp[t][g];
                d[base.axis[g]] *= 1.0 - 0.8 * env;
                d[tpl.axis[g]] += env * amp * (1.0 - (w + tpl.phase[g] - lag).cos()) * 0.5;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.coord_noise.max(f64::MIN_POSITIVE)).expect("valid noise sd");
    let mut frames = Vec::with_capacity(len * COORDS);
    for d in &disp {
        for (rest, group, weight) in JOINT_LAYOUT {
            for c in 0..3 {
                let n = if cfg.coord_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                frames.push(rest[c] * s.body_scale + weight * d[group][c] + n);
            }
        }
    }

    let raters: Vec<[bool; RATERS]> = protective
        .iter()
        .map(|&p| std::array::from_fn(|_| if cfg.rater_noise > 0.0 && rng.random::<f64>() < cfg.rater_noise { !p } else { p }))
        .collect();

    let trial = Trial::new(s.id.clone(), kind, frames, activity, raters)?;
    Ok((trial, protective.iter().filter(|&&p| p).count()))
}
