//! GC-LSTM modules for activity recognition and protective behavior detection,
//! the hierarchical connection between them, and the training strategies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bodygraph::BodyGraph;
use crate::dataset::{loso_splits, AugmentConfig, DatasetError, LosoFold, WindowSample, ACTIVITY_CLASSES, CHANNELS, JOINTS};
use crate::eval::ConfusionMatrix;
use crate::layers::{argmax, dropout, DenseSoftmax, GcLayer, GcMode, LayerError, LstmLayer};
use crate::losses::{loss_on_tape, ClassCounts, LossConfig, LossError};
use crate::numerics::{AdamConfig, AdamState, Bindings, NumericsError, ParamStore, SeedStream, Tape, Tensor, Var};

pub const PBD_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Har,
    Pbd,
}

impl Role {
    fn prefix(self) -> &'static str {
        match self {
            Role::Har => "har",
            Role::Pbd => "pbd",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Role::Har => ACTIVITY_CLASSES,
            Role::Pbd => PBD_CLASSES,
        }
    }
}

/// Layer sizes of one GC-LSTM module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub gc_layers: usize,
    pub gc_kernels: usize,
    #[serde(default)]
    pub gc_mode: GcMode,
    /// ReLU after every graph convolution.
    #[serde(default = "yes")]
    pub gc_relu: bool,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    /// Feed every `frame_step`-th frame of a window to the network.
    #[serde(default = "one")]
    pub frame_step: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn har() -> Self {
        ModelSpec {
            gc_layers: 1,
            gc_kernels: 26,
            gc_mode: GcMode::Single,
            gc_relu: true,
            lstm_layers: 3,
            lstm_hidden: 24,
            dropout: 0.5,
            frame_step: 1,
        }
    }

    pub fn pbd() -> Self {
        ModelSpec { gc_layers: 3, gc_kernels: 16, ..ModelSpec::har() }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.gc_layers == 0 || self.gc_kernels == 0 || self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return Err(NetworkError::Config("layer counts and sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetworkError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.frame_step == 0 {
            return Err(NetworkError::Config("frame_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// A GC-LSTM module bound to a node count and input width.
#[derive(Clone, Debug, PartialEq)]
pub struct GcLstm {
    pub role: Role,
    pub spec: ModelSpec,
    pub nodes: usize,
    pub in_channels: usize,
    gc: Vec<GcLayer>,
    lstm: Vec<LstmLayer>,
    head: DenseSoftmax,
}

impl GcLstm {
    pub fn new(role: Role, spec: ModelSpec, nodes: usize, in_channels: usize) -> Result<Self, NetworkError> {
        spec.validate()?;
        let p = role.prefix();
        let k = spec.gc_kernels;
        let gc = (0..spec.gc_layers)
            .map(|l| GcLayer::new(format!("{p}.gc{l}"), spec.gc_mode, if l == 0 { in_channels } else { k }, k))
            .collect();
        let lstm = (0..spec.lstm_layers)
            .map(|l| LstmLayer::new(format!("{p}.lstm{l}"), if l == 0 { nodes * k } else { spec.lstm_hidden }, spec.lstm_hidden))
            .collect();
        let head = DenseSoftmax::new(format!("{p}.head"), spec.lstm_hidden, role.classes());
        Ok(GcLstm { role, spec, nodes, in_channels, gc, lstm, head })
    }

    /// Activity module over raw coordinates.
    pub fn har(spec: ModelSpec, graph: &BodyGraph) -> Result<Self, NetworkError> {
        Self::new(Role::Har, spec, graph.node_count(), CHANNELS)
    }

    /// Protective module; `hierarchical` appends the activity vector to every node.
    pub fn pbd(spec: ModelSpec, graph: &BodyGraph, hierarchical: bool) -> Result<Self, NetworkError> {
        let c = if hierarchical { CHANNELS + ACTIVITY_CLASSES } else { CHANNELS };
        Self::new(Role::Pbd, spec, graph.node_count(), c)
    }

    pub fn classes(&self) -> usize {
        self.role.classes()
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.lstm[0].d_in
    }

    pub fn init(&self, seed: SeedStream) -> ParamStore {
        let mut rng = seed.derive(self.role.prefix()).rng();
        let mut store = ParamStore::new();
        for l in &self.gc {
            l.init(&mut store, &mut rng);
        }
        for l in &self.lstm {
            l.init(&mut store, &mut rng);
        }
        self.head.init(&mut store, &mut rng);
        store
    }

    /// `x` is `[T·B·N, in_channels]` time-major; returns `[B, classes]` probabilities.
    /// Dropout is active when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        batch: usize,
        graph: &BodyGraph,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NetworkError> {
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.in_channels || rows % (batch * self.nodes) != 0 {
            return Err(NetworkError::Contract(format!(
                "{} input {:?} does not fit batch {batch} × {} nodes × {} channels",
                self.role.prefix(),
                tape.value(x).shape(),
                self.nodes,
                self.in_channels
            )));
        }
        let steps = rows / (batch * self.nodes);
        let p = self.spec.dropout;
        let training = rng.is_some();
        let mut h = x;
        for l in &self.gc {
            h = l.forward(tape, b, h, graph);
            if self.spec.gc_relu {
                h = tape.relu(h);
            }
            h = drop(tape, h, p, training, rng.as_deref_mut())?;
        }
        let mut seq = tape.reshape(h, vec![steps * batch, self.nodes * self.spec.gc_kernels]);
        for l in &self.lstm {
            let (out, _) = l.forward(tape, b, seq, batch);
            seq = drop(tape, out, p, training, rng.as_deref_mut())?;
        }
        let last = tape.slice_rows(seq, (steps - 1) * batch, batch);
        Ok(self.head.forward(tape, b, last))
    }
}

fn drop(tape: &mut Tape, x: Var, p: f64, training: bool, rng: Option<&mut ChaCha8Rng>) -> Result<Var, NetworkError> {
    match rng {
        Some(r) => Ok(dropout(tape, x, p, training, r)?),
        None => Ok(x),
    }
}

/// Frames fed to the network: `0, step, 2·step, …` below `timesteps`.
pub fn frame_indices(timesteps: usize, step: usize) -> Vec<usize> {
    (0..timesteps).step_by(step).collect()
}

/// Stacks windows into `[T·B·N, 3]` rows in graph node order.
pub fn window_block(windows: &[&WindowSample], graph: &BodyGraph, frame_step: usize) -> Result<Tensor, NetworkError> {
    let first = windows.first().ok_or_else(|| NetworkError::Contract("empty batch".into()))?;
    let frames = frame_indices(first.timesteps, frame_step);
    let joints: Vec<usize> = graph
        .node_ids()
        .iter()
        .map(|&id| {
            let j = id as usize;
            if (1..=JOINTS).contains(&j) {
                Ok(j - 1)
            } else {
                Err(NetworkError::Contract(format!("node {id} has no joint column")))
            }
        })
        .collect::<Result<_, _>>()?;
    for w in windows {
        if w.timesteps != first.timesteps || w.features.len() != w.timesteps * JOINTS * CHANNELS {
            return Err(NetworkError::Contract(format!("window {} has an unexpected shape", w.window_id)));
        }
    }
    let n = joints.len();
    let mut data = Vec::with_capacity(frames.len() * windows.len() * n * CHANNELS);
    for &t in &frames {
        for w in windows {
            for &j in &joints {
                let at = (t * JOINTS + j) * CHANNELS;
                data.extend_from_slice(&w.features[at..at + CHANNELS]);
            }
        }
    }
    Ok(Tensor::matrix(frames.len() * windows.len() * n, CHANNELS, data))
}

/// Row `r` of a `[T·B·N, ·]` block belongs to window `(r / N) mod B`.
fn window_of_row(rows: usize, batch: usize, nodes: usize) -> Arc<Vec<usize>> {
    Arc::new((0..rows).map(|r| (r / nodes) % batch).collect())
}

/// Appends each window's `[B, 6]` activity vector to all of its node rows.
fn append_labels(tape: &mut Tape, x: Var, labels: Var, batch: usize, nodes: usize) -> Var {
    let rows = tape.value(x).rows();
    let spread = tape.gather_rows(labels, window_of_row(rows, batch, nodes));
    tape.concat_cols(&[x, spread])
}

/// Appends `label` to every node's features: `[T, N, C]` becomes `[T, N, C + K]`.
pub fn hierarchical_input(window: &Tensor, label: &[f64]) -> Result<Tensor, NetworkError> {
    let &[t, n, c] = window.shape() else {
        return Err(NetworkError::Contract(format!("expected a [T, N, C] window, got {:?}", window.shape())));
    };
    let k = label.len();
    let mut data = Vec::with_capacity(t * n * (c + k));
    for row in window.data().chunks_exact(c) {
        data.extend_from_slice(row);
        data.extend_from_slice(label);
    }
    Ok(Tensor::new(vec![t, n, c + k], data))
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// Activity probabilities and the predicted class of one window.
pub fn har_forward(
    window: &WindowSample,
    graph: &BodyGraph,
    model: &GcLstm,
    params: &ParamStore,
) -> Result<(Vec<f64>, usize), NetworkError> {
    if model.role != Role::Har {
        return Err(NetworkError::Contract("har_forward needs the activity module".into()));
    }
    let x = window_block(&[window], graph, model.spec.frame_step)?;
    let mut tape = Tape::new();
    let b = tape.bind_frozen(params);
    let xv = tape.constant(x);
    let p = model.forward(&mut tape, &b, xv, 1, graph, None)?;
    let p = tape.value(p).data().to_vec();
    let y = argmax(&p);
    Ok((p, y))
}

/// Protective probabilities of one window given the activity vector from the first module.
pub fn pbd_forward(
    window: &WindowSample,
    har_output: &[f64],
    graph: &BodyGraph,
    model: &GcLstm,
    params: &ParamStore,
) -> Result<(Vec<f64>, usize), NetworkError> {
    if model.in_channels != CHANNELS + har_output.len() {
        return Err(NetworkError::Contract(format!(
            "module expects {} channels, window plus activity vector gives {}",
            model.in_channels,
            CHANNELS + har_output.len()
        )));
    }
    let x = window_block(&[window], graph, model.spec.frame_step)?;
    let mut tape = Tape::new();
    let b = tape.bind_frozen(params);
    let xv = tape.constant(x);
    let lab = tape.constant(Tensor::matrix(1, har_output.len(), har_output.to_vec()));
    let xin = append_labels(&mut tape, xv, lab, 1, model.nodes);
    let p = model.forward(&mut tape, &b, xin, 1, graph, None)?;
    let p = tape.value(p).data().to_vec();
    let y = argmax(&p);
    Ok((p, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    PretrainedFrozen,
    JointHarCfcc,
    JointPbdCfcc,
    JointBothCfcc,
    PretrainedJointHarCfcc,
    PretrainedJointPbdCfcc,
    PretrainedJointBothCfcc,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::PretrainedFrozen,
        Strategy::JointHarCfcc,
        Strategy::JointPbdCfcc,
        Strategy::JointBothCfcc,
        Strategy::PretrainedJointHarCfcc,
        Strategy::PretrainedJointPbdCfcc,
        Strategy::PretrainedJointBothCfcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PretrainedFrozen => "PretrainedFrozen",
            Strategy::JointHarCfcc => "JointHarCfcc",
            Strategy::JointPbdCfcc => "JointPbdCfcc",
            Strategy::JointBothCfcc => "JointBothCfcc",
            Strategy::PretrainedJointHarCfcc => "PretrainedJointHarCfcc",
            Strategy::PretrainedJointPbdCfcc => "PretrainedJointPbdCfcc",
            Strategy::PretrainedJointBothCfcc => "PretrainedJointBothCfcc",
        }
    }

    /// Table label, e.g. `Pre-trained Joint HAR-PBD(CFCC)`.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::PretrainedFrozen => "Pre-trained HAR(Frozen)-PBD(CFCC)",
            Strategy::JointHarCfcc => "Joint HAR(CFCC)-PBD",
            Strategy::JointPbdCfcc => "Joint HAR-PBD(CFCC)",
            Strategy::JointBothCfcc => "Joint HAR-PBD with CFCC",
            Strategy::PretrainedJointHarCfcc => "Pre-trained Joint HAR(CFCC)-PBD",
            Strategy::PretrainedJointPbdCfcc => "Pre-trained Joint HAR-PBD(CFCC)",
            Strategy::PretrainedJointBothCfcc => "Pre-trained Joint HAR-PBD with CFCC",
        }
    }

    pub fn pretrained(self) -> bool {
        matches!(
            self,
            Strategy::PretrainedFrozen
                | Strategy::PretrainedJointHarCfcc
                | Strategy::PretrainedJointPbdCfcc
                | Strategy::PretrainedJointBothCfcc
        )
    }

    pub fn frozen(self) -> bool {
        self == Strategy::PretrainedFrozen
    }

    /// Whether the (activity, protective) losses use CFCC during joint training.
    fn joint_cfcc(self) -> (bool, bool) {
        match self {
            Strategy::JointHarCfcc | Strategy::PretrainedJointHarCfcc => (true, false),
            Strategy::JointPbdCfcc | Strategy::PretrainedJointPbdCfcc => (false, true),
            Strategy::JointBothCfcc | Strategy::PretrainedJointBothCfcc => (true, true),
            Strategy::PretrainedFrozen => (true, true),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s || k.label() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|k| k.name()).collect();
                NetworkError::Config(format!("unknown strategy `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

fn lossless_cce(cfg: &LossConfig) -> LossConfig {
    LossConfig { focal: false, class_balanced: false, ..*cfg }
}

fn with_cfcc(cfg: &LossConfig) -> LossConfig {
    LossConfig { focal: true, class_balanced: true, ..*cfg }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Train the protective module alone on raw coordinates, without the activity module.
    pub pbd_only: bool,
    pub epochs: usize,
    /// Epochs of activity pretraining; defaults to `epochs`.
    pub pretrain_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr_har: f64,
    pub lr_pbd: f64,
    /// Activity loss for pretraining; joint strategies toggle its CFCC terms.
    pub har_loss: LossConfig,
    /// Protective loss; joint strategies toggle its CFCC terms.
    pub pbd_loss: LossConfig,
    pub loss_weights: [f64; 2],
    /// Copies added to training windows; empty lists disable augmentation.
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::PretrainedFrozen,
            pbd_only: false,
            epochs: 100,
            pretrain_epochs: None,
            batch_size: 40,
            lr_har: 5e-4,
            lr_pbd: 1e-3,
            har_loss: LossConfig::cfcc(0.5, 0.9999),
            pbd_loss: LossConfig::cfcc(2.0, 0.9999),
            loss_weights: [1.0, 1.0],
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.batch_size == 0 {
            return Err(NetworkError::Config("batch_size must be positive".into()));
        }
        if !(self.lr_har > 0.0 && self.lr_pbd > 0.0) {
            return Err(NetworkError::Config("learning rates must be positive".into()));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(NetworkError::Config("loss weights must be finite and non-negative".into()));
        }
        self.har_loss.validate()?;
        self.pbd_loss.validate()?;
        Ok(())
    }

    fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs)
    }

    /// Losses used while the protective module trains.
    fn stage_losses(&self) -> (LossConfig, LossConfig) {
        if self.pbd_only || self.strategy.frozen() {
            return (self.har_loss, self.pbd_loss);
        }
        let (h, p) = self.strategy.joint_cfcc();
        let har = if h { with_cfcc(&self.har_loss) } else { lossless_cce(&self.har_loss) };
        let pbd = if p { with_cfcc(&self.pbd_loss) } else { lossless_cce(&self.pbd_loss) };
        (har, pbd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub macro_f1: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,acc,macro_f1\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.acc, e.macro_f1));
    }
    out
}

/// Snapshot chosen by activity pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct HarPretrain {
    pub params: ParamStore,
    /// 0 when no epoch ran.
    pub selected_epoch: usize,
    pub validation_subject: String,
    /// Validation metrics per epoch.
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedFold {
    pub test_subject: String,
    pub strategy: Strategy,
    pub pbd_only: bool,
    /// Activity weights used at test time.
    pub har_params: Option<ParamStore>,
    pub pbd_params: ParamStore,
    pub pretrain: Option<HarPretrain>,
    pub har_log: Vec<EpochLog>,
    pub pbd_log: Vec<EpochLog>,
}

impl TrainedFold {
    pub fn selected_har_epoch(&self) -> Option<usize> {
        self.pretrain.as_ref().map(|p| p.selected_epoch)
    }
}

/// Predictions for one test window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub window_id: usize,
    pub subject_id: String,
    pub trial_id: String,
    pub window_start: usize,
    pub true_act: u8,
    pub pred_act: Option<u8>,
    pub true_prot: bool,
    pub pred_prot: bool,
    /// Probability of the protective class.
    pub prot_score: f64,
}

/// Counts that show a fold kept its test subject out of training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldHygiene {
    pub original_train_windows: usize,
    pub train_windows: usize,
    pub test_windows: usize,
    pub test_subject_windows_in_train: usize,
    pub augmented_windows_in_test: usize,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub trained: TrainedFold,
    pub predictions: Vec<WindowPrediction>,
    pub hygiene: FoldHygiene,
}

#[derive(Clone, Copy)]
enum Labels {
    Activity,
    Protective,
}

fn targets(windows: &[&WindowSample], which: Labels) -> Vec<usize> {
    windows
        .iter()
        .map(|w| match which {
            Labels::Activity => w.activity as usize,
            Labels::Protective => w.protective as usize,
        })
        .collect()
}

fn metrics(cm: &ConfusionMatrix) -> (f64, f64) {
    (cm.accuracy().unwrap_or(0.0), cm.macro_f1().unwrap_or(0.0))
}

fn prob_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

/// The graph and both modules, ready to train folds.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub graph: BodyGraph,
    pub har: GcLstm,
    pub pbd: GcLstm,
    pub config: TrainConfig,
}

const EVAL_BATCH: usize = 64;

impl Pipeline {
    pub fn new(graph: BodyGraph, har: ModelSpec, pbd: ModelSpec, config: TrainConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let har = GcLstm::har(har, &graph)?;
        let pbd = GcLstm::pbd(pbd, &graph, !config.pbd_only)?;
        Ok(Pipeline { graph, har, pbd, config })
    }

    fn block(&self, windows: &[&WindowSample], model: &GcLstm) -> Result<Tensor, NetworkError> {
        window_block(windows, &self.graph, model.spec.frame_step)
    }

    /// Activity probabilities in inference mode, one row per window.
    pub fn har_probs(&self, params: &ParamStore, windows: &[&WindowSample]) -> Result<Vec<Vec<f64>>, NetworkError> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EVAL_BATCH) {
            let mut tape = Tape::new();
            let b = tape.bind_frozen(params);
            let x = tape.constant(self.block(chunk, &self.har)?);
            let p = self.har.forward(&mut tape, &b, x, chunk.len(), &self.graph, None)?;
            out.extend(prob_rows(tape.value(p)));
        }
        Ok(out)
    }

    /// Protective probabilities in inference mode given per-window activity vectors.
    pub fn pbd_probs(
        &self,
        params: &ParamStore,
        windows: &[&WindowSample],
        activity: Option<&[Vec<f64>]>,
    ) -> Result<Vec<Vec<f64>>, NetworkError> {
        let mut out = Vec::with_capacity(windows.len());
        for (c, chunk) in windows.chunks(EVAL_BATCH).enumerate() {
            let mut tape = Tape::new();
            let b = tape.bind_frozen(params);
            let mut x = tape.constant(self.block(chunk, &self.pbd)?);
            if let Some(act) = activity {
                let rows = &act[c * EVAL_BATCH..c * EVAL_BATCH + chunk.len()];
                let lab = tape.constant(Tensor::matrix(chunk.len(), ACTIVITY_CLASSES, rows.concat()));
                x = append_labels(&mut tape, x, lab, chunk.len(), self.pbd.nodes);
            }
            let p = self.pbd.forward(&mut tape, &b, x, chunk.len(), &self.graph, None)?;
            out.extend(prob_rows(tape.value(p)));
        }
        Ok(out)
    }

    fn har_loss_step(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        batch: &[&WindowSample],
        loss: &LossConfig,
        weights: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var), NetworkError> {
        let x = tape.constant(self.block(batch, &self.har)?);
        let p = self.har.forward(tape, b, x, batch.len(), &self.graph, Some(rng))?;
        let l = loss_on_tape(tape, p, &targets(batch, Labels::Activity), weights, loss);
        Ok((p, l))
    }

    /// Trains the activity module alone and keeps the epoch with the best accuracy on one
    /// held-out training subject.
    pub fn pretrain_har(&self, train: &[WindowSample], seed: SeedStream) -> Result<HarPretrain, NetworkError> {
        let subjects: Vec<&str> =
            train.iter().map(|w| w.subject_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
        if subjects.len() < 2 {
            return Err(NetworkError::Config(format!(
                "activity pretraining needs at least 2 training subjects, got {}",
                subjects.len()
            )));
        }
        let seed = seed.derive("pretrain");
        let val_subject = subjects[seed.derive("validation").rng().random_range(0..subjects.len())].to_string();
        let fit: Vec<&WindowSample> = train.iter().filter(|w| w.subject_id != val_subject).collect();
        let val: Vec<&WindowSample> = train.iter().filter(|w| w.subject_id == val_subject && !w.is_augmented).collect();

        let mut params = self.har.init(seed.derive("init"));
        let cfg = &self.config;
        let counts = ClassCounts::from_labels(targets(&fit, Labels::Activity), ACTIVITY_CLASSES);
        let weights = cfg.har_loss.class_weights(&counts);
        let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr_har), &params);
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut log = Vec::new();
        for epoch in 1..=cfg.pretrain_epochs() {
            let es = seed.derive(&format!("epoch/{epoch}"));
            let mut drop_rng = es.derive("dropout").rng();
            let mut loss_sum = 0.0;
            for batch in shuffled_batches(&fit, cfg.batch_size, es) {
                let mut tape = Tape::new();
                let b = tape.bind(&params);
                let (_, l) = self.har_loss_step(&mut tape, &b, &batch, &cfg.har_loss, &weights, &mut drop_rng)?;
                loss_sum += tape.value(l).item();
                let grads = tape.backward(l)?.for_params(&b);
                adam.step(&mut params, &grads)?;
            }
            let probs = self.har_probs(&params, &val)?;
            let cm = ConfusionMatrix::from_pairs(
                ACTIVITY_CLASSES,
                val.iter().zip(&probs).map(|(w, p)| (w.activity as usize, argmax(p))),
            );
            let (acc, f1) = metrics(&cm);
            log.push(EpochLog { epoch, loss: loss_sum, acc, macro_f1: f1 });
            log::debug!("pretrain epoch {epoch}: loss {loss_sum:.5} val acc {acc:.4}");
            if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
                best = Some((acc, epoch, params.clone()));
            }
        }
        let (params, selected_epoch) = match best {
            Some((_, e, p)) => (p, e),
            None => (params, 0),
        };
        Ok(HarPretrain { params, selected_epoch, validation_subject: val_subject, log })
    }

    /// Trains one fold with the configured strategy.
    pub fn train_fold(&self, fold: &LosoFold, seed: SeedStream) -> Result<TrainedFold, NetworkError> {
        let seed = seed.derive(&format!("fold/{}", fold.test_subject));
        let cfg = &self.config;
        let train: Vec<&WindowSample> = fold.train_windows.iter().collect();
        if train.is_empty() {
            return Err(NetworkError::Contract(format!("fold {} has no training windows", fold.test_subject)));
        }
        let (har_loss, pbd_loss) = cfg.stage_losses();
        let pbd_counts = ClassCounts::from_labels(targets(&train, Labels::Protective), PBD_CLASSES);
        let pbd_weights = pbd_loss.class_weights(&pbd_counts);
        let mut pbd_params = self.pbd.init(seed.derive("init"));
        let mut pbd_adam = AdamState::new(AdamConfig::with_lr(cfg.lr_pbd), &pbd_params);

        let done = |har_params, pretrain, har_log, pbd_params, pbd_log| TrainedFold {
            test_subject: fold.test_subject.clone(),
            strategy: cfg.strategy,
            pbd_only: cfg.pbd_only,
            har_params,
            pbd_params,
            pretrain,
            har_log,
            pbd_log,
        };

        if cfg.pbd_only {
            let log = self.fit_pbd(&mut pbd_params, &mut pbd_adam, &train, None, &pbd_loss, &pbd_weights, seed)?;
            return Ok(done(None, None, Vec::new(), pbd_params, log));
        }

        let pretrain =
            if cfg.strategy.pretrained() { Some(self.pretrain_har(&fold.train_windows, seed)?) } else { None };

        if cfg.strategy.frozen() {
            let pre = pretrain.expect("frozen strategy pretrains");
            let hard: Vec<Vec<f64>> = self
                .har_probs(&pre.params, &train)?
                .iter()
                .map(|p| one_hot(argmax(p), ACTIVITY_CLASSES))
                .collect();
            let log =
                self.fit_pbd(&mut pbd_params, &mut pbd_adam, &train, Some(&hard), &pbd_loss, &pbd_weights, seed)?;
            let har = pre.params.clone();
            return Ok(done(Some(har), Some(pre), Vec::new(), pbd_params, log));
        }

        let mut har_params = match &pretrain {
            Some(p) => p.params.clone(),
            None => self.har.init(seed.derive("init")),
        };
        let har_counts = ClassCounts::from_labels(targets(&train, Labels::Activity), ACTIVITY_CLASSES);
        let har_weights = har_loss.class_weights(&har_counts);
        let mut har_adam = AdamState::new(AdamConfig::with_lr(cfg.lr_har), &har_params);
        let mut har_log = Vec::new();
        let mut pbd_log = Vec::new();
        let [wh, wp] = cfg.loss_weights;
        for epoch in 1..=cfg.epochs {
            let es = seed.derive(&format!("joint/{epoch}"));
            let mut drop_rng = es.derive("dropout").rng();
            let (mut lh, mut lp) = (0.0, 0.0);
            let mut har_cm = ConfusionMatrix::new(ACTIVITY_CLASSES);
            let mut pbd_cm = ConfusionMatrix::new(PBD_CLASSES);
            for batch in shuffled_batches(&train, cfg.batch_size, es) {
                let mut tape = Tape::new();
                let hb = tape.bind(&har_params);
                let pb = tape.bind(&pbd_params);
                let (ph, l_har) = self.har_loss_step(&mut tape, &hb, &batch, &har_loss, &har_weights, &mut drop_rng)?;
                let x = tape.constant(self.block(&batch, &self.pbd)?);
                let xin = append_labels(&mut tape, x, ph, batch.len(), self.pbd.nodes);
                let pp = self.pbd.forward(&mut tape, &pb, xin, batch.len(), &self.graph, Some(&mut drop_rng))?;
                let prot = targets(&batch, Labels::Protective);
                let l_pbd = loss_on_tape(&mut tape, pp, &prot, &pbd_weights, &pbd_loss);
                let a = tape.scale(l_har, wh);
                let c = tape.scale(l_pbd, wp);
                let total = tape.add(a, c);
                lh += tape.value(l_har).item();
                lp += tape.value(l_pbd).item();
                tally(&mut har_cm, tape.value(ph), &targets(&batch, Labels::Activity));
                tally(&mut pbd_cm, tape.value(pp), &prot);
                let grads = tape.backward(total)?;
                har_adam.step(&mut har_params, &grads.for_params(&hb))?;
                pbd_adam.step(&mut pbd_params, &grads.for_params(&pb))?;
            }
            let (acc, f1) = metrics(&har_cm);
            har_log.push(EpochLog { epoch, loss: lh, acc, macro_f1: f1 });
            let (acc, f1) = metrics(&pbd_cm);
            pbd_log.push(EpochLog { epoch, loss: lp, acc, macro_f1: f1 });
        }
        Ok(done(Some(har_params), pretrain, har_log, pbd_params, pbd_log))
    }

    #[allow(clippy::too_many_arguments)]
    fn fit_pbd(
        &self,
        params: &mut ParamStore,
        adam: &mut AdamState,
        train: &[&WindowSample],
        activity: Option<&[Vec<f64>]>,
        loss: &LossConfig,
        weights: &[f64],
        seed: SeedStream,
    ) -> Result<Vec<EpochLog>, NetworkError> {
        let mut log = Vec::new();
        let index: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.config.epochs {
            let es = seed.derive(&format!("pbd/{epoch}"));
            let mut drop_rng = es.derive("dropout").rng();
            let mut loss_sum = 0.0;
            let mut cm = ConfusionMatrix::new(PBD_CLASSES);
            for idx in shuffled_batches(&index, self.config.batch_size, es) {
                let batch: Vec<&WindowSample> = idx.iter().map(|&i| train[i]).collect();
                let mut tape = Tape::new();
                let b = tape.bind(params);
                let mut x = tape.constant(self.block(&batch, &self.pbd)?);
                if let Some(act) = activity {
                    let rows: Vec<f64> = idx.iter().flat_map(|&i| act[i].iter().copied()).collect();
                    let lab = tape.constant(Tensor::matrix(batch.len(), ACTIVITY_CLASSES, rows));
                    x = append_labels(&mut tape, x, lab, batch.len(), self.pbd.nodes);
                }
                let p = self.pbd.forward(&mut tape, &b, x, batch.len(), &self.graph, Some(&mut drop_rng))?;
                let prot = targets(&batch, Labels::Protective);
                let l = loss_on_tape(&mut tape, p, &prot, weights, loss);
                loss_sum += tape.value(l).item();
                tally(&mut cm, tape.value(p), &prot);
                let grads = tape.backward(l)?.for_params(&b);
                adam.step(params, &grads)?;
            }
            let (acc, f1) = metrics(&cm);
            log.push(EpochLog { epoch, loss: loss_sum, acc, macro_f1: f1 });
            log::debug!("pbd epoch {epoch}: loss {loss_sum:.5} train acc {acc:.4}");
        }
        Ok(log)
    }

    /// Test-time predictions of a trained fold.
    pub fn predict(&self, trained: &TrainedFold, windows: &[&WindowSample]) -> Result<Vec<WindowPrediction>, NetworkError> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let har = match &trained.har_params {
            Some(p) if !trained.pbd_only => Some(self.har_probs(p, windows)?),
            _ => None,
        };
        let activity: Option<Vec<Vec<f64>>> = har.as_ref().map(|probs| {
            if trained.strategy.frozen() {
                probs.iter().map(|p| one_hot(argmax(p), ACTIVITY_CLASSES)).collect()
            } else {
                probs.clone()
            }
        });
        let pbd = self.pbd_probs(&trained.pbd_params, windows, activity.as_deref())?;
        Ok(windows
            .iter()
            .enumerate()
            .map(|(i, w)| WindowPrediction {
                window_id: w.window_id,
                subject_id: w.subject_id.clone(),
                trial_id: w.trial_id(),
                window_start: w.window_start,
                true_act: w.activity,
                pred_act: har.as_ref().map(|h| argmax(&h[i]) as u8),
                true_prot: w.protective,
                pred_prot: argmax(&pbd[i]) == 1,
                prot_score: pbd[i][1],
            })
            .collect())
    }

    /// Trains and evaluates one fold.
    pub fn run_fold(&self, fold: &LosoFold, original_train: usize, seed: SeedStream) -> Result<FoldOutcome, NetworkError> {
        let trained = self.train_fold(fold, seed)?;
        let test: Vec<&WindowSample> = fold.test_windows.iter().collect();
        let predictions = self.predict(&trained, &test)?;
        let hygiene = FoldHygiene {
            original_train_windows: original_train,
            train_windows: fold.train_windows.len(),
            test_windows: fold.test_windows.len(),
            test_subject_windows_in_train: fold.train_windows.iter().filter(|w| w.subject_id == fold.test_subject).count(),
            augmented_windows_in_test: fold.test_windows.iter().filter(|w| w.is_augmented).count(),
        };
        log::info!("fold {} done", fold.test_subject);
        Ok(FoldOutcome { trained, predictions, hygiene })
    }

    /// Leave-one-subject-out over `windows`, `parallel` folds at a time. Results are in
    /// subject order and do not depend on `parallel`.
    pub fn run_loso(&self, windows: &[WindowSample], parallel: usize, seed: SeedStream) -> Result<Vec<FoldOutcome>, NetworkError> {
        let plans = loso_splits(windows)?;
        let aug_seed = seed.derive("augment");
        let job = |plan: &crate::dataset::FoldPlan| -> Result<FoldOutcome, NetworkError> {
            let aug = (!self.config.augment.is_none()).then(|| (&self.config.augment, aug_seed.derive(&plan.test_subject)));
            let fold = plan.materialize(windows, aug);
            let original = windows.iter().filter(|w| w.subject_id != plan.test_subject).count();
            self.run_fold(&fold, original, seed)
        };
        if parallel <= 1 {
            return plans.iter().map(job).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| NetworkError::Config(format!("thread pool: {e}")))?;
        pool.install(|| plans.par_iter().map(job).collect())
    }
}

fn tally(cm: &mut ConfusionMatrix, probs: &Tensor, truth: &[usize]) {
    for (row, &t) in probs.data().chunks(probs.cols()).zip(truth) {
        cm.add(t, argmax(row));
    }
}

/// Items in a seeded random order, cut into batches of at most `size`.
pub fn shuffled_batches<T: Copy>(items: &[T], size: usize, seed: SeedStream) -> Vec<Vec<T>> {
    let mut order: Vec<T> = items.to_vec();
    order.shuffle(&mut seed.derive("shuffle").rng());
    order.chunks(size).map(<[T]>::to_vec).collect()
}

/// One point of a hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub beta: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub point: GridPoint,
    /// Macro F1 of activity, or PR-AUC of protective scores.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub role: Role,
    pub evaluated: Vec<GridOutcome>,
    pub best: GridPoint,
}

/// Cartesian product in `γ`-major order.
pub fn grid(gammas: &[f64], betas: &[f64], lrs: &[f64]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &gamma in gammas {
        for &beta in betas {
            for &lr in lrs {
                out.push(GridPoint { gamma, beta, lr });
            }
        }
    }
    out
}

/// Exhaustive search for one module: trains on `train`, scores on `holdout`.
/// The activity module is scored by macro F1, the protective module by PR-AUC with a
/// frozen activity module pretrained once under `base`.
pub fn grid_search(
    base: &Pipeline,
    role: Role,
    train: &[WindowSample],
    holdout: &[WindowSample],
    points: &[GridPoint],
    seed: SeedStream,
) -> Result<GridSearch, NetworkError> {
    if points.is_empty() {
        return Err(NetworkError::Config("empty search grid".into()));
    }
    let test: Vec<&WindowSample> = holdout.iter().collect();
    if test.is_empty() {
        return Err(NetworkError::Config("empty hold-out split".into()));
    }
    let fold = LosoFold { test_subject: "holdout".into(), train_windows: train.to_vec(), test_windows: holdout.to_vec() };
    let frozen_har = match role {
        Role::Pbd if !base.config.pbd_only => Some(base.pretrain_har(train, seed.derive("search-har"))?.params),
        _ => None,
    };
    let mut evaluated = Vec::with_capacity(points.len());
    for (i, &point) in points.iter().enumerate() {
        let mut p = base.clone();
        let s = seed.derive(&format!("grid/{i}"));
        let score = match role {
            Role::Har => {
                p.config.lr_har = point.lr;
                p.config.har_loss = LossConfig { gamma: point.gamma, beta: point.beta, ..p.config.har_loss };
                let pre = p.pretrain_har(train, s)?;
                let probs = p.har_probs(&pre.params, &test)?;
                ConfusionMatrix::from_pairs(
                    ACTIVITY_CLASSES,
                    test.iter().zip(&probs).map(|(w, q)| (w.activity as usize, argmax(q))),
                )
                .macro_f1()
                .unwrap_or(0.0)
            }
            Role::Pbd => {
                p.config.lr_pbd = point.lr;
                p.config.pbd_loss = LossConfig { gamma: point.gamma, beta: point.beta, ..p.config.pbd_loss };
                let trained = match &frozen_har {
                    Some(har) => p.train_pbd_with_frozen(&fold, har.clone(), s)?,
                    None => p.train_fold(&fold, s)?,
                };
                let preds = p.predict(&trained, &test)?;
                let scores: Vec<f64> = preds.iter().map(|q| q.prot_score).collect();
                let labels: Vec<bool> = preds.iter().map(|q| q.true_prot).collect();
                let ids: Vec<usize> = preds.iter().map(|q| q.window_id).collect();
                crate::eval::pr_auc(&scores, &labels, &ids).map(|c| c.auc).unwrap_or(0.0)
            }
        };
        log::info!("grid {role:?} γ={} β={} lr={} → {score:.4}", point.gamma, point.beta, point.lr);
        evaluated.push(GridOutcome { point, score });
    }
    let best = evaluated
        .iter()
        .fold(None::<&GridOutcome>, |acc, o| match acc {
            Some(a) if a.score >= o.score => Some(a),
            _ => Some(o),
        })
        .expect("non-empty grid")
        .point;
    Ok(GridSearch { role, evaluated, best })
}

impl Pipeline {
    /// Frozen-activity training of the protective module with given activity weights.
    pub fn train_pbd_with_frozen(&self, fold: &LosoFold, har: ParamStore, seed: SeedStream) -> Result<TrainedFold, NetworkError> {
        let seed = seed.derive(&format!("fold/{}", fold.test_subject));
        let train: Vec<&WindowSample> = fold.train_windows.iter().collect();
        let counts = ClassCounts::from_labels(targets(&train, Labels::Protective), PBD_CLASSES);
        let weights = self.config.pbd_loss.class_weights(&counts);
        let mut params = self.pbd.init(seed.derive("init"));
        let mut adam = AdamState::new(AdamConfig::with_lr(self.config.lr_pbd), &params);
        let hard: Vec<Vec<f64>> =
            self.har_probs(&har, &train)?.iter().map(|p| one_hot(argmax(p), ACTIVITY_CLASSES)).collect();
        let log = self.fit_pbd(&mut params, &mut adam, &train, Some(&hard), &self.config.pbd_loss, &weights, seed)?;
        Ok(TrainedFold {
            test_subject: fold.test_subject.clone(),
            strategy: Strategy::PretrainedFrozen,
            pbd_only: false,
            har_params: Some(har),
            pbd_params: params,
            pretrain: None,
            har_log: Vec::new(),
            pbd_log: log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TrialKind;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            gc_layers: 1,
            gc_kernels: 3,
            gc_mode: GcMode::Single,
            gc_relu: true,
            lstm_layers: 1,
            lstm_hidden: 4,
            dropout: 0.5,
            frame_step: 30,
        }
    }

    fn window(subject: &str, id: usize, activity: u8, protective: bool) -> WindowSample {
        let amp = 0.2 + 0.1 * activity as f64 + if protective { 0.3 } else { 0.0 };
        WindowSample {
            features: (0..180 * JOINTS * CHANNELS).map(|i| amp * ((i % 66) as f64 * 0.1 + (i / 66) as f64 * 0.05).sin()).collect(),
            timesteps: 180,
            activity,
            protective,
            subject_id: subject.into(),
            trial_kind: TrialKind::Normal,
            window_start: 0,
            is_augmented: false,
            window_id: id,
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let g = BodyGraph::full();
        let m = GcLstm::har(tiny_spec(), &g).unwrap();
        let mut p = m.init(SeedStream::new(1));
        for name in ["har.head.w", "har.head.b"] {
            let t = p.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        let (probs, y) = har_forward(&window("S1", 0, 2, false), &g, &m, &p).unwrap();
        assert!(probs.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(y, 0);
    }

    #[test]
    fn probabilities_sum_to_one_and_pbd_is_deterministic() {
        let g = BodyGraph::full();
        let m = GcLstm::pbd(tiny_spec(), &g, true).unwrap();
        let p = m.init(SeedStream::new(2));
        let w = window("S1", 0, 3, true);
        let a = pbd_forward(&w, &one_hot(3, 6), &g, &m, &p).unwrap();
        let b = pbd_forward(&w, &one_hot(3, 6), &g, &m, &p).unwrap();
        assert_eq!(a, b);
        assert!((a.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_input_appends_labels() {
        let x = Tensor::new(vec![1, 1, 3], vec![0.1, 0.2, 0.3]);
        let y = hierarchical_input(&x, &one_hot(2, 6)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 9]);
        assert_eq!(y.data(), &[0.1, 0.2, 0.3, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let z = hierarchical_input(&Tensor::new(vec![2, 4, 3], vec![1.0; 24]), &[0.0; 6]).unwrap();
        assert!(z.data().chunks(9).all(|r| r[..3] == [1.0; 3] && r[3..] == [0.0; 6]));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("Frozen".parse::<Strategy>().is_err());
    }

    #[test]
    fn hierarchical_width_is_nine_for_every_graph() {
        let full = BodyGraph::full();
        for n in [22usize, 14, 7] {
            let ids: Vec<u32> = (1..=n as u32).collect();
            let edges: Vec<(u32, u32)> = (2..=n as u32).map(|i| (i - 1, i)).collect();
            let g = crate::bodygraph::build_graph(&ids, &edges).unwrap();
            let m = GcLstm::pbd(ModelSpec::pbd(), &g, true).unwrap();
            assert_eq!(m.in_channels, 9);
            assert_eq!(m.lstm_input_dim(), n * 16);
        }
        assert_eq!(GcLstm::har(ModelSpec::har(), &full).unwrap().lstm_input_dim(), 572);
    }

    fn toy_corpus() -> Vec<WindowSample> {
        let mut out = Vec::new();
        for (s, subject) in ["S1", "S2", "S3"].iter().enumerate() {
            for k in 0..8 {
                let act = (k % 2) as u8 * 2;
                out.push(window(subject, s * 8 + k, act, k % 4 == 0));
            }
        }
        out
    }

    fn toy_pipeline(strategy: Strategy, epochs: usize) -> Pipeline {
        let cfg = TrainConfig {
            strategy,
            epochs,
            batch_size: 8,
            lr_har: 1e-2,
            lr_pbd: 1e-2,
            augment: AugmentConfig::none(),
            ..Default::default()
        };
        Pipeline::new(BodyGraph::full(), tiny_spec(), tiny_spec(), cfg).unwrap()
    }

    #[test]
    fn zero_epoch_pretraining_returns_initialization() {
        let p = toy_pipeline(Strategy::PretrainedFrozen, 0);
        let corpus = toy_corpus();
        let pre = p.pretrain_har(&corpus, SeedStream::new(0)).unwrap();
        assert_eq!(pre.selected_epoch, 0);
        assert!(pre.params.bitwise_eq(&p.har.init(SeedStream::new(0).derive("pretrain").derive("init"))));
    }

    #[test]
    fn pretraining_needs_two_subjects() {
        let p = toy_pipeline(Strategy::PretrainedFrozen, 1);
        let one: Vec<_> = toy_corpus().into_iter().filter(|w| w.subject_id == "S1").collect();
        assert!(matches!(p.pretrain_har(&one, SeedStream::new(0)), Err(NetworkError::Config(_))));
    }

    #[test]
    fn frozen_strategy_keeps_snapshot() {
        let p = toy_pipeline(Strategy::PretrainedFrozen, 2);
        let corpus = toy_corpus();
        let plan = &loso_splits(&corpus).unwrap()[0];
        let fold = plan.materialize(&corpus, None);
        let t = p.train_fold(&fold, SeedStream::new(5)).unwrap();
        let pre = t.pretrain.as_ref().unwrap();
        assert!((1..=2).contains(&pre.selected_epoch));
        assert!(t.har_params.as_ref().unwrap().bitwise_eq(&pre.params));
        assert_eq!(t.pbd_log.len(), 2);
    }

    #[test]
    fn joint_training_moves_both_modules() {
        let p = toy_pipeline(Strategy::JointBothCfcc, 1);
        let corpus = toy_corpus();
        let fold = loso_splits(&corpus).unwrap()[0].materialize(&corpus, None);
        let seed = SeedStream::new(5);
        let t = p.train_fold(&fold, seed).unwrap();
        let init = seed.derive(&format!("fold/{}", fold.test_subject)).derive("init");
        assert!(!t.har_params.as_ref().unwrap().bitwise_eq(&p.har.init(init)));
        assert!(!t.pbd_params.bitwise_eq(&p.pbd.init(init)));
        let again = p.train_fold(&fold, seed).unwrap();
        assert_eq!(t.har_log, again.har_log);
        assert_eq!(t.pbd_log, again.pbd_log);
    }

    #[test]
    fn grid_of_one_returns_it() {
        let p = toy_pipeline(Strategy::PretrainedFrozen, 1);
        let corpus = toy_corpus();
        let (hold, train): (Vec<_>, Vec<_>) = corpus.into_iter().partition(|w| w.subject_id == "S3");
        let pts = grid(&[0.5], &[0.9999], &[1e-3]);
        let r = grid_search(&p, Role::Har, &train, &hold, &pts, SeedStream::new(0)).unwrap();
        assert_eq!(r.best, pts[0]);
        assert_eq!(r.evaluated.len(), 1);
        assert!(grid_search(&p, Role::Har, &train, &hold, &[], SeedStream::new(0)).is_err());
        assert_eq!(grid(&[0.0, 1.0], &[0.9991, 0.9995, 0.9999], &[1e-4, 1e-3]).len(), 12);
    }
}
