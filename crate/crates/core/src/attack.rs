//! Shadow-training property inference.
//!
//! The attacker runs the client training procedure on speakers it controls,
//! labels every first-layer pseudo-gradient with the owner's property value
//! and fits a classifier. Each private snapshot then gets one prediction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Partition, Property, PropertyLabel, SpeakerId};
use crate::error::{Error, Result};
use crate::federated::{self, build_clients, FlConfig, GradientSnapshot, ProtectionHook, RoundLog};
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::nn::{Architecture, Mode, ModelParams};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackDataset {
    pub target: Property,
    pub classes: usize,
    pub gradients: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Owner of each gradient, kept for stratified sampling.
    pub clients: Vec<SpeakerId>,
}

impl AttackDataset {
    pub fn new(target: Property, classes: usize) -> Self {
        Self {
            target,
            classes,
            gradients: Vec::new(),
            labels: Vec::new(),
            clients: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.gradients.first().map_or(0, Vec::len)
    }

    pub fn push(&mut self, client: SpeakerId, gradient: Vec<f64>, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::usage(format!("label {label} outside the {} classes of {}", self.classes, self.target.name())));
        }
        if !self.is_empty() && gradient.len() != self.dim() {
            return Err(Error::usage("gradient length differs from the dataset"));
        }
        self.gradients.push(gradient);
        self.labels.push(label);
        self.clients.push(client);
        Ok(())
    }

    /// One entry per snapshot, labelled with its client's property value.
    pub fn from_logs(logs: &[RoundLog], properties: &BTreeMap<SpeakerId, PropertyLabel>, target: Property, classes: usize) -> Result<Self> {
        let mut ds = Self::new(target, classes);
        for snap in logs.iter().flat_map(|l| &l.snapshots) {
            let label = properties
                .get(&snap.client_id)
                .ok_or_else(|| Error::usage(format!("no properties for client {}", snap.client_id)))?;
            ds.push(snap.client_id, snap.first_layer_grad.clone(), label.class(target))?;
        }
        Ok(ds)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Writes `<stem>.idx`/`<stem>.bin` in the round-log layout plus a
    /// `<stem>.labels` sidecar.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let snaps: Vec<GradientSnapshot> = self
            .gradients
            .iter()
            .zip(&self.clients)
            .map(|(g, &c)| GradientSnapshot {
                client_id: c,
                round: 0,
                first_layer_grad: g.clone(),
                full_grad: None,
            })
            .collect();
        let refs: Vec<&GradientSnapshot> = snaps.iter().collect();
        let extra = format!("target={} classes={}", self.target.name(), self.classes);
        federated::write_snapshots(stem, &refs, Some(&extra))?;
        let labels_path = stem.with_extension("labels");
        let text: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&labels_path, text).map_err(|e| Error::io(&labels_path, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let idx_path = stem.with_extension("idx");
        let (snaps, extra) = federated::read_snapshots(stem)?;
        let field = |k: &str| extra.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let target = field("target")
            .and_then(Property::parse)
            .ok_or_else(|| Error::format(&idx_path, "missing or unknown target"))?;
        let classes = field("classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&idx_path, "missing class count"))?;
        let labels_path = stem.with_extension("labels");
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let labels: Vec<usize> = text
            .lines()
            .map(|l| l.trim().parse().map_err(|_| Error::format(&labels_path, format!("bad label `{l}`"))))
            .collect::<Result<_>>()?;
        if labels.len() != snaps.len() {
            return Err(Error::format(&labels_path, "label count differs from snapshot count"));
        }
        let mut ds = Self::new(target, classes);
        for (s, l) in snaps.into_iter().zip(labels) {
            ds.push(s.client_id, s.first_layer_grad, l)
                .map_err(|e| Error::format(&labels_path, e.to_string()))?;
        }
        Ok(ds)
    }
}

/// Runs unprotected FL over the shadow speakers and harvests labelled
/// first-layer pseudo-gradients.
pub fn shadow_train(shadow: &Partition, arch: &Architecture, fl_cfg: &FlConfig, target: Property, classes: usize) -> Result<AttackDataset> {
    if shadow.speakers.is_empty() {
        return Err(Error::usage("shadow partition is empty"));
    }
    let mut clients = build_clients(shadow, fl_cfg);
    let run = federated::run_fl(&mut clients, arch, fl_cfg, ProtectionHook::none())?;
    let properties = shadow.speakers.iter().map(|s| (s.id, s.properties)).collect();
    AttackDataset::from_logs(&run.logs, &properties, target, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackArchitecture {
    Mlp,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub architecture: AttackArchitecture,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of the dataset held out for early stopping.
    pub holdout_fraction: f64,
    /// Epochs without holdout improvement before stopping.
    pub patience: usize,
    /// Rescale every gradient to unit norm before standardizing.
    pub unit_norm: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            architecture: AttackArchitecture::Mlp,
            hidden: 128,
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
            holdout_fraction: 0.1,
            patience: 10,
            unit_norm: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("attack hidden width and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("attack lr must be positive"));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Training trace of [`train_attack`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Whether `train_loss` never increased between epochs.
    pub monotone: bool,
}

/// Fitted attack classifier with its input standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    pub target: Property,
    pub unit_norm: bool,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub params: ModelParams,
    pub report: ConvergenceReport,
}

impl AttackModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    fn prepare(&self, gradients: &[&[f64]]) -> Result<Array2<f64>> {
        let dim = self.input_dim();
        let mut xs = Array2::zeros((gradients.len(), dim));
        for (mut row, g) in xs.rows_mut().into_iter().zip(gradients) {
            if g.len() != dim {
                return Err(Error::config(format!("attack expects {dim}-dim gradients, got {}", g.len())));
            }
            row.assign(&ndarray::aview1(g));
            if self.unit_norm {
                unit_scale(&mut row);
            }
            row -= &self.mean;
            row /= &self.scale;
        }
        Ok(xs)
    }

    pub fn predict_batch(&self, gradients: &[&[f64]]) -> Result<Vec<usize>> {
        if gradients.is_empty() {
            return Ok(Vec::new());
        }
        self.params.predict_batch(self.prepare(gradients)?.view())
    }

    pub fn predict(&self, gradient: &[f64]) -> Result<usize> {
        Ok(self.predict_batch(&[gradient])?[0])
    }
}

fn unit_scale(row: &mut ndarray::ArrayViewMut1<'_, f64>) {
    let n = row.dot(row).sqrt();
    if n > 0.0 {
        *row /= n;
    }
}

/// Fits the attack classifier with mini-batch SGD, stopping early when the
/// holdout loss stops improving. The parameters of the best holdout epoch
/// are returned.
pub fn train_attack(ds: &AttackDataset, cfg: &AttackConfig) -> Result<AttackModel> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::usage("attack dataset is empty"));
    }
    let present = ds.class_histogram().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::DegenerateLabels(format!(
            "attack dataset for {} holds a single class",
            ds.target.name()
        )));
    }
    let dim = ds.dim();
    let mut xs = Array2::zeros((ds.len(), dim));
    for (mut row, g) in xs.rows_mut().into_iter().zip(&ds.gradients) {
        row.assign(&ndarray::aview1(g));
        if cfg.unit_norm {
            unit_scale(&mut row);
        }
    }

    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &["attack-holdout".into()]));
    let n_hold = if ds.len() >= 10 {
        (ds.len() as f64 * cfg.holdout_fraction).round() as usize
    } else {
        0
    };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let train_x = xs.select(Axis(0), &train_idx);
    let mean = train_x.mean_axis(Axis(0)).expect("nonempty training split");
    let scale = train_x
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    let standardize = |m: Array2<f64>| (m - &mean) / &scale;
    let train_x = standardize(train_x);
    let train_y: Vec<usize> = train_idx.iter().map(|&i| ds.labels[i]).collect();
    let hold_x = standardize(xs.select(Axis(0), hold_idx));
    let hold_y: Vec<usize> = hold_idx.iter().map(|&i| ds.labels[i]).collect();

    let widths = match cfg.architecture {
        AttackArchitecture::Mlp => vec![dim, cfg.hidden, ds.classes],
        AttackArchitecture::Logistic => vec![dim, ds.classes],
    };
    let arch = Architecture::new(widths, 0.0)?;
    let mut rng = rng::stream(cfg.seed, &["attack-train".into()]);
    let mut params = ModelParams::init(arch, &mut rng);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut report = ConvergenceReport::default();
    let mut perm: Vec<usize> = (0..train_y.len()).collect();

    for epoch in 0..cfg.epochs {
        perm.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let bx = train_x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (grad, loss) = params.gradient_of(bx.view(), &by, Mode::Eval)?;
            params.sgd_step_in_place(&grad, cfg.lr)?;
            total += loss * chunk.len() as f64;
        }
        report.train_loss.push(total / train_y.len() as f64);
        report.epochs_run = epoch + 1;

        let monitor = if hold_y.is_empty() {
            params.loss(train_x.view(), &train_y)?
        } else {
            params.loss(hold_x.view(), &hold_y)?
        };
        report.holdout_loss.push(monitor);
        if monitor < best_loss {
            best_loss = monitor;
            best = params.clone();
            report.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if cfg.epochs == 0 {
        best = params;
    }
    report.monotone = report.train_loss.windows(2).all(|w| w[1] <= w[0]);
    Ok(AttackModel {
        target: ds.target,
        unit_norm: cfg.unit_norm,
        mean,
        scale,
        params: best,
        report,
    })
}

/// Picks `n_eval` snapshots round-robin over clients in a seeded order, so
/// every client contributes before any contributes twice.
pub fn stratified_sample<'a>(snapshots: &[&'a GradientSnapshot], n_eval: usize, seed: u64) -> Result<Vec<&'a GradientSnapshot>> {
    if snapshots.len() < n_eval {
        return Err(Error::usage(format!(
            "{} snapshots available, {n_eval} requested",
            snapshots.len()
        )));
    }
    let mut rng = rng::stream(seed, &["attack-eval".into()]);
    let mut by_client: BTreeMap<SpeakerId, Vec<&GradientSnapshot>> = BTreeMap::new();
    for s in snapshots {
        by_client.entry(s.client_id).or_default().push(s);
    }
    let mut queues: Vec<Vec<&GradientSnapshot>> = by_client.into_values().collect();
    for q in &mut queues {
        q.shuffle(&mut rng);
    }
    queues.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_eval);
    let mut depth = 0;
    while out.len() < n_eval {
        for q in &queues {
            if let Some(s) = q.get(depth) {
                out.push(*s);
                if out.len() == n_eval {
                    break;
                }
            }
        }
        depth += 1;
    }
    Ok(out)
}

/// SR_P and UASR_P of `model` on `n_eval` private snapshots.
pub fn evaluate_attack(
    model: &AttackModel,
    logs: &[RoundLog],
    properties: &BTreeMap<SpeakerId, PropertyLabel>,
    classes: usize,
    n_eval: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let all: Vec<&GradientSnapshot> = logs.iter().flat_map(|l| &l.snapshots).collect();
    let picked = stratified_sample(&all, n_eval, seed)?;
    let grads: Vec<&[f64]> = picked.iter().map(|s| s.first_layer_grad.as_slice()).collect();
    let preds = model.predict_batch(&grads)?;
    let mut cc = ConfusionCounts::new(classes);
    for (p, s) in preds.into_iter().zip(&picked) {
        let truth = properties
            .get(&s.client_id)
            .ok_or_else(|| Error::usage(format!("no properties for client {}", s.client_id)))?;
        cc.record(p, truth.class(model.target))?;
    }
    Ok(MetricsReport::attack(&cc))
}
