//! FedAvg over per-speaker clients.
//!
//! Each round a fixed-size random subset of clients trains locally from the
//! current global model. A client exposes its pseudo-gradient
//! `(global − local) / lr`; the server averages the participants' resulting
//! models uniformly. Data-level protection rewrites a client's training set
//! once, before it first participates; gradient-level protection perturbs
//! every pseudo-gradient before it leaves the client. Round logs only ever
//! hold what the server received.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Partition, PropertyLabel, Sample, SpeakerId};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::nn::{Architecture, Mode, ModelParams};
use crate::rng::{self, Stream};

pub const ROUNDS_HEADER: &str = "fpb-rounds-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    /// Fraction of clients sampled per round (`q`).
    pub participation_rate: f64,
    /// Global rounds (`T`).
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of each client's samples used for local training; the rest is
    /// held out for validation.
    pub train_fraction: f64,
    pub seed: u64,
    /// Keep the full pseudo-gradient in each snapshot, not just the first layer.
    pub keep_full_gradients: bool,
    /// Keep a copy of the global model in every round log.
    pub keep_global_models: bool,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            participation_rate: 0.1,
            rounds: 200,
            local_epochs: 1,
            batch_size: 20,
            lr: 0.0005,
            train_fraction: 0.8,
            seed: 0,
            keep_full_gradients: false,
            keep_global_models: false,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config("participation_rate must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::usage("local_epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `max(1, round(q·n))`.
    pub fn participants_per_round(&self, clients: usize) -> usize {
        ((self.participation_rate * clients as f64).round() as usize).clamp(1, clients.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: SpeakerId,
    pub properties: PropertyLabel,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    protected: bool,
}

impl ClientState {
    pub fn new(id: SpeakerId, properties: PropertyLabel, train: Vec<Sample>, validation: Vec<Sample>) -> Self {
        Self {
            id,
            properties,
            train,
            validation,
            protected: false,
        }
    }

    pub fn is_protected(&self) -> bool {
        self.protected
    }

    /// Rewrites the training set with `hook` unless already done.
    pub fn ensure_protected(&mut self, hook: &dyn DataProtection, seed: u64) -> Result<()> {
        if self.protected {
            return Ok(());
        }
        let mut rng = rng::stream(seed, &["data-protection".into(), self.id.into()]);
        self.train = hook.protect(&self.train, &mut rng)?;
        self.protected = true;
        Ok(())
    }
}

/// One client per speaker, with a seeded train/validation split of its samples.
pub fn build_clients(partition: &Partition, cfg: &FlConfig) -> Vec<ClientState> {
    partition
        .speakers
        .iter()
        .map(|sp| {
            let mut own: Vec<Sample> = partition.samples_of(sp.id).cloned().collect();
            own.shuffle(&mut rng::stream(cfg.seed, &["client-split".into(), sp.id.into()]));
            let mut n_train = (own.len() as f64 * cfg.train_fraction).round() as usize;
            if own.len() >= 2 {
                n_train = n_train.clamp(1, own.len() - 1);
            } else {
                n_train = own.len();
            }
            let validation = own.split_off(n_train);
            ClientState::new(sp.id, sp.properties, own, validation)
        })
        .collect()
}

pub trait DataProtection: Sync {
    /// Rewrites one client's samples; called once per client.
    fn protect(&self, samples: &[Sample], rng: &mut Stream) -> Result<Vec<Sample>>;
}

pub trait GradientProtection: Sync {
    fn perturb(&self, grad: &[f64], rng: &mut Stream) -> Vec<f64>;
}

/// Protection installed on every client of a run. `seed` keys the
/// mechanisms' random streams.
#[derive(Clone, Copy, Default)]
pub struct ProtectionHook<'a> {
    pub data: Option<&'a dyn DataProtection>,
    pub gradient: Option<&'a dyn GradientProtection>,
    pub seed: u64,
}

impl ProtectionHook<'_> {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSnapshot {
    pub client_id: SpeakerId,
    pub round: u32,
    /// First-layer weight and bias block of the exposed pseudo-gradient.
    pub first_layer_grad: Vec<f64>,
    pub full_grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: u32,
    /// Sorted ascending.
    pub participants: Vec<SpeakerId>,
    pub snapshots: Vec<GradientSnapshot>,
    pub global: Option<ModelParams>,
}

/// Local SGD from `global`; returns the local model and the pseudo-gradient.
///
/// The pseudo-gradient is accumulated as the sum of step gradients, which is
/// `(global − local) / lr` without the cancellation error of the subtraction.
pub fn local_train(global: &ModelParams, client: &ClientState, cfg: &FlConfig, rng: &mut Stream) -> Result<(ModelParams, Vec<f64>)> {
    if cfg.local_epochs == 0 {
        return Err(Error::usage("local_epochs must be at least 1"));
    }
    if client.train.is_empty() {
        return Err(Error::usage(format!("client {} has no training data", client.id)));
    }
    let dim = global.architecture().input_dim();
    let mut local = global.clone();
    let mut pseudo = vec![0.0; global.param_count()];
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut xs = Array2::zeros((chunk.len(), dim));
            let mut labels = Vec::with_capacity(chunk.len());
            for (mut row, &i) in xs.rows_mut().into_iter().zip(chunk) {
                let s = &client.train[i];
                if s.features.len() != dim {
                    return Err(Error::config(format!(
                        "client {} sample has {} features, model expects {dim}",
                        client.id,
                        s.features.len()
                    )));
                }
                row.assign(&ndarray::aview1(&s.features));
                labels.push(s.emotion);
            }
            let (grad, _) = local.gradient_of(xs.view(), &labels, Mode::Train(&mut *rng))?;
            local.sgd_step_in_place(&grad, cfg.lr)?;
            pseudo.iter_mut().zip(&grad).for_each(|(p, g)| *p += g);
        }
    }
    Ok((local, pseudo))
}

/// Uniform parameter average, accumulated in slice order.
pub fn average_models(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::usage("nothing to average"))?;
    let mut sum = first.flatten();
    for m in &models[1..] {
        if m.architecture() != first.architecture() {
            return Err(Error::config("cannot average models of different shapes"));
        }
        sum.iter_mut().zip(m.flatten()).for_each(|(a, b)| *a += b);
    }
    let n = models.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    ModelParams::from_flat(first.architecture().clone(), &sum)
}

/// Random stream driving client `id`'s local training in round `t`.
pub fn local_stream(seed: u64, id: SpeakerId, t: u32) -> Stream {
    rng::stream(seed, &["local".into(), id.into(), t.into()])
}

/// One FedAvg round `t` (1-based).
pub fn fedavg_round(
    global: &ModelParams,
    clients: &mut [ClientState],
    cfg: &FlConfig,
    t: u32,
    protection: ProtectionHook<'_>,
) -> Result<(ModelParams, RoundLog)> {
    cfg.validate()?;
    if t == 0 || t > cfg.rounds {
        return Err(Error::usage(format!("round {t} outside [1, {}]", cfg.rounds)));
    }
    let mut eligible: Vec<usize> = (0..clients.len()).filter(|&i| !clients[i].train.is_empty()).collect();
    if eligible.is_empty() {
        return Err(Error::config("no client has training data"));
    }
    eligible.sort_by_key(|&i| clients[i].id);
    let m = cfg.participants_per_round(eligible.len());
    let mut round_rng = rng::stream(cfg.seed, &["participants".into(), t.into()]);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut round_rng, eligible.len(), m)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    chosen.sort_by_key(|&i| clients[i].id);

    if let Some(hook) = protection.data {
        for &i in &chosen {
            clients[i].ensure_protected(hook, protection.seed)?;
        }
    }

    let first_len = global.architecture().first_layer_len();
    let clients_ro: &[ClientState] = clients;
    let results = chosen
        .par_iter()
        .map(|&i| {
            let client = &clients_ro[i];
            let mut rng = local_stream(cfg.seed, client.id, t);
            let (local, pseudo) = local_train(global, client, cfg, &mut rng)?;
            let (uploaded, exposed) = match protection.gradient {
                Some(hook) => {
                    let mut grng = rng::stream(protection.seed, &["gradient-protection".into(), client.id.into(), t.into()]);
                    let noisy = hook.perturb(&pseudo, &mut grng);
                    (global.sgd_step(&noisy, cfg.lr)?, noisy)
                }
                None => (local, pseudo),
            };
            let snapshot = GradientSnapshot {
                client_id: client.id,
                round: t,
                first_layer_grad: exposed[..first_len].to_vec(),
                full_grad: cfg.keep_full_gradients.then_some(exposed),
            };
            Ok((uploaded, snapshot))
        })
        .collect::<Result<Vec<_>>>()?;

    let (models, snapshots): (Vec<ModelParams>, Vec<GradientSnapshot>) = results.into_iter().unzip();
    let next = average_models(&models)?;
    if !next.is_finite() {
        return Err(Error::numeric(format!("global model diverged in round {t}")));
    }
    let log = RoundLog {
        round: t,
        participants: chosen.iter().map(|&i| clients[i].id).collect(),
        snapshots,
        global: cfg.keep_global_models.then(|| next.clone()),
    };
    Ok((next, log))
}

#[derive(Clone, Debug)]
pub struct FlRun {
    pub model: ModelParams,
    pub logs: Vec<RoundLog>,
    pub utility: MetricsReport,
}

impl FlRun {
    pub fn snapshots(&self) -> impl Iterator<Item = &GradientSnapshot> {
        self.logs.iter().flat_map(|l| l.snapshots.iter())
    }
}

/// Initial global model, shared by every run that uses the same seed.
pub fn initial_model(arch: &Architecture, cfg: &FlConfig) -> ModelParams {
    ModelParams::init(arch.clone(), &mut rng::stream(cfg.seed, &["init".into()]))
}

/// Runs all rounds and scores the final model on the pooled validation data.
pub fn run_fl(clients: &mut [ClientState], arch: &Architecture, cfg: &FlConfig, protection: ProtectionHook<'_>) -> Result<FlRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::usage("federated run needs at least one client"));
    }
    let mut model = initial_model(arch, cfg);
    let mut logs = Vec::with_capacity(cfg.rounds as usize);
    for t in 1..=cfg.rounds {
        let (next, log) = fedavg_round(&model, clients, cfg, t, protection)?;
        model = next;
        logs.push(log);
    }
    let utility = evaluate_model(&model, clients.iter().flat_map(|c| c.validation.iter()))?;
    Ok(FlRun { model, logs, utility })
}

/// Task metrics of `model` on `samples`.
pub fn evaluate_model<'a>(model: &ModelParams, samples: impl Iterator<Item = &'a Sample>) -> Result<MetricsReport> {
    let samples: Vec<&Sample> = samples.collect();
    let classes = model.architecture().output_dim();
    let mut cc = ConfusionCounts::new(classes);
    if samples.is_empty() {
        return Ok(MetricsReport::task(&cc));
    }
    let dim = model.architecture().input_dim();
    let mut xs = Array2::zeros((samples.len(), dim));
    for (mut row, s) in xs.rows_mut().into_iter().zip(&samples) {
        if s.features.len() != dim {
            return Err(Error::config("validation sample dimension differs from the model"));
        }
        row.assign(&ndarray::aview1(&s.features));
    }
    let preds = model.predict_batch(xs.view())?;
    for (p, s) in preds.into_iter().zip(&samples) {
        cc.record(p, s.emotion)?;
    }
    Ok(MetricsReport::task(&cc))
}

/// Writes `<stem>.idx` (text index) and `<stem>.bin` (little-endian f64
/// first-layer vectors, concatenated in index order).
pub fn write_round_logs(stem: &Path, logs: &[RoundLog]) -> Result<()> {
    let snapshots: Vec<&GradientSnapshot> = logs.iter().flat_map(|l| l.snapshots.iter()).collect();
    write_snapshots(stem, &snapshots, None)
}

pub(crate) fn write_snapshots(stem: &Path, snapshots: &[&GradientSnapshot], extra_header: Option<&str>) -> Result<()> {
    let len = snapshots.first().map_or(0, |s| s.first_layer_grad.len());
    if snapshots.iter().any(|s| s.first_layer_grad.len() != len) {
        return Err(Error::usage("snapshots differ in length"));
    }
    let idx_path = stem.with_extension("idx");
    let bin_path = stem.with_extension("bin");
    let mut idx = format!("{ROUNDS_HEADER} vector_len={len} count={}", snapshots.len());
    if let Some(extra) = extra_header {
        idx.push(' ');
        idx.push_str(extra);
    }
    idx.push('\n');
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bin = BufWriter::new(file);
    for (k, s) in snapshots.iter().enumerate() {
        idx.push_str(&format!("{} {} {}\n", s.round, s.client_id, k));
        for v in &s.first_layer_grad {
            bin.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        }
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    fs::write(&idx_path, idx).map_err(|e| Error::io(&idx_path, e))
}

/// Extra `key=value` fields from a snapshot index header.
pub type HeaderExtras = Vec<(String, String)>;

/// Reads snapshots written by [`write_round_logs`], in file order. Returns
/// the snapshots and any extra `key=value` header fields.
pub fn read_snapshots(stem: &Path) -> Result<(Vec<GradientSnapshot>, HeaderExtras)> {
    let idx_path = stem.with_extension("idx");
    let bin_path = stem.with_extension("bin");
    let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(&idx_path, "empty index"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(ROUNDS_HEADER) {
        return Err(Error::format(&idx_path, format!("missing {ROUNDS_HEADER} header")));
    }
    let mut len = None;
    let mut count = None;
    let mut extra = Vec::new();
    for kv in fields {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::format(&idx_path, "bad header field"))?;
        match k {
            "vector_len" => len = v.parse::<usize>().ok(),
            "count" => count = v.parse::<usize>().ok(),
            _ => extra.push((k.to_string(), v.to_string())),
        }
    }
    let (len, count) = len.zip(count).ok_or_else(|| Error::format(&idx_path, "header lacks vector_len/count"))?;

    let mut bytes = Vec::new();
    File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != len * count * 8 {
        return Err(Error::format(&bin_path, format!("expected {} bytes, found {}", len * count * 8, bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = (parts.len() == 3)
            .then(|| Some((parts[0].parse::<u32>().ok()?, parts[1].parse::<SpeakerId>().ok()?, parts[2].parse::<usize>().ok()?)))
            .flatten();
        let (round, client_id, k) = parsed.ok_or_else(|| Error::format(&idx_path, format!("bad index line `{line}`")))?;
        if k >= count {
            return Err(Error::format(&idx_path, "index offset beyond data"));
        }
        let start = k * len * 8;
        let first_layer_grad = bytes[start..start + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(GradientSnapshot {
            client_id,
            round,
            first_layer_grad,
            full_grad: None,
        });
    }
    if out.len() != count {
        return Err(Error::format(&idx_path, "index line count differs from header"));
    }
    Ok((out, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, CorpusConfig};

    fn tiny_setup(speakers: usize) -> (Vec<ClientState>, Architecture, FlConfig) {
        let corpus = generate_corpus(
            &CorpusConfig {
                speakers,
                male_speakers: speakers / 2,
                samples_per_speaker: 10,
                ..CorpusConfig::default()
            },
            3,
        )
        .unwrap();
        let cfg = FlConfig {
            rounds: 3,
            seed: 5,
            ..FlConfig::default()
        };
        let partition = Partition {
            speakers: corpus.speakers,
            samples: corpus.samples,
        };
        let arch = Architecture::new(vec![40, 16, 8, 4], 0.2).unwrap();
        (build_clients(&partition, &cfg), arch, cfg)
    }

    #[test]
    fn client_split_is_disjoint_and_nonempty() {
        let (clients, _, _) = tiny_setup(4);
        for c in &clients {
            assert_eq!(c.train.len(), 8);
            assert_eq!(c.validation.len(), 2);
            for v in &c.validation {
                assert!(!c.train.contains(v));
            }
        }
    }

    #[test]
    fn single_batch_pseudo_gradient_is_the_batch_gradient() {
        let (clients, arch, cfg) = tiny_setup(2);
        let cfg = FlConfig { batch_size: 100, ..cfg };
        let global = initial_model(&arch, &cfg);
        let client = &clients[0];
        let (local, pseudo) = local_train(&global, client, &cfg, &mut rng::seeded(1)).unwrap();

        // replay: one shuffle, one dropout draw sequence
        let mut rng = rng::seeded(1);
        let mut order: Vec<usize> = (0..client.train.len()).collect();
        order.shuffle(&mut rng);
        let batch: Vec<(&[f64], usize)> = order
            .iter()
            .map(|&i| (client.train[i].features.as_slice(), client.train[i].emotion))
            .collect();
        let (grad, _) = global.compute_gradient(&batch, Mode::Train(&mut rng)).unwrap();
        assert_eq!(pseudo, grad);
        assert_eq!(local, global.sgd_step(&grad, cfg.lr).unwrap());
        let delta: Vec<f64> = global
            .flatten()
            .iter()
            .zip(local.flatten())
            .map(|(g, l)| (g - l) / cfg.lr)
            .collect();
        for (d, p) in delta.iter().zip(&pseudo) {
            assert!((d - p).abs() <= 1e-9 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn zero_local_epochs_is_a_usage_error() {
        let (clients, arch, cfg) = tiny_setup(2);
        let cfg = FlConfig { local_epochs: 0, ..cfg };
        let global = initial_model(&arch, &cfg);
        assert!(matches!(
            local_train(&global, &clients[0], &cfg, &mut rng::seeded(0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn participant_count_is_fixed() {
        let cfg = FlConfig::default();
        assert_eq!(cfg.participants_per_round(61), 6);
        assert_eq!(cfg.participants_per_round(30), 3);
        assert_eq!(cfg.participants_per_round(3), 1);
        let (mut clients, arch, cfg) = tiny_setup(20);
        let cfg = FlConfig { participation_rate: 0.25, ..cfg };
        let run = run_fl(&mut clients, &arch, &cfg, ProtectionHook::none()).unwrap();
        for log in &run.logs {
            assert_eq!(log.participants.len(), 5);
            assert!(log.participants.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn round_index_is_checked() {
        let (mut clients, arch, cfg) = tiny_setup(2);
        let global = initial_model(&arch, &cfg);
        assert!(fedavg_round(&global, &mut clients, &cfg, 0, ProtectionHook::none()).is_err());
        assert!(fedavg_round(&global, &mut clients, &cfg, 4, ProtectionHook::none()).is_err());
        let mut none: Vec<ClientState> = Vec::new();
        assert!(matches!(
            fedavg_round(&global, &mut none, &cfg, 1, ProtectionHook::none()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_rounds_returns_the_initial_model() {
        let (mut clients, arch, cfg) = tiny_setup(3);
        let cfg = FlConfig { rounds: 0, ..cfg };
        let run = run_fl(&mut clients, &arch, &cfg, ProtectionHook::none()).unwrap();
        assert!(run.logs.is_empty());
        assert_eq!(run.model, initial_model(&arch, &cfg));
    }

    #[test]
    fn runs_are_reproducible() {
        let (mut a, arch, cfg) = tiny_setup(6);
        let mut b = a.clone();
        let ra = run_fl(&mut a, &arch, &cfg, ProtectionHook::none()).unwrap();
        let rb = run_fl(&mut b, &arch, &cfg, ProtectionHook::none()).unwrap();
        assert_eq!(ra.model, rb.model);
        assert_eq!(ra.logs, rb.logs);
    }

    #[test]
    fn round_log_files_round_trip() {
        let (mut clients, arch, cfg) = tiny_setup(6);
        let run = run_fl(&mut clients, &arch, &cfg, ProtectionHook::none()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("rounds");
        write_round_logs(&stem, &run.logs).unwrap();
        let (back, _) = read_snapshots(&stem).unwrap();
        let original: Vec<GradientSnapshot> = run.snapshots().cloned().collect();
        assert_eq!(back, original);

        let idx = stem.with_extension("idx");
        let text = fs::read_to_string(&idx).unwrap().replace(ROUNDS_HEADER, "fpb-rounds-v0");
        fs::write(&idx, text).unwrap();
        assert!(matches!(read_snapshots(&stem), Err(Error::Format { .. })));
    }
}
