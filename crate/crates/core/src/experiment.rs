//! Sweep orchestration: folds, privacy budgets, mechanisms and targets.
//!
//! A fold re-draws the shadow/private speaker split and fixes the FL and
//! attack seeds, so every cell of one fold shares the split, the initial
//! model, the participant schedule and the fitted attacker. The cell seed
//! only drives the protection mechanism.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_attack, shadow_train, train_attack, AttackConfig, AttackModel};
use crate::dataset::{generate_corpus, split_corpus, Corpus, CorpusConfig, Partition, Property, PropertyLabel, SpeakerId};
use crate::error::{Error, Result};
use crate::federated::{build_clients, run_fl, DataProtection, FlConfig, GradientProtection, ProtectionHook};
use crate::nn::Architecture;
use crate::privacy::{pro_ind_pool, voiceprint_pool, EmbeddingProtection, ProIndMechanism, UdpMechanism, VoiceprintDpMechanism};
use crate::rng;

pub const RESULTS_SCHEMA: &str = "fpb-results-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdpConfig {
    pub delta: f64,
    /// Clipping bound `∇l`.
    pub grad_bound: f64,
}

impl Default for UdpConfig {
    fn default() -> Self {
        Self {
            delta: 1e-5,
            grad_bound: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub corpus_seed: u64,
    pub shadow_speakers: usize,
    pub folds: usize,
    pub n_eval: usize,
    pub epsilons: Vec<f64>,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub corpus: CorpusConfig,
    pub fl: FlConfig,
    pub attack: AttackConfig,
    pub udp: UdpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            corpus_seed: 0,
            shadow_speakers: 30,
            folds: 3,
            n_eval: 100,
            epsilons: vec![1.0, 5.0, 10.0, 25.0, 50.0],
            output_dir: PathBuf::from("fpb-out"),
            threads: None,
            corpus: CorpusConfig::default(),
            fl: FlConfig::default(),
            attack: AttackConfig::default(),
            udp: UdpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::config("epsilons must be a nonempty list of positive numbers"));
        }
        if self.folds == 0 {
            return Err(Error::config("folds must be at least 1"));
        }
        if self.n_eval == 0 {
            return Err(Error::config("n_eval must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be at least 1"));
        }
        if !(self.udp.delta > 0.0 && self.udp.delta < 1.0) || self.udp.grad_bound.is_nan() || self.udp.grad_bound <= 0.0 {
            return Err(Error::config("udp needs delta in (0, 1) and a positive grad_bound"));
        }
        self.corpus.validate()?;
        self.fl.validate()?;
        self.attack.validate()
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.output_dir.join("corpus.csv")
    }

    pub fn surrogate_path(&self) -> PathBuf {
        self.output_dir.join("surrogate.json")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    None,
    Udp,
    VoiceprintDp,
    ProInd,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 4] = [Self::None, Self::Udp, Self::VoiceprintDp, Self::ProInd];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Udp => "udp",
            Self::VoiceprintDp => "voiceprint_dp",
            Self::ProInd => "pro_ind",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// A mechanism with its protected property, for Pro-Ind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Defense {
    pub mechanism: MechanismKind,
    pub protects: Option<Property>,
}

impl Defense {
    pub const NONE: Defense = Defense {
        mechanism: MechanismKind::None,
        protects: None,
    };

    pub fn new(mechanism: MechanismKind, protects: Option<Property>) -> Result<Self> {
        match (mechanism, protects) {
            (MechanismKind::ProInd, None) => Err(Error::usage("pro_ind needs a protected property")),
            (MechanismKind::ProInd, p) => Ok(Self { mechanism, protects: p }),
            (m, _) => Ok(Self { mechanism: m, protects: None }),
        }
    }

    pub fn pro_ind(p: Property) -> Self {
        Self {
            mechanism: MechanismKind::ProInd,
            protects: Some(p),
        }
    }

    pub fn label(&self) -> String {
        match self.protects {
            Some(p) => format!("{}({})", self.mechanism.name(), p.name()),
            None => self.mechanism.name().to_string(),
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema: String,
    pub mechanism: MechanismKind,
    pub protected_property: Option<Property>,
    pub target: Property,
    pub epsilon: Option<f64>,
    pub fold: usize,
    pub seed: u64,
    pub n_eval: usize,
    pub sr_p: f64,
    pub uasr_p: f64,
    pub acc: f64,
    pub uar: f64,
    pub standard_accuracy: f64,
    pub attack_standard_accuracy: f64,
}

impl ResultRecord {
    pub fn defense(&self) -> Defense {
        Defense {
            mechanism: self.mechanism,
            protects: self.protected_property,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub mechanism: MechanismKind,
    pub protected_property: Option<Property>,
    pub target: Property,
    pub epsilon: Option<f64>,
    pub fold: usize,
    pub wall_seconds: f64,
}

pub fn fold_seed(master: u64, fold: usize) -> u64 {
    rng::derive_seed(master, &["fold".into(), fold.into()])
}

/// Seed of one `(mechanism, target, ε, fold)` cell.
pub fn cell_seed(master: u64, defense: Defense, target: Property, epsilon: Option<f64>, fold: usize) -> u64 {
    rng::derive_seed(
        master,
        &[
            "cell".into(),
            defense.label().as_str().into(),
            target.name().into(),
            epsilon.unwrap_or(0.0).into(),
            fold.into(),
        ],
    )
}

/// Everything in a fold that does not depend on the defense.
pub struct Fold {
    pub index: usize,
    pub seed: u64,
    pub shadow: Partition,
    pub private: Partition,
    pub fl: FlConfig,
    pub properties: BTreeMap<SpeakerId, PropertyLabel>,
}

impl Fold {
    pub fn new(cfg: &ExperimentConfig, corpus: &Corpus, index: usize) -> Result<Self> {
        let seed = fold_seed(cfg.master_seed, index);
        let (shadow, private) = split_corpus(&corpus.speakers, &corpus.samples, cfg.shadow_speakers, seed)?;
        let fl = FlConfig {
            seed: rng::derive_seed(seed, &["fl".into()]),
            ..cfg.fl.clone()
        };
        let properties = private.speakers.iter().map(|s| (s.id, s.properties)).collect();
        Ok(Self {
            index,
            seed,
            shadow,
            private,
            fl,
            properties,
        })
    }

    /// Shadow training and attack fitting for one target property.
    pub fn attacker(&self, cfg: &ExperimentConfig, target: Property) -> Result<AttackModel> {
        let arch = task_architecture(cfg)?;
        let classes = cfg.corpus.class_count(target);
        let ds = shadow_train(&self.shadow, &arch, &self.fl, target, classes)?;
        let attack_cfg = AttackConfig {
            seed: rng::derive_seed(self.seed, &["attack".into(), target.name().into()]),
            ..cfg.attack.clone()
        };
        train_attack(&ds, &attack_cfg)
    }
}

pub fn task_architecture(cfg: &ExperimentConfig) -> Result<Architecture> {
    Architecture::task(cfg.corpus.input_dim, cfg.corpus.emotions)
}

/// Fails when a loaded corpus does not match the configured dimensions.
pub fn check_corpus(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<()> {
    let dim = corpus.samples.first().map_or(cfg.corpus.input_dim, |s| s.features.len());
    if dim != cfg.corpus.input_dim || corpus.surrogate.input_dim() != cfg.corpus.input_dim {
        return Err(Error::config(format!(
            "corpus has {dim}-dim features, config expects {}",
            cfg.corpus.input_dim
        )));
    }
    if corpus.surrogate.property_dim() != cfg.corpus.property_dim {
        return Err(Error::config("corpus embedding size differs from the config"));
    }
    if let Some(bad) = corpus.samples.iter().find(|s| s.emotion >= cfg.corpus.emotions) {
        return Err(Error::config(format!(
            "corpus uses emotion {} but config has {} emotions",
            bad.emotion, cfg.corpus.emotions
        )));
    }
    Ok(())
}

/// Runs protected FL on the fold's private clients and attacks the result.
pub fn run_cell(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    fold: &Fold,
    attacker: &AttackModel,
    defense: Defense,
    epsilon: Option<f64>,
) -> Result<ResultRecord> {
    let target = attacker.target;
    let seed = cell_seed(cfg.master_seed, defense, target, epsilon, fold.index);
    let arch = task_architecture(cfg)?;
    let eps = || epsilon.ok_or_else(|| Error::usage(format!("{} needs an epsilon", defense.label())));

    let pro_ind;
    let voiceprint;
    let udp;
    let data_hook;
    let (data, gradient): (Option<&dyn DataProtection>, Option<&dyn GradientProtection>) = match defense.mechanism {
        MechanismKind::None => (None, None),
        MechanismKind::ProInd => {
            let protects = defense.protects.expect("pro_ind defense names a property");
            let pool = pro_ind_pool(&corpus.surrogate, &fold.shadow, protects)?;
            pro_ind = ProIndMechanism::new(eps()?, pool, protects)?;
            data_hook = EmbeddingProtection::ProInd(&pro_ind, &corpus.surrogate);
            (Some(&data_hook), None)
        }
        MechanismKind::VoiceprintDp => {
            let pool = voiceprint_pool(&corpus.surrogate, &fold.shadow)?;
            voiceprint = VoiceprintDpMechanism::new(eps()?, pool)?;
            data_hook = EmbeddingProtection::Voiceprint(&voiceprint, &corpus.surrogate);
            (Some(&data_hook), None)
        }
        MechanismKind::Udp => {
            udp = UdpMechanism::new(eps()?, cfg.udp.delta, cfg.udp.grad_bound, fold.fl.participation_rate, fold.fl.rounds)?;
            (None, Some(&udp))
        }
    };
    let hook = ProtectionHook { data, gradient, seed };

    let mut clients = build_clients(&fold.private, &fold.fl);
    let run = run_fl(&mut clients, &arch, &fold.fl, hook)?;
    let classes = cfg.corpus.class_count(target);
    let eval_seed = rng::derive_seed(fold.seed, &["eval".into()]);
    let attack = evaluate_attack(attacker, &run.logs, &fold.properties, classes, cfg.n_eval, eval_seed)?;
    let utility = run.utility;
    Ok(ResultRecord {
        schema: RESULTS_SCHEMA.to_string(),
        mechanism: defense.mechanism,
        protected_property: defense.protects,
        target,
        epsilon,
        fold: fold.index,
        seed,
        n_eval: cfg.n_eval,
        sr_p: attack.sr_p.unwrap_or(0.0),
        uasr_p: attack.uasr_p.unwrap_or(0.0),
        acc: utility.acc.unwrap_or(0.0),
        uar: utility.uar.unwrap_or(0.0),
        standard_accuracy: utility.standard_accuracy.unwrap_or(0.0),
        attack_standard_accuracy: attack.standard_accuracy.unwrap_or(0.0),
    })
}

/// Summary printed by `generate`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub speakers: usize,
    pub samples: usize,
    pub per_property: BTreeMap<String, Vec<usize>>,
}

impl CorpusSummary {
    pub fn of(corpus: &Corpus, cfg: &CorpusConfig) -> Self {
        let per_property = Property::ALL
            .into_iter()
            .map(|p| {
                let mut counts = vec![0; cfg.class_count(p)];
                for s in &corpus.speakers {
                    counts[s.properties.class(p)] += 1;
                }
                (p.name().to_string(), counts)
            })
            .collect();
        Self {
            speakers: corpus.speakers.len(),
            samples: corpus.samples.len(),
            per_property,
        }
    }
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "speakers: {}  samples: {}", self.speakers, self.samples)?;
        for (p, counts) in &self.per_property {
            let list: Vec<String> = counts.iter().map(usize::to_string).collect();
            writeln!(f, "  {p}: {}", list.join(" / "))?;
        }
        Ok(())
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<CorpusSummary> {
    let corpus = generate_corpus(&cfg.corpus, cfg.corpus_seed)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    crate::dataset::write_corpus(&cfg.corpus_path(), &corpus.speakers, &corpus.samples, cfg.corpus.emotions, cfg.corpus_seed)?;
    crate::dataset::write_surrogate(&cfg.surrogate_path(), &corpus.surrogate)?;
    Ok(CorpusSummary::of(&corpus, &cfg.corpus))
}

/// Reads the corpus written by [`cmd_generate`].
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let file = crate::dataset::read_corpus(&cfg.corpus_path())?;
    let surrogate = crate::dataset::read_surrogate(&cfg.surrogate_path())?;
    let corpus = Corpus {
        speakers: file.speakers,
        samples: file.samples,
        surrogate,
    };
    check_corpus(cfg, &corpus)?;
    Ok(corpus)
}

/// Output of a sweep: records in cell order, and wall times.
#[derive(Clone, Debug, Default)]
pub struct Sweep {
    pub records: Vec<ResultRecord>,
    pub timings: Vec<TimingRecord>,
}

/// The `(defense, ε)` pairs a defense is swept over.
pub fn budgets(cfg: &ExperimentConfig, d: Defense) -> Vec<(Defense, Option<f64>)> {
    if d.mechanism == MechanismKind::None {
        vec![(d, None)]
    } else {
        cfg.epsilons.iter().map(|&e| (d, Some(e))).collect()
    }
}

/// Runs every `(defense, ε)` cell in every fold against one attacked
/// property. Each fold's attacker is fitted once and shared by its cells.
/// Records come out cell-major, fold-minor.
pub fn sweep_cells(cfg: &ExperimentConfig, corpus: &Corpus, target: Property, cells: &[(Defense, Option<f64>)]) -> Result<Sweep> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;
    let folds: Vec<Fold> = (0..cfg.folds).map(|k| Fold::new(cfg, corpus, k)).collect::<Result<_>>()?;
    let attackers: Vec<AttackModel> = folds
        .par_iter()
        .map(|f| f.attacker(cfg, target))
        .collect::<Result<_>>()?;

    let cells: Vec<(Defense, Option<f64>, usize)> = cells
        .iter()
        .flat_map(|&(d, eps)| (0..folds.len()).map(move |k| (d, eps, k)))
        .collect();
    let out = cells
        .par_iter()
        .map(|&(d, eps, k)| {
            let start = Instant::now();
            let rec = run_cell(cfg, corpus, &folds[k], &attackers[k], d, eps)?;
            let timing = TimingRecord {
                mechanism: d.mechanism,
                protected_property: d.protects,
                target,
                epsilon: eps,
                fold: k,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            Ok((rec, timing))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, timings) = out.into_iter().unzip();
    Ok(Sweep { records, timings })
}

/// One mechanism against one attacked property. Pro-Ind protects the
/// attacked property.
pub fn cmd_run(cfg: &ExperimentConfig, corpus: &Corpus, mechanism: MechanismKind, target: Property) -> Result<Sweep> {
    let defense = Defense::new(mechanism, Some(target))?;
    sweep_cells(cfg, corpus, target, &budgets(cfg, defense))
}

/// The gender attack under every defense, including Pro-Ind aimed at the
/// wrong property.
pub fn misuse_defenses() -> [Defense; 5] {
    [
        Defense {
            mechanism: MechanismKind::Udp,
            protects: None,
        },
        Defense {
            mechanism: MechanismKind::VoiceprintDp,
            protects: None,
        },
        Defense::pro_ind(Property::Gender),
        Defense::pro_ind(Property::AgeGroup),
        Defense::pro_ind(Property::Race),
    ]
}

pub fn cmd_misuse(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Sweep> {
    let cells: Vec<_> = misuse_defenses().into_iter().flat_map(|d| budgets(cfg, d)).collect();
    sweep_cells(cfg, corpus, Property::Gender, &cells)
}

pub fn results_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("results_{name}.jsonl"))
}

pub fn timings_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("timings_{name}.jsonl"))
}

/// Writes records (one JSON object per line) and timings side by side.
pub fn write_sweep(dir: &Path, name: &str, sweep: &Sweep) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = results_path(dir, name);
    write_jsonl(&path, &sweep.records)?;
    write_jsonl(&timings_path(dir, name), &sweep.timings)?;
    Ok(path)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(RESULTS_SCHEMA) => {}
            other => {
                return Err(Error::format(
                    path,
                    format!("line {}: schema {other:?}, expected {RESULTS_SCHEMA}", n + 1),
                ))
            }
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SrP,
    UasrP,
    Acc,
    Uar,
    StandardAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Self::SrP, Self::UasrP, Self::Acc, Self::Uar, Self::StandardAccuracy];

    pub fn name(self) -> &'static str {
        match self {
            Self::SrP => "sr_p",
            Self::UasrP => "uasr_p",
            Self::Acc => "acc",
            Self::Uar => "uar",
            Self::StandardAccuracy => "standard_accuracy",
        }
    }

    pub fn of(self, r: &ResultRecord) -> f64 {
        match self {
            Self::SrP => r.sr_p,
            Self::UasrP => r.uasr_p,
            Self::Acc => r.acc,
            Self::Uar => r.uar,
            Self::StandardAccuracy => r.standard_accuracy,
        }
    }
}

/// Plot-ready pivot: one row per ε, one column per defense, fold means.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn fmt_epsilon(e: Option<f64>) -> String {
    e.map_or_else(|| "none".to_string(), |v| format!("{v}"))
}

/// Mean of `metric` over folds for each (ε, defense) among records attacking
/// `target`. Rows follow ascending ε with the unprotected row first; empty
/// cells stay blank.
pub fn pivot(records: &[ResultRecord], target: Property, metric: Metric) -> Table {
    let selected: Vec<&ResultRecord> = records.iter().filter(|r| r.target == target).collect();
    let mut defenses: Vec<Defense> = selected.iter().map(|r| r.defense()).collect();
    defenses.sort();
    defenses.dedup();
    let mut eps: Vec<Option<f64>> = selected.iter().map(|r| r.epsilon).collect();
    eps.sort_by(|a, b| a.partial_cmp(b).expect("finite epsilons"));
    eps.dedup();

    let mut header = vec!["epsilon".to_string()];
    header.extend(defenses.iter().map(Defense::label));
    let rows = eps
        .iter()
        .map(|&e| {
            let mut row = vec![fmt_epsilon(e)];
            for d in &defenses {
                let vals: Vec<f64> = selected
                    .iter()
                    .filter(|r| r.epsilon == e && r.defense() == *d)
                    .map(|r| metric.of(r))
                    .collect();
                row.push(if vals.is_empty() {
                    String::new()
                } else {
                    format!("{:.6}", vals.iter().sum::<f64>() / vals.len() as f64)
                });
            }
            row
        })
        .collect();
    Table { header, rows }
}

/// Reads result files and writes `<metric>_<target>.csv` tables into `out`
/// for every target present. Returns the written paths.
pub fn cmd_report(files: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if files.is_empty() {
        return Err(Error::usage("report needs at least one results file"));
    }
    let mut records = Vec::new();
    for f in files {
        records.extend(read_results(f)?);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for target in Property::ALL {
        if !records.iter().any(|r| r.target == target) {
            continue;
        }
        for metric in Metric::ALL {
            let path = out.join(format!("{}_{}.csv", metric.name(), target.name()));
            fs::write(&path, pivot(&records, target, metric).to_csv()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(d: Defense, eps: Option<f64>, fold: usize, sr_p: f64) -> ResultRecord {
        ResultRecord {
            schema: RESULTS_SCHEMA.into(),
            mechanism: d.mechanism,
            protected_property: d.protects,
            target: Property::Gender,
            epsilon: eps,
            fold,
            seed: 0,
            n_eval: 100,
            sr_p,
            uasr_p: sr_p,
            acc: 0.5,
            uar: 0.5,
            standard_accuracy: 0.5,
            attack_standard_accuracy: sr_p,
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("folds = 0").is_err());
        assert!(ExperimentConfig::from_toml("epsilons = []").is_err());
        assert!(ExperimentConfig::from_toml("epsilons = [1.0, -2.0]").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let small = ExperimentConfig::from_toml("folds = 2\n[fl]\nrounds = 7\n").unwrap();
        assert_eq!((small.folds, small.fl.rounds, small.fl.batch_size), (2, 7, 20));
    }

    #[test]
    fn cell_seeds_differ_per_coordinate() {
        let d = Defense::pro_ind(Property::Gender);
        let base = cell_seed(1, d, Property::Gender, Some(1.0), 0);
        assert_ne!(base, cell_seed(2, d, Property::Gender, Some(1.0), 0));
        assert_ne!(base, cell_seed(1, Defense::pro_ind(Property::Race), Property::Gender, Some(1.0), 0));
        assert_ne!(base, cell_seed(1, d, Property::Race, Some(1.0), 0));
        assert_ne!(base, cell_seed(1, d, Property::Gender, Some(5.0), 0));
        assert_ne!(base, cell_seed(1, d, Property::Gender, Some(1.0), 1));
    }

    #[test]
    fn pivot_averages_folds() {
        let p = Defense::pro_ind(Property::Gender);
        let records = vec![
            record(Defense::NONE, None, 0, 0.9),
            record(Defense::NONE, None, 1, 0.8),
            record(p, Some(1.0), 0, 0.5),
            record(p, Some(1.0), 1, 0.6),
            record(p, Some(5.0), 0, 0.7),
        ];
        let t = pivot(&records, Property::Gender, Metric::SrP);
        assert_eq!(t.header, vec!["epsilon", "none", "pro_ind(gender)"]);
        assert_eq!(t.rows[0], vec!["none", "0.850000", ""]);
        assert_eq!(t.rows[1], vec!["1", "", "0.550000"]);
        assert_eq!(t.rows[2], vec!["5", "", "0.700000"]);
        let empty = pivot(&records, Property::Race, Metric::SrP);
        assert_eq!(empty.to_csv(), "epsilon\n");
    }

    #[test]
    fn results_files_check_the_schema() {
        let dir = tempfile::tempdir().unwrap();
        let sweep = Sweep {
            records: vec![record(Defense::NONE, None, 0, 0.9)],
            timings: Vec::new(),
        };
        let path = write_sweep(dir.path(), "x", &sweep).unwrap();
        assert_eq!(read_results(&path).unwrap(), sweep.records);
        let text = fs::read_to_string(&path).unwrap().replace(RESULTS_SCHEMA, "fpb-results-v0");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_results(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn mechanism_names_parse_back() {
        for m in MechanismKind::ALL {
            assert_eq!(MechanismKind::parse(m.name()), Some(m));
        }
        assert!(Defense::new(MechanismKind::ProInd, None).is_err());
        assert_eq!(Defense::new(MechanismKind::Udp, Some(Property::Race)).unwrap().protects, None);
        assert_eq!(misuse_defenses().len(), 5);
    }
}
