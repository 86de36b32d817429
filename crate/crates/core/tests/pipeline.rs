use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use fpb_core::attack::{evaluate_attack, shadow_train, train_attack, AttackConfig, AttackDataset};
use fpb_core::dataset::{generate_corpus, CorpusConfig, Gender, Partition, Property, PropertyLabel, Race};
use fpb_core::experiment::{sweep_cells, Defense, ExperimentConfig};
use fpb_core::federated::{build_clients, run_fl, FlConfig, GradientSnapshot, ProtectionHook, RoundLog};
use fpb_core::nn::Architecture;
use fpb_core::rng;
use fpb_core::Error;

fn partition(speakers: usize, seed: u64) -> Partition {
    let c = generate_corpus(
        &CorpusConfig {
            speakers,
            male_speakers: speakers / 2,
            samples_per_speaker: 20,
            ..CorpusConfig::default()
        },
        seed,
    )
    .unwrap();
    Partition {
        speakers: c.speakers,
        samples: c.samples,
    }
}

#[test]
fn shadow_training_counts_and_labels() {
    let p = partition(1, 1);
    let arch = Architecture::task(40, 4).unwrap();
    let cfg = FlConfig {
        participation_rate: 1.0,
        rounds: 1,
        ..FlConfig::default()
    };
    let ds = shadow_train(&p, &arch, &cfg, Property::Gender, 2).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.dim(), arch.first_layer_len());
    assert_eq!(ds.labels[0], p.speakers[0].properties.class(Property::Gender));

    let empty = Partition::default();
    assert!(matches!(shadow_train(&empty, &arch, &cfg, Property::Gender, 2), Err(Error::Usage(_))));
}

#[test]
fn shadow_training_mirrors_private_training() {
    let p = partition(8, 2);
    let arch = Architecture::task(40, 4).unwrap();
    let cfg = FlConfig {
        rounds: 6,
        participation_rate: 0.25,
        seed: 77,
        ..FlConfig::default()
    };
    let ds = shadow_train(&p, &arch, &cfg, Property::Race, 5).unwrap();
    let mut clients = build_clients(&p, &cfg);
    let run = run_fl(&mut clients, &arch, &cfg, ProtectionHook::none()).unwrap();
    let private: Vec<&Vec<f64>> = run.snapshots().map(|s| &s.first_layer_grad).collect();
    assert_eq!(ds.len(), 6 * 2);
    assert_eq!(ds.gradients.iter().collect::<Vec<_>>(), private);
    let ids: Vec<u32> = p.speakers.iter().map(|s| s.id).collect();
    assert!(ds.clients.iter().all(|c| ids.contains(c)));
    assert_eq!(ds, shadow_train(&p, &arch, &cfg, Property::Race, 5).unwrap());
}

fn noise_logs(n: usize, dim: usize, seed: u64) -> (Vec<RoundLog>, BTreeMap<u32, PropertyLabel>) {
    let mut r = rng::seeded(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut props = BTreeMap::new();
    let snapshots = (0..n)
        .map(|k| {
            let id = (k % 40) as u32;
            props.insert(
                id,
                PropertyLabel {
                    gender: if id.is_multiple_of(2) { Gender::Male } else { Gender::Female },
                    age_group: 0,
                    race: Race::Asian,
                },
            );
            GradientSnapshot {
                client_id: id,
                round: (k / 40) as u32 + 1,
                first_layer_grad: (0..dim).map(|_| normal.sample(&mut r)).collect(),
                full_grad: None,
            }
        })
        .collect();
    let log = RoundLog {
        round: 1,
        participants: (0..40).collect(),
        snapshots,
        global: None,
    };
    (vec![log], props)
}

#[test]
fn label_independent_gradients_give_chance_recall() {
    let mut values = Vec::new();
    for seed in 0..20u64 {
        let mut r = rng::seeded(1000 + seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut ds = AttackDataset::new(Property::Gender, 2);
        for i in 0..200 {
            let g: Vec<f64> = (0..30).map(|_| normal.sample(&mut r)).collect();
            ds.push(i, g, (i as usize * 7 + seed as usize) % 2).unwrap();
        }
        let cfg = AttackConfig {
            epochs: 30,
            seed,
            ..AttackConfig::default()
        };
        let model = train_attack(&ds, &cfg).unwrap();
        let (logs, props) = noise_logs(400, 30, 5000 + seed);
        let report = evaluate_attack(&model, &logs, &props, 2, 100, seed).unwrap();
        values.push(report.uasr_p.unwrap());
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // recall of a label-blind classifier over 100 draws, averaged over 20 seeds
    let sigma = (0.25f64 / 100.0).sqrt() / (20f64).sqrt();
    assert!((mean - 0.5).abs() <= 3.0 * sigma, "mean UASR_P {mean}, 3σ = {}", 3.0 * sigma);
}

#[test]
fn evaluation_needs_enough_snapshots() {
    let mut ds = AttackDataset::new(Property::Gender, 2);
    ds.push(0, vec![0.0, 1.0], 0).unwrap();
    ds.push(1, vec![1.0, 0.0], 1).unwrap();
    let model = train_attack(&ds, &AttackConfig { epochs: 2, ..AttackConfig::default() }).unwrap();
    let (logs, props) = noise_logs(10, 2, 3);
    assert!(matches!(evaluate_attack(&model, &logs, &props, 2, 11, 0), Err(Error::Usage(_))));
}

#[test]
fn stronger_property_signal_does_not_weaken_the_attack() {
    let mean_sr = |separation: f64| {
        let mut total = 0.0;
        for seed in 0..5 {
            let cfg = ExperimentConfig {
                master_seed: seed,
                corpus_seed: seed,
                folds: 1,
                corpus: CorpusConfig {
                    anchor_separation: separation,
                    ..CorpusConfig::default()
                },
                fl: FlConfig {
                    rounds: 40,
                    ..FlConfig::default()
                },
                ..ExperimentConfig::default()
            };
            let corpus = generate_corpus(&cfg.corpus, cfg.corpus_seed).unwrap();
            let sweep = sweep_cells(&cfg, &corpus, Property::Gender, &[(Defense::NONE, None)]).unwrap();
            total += sweep.records[0].sr_p;
        }
        total / 5.0
    };
    let weak = mean_sr(0.45);
    let strong = mean_sr(0.9);
    assert!(strong >= weak - 0.05, "separation 0.45 → {weak:.3}, 0.9 → {strong:.3}");
}
