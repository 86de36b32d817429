use fpb_core::dataset::{generate_corpus, Corpus, CorpusConfig, Partition, Property};
use fpb_core::federated::{build_clients, fedavg_round, initial_model, local_stream, local_train, run_fl, FlConfig, ProtectionHook};
use fpb_core::nn::Architecture;
use fpb_core::privacy::{
    angular_distance, exp_mech_distribution, pro_ind_pool, udp_perturb, udp_sigma, ProIndMechanism, UdpMechanism, VoiceprintDpMechanism,
};
use fpb_core::rng;

fn corpus(noise: f64) -> Corpus {
    generate_corpus(
        &CorpusConfig {
            speakers: 10,
            male_speakers: 5,
            samples_per_speaker: 12,
            noise_scale: noise,
            ..CorpusConfig::default()
        },
        21,
    )
    .unwrap()
}

fn whole(c: &Corpus) -> Partition {
    Partition {
        speakers: c.speakers.clone(),
        samples: c.samples.clone(),
    }
}

#[test]
fn aggregation_is_a_mean_gradient_step_for_single_batch_clients() {
    let c = corpus(1.0);
    let arch = Architecture::task(40, 4).unwrap();
    let cfg = FlConfig {
        participation_rate: 0.5,
        rounds: 1,
        batch_size: 1000,
        seed: 4,
        ..FlConfig::default()
    };
    let mut clients = build_clients(&whole(&c), &cfg);
    let global = initial_model(&arch, &cfg);
    let (next, log) = fedavg_round(&global, &mut clients, &cfg, 1, ProtectionHook::none()).unwrap();
    let mut mean = vec![0.0; global.param_count()];
    for id in &log.participants {
        let client = clients.iter().find(|c| c.id == *id).unwrap();
        let (_, g) = local_train(&global, client, &cfg, &mut local_stream(cfg.seed, *id, 1)).unwrap();
        mean.iter_mut().zip(&g).for_each(|(m, v)| *m += v / log.participants.len() as f64);
    }
    for ((n, g0), m) in next.flatten().iter().zip(global.flatten()).zip(&mean) {
        assert!((n - (g0 - cfg.lr * m)).abs() <= 1e-12);
    }
}

#[test]
fn gradient_protection_hides_every_raw_update() {
    let c = corpus(1.0);
    let arch = Architecture::task(40, 4).unwrap();
    let cfg = FlConfig {
        rounds: 3,
        participation_rate: 0.3,
        seed: 8,
        keep_full_gradients: true,
        ..FlConfig::default()
    };
    let udp = UdpMechanism::new(10.0, 1e-5, 1.0, cfg.participation_rate, cfg.rounds).unwrap();
    let hook = ProtectionHook {
        data: None,
        gradient: Some(&udp),
        seed: 1,
    };
    let mut clients = build_clients(&whole(&c), &cfg);
    let run = run_fl(&mut clients, &arch, &cfg, hook).unwrap();

    // replay the unprotected local updates from each round's global model
    let mut global = initial_model(&arch, &cfg);
    let mut shadow_clients = build_clients(&whole(&c), &cfg);
    for log in &run.logs {
        for snap in &log.snapshots {
            let client = shadow_clients.iter().find(|c| c.id == snap.client_id).unwrap();
            let (_, raw) = local_train(&global, client, &cfg, &mut local_stream(cfg.seed, snap.client_id, log.round)).unwrap();
            let exposed = snap.full_grad.as_ref().unwrap();
            assert_ne!(&raw, exposed);
            assert_eq!(&exposed[..snap.first_layer_grad.len()], snap.first_layer_grad.as_slice());
        }
        let (next, _) = fedavg_round(&global, &mut shadow_clients, &cfg, log.round, hook).unwrap();
        global = next;
    }
    assert_eq!(global, run.model);
}

#[test]
fn singleton_pools_leave_samples_unchanged() {
    let c = corpus(1.0);
    let m = &c.surrogate;
    for s in c.samples.iter().take(20) {
        let own = m.extract_property_embedding(s).unwrap();
        let block = m.property_component(&own, Property::Gender).unwrap();
        let pi = ProIndMechanism::new(1.0, vec![block], Property::Gender).unwrap();
        let out = pi.protect_sample(s, m, &mut rng::seeded(0)).unwrap();
        for (a, b) in out.features.iter().zip(&s.features) {
            assert!((a - b).abs() <= 1e-9);
        }
        let vp = VoiceprintDpMechanism::new(1.0, vec![own]).unwrap();
        let out = vp.protect_sample(s, m, &mut rng::seeded(0)).unwrap();
        for (a, b) in out.features.iter().zip(&s.features) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn voiceprint_replacement_round_trips_without_noise() {
    let c = corpus(0.0);
    let m = &c.surrogate;
    let pool: Vec<Vec<f64>> = c.speakers.iter().map(|sp| m.speaker_embedding(sp)).collect();
    let vp = VoiceprintDpMechanism::new(0.0, pool.clone()).unwrap();
    let mut r = rng::seeded(3);
    for s in c.samples.iter().take(30) {
        let out = vp.protect_sample(s, m, &mut r).unwrap();
        let back = m.extract_property_embedding(&out).unwrap();
        let nearest = pool
            .iter()
            .map(|p| angular_distance(p, &back).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest <= 1e-6);
        for (a, b) in m.emotion_coordinates(&out.features).iter().zip(m.emotion_coordinates(&s.features)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn gender_flip_rate_matches_the_exact_mass() {
    let c = corpus(0.0);
    let m = &c.surrogate;
    let pool = pro_ind_pool(m, &whole(&c), Property::Gender).unwrap();
    let mech = ProIndMechanism::new(1.0, pool.clone(), Property::Gender).unwrap();
    let anchors = m.value_anchors(Property::Gender);
    let gender_of = |v: &[f64]| {
        let p = m.property_component(v, Property::Gender).unwrap();
        let d: Vec<f64> = anchors.iter().map(|a| angular_distance(a, &p).unwrap()).collect();
        usize::from(d[1] < d[0])
    };
    let s = &c.samples[0];
    let own = gender_of(&m.extract_property_embedding(s).unwrap());
    let dist = exp_mech_distribution(
        &m.property_component(&m.extract_property_embedding(s).unwrap(), Property::Gender).unwrap(),
        &pool,
        1.0,
    )
    .unwrap();
    let exact: f64 = pool.iter().zip(&dist).filter(|(p, _)| gender_of(p) != own).map(|(_, w)| w).sum();
    assert!(exact > 0.05 && exact < 0.95);

    let n = 20_000;
    let mut r = rng::seeded(12);
    let flips = (0..n)
        .filter(|_| gender_of(&m.extract_property_embedding(&mech.protect_sample(s, m, &mut r).unwrap()).unwrap()) != own)
        .count();
    let rate = flips as f64 / n as f64;
    let sd = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((rate - exact).abs() <= 4.0 * sd, "flip rate {rate}, exact mass {exact}");
}

#[test]
fn udp_noise_is_unbiased_and_scales_with_epsilon() {
    let s10 = udp_sigma(1.0, 0.1, 200, 1e-5, 10.0).unwrap();
    let s20 = udp_sigma(1.0, 0.1, 200, 1e-5, 20.0).unwrap();
    assert!((s10 / s20 - 2.0).abs() < 1e-12);
    assert_eq!(udp_sigma(0.0, 0.1, 200, 1e-5, 10.0).unwrap(), 0.0);

    let mech = UdpMechanism::with_sigma(1.0, 0.5).unwrap();
    let g = [0.3, -0.2, 0.1];
    let n = 10_000;
    let mut r = rng::seeded(5);
    let mut sum = [0.0; 3];
    for _ in 0..n {
        for (s, v) in sum.iter_mut().zip(udp_perturb(&g, &mech, &mut r)) {
            *s += v;
        }
    }
    for (s, gi) in sum.iter().zip(g) {
        assert!((s / n as f64 - gi).abs() <= 3.0 * 0.5 / (n as f64).sqrt());
    }
}
