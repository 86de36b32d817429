//! Protection mechanisms.
//!
//! * **Pro-Ind**: replace the direction of one property's block of the speaker
//!   embedding with a pool element drawn by the exponential mechanism over
//!   angular distance, `Pr(c̃ | c₀) ∝ exp(−ε·d(c̃, c₀))`, then resynthesize.
//! * **Voiceprint DP**: the same draw over whole speaker embeddings.
//! * **UDP**: clip an exposed gradient to `∇l` and add `N(0, σ²I)` with
//!   `σ = ∇l·√(2qT·ln(1/δ)) / ε`.
//!
//! The draw is normalized over the finite pool, so for two inputs `c, c'`
//! the probability ratio of any output is bounded by `exp(2ε·d(c, c'))`; the
//! un-normalized weight ratio alone is bounded by `exp(ε·d(c, c'))`.
//! [`verify_indistinguishability`] measures the exact ratio by enumeration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_unit, dot, normalize, Partition, Property, Sample, SpeakerId, SurrogateModel};
use crate::error::{Error, Result};
use crate::federated::{DataProtection, GradientProtection};
use crate::rng::Stream;

const UNIT_TOL: f64 = 1e-6;

/// Angle between two unit vectors, in `[0, π]`.
pub fn angular_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config("embeddings differ in length"));
    }
    check_unit(a, UNIT_TOL)?;
    check_unit(b, UNIT_TOL)?;
    Ok(dot(a, b).clamp(-1.0, 1.0).acos())
}

/// `p_i = exp(−ε·d(c_i, c₀)) / Σ_j exp(−ε·d(c_j, c₀))`.
pub fn exp_mech_distribution(c0: &[f64], pool: &[Vec<f64>], epsilon: f64) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::usage("empty candidate pool"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::usage(format!("epsilon {epsilon} must be finite and non-negative")));
    }
    let scores = pool
        .iter()
        .map(|c| angular_distance(c, c0).map(|d| -epsilon * d))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&scores))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Inverse-CDF draw of a pool index.
pub fn sample_replacement(dist: &[f64], rng: &mut Stream) -> Result<usize> {
    if dist.is_empty() || dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::usage("malformed distribution"));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::usage(format!("distribution sums to {total}")));
    }
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (i, p) in dist.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return Ok(i);
        }
    }
    Ok(dist.iter().rposition(|p| *p > 0.0).unwrap_or(dist.len() - 1))
}

fn validate_pool(pool: &[Vec<f64>], min_len: usize) -> Result<()> {
    if pool.len() < min_len {
        return Err(Error::usage(format!("pool needs at least {min_len} embeddings, has {}", pool.len())));
    }
    let dim = pool[0].len();
    for c in pool {
        if c.len() != dim {
            return Err(Error::config("pool embeddings differ in length"));
        }
        check_unit(c, 1e-9)?;
    }
    Ok(())
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::usage(format!("epsilon {epsilon} must be finite and non-negative")));
    }
    Ok(())
}

/// Exponential mechanism over one property's block of the speaker embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ProIndMechanism {
    epsilon: f64,
    pool: Vec<Vec<f64>>,
    target: Property,
}

impl ProIndMechanism {
    pub fn new(epsilon: f64, pool: Vec<Vec<f64>>, target: Property) -> Result<Self> {
        validate_epsilon(epsilon)?;
        validate_pool(&pool, 1)?;
        Ok(Self { epsilon, pool, target })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn pool(&self) -> &[Vec<f64>] {
        &self.pool
    }

    pub fn target(&self) -> Property {
        self.target
    }

    /// Distribution over the pool for a sample's current property embedding.
    pub fn distribution_for(&self, s: &Sample, surrogate: &SurrogateModel) -> Result<Vec<f64>> {
        let c0 = surrogate.extract_property_embedding(s)?;
        let p0 = surrogate
            .property_component(&c0, self.target)
            .ok_or_else(|| Error::Extraction(format!("sample has no {} component", self.target)))?;
        exp_mech_distribution(&p0, &self.pool, self.epsilon)
    }

    pub fn protect_sample(&self, s: &Sample, surrogate: &SurrogateModel, rng: &mut Stream) -> Result<Sample> {
        self.check_pool(surrogate)?;
        let c0 = surrogate.extract_property_embedding(s)?;
        let dist = self.distribution_for(s, surrogate)?;
        let pick = sample_replacement(&dist, rng)?;
        let c_new = surrogate.swap_property_component(&c0, self.target, &self.pool[pick]);
        surrogate.synthesize(&c_new, s)
    }

    /// One draw for a whole speaker: the distribution is taken at the
    /// speaker's composite embedding and the chosen block direction is
    /// swapped into every sample.
    pub fn protect_speaker(&self, samples: &[Sample], surrogate: &SurrogateModel, rng: &mut Stream) -> Result<Vec<Sample>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        self.check_pool(surrogate)?;
        let composite = composite_of(samples, surrogate)?;
        let p0 = surrogate
            .property_component(&composite, self.target)
            .ok_or_else(|| Error::Extraction(format!("speaker has no {} component", self.target)))?;
        let dist = exp_mech_distribution(&p0, &self.pool, self.epsilon)?;
        let pick = &self.pool[sample_replacement(&dist, rng)?];
        samples
            .iter()
            .map(|s| {
                let c0 = surrogate.extract_property_embedding(s)?;
                surrogate.synthesize(&surrogate.swap_property_component(&c0, self.target, pick), s)
            })
            .collect()
    }

    fn check_pool(&self, surrogate: &SurrogateModel) -> Result<()> {
        if self.pool[0].len() != surrogate.property_dim() {
            return Err(Error::config("pool dimension differs from the surrogate's embedding"));
        }
        let block = surrogate.layout().block(self.target);
        let outside = self
            .pool
            .iter()
            .any(|c| c.iter().enumerate().any(|(i, v)| !block.contains(&i) && v.abs() > 1e-12));
        if outside {
            return Err(Error::config(format!("pool leaves the {} subspace", self.target)));
        }
        Ok(())
    }
}

/// Normalized mean of the extracted embeddings of `samples`.
fn composite_of(samples: &[Sample], surrogate: &SurrogateModel) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; surrogate.property_dim()];
    for s in samples {
        let c = surrogate.extract_property_embedding(s)?;
        sum.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
    }
    normalize(&sum).ok_or_else(|| Error::Extraction("speaker embeddings cancel out".into()))
}

/// Exponential mechanism over whole speaker embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiceprintDpMechanism {
    epsilon: f64,
    pool: Vec<Vec<f64>>,
}

impl VoiceprintDpMechanism {
    pub fn new(epsilon: f64, pool: Vec<Vec<f64>>) -> Result<Self> {
        validate_epsilon(epsilon)?;
        validate_pool(&pool, 1)?;
        Ok(Self { epsilon, pool })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn pool(&self) -> &[Vec<f64>] {
        &self.pool
    }

    pub fn protect_sample(&self, s: &Sample, surrogate: &SurrogateModel, rng: &mut Stream) -> Result<Sample> {
        let v0 = surrogate.extract_property_embedding(s)?;
        let dist = exp_mech_distribution(&v0, &self.pool, self.epsilon)?;
        let pick = sample_replacement(&dist, rng)?;
        surrogate.synthesize(&self.pool[pick], s)
    }

    /// One draw per speaker, taken at the speaker's composite embedding.
    pub fn protect_speaker(&self, samples: &[Sample], surrogate: &SurrogateModel, rng: &mut Stream) -> Result<Vec<Sample>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let composite = composite_of(samples, surrogate)?;
        let dist = exp_mech_distribution(&composite, &self.pool, self.epsilon)?;
        let pick = &self.pool[sample_replacement(&dist, rng)?];
        samples.iter().map(|s| surrogate.synthesize(pick, s)).collect()
    }
}

/// `∇l·√(2qT·ln(1/δ)) / ε`.
pub fn udp_sigma(grad_bound: f64, q: f64, rounds: u32, delta: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::usage(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::usage(format!("delta {delta} must lie in (0, 1)")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::usage(format!("sampling rate {q} must lie in (0, 1]")));
    }
    if !(grad_bound >= 0.0 && grad_bound.is_finite()) {
        return Err(Error::usage(format!("gradient bound {grad_bound} must be non-negative")));
    }
    Ok(grad_bound * (2.0 * q * rounds as f64 * (1.0 / delta).ln()).sqrt() / epsilon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdpMechanism {
    epsilon: f64,
    delta: f64,
    grad_bound: f64,
    q: f64,
    rounds: u32,
    sigma: f64,
}

impl UdpMechanism {
    pub fn new(epsilon: f64, delta: f64, grad_bound: f64, q: f64, rounds: u32) -> Result<Self> {
        let sigma = udp_sigma(grad_bound, q, rounds, delta, epsilon)?;
        Ok(Self {
            epsilon,
            delta,
            grad_bound,
            q,
            rounds,
            sigma,
        })
    }

    /// Fixed noise scale, bypassing calibration. Used for noiseless and
    /// variance checks.
    pub fn with_sigma(grad_bound: f64, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && grad_bound > 0.0) {
            return Err(Error::usage("sigma must be non-negative and the bound positive"));
        }
        Ok(Self {
            epsilon: f64::INFINITY,
            delta: 0.0,
            grad_bound,
            q: 1.0,
            rounds: 0,
            sigma,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn grad_bound(&self) -> f64 {
        self.grad_bound
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }
}

/// Scales `grad` down to L2 norm `bound` if it is longer.
pub fn clip_to_norm(grad: &[f64], bound: f64) -> Vec<f64> {
    let norm = dot(grad, grad).sqrt();
    if norm <= bound || norm == 0.0 {
        return grad.to_vec();
    }
    let scale = bound / norm;
    grad.iter().map(|g| g * scale).collect()
}

pub fn udp_perturb(grad: &[f64], mech: &UdpMechanism, rng: &mut Stream) -> Vec<f64> {
    let mut out = clip_to_norm(grad, mech.grad_bound);
    if mech.sigma > 0.0 {
        for g in &mut out {
            let z: f64 = rng.sample(StandardNormal);
            *g += mech.sigma * z;
        }
    }
    out
}

impl GradientProtection for UdpMechanism {
    fn perturb(&self, grad: &[f64], rng: &mut Stream) -> Vec<f64> {
        udp_perturb(grad, self, rng)
    }
}

/// A data-level mechanism bound to the surrogate it resynthesizes with.
#[derive(Clone, Debug)]
pub enum EmbeddingProtection<'a> {
    ProInd(&'a ProIndMechanism, &'a SurrogateModel),
    Voiceprint(&'a VoiceprintDpMechanism, &'a SurrogateModel),
}

impl DataProtection for EmbeddingProtection<'_> {
    fn protect(&self, samples: &[Sample], rng: &mut Stream) -> Result<Vec<Sample>> {
        match self {
            EmbeddingProtection::ProInd(m, model) => m.protect_speaker(samples, model, rng),
            EmbeddingProtection::Voiceprint(m, model) => m.protect_speaker(samples, model, rng),
        }
    }
}

/// Mean extracted embedding of each public speaker, normalized.
pub fn speaker_composites(surrogate: &SurrogateModel, public: &Partition) -> Result<Vec<(SpeakerId, Vec<f64>)>> {
    let mut out = Vec::with_capacity(public.speakers.len());
    for sp in &public.speakers {
        let own: Vec<Sample> = public.samples_of(sp.id).cloned().collect();
        if own.is_empty() {
            continue;
        }
        out.push((sp.id, composite_of(&own, surrogate)?));
    }
    Ok(out)
}

/// Pro-Ind candidates for one property: the value anchors of that property
/// plus every public speaker's composite projected onto its block.
pub fn pro_ind_pool(surrogate: &SurrogateModel, public: &Partition, target: Property) -> Result<Vec<Vec<f64>>> {
    let mut pool: Vec<Vec<f64>> = surrogate.value_anchors(target).to_vec();
    for (_, c) in speaker_composites(surrogate, public)? {
        if let Some(p) = surrogate.property_component(&c, target) {
            pool.push(p);
        }
    }
    Ok(pool)
}

/// Voiceprint candidates: whole-embedding composites of public speakers.
pub fn voiceprint_pool(surrogate: &SurrogateModel, public: &Partition) -> Result<Vec<Vec<f64>>> {
    Ok(speaker_composites(surrogate, public)?.into_iter().map(|(_, c)| c).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndistinguishabilityReport {
    /// `max (ratio / e^{ε·d(c,c')}) − 1` over all inputs and outputs.
    pub max_ratio_slack: f64,
    pub holds: bool,
    /// `(c, c', c̃)` pool indices of the worst case.
    pub worst: (usize, usize, usize),
    /// Largest `ln(ratio) / (ε·d(c,c'))` over pairs at positive distance;
    /// the multiple of ε the mechanism actually spends.
    pub achieved_multiplier: f64,
}

/// Relative tolerance on the ratio bound.
pub const RATIO_TOLERANCE: f64 = 1e-9;

/// Exact ε·d check of the exponential mechanism on a finite pool, with the
/// pool serving as both the input set and the output set.
pub fn verify_indistinguishability(pool: &[Vec<f64>], epsilon: f64) -> Result<IndistinguishabilityReport> {
    verify_with(pool, epsilon, exp_mech_distribution)
}

/// As [`verify_indistinguishability`] for an arbitrary selection rule.
pub fn verify_with<F>(pool: &[Vec<f64>], epsilon: f64, mechanism: F) -> Result<IndistinguishabilityReport>
where
    F: Fn(&[f64], &[Vec<f64>], f64) -> Result<Vec<f64>>,
{
    validate_pool(pool, 2)?;
    let n = pool.len();
    let dist: Vec<Vec<f64>> = pool
        .iter()
        .map(|c| mechanism(c, pool, epsilon))
        .collect::<Result<_>>()?;
    let mut distance = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            distance[i][j] = angular_distance(&pool[i], &pool[j])?;
        }
    }

    let mut report = IndistinguishabilityReport {
        max_ratio_slack: f64::NEG_INFINITY,
        holds: true,
        worst: (0, 0, 0),
        achieved_multiplier: 0.0,
    };
    for i in 0..n {
        for j in 0..n {
            let budget = epsilon * distance[i][j];
            for k in 0..n {
                let (p, q) = (dist[i][k], dist[j][k]);
                let log_ratio = if p == q {
                    0.0
                } else if q == 0.0 {
                    f64::INFINITY
                } else if p == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    p.ln() - q.ln()
                };
                let slack = (log_ratio - budget).exp() - 1.0;
                if slack > report.max_ratio_slack {
                    report.max_ratio_slack = slack;
                    report.worst = (i, j, k);
                }
                if budget > 1e-12 {
                    report.achieved_multiplier = report.achieved_multiplier.max(log_ratio / budget);
                }
            }
        }
    }
    report.holds = report.max_ratio_slack <= RATIO_TOLERANCE;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn e(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn angular_distance_landmarks() {
        let a = e(0, 3);
        let b = e(1, 3);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_eq!(angular_distance(&a, &a).unwrap(), 0.0);
        assert!((angular_distance(&a, &b).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((angular_distance(&a, &neg).unwrap() - PI).abs() < 1e-15);
        assert!(matches!(angular_distance(&[2.0, 0.0], &[1.0, 0.0]), Err(Error::Normalization { .. })));
    }

    #[test]
    fn two_point_closed_form() {
        let pool = vec![e(0, 2), e(1, 2)];
        let p = exp_mech_distribution(&pool[0], &pool, 2.0).unwrap();
        let tail = (-PI).exp();
        assert!((p[0] - 1.0 / (1.0 + tail)).abs() < 1e-12);
        assert!((p[1] - tail / (1.0 + tail)).abs() < 1e-12);
        assert!((p[0] - 0.9586).abs() < 1e-4 && (p[1] - 0.0414).abs() < 1e-4);
    }

    #[test]
    fn zero_epsilon_and_equidistant_pools_are_uniform() {
        let pool = vec![e(0, 4), e(1, 4), e(2, 4), e(3, 4)];
        let p = exp_mech_distribution(&pool[0], &pool, 0.0).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let others = vec![e(1, 4), e(2, 4), e(3, 4)];
        let p = exp_mech_distribution(&pool[0], &others, 7.0).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(exp_mech_distribution(&pool[0], &[], 1.0).is_err());
    }

    #[test]
    fn large_epsilon_concentrates_on_nearest() {
        let near = normalize(&[1.0, 0.15, 0.0]).unwrap();
        let far = normalize(&[1.0, 0.0, 0.35]).unwrap();
        let p = exp_mech_distribution(&e(0, 3), &[far, near], 1e4).unwrap();
        assert!(p[1] >= 0.999);
    }

    #[test]
    fn degenerate_distribution_always_picks_its_mass() {
        let mut rng = seeded(1);
        for _ in 0..100 {
            assert_eq!(sample_replacement(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert!(sample_replacement(&[0.5, 0.4], &mut rng).is_err());
        assert!(sample_replacement(&[1.5, -0.5], &mut rng).is_err());
    }

    #[test]
    fn udp_sigma_values() {
        let s = udp_sigma(1.0, 0.1, 200, 1e-5, 10.0).unwrap();
        assert!((s - (40.0 * 1e5f64.ln()).sqrt() / 10.0).abs() < 1e-12);
        assert!((s - 2.1460).abs() < 1e-4);
        let half = udp_sigma(1.0, 0.1, 200, 1e-5, 20.0).unwrap();
        assert!((half - s / 2.0).abs() < 1e-15);
        assert_eq!(udp_sigma(0.0, 0.1, 200, 1e-5, 10.0).unwrap(), 0.0);
        assert!(udp_sigma(1.0, 0.1, 200, 1e-5, 0.0).is_err());
        assert!(udp_sigma(1.0, 0.1, 200, 1.0, 1.0).is_err());
        let m = UdpMechanism::new(10.0, 1e-5, 1.0, 0.1, 200).unwrap();
        let recomputed = 1.0 * (2.0 * m.q() * m.rounds() as f64 * (1.0 / m.delta()).ln()).sqrt() / m.epsilon();
        assert!(((m.sigma() - recomputed) / recomputed).abs() <= 1e-12);
    }

    #[test]
    fn noiseless_udp_only_clips() {
        let mech = UdpMechanism::with_sigma(1.0, 0.0).unwrap();
        let mut rng = seeded(2);
        let small = vec![0.3, -0.4];
        assert_eq!(udp_perturb(&small, &mech, &mut rng), small);
        let big = vec![3.0, 4.0];
        let out = udp_perturb(&big, &mech, &mut rng);
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn verifier_accepts_identical_vectors() {
        let pool = vec![e(0, 3); 4];
        let r = verify_indistinguishability(&pool, 5.0).unwrap();
        assert!(r.holds);
        assert_eq!(r.max_ratio_slack, 0.0);
    }

    #[test]
    fn verifier_flags_squared_weights() {
        let pool = vec![e(0, 3), e(1, 3), normalize(&[1.0, 1.0, 0.2]).unwrap()];
        let squared = |c: &[f64], pool: &[Vec<f64>], eps: f64| -> Result<Vec<f64>> {
            let p = exp_mech_distribution(c, pool, eps)?;
            Ok(p.iter().map(|x| x * x).collect())
        };
        let r = verify_with(&pool, 1.0, squared).unwrap();
        assert!(!r.holds);
    }

    #[test]
    fn symmetric_pools_meet_the_single_epsilon_bound() {
        // every element sees the same multiset of distances, so the
        // normalizers cancel
        let pool: Vec<Vec<f64>> = (0..4).map(|i| e(i, 4)).chain((0..4).map(|i| {
            let mut v = e(i, 4);
            v[i] = -1.0;
            v
        })).collect();
        for eps in [1.0, 5.0, 10.0, 25.0, 50.0] {
            let r = verify_indistinguishability(&pool, eps).unwrap();
            assert!(r.holds, "eps {eps}: slack {}", r.max_ratio_slack);
        }
    }
}
