//! Synthetic speech-emotion corpus.
//!
//! A sample's feature vector is a linear mix of a speaker embedding and an
//! emotion embedding plus isotropic noise:
//!
//! ```text
//! features = A·c_s + B·e + η
//! ```
//!
//! `A` and `B` have mutually orthogonal columns, so the speaker embedding can
//! be read back exactly with the pseudo-inverse of `A` and swapped without
//! touching the emotion component. The speaker embedding is split into one
//! coordinate block per demographic property (gender, age group, race); each
//! property value owns a sub-anchor inside its block.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const CORPUS_HEADER: &str = "fpb-corpus-v1";

pub type SpeakerId = u32;

/// Opaque emotion class names, in label order.
pub const EMOTION_NAMES: [&str; 4] = ["neutral", "pleased", "joyful", "furious"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    AfricanAmerican,
    Asian,
    Caucasian,
    Hispanic,
    Unspecified,
}

impl Race {
    pub const ALL: [Race; 5] = [
        Race::AfricanAmerican,
        Race::Asian,
        Race::Caucasian,
        Race::Hispanic,
        Race::Unspecified,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Race::AfricanAmerican => "african_american",
            Race::Asian => "asian",
            Race::Caucasian => "caucasian",
            Race::Hispanic => "hispanic",
            Race::Unspecified => "unspecified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// A demographic attribute an attacker may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Gender,
    #[serde(alias = "age")]
    AgeGroup,
    Race,
}

impl Property {
    pub const ALL: [Property; 3] = [Property::Gender, Property::AgeGroup, Property::Race];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Property::Gender => "gender",
            Property::AgeGroup => "age",
            Property::Race => "race",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gender" => Some(Property::Gender),
            "age" | "age_group" => Some(Property::AgeGroup),
            "race" => Some(Property::Race),
            _ => None,
        }
    }
}

impl std::fmt::Display for Property {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PropertyLabel {
    pub gender: Gender,
    pub age_group: usize,
    pub race: Race,
}

impl PropertyLabel {
    /// Class index of this label for the given property.
    pub fn class(&self, property: Property) -> usize {
        match property {
            Property::Gender => self.gender.index(),
            Property::AgeGroup => self.age_group,
            Property::Race => self.race.index(),
        }
    }
}

/// Age bins as ascending edges: bin `i` covers `[edges[i], edges[i + 1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgeBins(Vec<u32>);

impl Default for AgeBins {
    /// 20–35, 36–50, 51–74.
    fn default() -> Self {
        AgeBins(vec![20, 36, 51, 75])
    }
}

impl AgeBins {
    pub fn new(edges: Vec<u32>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("age bin edges {edges:?} must be strictly increasing")));
        }
        Ok(AgeBins(edges))
    }

    pub fn groups(&self) -> usize {
        self.0.len() - 1
    }

    pub fn min_age(&self) -> u32 {
        self.0[0]
    }

    pub fn max_age(&self) -> u32 {
        self.0[self.0.len() - 1] - 1
    }

    pub fn group_of(&self, age: u32) -> Option<usize> {
        self.0.windows(2).position(|w| (w[0]..w[1]).contains(&age))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: SpeakerId,
    pub properties: PropertyLabel,
    /// Unit vector of per-speaker variation; absent for corpora read from disk.
    pub idiosyncrasy: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub emotion: usize,
    pub speaker_id: SpeakerId,
}

/// Generator settings. Defaults mirror the CREMA-D actor pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub male_speakers: usize,
    pub samples_per_speaker: usize,
    pub emotions: usize,
    pub input_dim: usize,
    pub property_dim: usize,
    pub emotion_dim: usize,
    /// Weight of the speaker idiosyncrasy relative to the property anchor.
    pub kappa: f64,
    pub noise_scale: f64,
    /// Column norm of the property mixing matrix.
    pub property_scale: f64,
    /// Column norm of the emotion mixing matrix.
    pub emotion_scale: f64,
    /// Angle (radians) between the sub-anchors of two values of one property.
    pub anchor_separation: f64,
    pub age_bins: AgeBins,
    /// Relative frequency of each race, in `Race::ALL` order.
    pub race_weights: [f64; 5],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 91,
            male_speakers: 48,
            samples_per_speaker: 82,
            emotions: 4,
            input_dim: 40,
            property_dim: 16,
            emotion_dim: 8,
            kappa: 0.3,
            noise_scale: 1.0,
            property_scale: 8.0,
            emotion_scale: 3.0,
            anchor_separation: 0.6,
            age_bins: AgeBins::default(),
            race_weights: [1.0; 5],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.samples_per_speaker == 0 || self.emotions == 0 {
            return Err(Error::config("speaker, sample and emotion counts must be at least 1"));
        }
        if self.male_speakers > self.speakers {
            return Err(Error::config("more male speakers than speakers"));
        }
        if self.input_dim < self.property_dim + self.emotion_dim {
            return Err(Error::config(format!(
                "input_dim {} < property_dim {} + emotion_dim {}",
                self.input_dim, self.property_dim, self.emotion_dim
            )));
        }
        if self.emotion_dim < self.emotions {
            return Err(Error::config("emotion_dim must hold one orthogonal anchor per emotion"));
        }
        if !(self.anchor_separation > 0.0 && self.anchor_separation <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::config("anchor_separation must lie in (0, pi/2]"));
        }
        if self.kappa < 0.0 || self.noise_scale < 0.0 {
            return Err(Error::config("kappa and noise_scale must be non-negative"));
        }
        if !(self.property_scale > 0.0 && self.emotion_scale > 0.0) {
            return Err(Error::config("mixing scales must be positive"));
        }
        if self.race_weights.iter().any(|w| *w < 0.0) || self.race_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("race weights must be non-negative with a positive sum"));
        }
        PropertyLayout::new(self.property_dim, self.age_bins.groups()).map(|_| ())
    }

    pub fn class_count(&self, property: Property) -> usize {
        match property {
            Property::Gender => Gender::ALL.len(),
            Property::AgeGroup => self.age_bins.groups(),
            Property::Race => Race::ALL.len(),
        }
    }
}

/// Coordinate blocks of the speaker embedding, one per property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyLayout {
    blocks: [Range<usize>; 3],
}

impl PropertyLayout {
    /// Each block needs one coordinate per value plus a shared centre
    /// direction; spare coordinates are dealt out round-robin.
    pub fn new(property_dim: usize, age_groups: usize) -> Result<Self> {
        let mut sizes = [Gender::ALL.len() + 1, age_groups + 1, Race::ALL.len() + 1];
        let need: usize = sizes.iter().sum();
        if property_dim < need {
            return Err(Error::config(format!(
                "property_dim {property_dim} too small; need at least {need}"
            )));
        }
        for i in 0..property_dim - need {
            sizes[i % 3] += 1;
        }
        let mut start = 0;
        let blocks = sizes.map(|len| {
            let r = start..start + len;
            start += len;
            r
        });
        Ok(Self { blocks })
    }

    pub fn block(&self, property: Property) -> Range<usize> {
        self.blocks[property.index()].clone()
    }
}

/// Analytic stand-in for the embedding extractor and the resynthesis model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    input_dim: usize,
    property_dim: usize,
    emotion_dim: usize,
    /// `A`, row-major `[input_dim × property_dim]`.
    property_mix: Vec<f64>,
    /// `B`, row-major `[input_dim × emotion_dim]`.
    emotion_mix: Vec<f64>,
    /// `pinv(A)`, row-major `[property_dim × input_dim]`.
    extractor: Vec<f64>,
    layout: PropertyLayout,
    /// `field_anchors[p][v]`: unit sub-anchor of value `v` of property `p`,
    /// zero outside that property's block.
    field_anchors: [Vec<Vec<f64>>; 3],
    emotion_anchors: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub kappa: f64,
}

impl SurrogateModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn property_dim(&self) -> usize {
        self.property_dim
    }

    pub fn emotion_dim(&self) -> usize {
        self.emotion_dim
    }

    pub fn layout(&self) -> &PropertyLayout {
        &self.layout
    }

    /// Unit anchor for a full property tuple.
    pub fn property_anchor(&self, label: &PropertyLabel) -> Vec<f64> {
        let mut v = vec![0.0; self.property_dim];
        for p in Property::ALL {
            let sub = &self.field_anchors[p.index()][label.class(p)];
            v.iter_mut().zip(sub).for_each(|(a, b)| *a += b);
        }
        normalize(&v).expect("anchors are non-zero")
    }

    /// Sub-anchor of one property value (unit, zero outside its block).
    pub fn value_anchor(&self, property: Property, class: usize) -> Option<&[f64]> {
        self.field_anchors[property.index()].get(class).map(|v| v.as_slice())
    }

    pub fn value_anchors(&self, property: Property) -> &[Vec<f64>] {
        &self.field_anchors[property.index()]
    }

    pub fn emotion_anchor(&self, emotion: usize) -> Option<&[f64]> {
        self.emotion_anchors.get(emotion).map(|v| v.as_slice())
    }

    /// Speaker embedding: `normalize(anchor + κ·idiosyncrasy)`.
    pub fn speaker_embedding(&self, speaker: &Speaker) -> Vec<f64> {
        let mut c = self.property_anchor(&speaker.properties);
        if let Some(idio) = &speaker.idiosyncrasy {
            c.iter_mut().zip(idio).for_each(|(a, b)| *a += self.kappa * b);
        }
        normalize(&c).unwrap_or_else(|| self.property_anchor(&speaker.properties))
    }

    /// `A·c`
    pub fn mix_property(&self, c: &[f64]) -> Vec<f64> {
        mat_vec(&self.property_mix, self.input_dim, self.property_dim, c)
    }

    /// `B·e`
    pub fn mix_emotion(&self, e: &[f64]) -> Vec<f64> {
        mat_vec(&self.emotion_mix, self.input_dim, self.emotion_dim, e)
    }

    /// `pinv(B)·x`, the emotion-subspace coordinates of a feature vector.
    pub fn emotion_coordinates(&self, features: &[f64]) -> Vec<f64> {
        // B has orthogonal columns of equal norm, so pinv(B) = Bᵀ / ‖b‖².
        let norm2: f64 = (0..self.input_dim)
            .map(|r| self.emotion_mix[r * self.emotion_dim].powi(2))
            .sum();
        (0..self.emotion_dim)
            .map(|j| {
                (0..self.input_dim)
                    .map(|r| self.emotion_mix[r * self.emotion_dim + j] * features[r])
                    .sum::<f64>()
                    / norm2
            })
            .collect()
    }

    fn check_features(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.input_dim {
            return Err(Error::config(format!(
                "sample has {} features, surrogate expects {}",
                s.features.len(),
                self.input_dim
            )));
        }
        if s.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Extraction("non-finite feature".into()));
        }
        Ok(())
    }

    /// Unit speaker embedding recovered from a sample via `pinv(A)`.
    pub fn extract_property_embedding(&self, s: &Sample) -> Result<Vec<f64>> {
        self.check_features(s)?;
        let raw = mat_vec(&self.extractor, self.property_dim, self.input_dim, &s.features);
        normalize(&raw).ok_or_else(|| Error::Extraction("sample has no property component".into()))
    }

    /// Replaces the sample's speaker embedding with `c_new`:
    /// `features − A·ĉ + A·c_new` where `ĉ` is the extracted embedding.
    pub fn synthesize(&self, c_new: &[f64], s: &Sample) -> Result<Sample> {
        if c_new.len() != self.property_dim {
            return Err(Error::config(format!(
                "embedding has {} entries, expected {}",
                c_new.len(),
                self.property_dim
            )));
        }
        check_unit(c_new, 1e-6)?;
        let current = self.extract_property_embedding(s)?;
        let diff: Vec<f64> = c_new.iter().zip(&current).map(|(a, b)| a - b).collect();
        let shift = self.mix_property(&diff);
        Ok(Sample {
            features: s.features.iter().zip(&shift).map(|(x, d)| x + d).collect(),
            emotion: s.emotion,
            speaker_id: s.speaker_id,
        })
    }

    /// Unit direction of `c` restricted to one property's block, or `None`
    /// when `c` has no mass there.
    pub fn property_component(&self, c: &[f64], property: Property) -> Option<Vec<f64>> {
        let block = self.layout.block(property);
        let mut v = vec![0.0; c.len()];
        v[block.clone()].copy_from_slice(&c[block]);
        normalize(&v)
    }

    /// Replaces the direction of `c` inside one property's block with `unit`
    /// while keeping the block's magnitude, so the result stays unit-norm.
    pub fn swap_property_component(&self, c: &[f64], property: Property, unit: &[f64]) -> Vec<f64> {
        let block = self.layout.block(property);
        let mag = c[block.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = c.to_vec();
        for i in block {
            out[i] = mag * unit[i];
        }
        out
    }
}

/// A generated corpus together with the model that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<Speaker>,
    pub samples: Vec<Sample>,
    pub surrogate: SurrogateModel,
}

impl Corpus {
    pub fn speaker(&self, id: SpeakerId) -> Option<&Speaker> {
        self.speakers.iter().find(|s| s.id == id)
    }
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let surrogate = build_surrogate(config, seed)?;
    let mut rng = rng::stream(seed, &["corpus".into()]);

    let n = config.speakers;
    let mut genders: Vec<Gender> = (0..n)
        .map(|i| if i < config.male_speakers { Gender::Male } else { Gender::Female })
        .collect();
    genders.shuffle(&mut rng);
    let mut races = apportion(&config.race_weights, n)
        .into_iter()
        .enumerate()
        .flat_map(|(r, count)| std::iter::repeat_n(Race::ALL[r], count))
        .collect::<Vec<_>>();
    races.shuffle(&mut rng);

    let mut speakers = Vec::with_capacity(n);
    for (i, (gender, race)) in genders.into_iter().zip(races).enumerate() {
        let age = rng.random_range(config.age_bins.min_age()..=config.age_bins.max_age());
        let age_group = config.age_bins.group_of(age).expect("age drawn inside bins");
        let idio = random_unit(&mut rng, config.property_dim);
        speakers.push(Speaker {
            id: i as SpeakerId,
            properties: PropertyLabel {
                gender,
                age_group,
                race,
            },
            idiosyncrasy: Some(idio),
        });
    }

    let mut samples = Vec::with_capacity(n * config.samples_per_speaker);
    for speaker in &speakers {
        let speaker_part = surrogate.mix_property(&surrogate.speaker_embedding(speaker));
        let mut emotions: Vec<usize> = (0..config.samples_per_speaker).map(|i| i % config.emotions).collect();
        emotions.shuffle(&mut rng);
        for emotion in emotions {
            let emotion_part = surrogate.mix_emotion(&surrogate.emotion_anchors[emotion]);
            let features = speaker_part
                .iter()
                .zip(&emotion_part)
                .map(|(a, b)| {
                    let noise: f64 = rng.sample(StandardNormal);
                    a + b + config.noise_scale * noise
                })
                .collect();
            samples.push(Sample {
                features,
                emotion,
                speaker_id: speaker.id,
            });
        }
    }

    Ok(Corpus {
        speakers,
        samples,
        surrogate,
    })
}

fn build_surrogate(config: &CorpusConfig, seed: u64) -> Result<SurrogateModel> {
    let (d_in, d_c, d_e) = (config.input_dim, config.property_dim, config.emotion_dim);
    let layout = PropertyLayout::new(d_c, config.age_bins.groups())?;

    // Orthonormal columns for [A | B] from a seeded Gaussian matrix.
    let mut rng = rng::stream(seed, &["mixing".into()]);
    let gaussian = DMatrix::from_fn(d_in, d_c + d_e, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = gaussian.qr().q();
    let mut property_mix = Vec::with_capacity(d_in * d_c);
    let mut emotion_mix = Vec::with_capacity(d_in * d_e);
    for r in 0..d_in {
        property_mix.extend((0..d_c).map(|c| config.property_scale * q[(r, c)]));
        emotion_mix.extend((d_c..d_c + d_e).map(|c| config.emotion_scale * q[(r, c)]));
    }

    let a = DMatrix::from_row_slice(d_in, d_c, &property_mix);
    let smallest = a.singular_values().min();
    if smallest < 1e-6 {
        return Err(Error::config(format!("property mixing is rank deficient (σ_min = {smallest})")));
    }
    let pinv = a
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::config(format!("pseudo-inverse failed: {e}")))?;
    let extractor = (0..d_c).flat_map(|r| (0..d_in).map(move |c| (r, c))).map(|rc| pinv[rc]).collect();

    let classes = [Gender::ALL.len(), config.age_bins.groups(), Race::ALL.len()];
    let field_anchors = Property::ALL.map(|p| {
        let block = layout.block(p);
        sub_anchors(seed, p, block, d_c, classes[p.index()], config.anchor_separation)
    });

    let mut emotion_rng = rng::stream(seed, &["emotion-anchors".into()]);
    let basis = orthonormal_set(&mut emotion_rng, d_e, config.emotions);

    let model = SurrogateModel {
        input_dim: d_in,
        property_dim: d_c,
        emotion_dim: d_e,
        property_mix,
        emotion_mix,
        extractor,
        layout,
        field_anchors,
        emotion_anchors: basis,
        noise_scale: config.noise_scale,
        kappa: config.kappa,
    };
    check_anchor_separation(&model, config)?;
    Ok(model)
}

/// Sub-anchors `cos φ·u₀ + sin φ·v_k` with `u₀, v_1..v_k` orthonormal in the
/// block; every pair of values then sits at angle `arccos(cos²φ)`.
fn sub_anchors(seed: u64, property: Property, block: Range<usize>, dim: usize, values: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &["anchor".into(), property.name().into()]);
    let basis = orthonormal_set(&mut rng, block.len(), values + 1);
    let cos_phi = separation.cos().sqrt();
    let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
    (0..values)
        .map(|k| {
            let mut v = vec![0.0; dim];
            for (i, slot) in block.clone().enumerate() {
                v[slot] = cos_phi * basis[0][i] + sin_phi * basis[k + 1][i];
            }
            v
        })
        .collect()
}

fn check_anchor_separation(model: &SurrogateModel, config: &CorpusConfig) -> Result<()> {
    let mut anchors = Vec::new();
    for g in Gender::ALL {
        for age_group in 0..config.age_bins.groups() {
            for race in Race::ALL {
                anchors.push(model.property_anchor(&PropertyLabel { gender: g, age_group, race }));
            }
        }
    }
    for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            let angle = dot(&anchors[i], &anchors[j]).clamp(-1.0, 1.0).acos();
            if angle < 0.2 {
                return Err(Error::config(format!(
                    "property anchors only {angle:.3} rad apart; raise anchor_separation"
                )));
            }
        }
    }
    Ok(())
}

/// Gram–Schmidt over seeded Gaussian draws.
fn orthonormal_set(rng: &mut Stream, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &out {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if let Some(u) = normalize(&v).filter(|_| norm(&v) > 1e-6) {
            out.push(u);
        }
    }
    out
}

/// Largest-remainder split of `total` by `weights`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn random_unit(rng: &mut Stream, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalize(&v) {
            return u;
        }
    }
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

pub(crate) fn check_unit(v: &[f64], tol: f64) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > tol {
        return Err(Error::Normalization { norm: n });
    }
    Ok(())
}

/// Speakers and samples assigned to one side of a split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub speakers: Vec<Speaker>,
    pub samples: Vec<Sample>,
}

impl Partition {
    pub fn samples_of(&self, id: SpeakerId) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.speaker_id == id)
    }
}

/// Random speaker-level split into (shadow, private).
pub fn split_corpus(speakers: &[Speaker], samples: &[Sample], shadow_count: usize, seed: u64) -> Result<(Partition, Partition)> {
    if shadow_count >= speakers.len() {
        return Err(Error::usage(format!(
            "shadow_count {shadow_count} must be smaller than the {} speakers",
            speakers.len()
        )));
    }
    let mut order: Vec<usize> = (0..speakers.len()).collect();
    order.shuffle(&mut rng::stream(seed, &["split".into()]));
    let mut shadow_ids: Vec<SpeakerId> = order[..shadow_count].iter().map(|&i| speakers[i].id).collect();
    shadow_ids.sort_unstable();

    let mut shadow = Partition::default();
    let mut private = Partition::default();
    for sp in speakers {
        if shadow_ids.binary_search(&sp.id).is_ok() {
            shadow.speakers.push(sp.clone());
        } else {
            private.speakers.push(sp.clone());
        }
    }
    for s in samples {
        if shadow_ids.binary_search(&s.speaker_id).is_ok() {
            shadow.samples.push(s.clone());
        } else {
            private.samples.push(s.clone());
        }
    }
    Ok((shadow, private))
}

/// Parsed contents of a corpus file.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFile {
    pub input_dim: usize,
    pub emotions: usize,
    pub seed: Option<u64>,
    pub speakers: Vec<Speaker>,
    pub samples: Vec<Sample>,
}

/// One header line, then `speaker_id,emotion,gender,age_group,race,f_0..f_{D-1}`
/// per sample.
pub fn write_corpus(path: &Path, speakers: &[Speaker], samples: &[Sample], emotions: usize, seed: u64) -> Result<()> {
    let input_dim = samples.first().map_or(0, |s| s.features.len());
    let mut out = String::new();
    writeln!(
        out,
        "# {CORPUS_HEADER} input_dim={input_dim} emotions={emotions} seed={seed} speakers={} samples={}",
        speakers.len(),
        samples.len()
    )
    .unwrap();
    for s in samples {
        let sp = speakers
            .iter()
            .find(|sp| sp.id == s.speaker_id)
            .ok_or_else(|| Error::usage(format!("sample references unknown speaker {}", s.speaker_id)))?;
        let p = sp.properties;
        write!(out, "{},{},{},{},{}", s.speaker_id, s.emotion, p.gender.name(), p.age_group, p.race.name()).unwrap();
        for v in &s.features {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<CorpusFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty corpus file"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("#") || fields.next() != Some(CORPUS_HEADER) {
        return Err(Error::format(path, format!("missing `# {CORPUS_HEADER}` header")));
    }
    let mut input_dim = None;
    let mut emotions = None;
    let mut seed = None;
    for kv in fields {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::format(path, format!("bad header field `{kv}`")))?;
        let bad = || Error::format(path, format!("bad header value `{kv}`"));
        match k {
            "input_dim" => input_dim = Some(v.parse::<usize>().map_err(|_| bad())?),
            "emotions" => emotions = Some(v.parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            _ => {}
        }
    }
    let input_dim = input_dim.ok_or_else(|| Error::format(path, "header lacks input_dim"))?;
    let emotions = emotions.ok_or_else(|| Error::format(path, "header lacks emotions"))?;

    let mut speakers: Vec<Speaker> = Vec::new();
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", lineno + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 + input_dim {
            return Err(bad(&format!("expected {} columns, found {}", 5 + input_dim, cols.len())));
        }
        let speaker_id: SpeakerId = cols[0].trim().parse().map_err(|_| bad("bad speaker id"))?;
        let emotion: usize = cols[1].trim().parse().map_err(|_| bad("bad emotion"))?;
        if emotion >= emotions {
            return Err(bad("emotion label out of range"));
        }
        let properties = PropertyLabel {
            gender: Gender::parse(cols[2].trim()).ok_or_else(|| bad("bad gender"))?,
            age_group: cols[3].trim().parse().map_err(|_| bad("bad age group"))?,
            race: Race::parse(cols[4].trim()).ok_or_else(|| bad("bad race"))?,
        };
        let features = cols[5..]
            .iter()
            .map(|t| t.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("bad feature value"))?;
        match speakers.iter().find(|s| s.id == speaker_id) {
            Some(existing) if existing.properties != properties => {
                return Err(bad("speaker properties disagree with an earlier line"));
            }
            Some(_) => {}
            None => speakers.push(Speaker {
                id: speaker_id,
                properties,
                idiosyncrasy: None,
            }),
        }
        samples.push(Sample {
            features,
            emotion,
            speaker_id,
        });
    }
    speakers.sort_by_key(|s| s.id);
    Ok(CorpusFile {
        input_dim,
        emotions,
        seed,
        speakers,
        samples,
    })
}

pub fn write_surrogate(path: &Path, model: &SurrogateModel) -> Result<()> {
    let json = serde_json::to_string(model).expect("surrogate serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_surrogate(path: &Path) -> Result<SurrogateModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
