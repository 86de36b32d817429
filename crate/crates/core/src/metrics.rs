//! Classification metrics over per-class counts.
//!
//! `acc`/`sr_p` weight each class's precision by the class prevalence
//! (`Σ_i (N̂_i / Ñ_i)·r_i`); `uar`/`uasr_p` average per-class recall. The
//! property-attack pair is the same arithmetic over property classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// `N_i`: true samples per class.
    pub truth: Vec<u64>,
    /// `Ñ_i`: predictions per class.
    pub predicted: Vec<u64>,
    /// `N̂_i`: correct predictions per class.
    pub correct: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricWarning {
    /// A class that occurs was never predicted; its precision term counts as 0.
    UnpredictedClass(usize),
    /// A class with no true samples was left out of the recall average.
    EmptyClass(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub warned: bool,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            truth: vec![0; classes],
            predicted: vec![0; classes],
            correct: vec![0; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cc = Self::new(classes);
        for (pred, truth) in pairs {
            cc.record(pred, truth)?;
        }
        Ok(cc)
    }

    /// Adds one `(prediction, truth)` observation.
    pub fn record(&mut self, pred: usize, truth: usize) -> Result<()> {
        let k = self.classes();
        if pred >= k || truth >= k {
            return Err(Error::usage(format!("class index out of range for {k} classes")));
        }
        self.truth[truth] += 1;
        self.predicted[pred] += 1;
        if pred == truth {
            self.correct[truth] += 1;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.truth.len()
    }

    pub fn total(&self) -> u64 {
        self.truth.iter().sum()
    }

    /// `r_i = N_i / ΣN`.
    pub fn ratios(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.truth
            .iter()
            .map(|&n| if total > 0.0 { n as f64 / total } else { 0.0 })
            .collect()
    }

    pub fn warnings(&self) -> Vec<MetricWarning> {
        let mut out = Vec::new();
        for i in 0..self.classes() {
            if self.truth[i] > 0 && self.predicted[i] == 0 {
                out.push(MetricWarning::UnpredictedClass(i));
            }
            if self.truth[i] == 0 {
                out.push(MetricWarning::EmptyClass(i));
            }
        }
        out
    }

    /// Prevalence-weighted precision.
    pub fn acc(&self) -> Scored {
        let mut warned = false;
        let value = self
            .ratios()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if *r == 0.0 {
                    0.0
                } else if self.predicted[i] == 0 {
                    warned = true;
                    0.0
                } else {
                    self.correct[i] as f64 / self.predicted[i] as f64 * r
                }
            })
            .sum();
        Scored { value, warned }
    }

    /// Unweighted mean of per-class recall over classes that occur.
    pub fn uar(&self) -> Scored {
        let present: Vec<usize> = (0..self.classes()).filter(|&i| self.truth[i] > 0).collect();
        let warned = present.len() < self.classes();
        if present.is_empty() {
            return Scored { value: 0.0, warned: true };
        }
        let value = present
            .iter()
            .map(|&i| self.correct[i] as f64 / self.truth[i] as f64)
            .sum::<f64>()
            / present.len() as f64;
        Scored { value, warned }
    }

    /// Property-attack twin of [`acc`](Self::acc).
    pub fn sr_p(&self) -> Scored {
        self.acc()
    }

    /// Property-attack twin of [`uar`](Self::uar).
    pub fn uasr_p(&self) -> Scored {
        self.uar()
    }

    /// `ΣN̂_i / ΣN_i`.
    pub fn standard_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<u64>() as f64 / total as f64
    }
}

/// One results-table entry. Task metrics and attack metrics are filled by
/// different stages, so each is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub standard_accuracy: Option<f64>,
    pub uar: Option<f64>,
    pub sr_p: Option<f64>,
    pub uasr_p: Option<f64>,
    pub warnings: Vec<MetricWarning>,
}

impl MetricsReport {
    pub fn task(cc: &ConfusionCounts) -> Self {
        Self {
            acc: Some(cc.acc().value),
            standard_accuracy: Some(cc.standard_accuracy()),
            uar: Some(cc.uar().value),
            sr_p: None,
            uasr_p: None,
            warnings: cc.warnings(),
        }
    }

    pub fn attack(cc: &ConfusionCounts) -> Self {
        Self {
            acc: None,
            standard_accuracy: Some(cc.standard_accuracy()),
            uar: None,
            sr_p: Some(cc.sr_p().value),
            uasr_p: Some(cc.uasr_p().value),
            warnings: cc.warnings(),
        }
    }
}
