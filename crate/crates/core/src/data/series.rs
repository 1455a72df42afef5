//! Irregular multivariate series and their dense value/mask view.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TadaError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub feature: usize,
    pub value: f64,
}

/// All observations recorded at one time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStep {
    pub time: f64,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Sequence(usize),
    Step(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sequence,
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    pub id: String,
    pub steps: Vec<TimeStep>,
    pub label: Label,
}

impl IrregularSeries {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.time).collect()
    }

    pub fn num_observations(&self) -> usize {
        self.steps.iter().map(|s| s.observations.len()).sum()
    }

    /// Class ids the loss is computed against: one for sequence labels,
    /// one per step for step labels.
    pub fn targets(&self) -> Vec<usize> {
        match &self.label {
            Label::Sequence(c) => vec![*c],
            Label::Step(v) => v.clone(),
        }
    }

    pub fn task(&self) -> Task {
        match self.label {
            Label::Sequence(_) => Task::Sequence,
            Label::Step(_) => Task::Step,
        }
    }

    /// Checks the structural invariants: non-empty, strictly increasing times,
    /// non-empty steps without repeated features, features below `d`, finite
    /// values and step labels aligned with steps.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(TadaError::Schema(format!(
                "series `{}` has no steps",
                self.id
            )));
        }
        for w in self.steps.windows(2) {
            if w[1].time <= w[0].time {
                return Err(TadaError::Schema(format!(
                    "series `{}` times are not strictly increasing",
                    self.id
                )));
            }
        }
        for step in &self.steps {
            if step.observations.is_empty() {
                return Err(TadaError::Schema(format!(
                    "series `{}` has an empty step at t={}",
                    self.id, step.time
                )));
            }
            let mut seen = vec![false; d];
            for o in &step.observations {
                if o.feature >= d {
                    return Err(TadaError::Schema(format!(
                        "feature {} out of range for D={d}",
                        o.feature
                    )));
                }
                if seen[o.feature] {
                    return Err(TadaError::Schema(format!(
                        "feature {} repeated at t={}",
                        o.feature, step.time
                    )));
                }
                seen[o.feature] = true;
                if !o.value.is_finite() {
                    return Err(TadaError::Schema("non-finite value".into()));
                }
            }
        }
        if let Label::Step(labels) = &self.label {
            if labels.len() != self.steps.len() {
                return Err(TadaError::Schema(format!(
                    "series `{}` has {} step labels for {} steps",
                    self.id,
                    labels.len(),
                    self.steps.len()
                )));
            }
        }
        Ok(())
    }
}

/// Maps times affinely onto `[0, 1]` per sample; a single step maps to 0.
pub fn normalize_times(series: &IrregularSeries) -> IrregularSeries {
    let mut out = series.clone();
    let (Some(first), Some(last)) = (series.steps.first(), series.steps.last()) else {
        return out;
    };
    let (lo, hi) = (first.time, last.time);
    let span = hi - lo;
    for step in &mut out.steps {
        step.time = if span > 0.0 {
            (step.time - lo) / span
        } else {
            0.0
        };
    }
    out
}

/// Dense `T×D` values (0 where unobserved) and observation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMask {
    pub steps: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ValueMask {
    pub fn value(&self, k: usize, d: usize) -> f64 {
        self.values[k * self.features + d]
    }

    pub fn observed(&self, k: usize, d: usize) -> bool {
        self.mask[k * self.features + d]
    }
}

pub fn build_value_mask(series: &IrregularSeries, d: usize) -> ValueMask {
    let t = series.steps.len();
    let mut values = vec![0.0; t * d];
    let mut mask = vec![false; t * d];
    for (k, step) in series.steps.iter().enumerate() {
        for o in &step.observations {
            values[k * d + o.feature] = o.value;
            mask[k * d + o.feature] = true;
        }
    }
    ValueMask {
        steps: t,
        features: d,
        values,
        mask,
    }
}
