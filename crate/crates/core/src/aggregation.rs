//! Server-side combination of client uploads into the next global model.
//!
//! Every aggregator here produces a convex combination of the uploaded
//! vectors, summed in ascending client-id order so the floating-point result
//! does not depend on how clients were scheduled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{ClientUpdate, Payload};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::par;

/// Normalized, nonnegative weight per accepted client, sorted by client id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregationWeights(Vec<(usize, f64)>);

impl AggregationWeights {
    pub fn from_unnormalized(mut raw: Vec<(usize, f64)>) -> Result<Self> {
        raw.sort_by_key(|&(id, _)| id);
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::RoundAbandoned("no client received positive aggregation weight".into()));
        }
        Ok(AggregationWeights(raw.into_iter().map(|(id, w)| (id, w / total)).collect()))
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.0.binary_search_by_key(&id, |&(i, _)| i).ok().map(|k| self.0[k].1)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    #[default]
    Loss,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AggregatorConfig {
    #[default]
    FedAvg,
    TestWeighted { temperature: f64, memory: f64, score: ScoreMetric },
    InverseVariance { variance_floor: f64 },
}

impl AggregatorConfig {
    pub const DEFAULT_TEMPERATURE: f64 = 1.0;
    pub const DEFAULT_MEMORY: f64 = 0.5;
    pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

    pub fn test_weighted() -> Self {
        AggregatorConfig::TestWeighted {
            temperature: Self::DEFAULT_TEMPERATURE,
            memory: Self::DEFAULT_MEMORY,
            score: ScoreMetric::Loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregatorConfig::TestWeighted { temperature, .. } if !(temperature > 0.0) => {
                Err(Error::config("aggregator.temperature", "must be > 0"))
            }
            AggregatorConfig::TestWeighted { memory, .. } if !(0.0..1.0).contains(&memory) => {
                Err(Error::config("aggregator.memory", "must lie in [0, 1)"))
            }
            AggregatorConfig::InverseVariance { variance_floor } if !(variance_floor > 0.0) => {
                Err(Error::config("aggregator.variance_floor", "must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Coordinate-wise mean of a dummy upload set.
pub fn reduce_dummy(set: &[ParamVector]) -> Result<ParamVector> {
    let first = set.first().ok_or_else(|| Error::Protocol("empty dummy set".into()))?;
    if set.len() == 1 {
        return Ok(first.clone());
    }
    let d = first.len();
    let mut acc = vec![0.0; d];
    for v in set {
        if v.len() != d {
            return Err(Error::Protocol(format!("dummy set mixes lengths {d} and {}", v.len())));
        }
        for (a, x) in acc.iter_mut().zip(v.as_slice()) {
            *a += x;
        }
    }
    let k = set.len() as f64;
    ParamVector::new(acc.into_iter().map(|a| a / k).collect())
}

/// The single vector the server works with for one upload.
pub fn server_view(update: &ClientUpdate) -> Result<ParamVector> {
    match &update.payload {
        Payload::Single(v) => Ok(v.clone()),
        Payload::Set(set) => reduce_dummy(set),
    }
}

fn combine(views: &[(usize, ParamVector)], weights: &AggregationWeights) -> Result<ParamVector> {
    let d = views[0].1.len();
    let mut out = vec![0.0; d];
    for ((id, v), &(wid, w)) in views.iter().zip(weights.entries()) {
        debug_assert_eq!(*id, wid);
        if v.len() != d {
            return Err(Error::Protocol(format!("client {id} uploaded {} parameters, expected {d}", v.len())));
        }
        if w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.as_slice()) {
            *o += w * x;
        }
    }
    ParamVector::new(out)
}

/// Reduce payloads and sort by client id.
fn views(updates: &[ClientUpdate]) -> Result<Vec<(usize, ParamVector)>> {
    if updates.is_empty() {
        return Err(Error::RoundAbandoned("no accepted updates".into()));
    }
    let mut v = updates.iter().map(|u| Ok((u.client_id, server_view(u)?))).collect::<Result<Vec<_>>>()?;
    v.sort_by_key(|(id, _)| *id);
    if v.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Protocol("duplicate client id in round".into()));
    }
    Ok(v)
}

fn sample_counts(updates: &[ClientUpdate]) -> BTreeMap<usize, f64> {
    updates.iter().map(|u| (u.client_id, u.num_samples as f64)).collect()
}

/// Data-size weighted average.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<(ParamVector, AggregationWeights)> {
    let views = views(updates)?;
    let weights = AggregationWeights::from_unnormalized(sample_counts(updates).into_iter().collect())?;
    Ok((combine(&views, &weights)?, weights))
}

/// Weights proportional to `n_i / (variance_i + floor)`.
pub fn inverse_variance_aggregate(
    updates: &[ClientUpdate],
    variances: &BTreeMap<usize, f64>,
    variance_floor: f64,
) -> Result<(ParamVector, AggregationWeights)> {
    let views = views(updates)?;
    let raw = sample_counts(updates)
        .into_iter()
        .map(|(id, n)| {
            let var = *variances
                .get(&id)
                .ok_or_else(|| Error::config("aggregator", format!("no declared variance for client {id}")))?;
            if var < 0.0 || var.is_nan() {
                return Err(Error::config("aggregator", format!("client {id} variance {var} is invalid")));
            }
            Ok((id, n / (var + variance_floor)))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = AggregationWeights::from_unnormalized(raw)?;
    Ok((combine(&views, &weights)?, weights))
}

/// Per-client validation score used by the test-weighted aggregator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub client_id: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Score each upload on the server's held-out validation set, then blend the
/// resulting softmax-of-negative-loss weights with data size and with last
/// round's weights.
pub fn test_weighted_aggregate(
    updates: &[ClientUpdate],
    validation: &Dataset,
    spec: &ModelSpec,
    prev_weights: &BTreeMap<usize, f64>,
    cfg: &AggregatorConfig,
) -> Result<(ParamVector, AggregationWeights, Vec<ValidationScore>)> {
    let AggregatorConfig::TestWeighted { temperature, memory, score } = *cfg else {
        return Err(Error::config("aggregator.kind", "test_weighted_aggregate needs a test_weighted config"));
    };
    if validation.is_empty() {
        return Err(Error::config("data.validation_fraction", "validation set is empty"));
    }
    let views = views(updates)?;
    let batch = validation.as_batch()?;
    let scores: Vec<ValidationScore> = par::map(&views, |(id, theta)| {
        let (accuracy, loss) = model::evaluate_batch(theta, spec, &batch).unwrap_or((0.0, f64::INFINITY));
        ValidationScore { client_id: *id, loss, accuracy }
    });

    let badness = |s: &ValidationScore| match score {
        ScoreMetric::Loss => s.loss,
        ScoreMetric::Accuracy => 1.0 - s.accuracy,
    };
    // shift by the best score so exp() cannot underflow for everyone at once
    let best = scores.iter().map(badness).filter(|b| b.is_finite()).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::RoundAbandoned("every upload failed validation".into()));
    }
    let counts = sample_counts(updates);
    let current = AggregationWeights::from_unnormalized(
        scores
            .iter()
            .map(|s| {
                let b = badness(s);
                let q = if b.is_finite() { (-(b - best) / temperature).exp() } else { 0.0 };
                (s.client_id, counts[&s.client_id] * q)
            })
            .collect(),
    )?;

    let excluded = |id: usize| scores.iter().any(|s| s.client_id == id && !badness(s).is_finite());
    let blended = current
        .entries()
        .iter()
        .map(|&(id, p)| {
            if excluded(id) {
                return (id, 0.0);
            }
            let prev = prev_weights.get(&id).copied().unwrap_or(p);
            (id, memory * prev + (1.0 - memory) * p)
        })
        .collect();
    let weights = AggregationWeights::from_unnormalized(blended)?;
    Ok((combine(&views, &weights)?, weights, scores))
}

/// Aggregator plus whatever state it carries between rounds.
#[derive(Debug, Clone)]
pub struct Aggregator {
    config: AggregatorConfig,
    prev_weights: BTreeMap<usize, f64>,
}

/// Side information an aggregator may consult.
pub struct RoundContext<'a> {
    pub spec: &'a ModelSpec,
    pub validation: &'a Dataset,
    pub declared_variances: &'a BTreeMap<usize, f64>,
}

impl Aggregator {
    pub fn new(config: AggregatorConfig) -> Self {
        Aggregator { config, prev_weights: BTreeMap::new() }
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn aggregate(
        &mut self,
        updates: &[ClientUpdate],
        ctx: &RoundContext<'_>,
    ) -> Result<(ParamVector, AggregationWeights)> {
        match self.config {
            AggregatorConfig::FedAvg => fedavg(updates),
            AggregatorConfig::InverseVariance { variance_floor } => {
                inverse_variance_aggregate(updates, ctx.declared_variances, variance_floor)
            }
            AggregatorConfig::TestWeighted { .. } => {
                let (out, weights, _) =
                    test_weighted_aggregate(updates, ctx.validation, ctx.spec, &self.prev_weights, &self.config)?;
                for &(id, w) in weights.entries() {
                    self.prev_weights.insert(id, w);
                }
                Ok((out, weights))
            }
        }
    }
}
