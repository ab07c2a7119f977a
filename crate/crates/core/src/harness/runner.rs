//! The round loop: broadcast, local training, optional masking, deadline
//! filtering, aggregation and evaluation, repeated with independent seeds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use crate::aggregation::{AggregationWeights, Aggregator, RoundContext};
use crate::client::{self, Behavior, ClientConfig, ClientUpdate, Payload, PrivacyMechanism};
use crate::data::{self, Dataset, PartitionMap};
use crate::error::{Error, Result};
use crate::harness::config::{AggregatorKind, Arm, DataSection, Experiment, PartitionKind, RunConfig};
use crate::model::{self, ModelSpec, ParamVector};
use crate::network::{self, ClientTiming};
use crate::par;
use crate::secure_agg::{self, FixedPointCodec};
use crate::seed::{Purpose, SeedPath};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub repeat: usize,
    /// 1-based.
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub delay_s: Option<f64>,
    pub abandoned: bool,
    pub accepted: Vec<usize>,
    pub weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub repeat: usize,
    /// Attacker ids for this repeat, ascending.
    pub malicious: Vec<usize>,
    pub rounds: Vec<RoundMetrics>,
}

impl RepeatResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(0.0, |m| m.accuracy)
    }

    /// Cumulative delay until `target` accuracy is first reached.
    pub fn total_delay(&self, target: f64) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = self.rounds.iter().map(|m| (m.delay_s.unwrap_or(0.0), m.accuracy)).collect();
        network::total_delay(&pairs, target)
    }
}

/// Mean and population standard deviation across repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub label: String,
    pub mean_accuracy: Vec<f64>,
    pub std_accuracy: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub final_accuracy: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    /// Mean final accuracy at or below the failure threshold.
    pub failure: bool,
    pub failed_repeats: usize,
    pub total_delay: Vec<Option<f64>>,
    /// Mean over repeats, present only when every repeat reached the target.
    pub mean_total_delay: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Summary {
    /// Repeats that stopped early hold their last value for the remaining rounds.
    pub fn from_repeats(label: &str, repeats: &[RepeatResult], failure_threshold: f64, target: f64) -> Self {
        let len = repeats.iter().map(|r| r.rounds.len()).max().unwrap_or(0);
        let column = |t: usize, f: fn(&RoundMetrics) -> f64| -> Vec<f64> {
            repeats
                .iter()
                .filter_map(|r| r.rounds.get(t).or(r.rounds.last()))
                .map(f)
                .collect()
        };
        let mut mean_accuracy = Vec::with_capacity(len);
        let mut std_accuracy = Vec::with_capacity(len);
        let mut mean_loss = Vec::with_capacity(len);
        for t in 0..len {
            let (m, s) = mean_std(&column(t, |m| m.accuracy));
            mean_accuracy.push(m);
            std_accuracy.push(s);
            mean_loss.push(mean_std(&column(t, |m| m.loss)).0);
        }
        let final_accuracy: Vec<f64> = repeats.iter().map(RepeatResult::final_accuracy).collect();
        let (mean_final_accuracy, std_final_accuracy) = mean_std(&final_accuracy);
        let total_delay: Vec<Option<f64>> = repeats.iter().map(|r| r.total_delay(target)).collect();
        let mean_total_delay = total_delay
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| mean_std(&v).0);
        Summary {
            label: label.to_string(),
            mean_accuracy,
            std_accuracy,
            mean_loss,
            failed_repeats: final_accuracy.iter().filter(|&&a| a <= failure_threshold).count(),
            final_accuracy,
            failure: mean_final_accuracy <= failure_threshold,
            mean_final_accuracy,
            std_final_accuracy,
            total_delay,
            mean_total_delay,
        }
    }

    /// Whether every repeat reached the target accuracy.
    pub fn target_reached(&self) -> bool {
        self.total_delay.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub label: String,
    pub config: RunConfig,
    pub repeats: Vec<RepeatResult>,
    pub summary: Summary,
}

impl ArmResult {
    /// Repeat-major, round-minor metrics table.
    pub fn metrics(&self) -> impl Iterator<Item = &RoundMetrics> {
        self.repeats.iter().flat_map(|r| r.rounds.iter())
    }
}

/// Train and test splits loaded from IDX files.
#[derive(Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

impl Datasets {
    pub fn load(section: &DataSection) -> Result<Self> {
        let dir = section.effective_dir();
        let find = |field: &str, name: &str| {
            data::resolve_data_file(&dir, name).ok_or_else(|| {
                Error::config(
                    format!("data.{field}"),
                    format!("{} not found (with or without .gz)", dir.join(name).display()),
                )
            })
        };
        let train = data::load_idx(&find("train_images", &section.train_images)?, &find("train_labels", &section.train_labels)?)?;
        let test = data::load_idx(&find("test_images", &section.test_images)?, &find("test_labels", &section.test_labels)?)?;
        if train.input_dim() != test.input_dim() {
            return Err(Error::config("data", "train and test images differ in size"));
        }
        Ok(Datasets { train, test })
    }
}

/// Loads each distinct set of data files once.
#[derive(Default)]
pub struct DataCache {
    loaded: HashMap<(PathBuf, [String; 4]), Arc<Datasets>>,
}

impl DataCache {
    pub fn get(&mut self, section: &DataSection) -> Result<Arc<Datasets>> {
        let key = (
            section.effective_dir(),
            [
                section.train_images.clone(),
                section.train_labels.clone(),
                section.test_images.clone(),
                section.test_labels.clone(),
            ],
        );
        if let Some(d) = self.loaded.get(&key) {
            return Ok(Arc::clone(d));
        }
        let d = Arc::new(Datasets::load(section)?);
        self.loaded.insert(key, Arc::clone(&d));
        Ok(d)
    }
}

/// Everything about a repeat that stays fixed across its rounds.
struct RepeatSetup {
    seeds: SeedPath,
    validation: Dataset,
    report: Dataset,
    partition: PartitionMap,
    clients: Vec<ClientConfig>,
    timings: Vec<ClientTiming>,
    malicious: Vec<usize>,
    declared_variances: BTreeMap<usize, f64>,
}

fn setup_repeat(cfg: &RunConfig, spec: &ModelSpec, data: &Datasets, repeat: usize) -> Result<RepeatSetup> {
    let seeds = SeedPath::new(cfg.seed).repeat(repeat);
    let n = cfg.clients.count;
    let (validation, report) =
        data.test.split_validation(cfg.data.validation_fraction, &mut seeds.rng(Purpose::Validation))?;
    let partition = match cfg.partition.kind {
        PartitionKind::Iid => data::partition_iid(data.train.len(), n, &mut seeds.rng(Purpose::Partition))?,
        PartitionKind::NonIid => data::partition_non_iid(
            data.train.labels(),
            n,
            cfg.partition.shards_per_client,
            &mut seeds.rng(Purpose::Partition),
        )?,
    };
    let mut malicious = rand::seq::index::sample(&mut seeds.rng(Purpose::Malicious), n, cfg.attack.n_malicious).into_vec();
    malicious.sort_unstable();
    let positions = network::place_clients(n, cfg.delay.area_side_m, &mut seeds.rng(Purpose::Placement));
    let privacy = cfg.privacy.mechanism();
    let behavior = cfg.attack.behavior();
    let clients: Vec<ClientConfig> = (0..n)
        .map(|id| ClientConfig {
            client_id: id,
            local_iterations: cfg.clients.local_iterations,
            batch_size: cfg.clients.batch_size,
            learning_rate: cfg.clients.learning_rate,
            privacy,
            behavior: if malicious.binary_search(&id).is_ok() { behavior } else { Behavior::Honest },
            position: positions[id],
        })
        .collect();
    let upload_vectors = match privacy {
        PrivacyMechanism::Dummy { decoys, .. } => decoys + 1,
        _ => 1,
    };
    let timings = if cfg.delay.enabled {
        clients
            .iter()
            .map(|c| network::client_delay(&cfg.delay, c, partition.shard(c.client_id).len(), spec.dimension() * upload_vectors))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    // attackers claim the same mechanism as everyone else
    let declared_variances = (0..n).map(|id| (id, privacy.declared_variance())).collect();
    Ok(RepeatSetup { seeds, validation, report, partition, clients, timings, malicious, declared_variances })
}

fn select_clients(cfg: &RunConfig, seeds: SeedPath) -> Vec<usize> {
    let n = cfg.clients.count;
    let k = cfg.clients.selected_per_round();
    if k >= n {
        return (0..n).collect();
    }
    let mut ids = rand::seq::index::sample(&mut seeds.rng(Purpose::Selection), n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Server-side raw weight used to pre-scale uploads before masking.
fn masked_weight(cfg: &RunConfig, update: &ClientUpdate, variance: f64) -> f64 {
    let n = update.num_samples as f64;
    match cfg.aggregator.kind {
        AggregatorKind::InverseVariance => n / (variance + cfg.aggregator.variance_floor),
        _ => n,
    }
}

/// Weighted average computed through the masking protocol: every
/// participant uploads `w_i * theta_i` in fixed point, the server learns
/// only the survivors' sum and divides by their total weight.
fn secure_aggregate(
    cfg: &RunConfig,
    updates: &[ClientUpdate],
    survivors: &BTreeSet<usize>,
    variances: &BTreeMap<usize, f64>,
    seeds: SeedPath,
    round: usize,
) -> Result<(ParamVector, AggregationWeights)> {
    let codec = FixedPointCodec::new(cfg.secure_aggregation.scale_bits)?;
    let raw: Vec<(usize, f64)> =
        updates.iter().map(|u| (u.client_id, masked_weight(cfg, u, variances[&u.client_id]))).collect();
    let scaled: Vec<(usize, Vec<f64>)> = updates
        .iter()
        .zip(&raw)
        .map(|(u, &(id, w))| match &u.payload {
            Payload::Single(v) => Ok((id, v.as_slice().iter().map(|x| w * x).collect())),
            Payload::Set(_) => Err(Error::Protocol(format!("client {id} sent a set payload under masking"))),
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<(usize, &[f64])> = scaled.iter().map(|(id, v)| (*id, v.as_slice())).collect();
    let sum = secure_agg::secure_sum(&inputs, survivors, codec, round as u64, &mut seeds.rng(Purpose::SecureAgg))?;
    let survivor_weights: Vec<(usize, f64)> = raw.into_iter().filter(|(id, _)| survivors.contains(id)).collect();
    let total: f64 = survivor_weights.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::RoundAbandoned("survivors carry no weight".into()));
    }
    let weights = AggregationWeights::from_unnormalized(survivor_weights)?;
    Ok((ParamVector::new(sum.into_iter().map(|s| s / total).collect())?, weights))
}

/// One repeat of an arm.
pub fn run_repeat(cfg: &RunConfig, spec: &ModelSpec, data: &Datasets, repeat: usize) -> Result<RepeatResult> {
    let ctx = |round: Option<usize>| {
        move |e: Error| {
            e.with_context(|c| {
                c.repeat = Some(repeat);
                c.round = round;
            })
        }
    };
    let setup = setup_repeat(cfg, spec, data, repeat).map_err(ctx(None))?;
    let report = setup.report.as_batch()?;
    let mut global = spec.init_params(&mut setup.seeds.rng(Purpose::Init));
    let (mut accuracy, mut loss) = model::evaluate_batch(&global, spec, &report).map_err(ctx(None))?;
    let mut aggregator = Aggregator::new(cfg.aggregator.config());
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let seeds = setup.seeds.round(round);
        let selected = select_clients(cfg, seeds);
        let (accepted, delay_s, mut abandoned) = if cfg.delay.enabled {
            let timings: Vec<ClientTiming> = selected.iter().map(|&id| setup.timings[id]).collect();
            let rt = network::round_delay(&timings, &cfg.delay);
            (rt.accepted, Some(rt.round_delay_s), rt.abandoned)
        } else {
            (selected.clone(), None, false)
        };

        let mut weights = Vec::new();
        if !abandoned {
            // under masking, late clients have already committed their masks
            let participants = if cfg.secure_aggregation.enabled { &selected } else { &accepted };
            let updates = par::map(participants, |&id| {
                client::run_client(&global, &setup.clients[id], spec, &data.train, setup.partition.shard(id), seeds.client(id))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(ctx(Some(round)))?;

            let outcome = if cfg.secure_aggregation.enabled {
                let survivors: BTreeSet<usize> = accepted.iter().copied().collect();
                secure_aggregate(cfg, &updates, &survivors, &setup.declared_variances, seeds, round)
            } else {
                let rc = RoundContext { spec, validation: &setup.validation, declared_variances: &setup.declared_variances };
                aggregator.aggregate(&updates, &rc)
            };
            match outcome {
                Ok((next, w)) => {
                    global = next;
                    weights = w.entries().to_vec();
                    (accuracy, loss) = model::evaluate_batch(&global, spec, &report).map_err(ctx(Some(round)))?;
                }
                Err(Error::RoundAbandoned(_)) => abandoned = true,
                Err(e) => return Err(ctx(Some(round))(e)),
            }
        }

        rounds.push(RoundMetrics {
            repeat,
            round,
            accuracy,
            loss,
            delay_s,
            abandoned,
            accepted: if abandoned { Vec::new() } else { accepted },
            weights,
        });
        if cfg.stop_accuracy.is_some_and(|s| accuracy >= s) {
            break;
        }
    }
    Ok(RepeatResult { repeat, malicious: setup.malicious, rounds })
}

/// All repeats of one arm; repeats run concurrently.
pub fn run_arm(label: &str, cfg: &RunConfig, data: &Datasets) -> Result<ArmResult> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    if spec.input_dim() != data.train.input_dim() {
        return Err(Error::config(
            "model.layers",
            format!("input width {} but images have {} pixels", spec.input_dim(), data.train.input_dim()),
        ));
    }
    let ids: Vec<usize> = (0..cfg.repeats).collect();
    let repeats = par::map(&ids, |&r| run_repeat(cfg, &spec, data, r)).into_iter().collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_repeats(label, &repeats, cfg.failure_threshold, cfg.target_accuracy);
    Ok(ArmResult { label: label.to_string(), config: cfg.clone(), repeats, summary })
}

/// Run every arm in order, calling `on_arm` after each finishes.
pub fn run_experiment(
    exp: &Experiment,
    cache: &mut DataCache,
    mut on_arm: impl FnMut(&ArmResult),
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::with_capacity(exp.arms.len());
    for Arm { label, config } in &exp.arms {
        let data = cache.get(&config.data)?;
        let result = run_arm(label, config, &data)?;
        on_arm(&result);
        out.push(result);
    }
    Ok(out)
}
