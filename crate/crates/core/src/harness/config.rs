//! TOML run configuration, experiment arms and the resolved snapshot.
//!
//! An experiment file is a base [`RunConfig`] plus an optional `[[arms]]`
//! array. Each arm carries a `label` and any partial tables; those are merged
//! key by key over the base before deserializing, so an arm only states what
//! it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregatorConfig, ScoreMetric};
use crate::client::{Behavior, PrivacyMechanism};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::network::DelayConfig;
use crate::secure_agg::DEFAULT_SCALE_BITS;

/// Overrides `data.dir` when set.
pub const DATA_DIR_ENV: &str = "FEDSIM_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub repeats: usize,
    /// A repeat whose final accuracy is at or below this counts as a failure.
    pub failure_threshold: f64,
    /// Stop a repeat once test accuracy reaches this value.
    pub stop_accuracy: Option<f64>,
    /// Accuracy at which cumulative delay is read off.
    pub target_accuracy: f64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub clients: ClientsSection,
    pub privacy: PrivacySection,
    pub attack: AttackSection,
    pub aggregator: AggregatorSection,
    pub secure_aggregation: SecureAggSection,
    pub delay: DelayConfig,
    pub plot: PlotSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            rounds: 300,
            repeats: 20,
            failure_threshold: 0.10,
            stop_accuracy: None,
            target_accuracy: 0.90,
            output_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            data: DataSection::default(),
            partition: PartitionSection::default(),
            clients: ClientsSection::default(),
            privacy: PrivacySection::default(),
            attack: AttackSection::default(),
            aggregator: AggregatorSection::default(),
            secure_aggregation: SecureAggSection::default(),
            delay: DelayConfig::default(),
            plot: PlotSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { layers: ModelSpec::mnist_default().layer_sizes().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Share of the test split held out for server-side scoring. It is
    /// excluded from reported accuracy.
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("data/mnist"),
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            validation_fraction: 0.1,
        }
    }
}

impl DataSection {
    /// `data.dir`, or the environment override.
    pub fn effective_dir(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    #[default]
    NonIid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub kind: PartitionKind,
    pub shards_per_client: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { kind: PartitionKind::NonIid, shards_per_client: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsSection {
    pub count: usize,
    /// Fraction of clients sampled each round; ignored when `per_round` is set.
    pub fraction: f64,
    pub per_round: Option<usize>,
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClientsSection {
    fn default() -> Self {
        ClientsSection {
            count: 10,
            fraction: 1.0,
            per_round: None,
            local_iterations: 120,
            batch_size: 1200,
            learning_rate: 0.1,
        }
    }
}

impl ClientsSection {
    pub fn selected_per_round(&self) -> usize {
        match self.per_round {
            Some(k) => k,
            None => ((self.fraction * self.count as f64).round() as usize).clamp(1, self.count.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyKind {
    #[default]
    None,
    Gaussian,
    Laplace,
    Dummy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub kind: PrivacyKind,
    /// Gaussian standard deviation.
    pub std: f64,
    /// Gaussian variance; when set it takes the place of `std`.
    pub variance: Option<f64>,
    /// Laplace scale.
    pub scale: f64,
    pub decoys: usize,
    pub decoy_std: f64,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection { kind: PrivacyKind::None, std: 0.0, variance: None, scale: 0.0, decoys: 1, decoy_std: 0.0 }
    }
}

impl PrivacySection {
    pub fn mechanism(&self) -> PrivacyMechanism {
        match self.kind {
            PrivacyKind::None => PrivacyMechanism::None,
            PrivacyKind::Gaussian => PrivacyMechanism::Gaussian { std: self.variance.map_or(self.std, f64::sqrt) },
            PrivacyKind::Laplace => PrivacyMechanism::Laplace { scale: self.scale },
            PrivacyKind::Dummy => PrivacyMechanism::Dummy { decoys: self.decoys, decoy_std: self.decoy_std },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    #[default]
    SignFlip,
    RandomUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub n_malicious: usize,
    pub behavior: BehaviorKind,
    pub lo: f64,
    pub hi: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { n_malicious: 0, behavior: BehaviorKind::SignFlip, lo: -1.0, hi: 1.0 }
    }
}

impl AttackSection {
    pub fn behavior(&self) -> Behavior {
        match self.behavior {
            BehaviorKind::SignFlip => Behavior::SignFlip,
            BehaviorKind::RandomUniform => Behavior::RandomUniform { lo: self.lo, hi: self.hi },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    FedAvg,
    TestWeighted,
    InverseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorSection {
    pub kind: AggregatorKind,
    pub temperature: f64,
    pub memory: f64,
    pub score: ScoreMetric,
    pub variance_floor: f64,
}

impl Default for AggregatorSection {
    fn default() -> Self {
        AggregatorSection {
            kind: AggregatorKind::FedAvg,
            temperature: AggregatorConfig::DEFAULT_TEMPERATURE,
            memory: AggregatorConfig::DEFAULT_MEMORY,
            score: ScoreMetric::Loss,
            variance_floor: AggregatorConfig::DEFAULT_VARIANCE_FLOOR,
        }
    }
}

impl AggregatorSection {
    pub fn config(&self) -> AggregatorConfig {
        match self.kind {
            AggregatorKind::FedAvg => AggregatorConfig::FedAvg,
            AggregatorKind::TestWeighted => AggregatorConfig::TestWeighted {
                temperature: self.temperature,
                memory: self.memory,
                score: self.score,
            },
            AggregatorKind::InverseVariance => AggregatorConfig::InverseVariance { variance_floor: self.variance_floor },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecureAggSection {
    pub enabled: bool,
    pub scale_bits: u32,
}

impl Default for SecureAggSection {
    fn default() -> Self {
        SecureAggSection { enabled: false, scale_bits: DEFAULT_SCALE_BITS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub title: Option<String>,
    pub x_label: String,
    pub y_label: String,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection { title: None, x_label: "Communication rounds".into(), y_label: "Test accuracy".into() }
    }
}

impl RunConfig {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.model.layers.clone()).map_err(|e| match e {
            Error::Config { message, .. } => Error::config("model.layers", message),
            other => other,
        })
    }

    /// Every problem found, each tagged with its field path.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |f: &str, m: String| out.push((f.to_string(), m));
        let absorb = |r: Result<()>, push: &mut dyn FnMut(&str, String)| match r {
            Ok(()) => {}
            Err(Error::Config { field, message }) => push(&field, message),
            Err(Error::ConfigList(list)) => list.into_iter().for_each(|(f, m)| push(&f, m)),
            Err(e) => push("", e.to_string()),
        };

        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            push("name", "must be a non-empty file stem".into());
        }
        if self.rounds == 0 {
            push("rounds", "must be >= 1".into());
        }
        if self.repeats == 0 {
            push("repeats", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            push("failure_threshold", "must lie in [0, 1]".into());
        }
        if let Some(s) = self.stop_accuracy {
            if !(s > 0.0 && s <= 1.0) {
                push("stop_accuracy", "must lie in (0, 1]".into());
            }
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            push("target_accuracy", "must lie in (0, 1]".into());
        }
        absorb(self.model_spec().map(|_| ()), &mut push);
        if let Some(&first) = self.model.layers.first() {
            if first != 784 {
                push("model.layers", format!("input width {first} does not match 28x28 images"));
            }
        }
        if let Some(&last) = self.model.layers.last() {
            if last != crate::data::NUM_CLASSES {
                push("model.layers", format!("output width {last} does not match 10 classes"));
            }
        }
        let vf = self.data.validation_fraction;
        if !(0.0..1.0).contains(&vf) {
            push("data.validation_fraction", "must lie in [0, 1)".into());
        }
        if self.partition.kind == PartitionKind::NonIid && self.partition.shards_per_client == 0 {
            push("partition.shards_per_client", "must be >= 1".into());
        }
        let c = &self.clients;
        if c.count == 0 {
            push("clients.count", "must be >= 1".into());
        }
        if !(c.fraction > 0.0 && c.fraction <= 1.0) {
            push("clients.fraction", "must lie in (0, 1]".into());
        }
        if let Some(k) = c.per_round {
            if k == 0 || k > c.count {
                push("clients.per_round", format!("must lie in [1, {}]", c.count));
            }
        }
        if c.local_iterations == 0 {
            push("clients.local_iterations", "must be >= 1".into());
        }
        if c.batch_size == 0 {
            push("clients.batch_size", "must be >= 1".into());
        }
        if !(c.learning_rate >= 0.0 && c.learning_rate.is_finite()) {
            push("clients.learning_rate", "must be finite and >= 0".into());
        }
        if let Some(v) = self.privacy.variance {
            if self.privacy.kind != PrivacyKind::Gaussian {
                push("privacy.variance", "only applies to gaussian noise".into());
            } else if self.privacy.std != 0.0 {
                push("privacy.variance", "set either std or variance, not both".into());
            } else if !(v >= 0.0 && v.is_finite()) {
                push("privacy.variance", "must be finite and >= 0".into());
            }
        }
        absorb(self.privacy.mechanism().validate(), &mut push);
        if self.attack.n_malicious > c.count {
            push("attack.n_malicious", format!("{} attackers exceed {} clients", self.attack.n_malicious, c.count));
        }
        if self.attack.n_malicious > 0 {
            absorb(self.attack.behavior().validate(), &mut push);
        }
        absorb(self.aggregator.config().validate(), &mut push);
        if self.aggregator.kind == AggregatorKind::TestWeighted && vf <= 0.0 {
            push("data.validation_fraction", "test_weighted needs a validation split".into());
        }
        if self.secure_aggregation.enabled {
            if self.aggregator.kind == AggregatorKind::TestWeighted {
                push("secure_aggregation.enabled", "test_weighted must see individual uploads".into());
            }
            if self.privacy.kind == PrivacyKind::Dummy {
                push("secure_aggregation.enabled", "dummy uploads cannot be summed under masking".into());
            }
            absorb(crate::secure_agg::FixedPointCodec::new(self.secure_aggregation.scale_bits).map(|_| ()), &mut push);
        }
        absorb(self.delay.validate(), &mut push);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = self.problems();
        match problems.len() {
            0 => Ok(()),
            1 => {
                let (field, message) = problems.pop().unwrap();
                Err(Error::Config { field, message })
            }
            _ => Err(Error::ConfigList(problems)),
        }
    }
}

/// One labelled variant of the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub base: RunConfig,
    pub arms: Vec<Arm>,
}

/// Scale knobs applied to the base table before arms are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

fn field_path(path: &serde_path_to_error::Path) -> String {
    path.to_string()
}

fn deserialize_table(table: toml::Table, prefix: &str) -> Result<RunConfig> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = field_path(e.path());
        let field = match (prefix.is_empty(), path.as_str()) {
            (true, p) => p.to_string(),
            (false, ".") => prefix.to_string(),
            (false, p) => format!("{prefix}.{p}"),
        };
        Error::config(field, e.into_inner().to_string())
    })
}

/// Recursively overlay `over` onto `base`. Tables merge; everything else replaces.
pub fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn paper_overrides() -> toml::Table {
    toml::toml! {
        rounds = 300
        repeats = 20
        [clients]
        local_iterations = 120
        batch_size = 1200
    }
}

impl Experiment {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_scaled(text, Scale::Desk)
    }

    /// Parse an experiment; `Scale::Paper` restores the full-length protocol.
    pub fn parse_scaled(text: &str, scale: Scale) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<syntax>", e.to_string().trim_end()))?;
        let arms_value = table.remove("arms");
        if scale == Scale::Paper {
            deep_merge(&mut table, paper_overrides());
        }
        let base = deserialize_table(table.clone(), "")?;
        let arms = match arms_value {
            None => vec![Arm { label: base.name.clone(), config: base.clone() }],
            Some(toml::Value::Array(items)) => {
                let mut arms = Vec::with_capacity(items.len());
                for (i, item) in items.into_iter().enumerate() {
                    let prefix = format!("arms[{i}]");
                    let toml::Value::Table(mut over) = item else {
                        return Err(Error::config(prefix, "each arm must be a table"));
                    };
                    let label = match over.remove("label") {
                        Some(toml::Value::String(s)) if !s.is_empty() => s,
                        _ => return Err(Error::config(format!("{prefix}.label"), "missing or empty")),
                    };
                    let mut merged = table.clone();
                    deep_merge(&mut merged, over);
                    arms.push(Arm { label, config: deserialize_table(merged, &prefix)? });
                }
                if arms.is_empty() {
                    return Err(Error::config("arms", "empty arm list"));
                }
                arms
            }
            Some(_) => return Err(Error::config("arms", "must be an array of tables")),
        };
        let exp = Experiment { base, arms };
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path, scale: Scale) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_scaled(&text, scale)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut labels = std::collections::BTreeSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            if !labels.insert(arm.label.as_str()) {
                problems.push((format!("arms[{i}].label"), format!("duplicate label `{}`", arm.label)));
            }
            if arm.label.contains([',', '/', '\\', '\n']) {
                problems.push((format!("arms[{i}].label"), "must not contain , / \\ or newlines".into()));
            }
            let prefix = if self.arms.len() == 1 { String::new() } else { format!("arms[{i}].") };
            for (f, m) in arm.config.problems() {
                problems.push((format!("{prefix}{f}"), m));
            }
        }
        match problems.len() {
            0 => Ok(()),
            1 => {
                let (field, message) = problems.pop().unwrap();
                Err(Error::Config { field, message })
            }
            _ => Err(Error::ConfigList(problems)),
        }
    }

    pub fn name(&self) -> &str {
        &self.base.name
    }

    pub fn is_multi_arm(&self) -> bool {
        self.arms.len() > 1
    }

    /// Fully resolved TOML: the base config with every default filled in,
    /// followed by each arm as a complete config. Parsing it back yields the
    /// same experiment.
    pub fn snapshot(&self) -> Result<String> {
        let to_table = |c: &RunConfig| -> Result<toml::Table> {
            toml::Table::try_from(c).map_err(|e| Error::config("", format!("cannot serialize config: {e}")))
        };
        let mut root = to_table(&self.base)?;
        if self.is_multi_arm() || self.arms[0].label != self.base.name {
            let arms = self
                .arms
                .iter()
                .map(|arm| {
                    let mut t = toml::Table::new();
                    t.insert("label".into(), toml::Value::String(arm.label.clone()));
                    for (k, v) in to_table(&arm.config)? {
                        t.insert(k, v);
                    }
                    Ok(toml::Value::Table(t))
                })
                .collect::<Result<Vec<_>>>()?;
            root.insert("arms".into(), toml::Value::Array(arms));
        }
        toml::to_string(&root).map_err(|e| Error::config("", format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let exp = Experiment::parse("").unwrap();
        assert_eq!(exp.base, RunConfig::default());
        assert_eq!(exp.arms.len(), 1);
        assert_eq!(exp.base.rounds, 300);
        assert_eq!(exp.base.repeats, 20);
        assert_eq!(exp.base.clients.local_iterations, 120);
        assert_eq!(exp.base.clients.batch_size, 1200);
    }

    #[test]
    fn arms_override_only_what_they_state() {
        let text = r#"
            name = "x"
            rounds = 5
            [clients]
            count = 4
            learning_rate = 0.2
            [[arms]]
            label = "a"
            [[arms]]
            label = "b"
            clients = { count = 6 }
            privacy = { kind = "gaussian", std = 0.5 }
        "#;
        let exp = Experiment::parse(text).unwrap();
        assert_eq!(exp.arms.len(), 2);
        let b = &exp.arms[1].config;
        assert_eq!(b.clients.count, 6);
        assert_eq!(b.clients.learning_rate, 0.2);
        assert_eq!(b.rounds, 5);
        assert_eq!(b.privacy.mechanism(), PrivacyMechanism::Gaussian { std: 0.5 });
        assert_eq!(exp.arms[0].config.clients.count, 4);
    }

    #[test]
    fn unknown_field_names_its_path() {
        let err = Experiment::parse("[clients]\ncuont = 3\n").unwrap_err();
        let Error::Config { field, .. } = &err else { panic!("{err}") };
        assert_eq!(field, "clients.cuont");
        let err = Experiment::parse("[[arms]]\nlabel = \"a\"\nclients = { batch_size = \"x\" }\n").unwrap_err();
        let Error::Config { field, .. } = &err else { panic!("{err}") };
        assert_eq!(field, "arms[0].clients.batch_size");
    }

    #[test]
    fn invariant_violations_are_enumerated() {
        let text = "rounds = 0\nrepeats = 0\n[clients]\ncount = 2\n[attack]\nn_malicious = 3\n";
        let err = Experiment::parse(text).unwrap_err();
        let Error::ConfigList(list) = &err else { panic!("{err}") };
        let fields: Vec<&str> = list.iter().map(|(f, _)| f.as_str()).collect();
        assert!(fields.contains(&"rounds"));
        assert!(fields.contains(&"repeats"));
        assert!(fields.contains(&"attack.n_malicious"));
        assert!(err.is_config());
    }

    #[test]
    fn secure_aggregation_rejects_test_weighted() {
        let err = Experiment::parse("[aggregator]\nkind = \"test_weighted\"\n[secure_aggregation]\nenabled = true\n")
            .unwrap_err();
        assert!(err.to_string().contains("secure_aggregation.enabled"), "{err}");
    }

    #[test]
    fn variance_reading_takes_square_root() {
        let exp = Experiment::parse("[privacy]\nkind = \"gaussian\"\nvariance = 0.25\n").unwrap();
        assert_eq!(exp.base.privacy.mechanism(), PrivacyMechanism::Gaussian { std: 0.5 });
    }

    #[test]
    fn paper_scale_restores_protocol_lengths() {
        let text = "rounds = 60\nrepeats = 5\n[clients]\nlocal_iterations = 20\nbatch_size = 20\n";
        let exp = Experiment::parse_scaled(text, Scale::Paper).unwrap();
        assert_eq!((exp.base.rounds, exp.base.repeats), (300, 20));
        assert_eq!((exp.base.clients.local_iterations, exp.base.clients.batch_size), (120, 1200));
    }

    #[test]
    fn snapshot_round_trips() {
        let text = r#"
            name = "snap"
            stop_accuracy = 0.9
            [delay]
            deadline_s = 2.5
            [[arms]]
            label = "lo"
            [[arms]]
            label = "hi"
            privacy = { kind = "laplace", scale = 0.07071067811865475 }
        "#;
        let exp = Experiment::parse(text).unwrap();
        let snap = exp.snapshot().unwrap();
        let again = Experiment::parse(&snap).unwrap();
        assert_eq!(again, exp);
        assert_eq!(again.snapshot().unwrap(), snap);

        let single = Experiment::parse("name = \"one\"\n").unwrap();
        assert_eq!(Experiment::parse(&single.snapshot().unwrap()).unwrap(), single);
    }

    #[test]
    fn selection_count() {
        let mut c = ClientsSection { count: 50, fraction: 0.1, ..Default::default() };
        assert_eq!(c.selected_per_round(), 5);
        c.per_round = Some(7);
        assert_eq!(c.selected_per_round(), 7);
        c = ClientsSection { count: 3, fraction: 0.01, ..Default::default() };
        assert_eq!(c.selected_per_round(), 1);
    }
}
