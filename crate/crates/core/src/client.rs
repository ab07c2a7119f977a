//! One client's round: local SGD from the broadcast model, then either a
//! privacy mechanism (honest clients) or a poisoning behavior (attackers).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, Uniform};

use crate::data::Dataset;
use crate::error::{Error, NumericContext, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};
use crate::seed::{Purpose, SeedPath};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrivacyMechanism {
    None,
    /// Additive `N(0, std^2)` noise on every coordinate.
    Gaussian { std: f64 },
    /// Additive `Laplace(0, scale)` noise on every coordinate.
    Laplace { scale: f64 },
    /// Upload the true vector hidden among `decoys` noisy copies of itself.
    Dummy { decoys: usize, decoy_std: f64 },
}

impl PrivacyMechanism {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str| Err(Error::config(format!("privacy.{field}"), "must be finite and >= 0"));
        match *self {
            PrivacyMechanism::None => Ok(()),
            PrivacyMechanism::Gaussian { std } if !(std >= 0.0 && std.is_finite()) => bad("std"),
            PrivacyMechanism::Laplace { scale } if !(scale >= 0.0 && scale.is_finite()) => bad("scale"),
            PrivacyMechanism::Dummy { decoys, .. } if decoys == 0 => {
                Err(Error::config("privacy.decoys", "need at least one decoy"))
            }
            PrivacyMechanism::Dummy { decoy_std, .. } if !(decoy_std >= 0.0 && decoy_std.is_finite()) => {
                bad("decoy_std")
            }
            _ => Ok(()),
        }
    }

    /// Per-coordinate variance the server sees after reducing the upload.
    pub fn declared_variance(&self) -> f64 {
        match *self {
            PrivacyMechanism::None => 0.0,
            PrivacyMechanism::Gaussian { std } => std * std,
            PrivacyMechanism::Laplace { scale } => 2.0 * scale * scale,
            PrivacyMechanism::Dummy { decoys, decoy_std } => {
                let k = decoys as f64;
                k * decoy_std * decoy_std / ((k + 1.0) * (k + 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    Honest,
    SignFlip,
    RandomUniform { lo: f64, hi: f64 },
}

impl Behavior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Behavior::RandomUniform { lo, hi } if !(lo < hi && lo.is_finite() && hi.is_finite()) => {
                Err(Error::config("attack.behavior", "random_uniform needs finite lo < hi"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_malicious(&self) -> bool {
        !matches!(self, Behavior::Honest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub client_id: usize,
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub privacy: PrivacyMechanism,
    pub behavior: Behavior,
    /// Metres, inside the simulation square.
    pub position: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Single(ParamVector),
    /// Dummy upload; order carries no information.
    Set(Vec<ParamVector>),
}

impl Payload {
    pub fn vectors(&self) -> &[ParamVector] {
        match self {
            Payload::Single(v) => std::slice::from_ref(v),
            Payload::Set(vs) => vs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub payload: Payload,
    pub num_samples: usize,
    pub local_loss: f64,
    /// Ground truth for the harness. Aggregators never read it.
    pub malicious: bool,
}

impl ClientUpdate {
    fn single(&self) -> Result<&ParamVector> {
        match &self.payload {
            Payload::Single(v) => Ok(v),
            Payload::Set(_) => Err(Error::Protocol(format!(
                "client {} already uploaded a dummy set",
                self.client_id
            ))),
        }
    }
}

/// Without-replacement minibatches over one shard, reshuffled at every pass.
struct BatchSampler {
    order: Vec<usize>,
    batch: usize,
    cursor: usize,
}

impl BatchSampler {
    fn new<R: Rng + ?Sized>(shard: &[usize], batch_size: usize, rng: &mut R) -> Self {
        let mut order = shard.to_vec();
        order.shuffle(rng);
        BatchSampler { batch: batch_size.min(order.len()), order, cursor: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        out
    }
}

/// Run `local_iterations` SGD steps from `global` on the client's shard.
/// Returns the trained parameters and the mean minibatch loss over the steps.
pub fn local_train<R: Rng + ?Sized>(
    global: &ParamVector,
    cfg: &ClientConfig,
    spec: &ModelSpec,
    data: &Dataset,
    shard: &[usize],
    rng: &mut R,
) -> Result<(ParamVector, f64)> {
    if shard.is_empty() {
        return Err(Error::config("partition", format!("client {} has an empty shard", cfg.client_id)));
    }
    if cfg.local_iterations == 0 || cfg.batch_size == 0 {
        return Err(Error::config("clients", "local_iterations and batch_size must be >= 1"));
    }
    let mut params = global.clone();
    let mut sampler = BatchSampler::new(shard, cfg.batch_size, rng);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut loss_sum = 0.0;
    for step in 0..cfg.local_iterations {
        let idx = sampler.next(rng);
        data.gather_into(idx, &mut pixels, &mut labels);
        let batch = Batch::new(&pixels, &labels, data.input_dim())?;
        let ctx = |e: Error| {
            e.with_context(|c| {
                c.client = Some(cfg.client_id);
                c.step = Some(step);
            })
        };
        let (loss, grad) = model::loss_and_gradient(&params, spec, &batch).map_err(ctx)?;
        model::sgd_step_in_place(&mut params, &grad, cfg.learning_rate).map_err(ctx)?;
        loss_sum += loss;
    }
    let mean = loss_sum / cfg.local_iterations as f64;
    if !mean.is_finite() {
        return Err(Error::numeric(
            NumericContext { client: Some(cfg.client_id), ..Default::default() },
            "non-finite local loss",
        ));
    }
    Ok((params, mean))
}

fn add_noise<R: Rng + ?Sized>(v: &mut ParamVector, mut sample: impl FnMut(&mut R) -> f64, rng: &mut R) {
    for x in v.as_mut_slice() {
        *x += sample(rng);
    }
}

/// Perturb an honest upload. Zero-strength mechanisms leave it bit-identical.
pub fn apply_privacy<R: Rng + ?Sized>(
    mut update: ClientUpdate,
    mech: &PrivacyMechanism,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let truth = update.single()?.clone();
    update.payload = match *mech {
        PrivacyMechanism::None
        | PrivacyMechanism::Gaussian { std: 0.0 }
        | PrivacyMechanism::Laplace { scale: 0.0 } => Payload::Single(truth),
        PrivacyMechanism::Gaussian { std } => {
            let normal = Normal::new(0.0, std).map_err(|e| Error::config("privacy.std", e.to_string()))?;
            let mut v = truth;
            add_noise(&mut v, |r: &mut R| normal.sample(r), rng);
            Payload::Single(v)
        }
        PrivacyMechanism::Laplace { scale } => {
            let mut v = truth;
            add_noise(
                &mut v,
                |r: &mut R| {
                    let magnitude: f64 = Exp1.sample(r);
                    if r.random::<bool>() { scale * magnitude } else { -scale * magnitude }
                },
                rng,
            );
            Payload::Single(v)
        }
        PrivacyMechanism::Dummy { decoys, decoy_std } => {
            let normal =
                Normal::new(0.0, decoy_std).map_err(|e| Error::config("privacy.decoy_std", e.to_string()))?;
            let mut set = Vec::with_capacity(decoys + 1);
            for _ in 0..decoys {
                let mut d = truth.clone();
                add_noise(&mut d, |r: &mut R| normal.sample(r), rng);
                set.push(d);
            }
            set.push(truth);
            set.shuffle(rng);
            Payload::Set(set)
        }
    };
    Ok(update)
}

/// Replace an upload with its poisoned version. `num_samples` is kept as reported.
pub fn apply_behavior<R: Rng + ?Sized>(
    mut update: ClientUpdate,
    behavior: &Behavior,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let mut v = update.single()?.clone();
    match *behavior {
        Behavior::Honest => return Ok(update),
        Behavior::SignFlip => {
            for x in v.as_mut_slice() {
                *x = -*x;
            }
        }
        Behavior::RandomUniform { lo, hi } => {
            let dist = Uniform::new_inclusive(lo, hi).map_err(|e| Error::config("attack.behavior", e.to_string()))?;
            for x in v.as_mut_slice() {
                *x = dist.sample(rng);
            }
        }
    }
    update.payload = Payload::Single(v);
    update.malicious = true;
    Ok(update)
}

/// Full client round with per-purpose generators derived from `seeds`.
pub fn run_client(
    global: &ParamVector,
    cfg: &ClientConfig,
    spec: &ModelSpec,
    data: &Dataset,
    shard: &[usize],
    seeds: SeedPath,
) -> Result<ClientUpdate> {
    let (trained, local_loss) = local_train(global, cfg, spec, data, shard, &mut seeds.rng(Purpose::LocalTrain))?;
    let update = ClientUpdate {
        client_id: cfg.client_id,
        payload: Payload::Single(trained),
        num_samples: shard.len(),
        local_loss,
        malicious: false,
    };
    if cfg.behavior.is_malicious() {
        apply_behavior(update, &cfg.behavior, &mut seeds.rng(Purpose::Behavior))
    } else {
        apply_privacy(update, &cfg.privacy, &mut seeds.rng(Purpose::Privacy))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn update(values: Vec<f64>) -> ClientUpdate {
        ClientUpdate {
            client_id: 0,
            payload: Payload::Single(ParamVector::new(values).unwrap()),
            num_samples: 10,
            local_loss: 1.0,
            malicious: false,
        }
    }

    fn single(u: &ClientUpdate) -> &[f64] {
        match &u.payload {
            Payload::Single(v) => v.as_slice(),
            Payload::Set(_) => panic!("expected single payload"),
        }
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    fn toy_data() -> (Dataset, ModelSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let pixels: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        (Dataset::new(pixels, labels, 4).unwrap(), ModelSpec::new(vec![4, 5, 3]).unwrap())
    }

    fn cfg(lr: f64, batch: usize) -> ClientConfig {
        ClientConfig {
            client_id: 3,
            local_iterations: 7,
            batch_size: batch,
            learning_rate: lr,
            privacy: PrivacyMechanism::None,
            behavior: Behavior::Honest,
            position: (0.0, 0.0),
        }
    }

    #[test]
    fn zero_learning_rate_returns_global() {
        let (data, spec) = toy_data();
        let global = spec.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let shard: Vec<usize> = (0..20).collect();
        let (out, loss) =
            local_train(&global, &cfg(0.0, 100), &spec, &data, &shard, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, global);
        let sub = data.subset(&shard);
        let (expected, _) = model::forward_loss(&global, &spec, &sub.as_batch().unwrap()).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_shards_and_seeds_give_identical_uploads() {
        let (data, spec) = toy_data();
        let global = spec.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let shard: Vec<usize> = (5..30).collect();
        let seeds = SeedPath::new(9).repeat(0).round(1).client(3);
        let a = run_client(&global, &cfg(0.1, 8), &spec, &data, &shard, seeds).unwrap();
        let b = run_client(&global, &cfg(0.1, 8), &spec, &data, &shard, seeds).unwrap();
        assert_eq!(a, b);
        assert_ne!(single(&a), global.as_slice());
    }

    #[test]
    fn sampler_covers_shard_each_pass() {
        let shard: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchSampler::new(&shard, 5, &mut rng);
        let mut first: Vec<usize> = s.next(&mut rng).to_vec();
        first.extend_from_slice(s.next(&mut rng));
        first.sort_unstable();
        assert_eq!(first, shard);
        let mut big = BatchSampler::new(&shard, 50, &mut rng);
        assert_eq!(big.next(&mut rng).len(), 10);
    }

    #[test]
    fn zero_strength_privacy_is_identity() {
        let u = update(vec![0.25, -1.5, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mech in [
            PrivacyMechanism::None,
            PrivacyMechanism::Gaussian { std: 0.0 },
            PrivacyMechanism::Laplace { scale: 0.0 },
        ] {
            assert_eq!(apply_privacy(u.clone(), &mech, &mut rng).unwrap(), u);
        }
    }

    #[test]
    fn laplace_moments() {
        let u = update(vec![0.0; 100_000]);
        let out = apply_privacy(u, &PrivacyMechanism::Laplace { scale: 1.0 }, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let (mean, var) = moments(single(&out));
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 2.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn gaussian_moments() {
        let u = update(vec![1.0; 100_000]);
        let out = apply_privacy(u, &PrivacyMechanism::Gaussian { std: 2.0 }, &mut ChaCha8Rng::seed_from_u64(6))
            .unwrap();
        let (mean, var) = moments(single(&out));
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
        assert!((var - 4.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn dummy_hides_truth_among_decoys() {
        let u = update(vec![0.5, 0.25]);
        let mech = PrivacyMechanism::Dummy { decoys: 2, decoy_std: 1.0 };
        let out = apply_privacy(u.clone(), &mech, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let Payload::Set(set) = &out.payload else { panic!("expected set") };
        assert_eq!(set.len(), 3);
        assert_eq!(set.iter().filter(|v| v.as_slice() == single(&u)).count(), 1);
        // a second privacy pass on a set is a protocol violation
        assert!(matches!(apply_privacy(out, &mech, &mut ChaCha8Rng::seed_from_u64(1)), Err(Error::Protocol(_))));
    }

    #[test]
    fn sign_flip_negates_and_is_involution() {
        let u = update(vec![0.5, -0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flipped = apply_behavior(u.clone(), &Behavior::SignFlip, &mut rng).unwrap();
        assert_eq!(single(&flipped), &[-0.5, 0.25]);
        assert_eq!(flipped.num_samples, u.num_samples);
        let back = apply_behavior(flipped, &Behavior::SignFlip, &mut rng).unwrap();
        assert_eq!(single(&back), single(&u));
    }

    #[test]
    fn honest_behavior_is_bitwise_identity() {
        let u = update(vec![0.1, f64::MIN_POSITIVE, -0.0]);
        let out = apply_behavior(u.clone(), &Behavior::Honest, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, u);
        assert!(single(&out)[2].is_sign_negative());
    }

    #[test]
    fn random_uniform_moments() {
        let u = update(vec![7.0; 100_000]);
        let out = apply_behavior(
            u,
            &Behavior::RandomUniform { lo: -1.0, hi: 1.0 },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let xs = single(&out);
        assert!(xs.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(moments(xs).0.abs() < 0.02);
    }

    #[test]
    fn declared_variances() {
        assert_eq!(PrivacyMechanism::Laplace { scale: 3.0 }.declared_variance(), 18.0);
        assert_eq!(PrivacyMechanism::Gaussian { std: 3.0 }.declared_variance(), 9.0);
        assert_eq!(PrivacyMechanism::Dummy { decoys: 1, decoy_std: 2.0 }.declared_variance(), 1.0);
        assert!(PrivacyMechanism::Gaussian { std: -1.0 }.validate().is_err());
        assert!(Behavior::RandomUniform { lo: 1.0, hi: -1.0 }.validate().is_err());
    }

    #[test]
    fn noise_is_unbiased_over_seeds() {
        let truth = [0.3, -0.7];
        let runs = 1000;
        for mech in [PrivacyMechanism::Gaussian { std: 1.0 }, PrivacyMechanism::Laplace { scale: 1.0 / 2f64.sqrt() }] {
            let mut acc = [0.0; 2];
            for seed in 0..runs {
                let out = apply_privacy(update(truth.to_vec()), &mech, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                for (a, x) in acc.iter_mut().zip(single(&out)) {
                    *a += x / runs as f64;
                }
            }
            // unit variance: 4 standard errors
            for (a, t) in acc.iter().zip(truth) {
                assert!((a - t).abs() < 4.0 / (runs as f64).sqrt(), "{mech:?}: {a} vs {t}");
            }
        }
    }
}
