//! Geometric straggler model: where clients sit, how long each one takes to
//! compute and upload, and which uploads a deadline lets through.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::error::{Error, Result};

/// How per-client compute and upload times combine into one round delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DelayComposition {
    /// `max_i (compute_i + transmit_i)`
    #[default]
    MaxTotal,
    /// `max_i compute_i + max_i transmit_i`
    MaxComputePlusMaxTransmit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    pub enabled: bool,
    pub area_side_m: f64,
    pub server_position: (f64, f64),
    pub cpu_cycles_per_sample: f64,
    pub cpu_rate_hz: f64,
    pub bits_per_param: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    /// Noise power over the whole band.
    pub noise_floor_dbm: f64,
    pub path_loss_exponent: f64,
    pub reference_distance_m: f64,
    pub deadline_s: Option<f64>,
    pub min_clients: usize,
    pub composition: DelayComposition,
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            enabled: true,
            area_side_m: 1000.0,
            server_position: (500.0, 500.0),
            cpu_cycles_per_sample: 1e6,
            cpu_rate_hz: 1e9,
            bits_per_param: 32.0,
            bandwidth_hz: 1e6,
            tx_power_dbm: 20.0,
            // -174 dBm/Hz thermal noise over 1 MHz
            noise_floor_dbm: -114.0,
            path_loss_exponent: 3.5,
            reference_distance_m: 1.0,
            deadline_s: None,
            min_clients: 1,
            composition: DelayComposition::MaxTotal,
        }
    }
}

fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl DelayConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("delay.area_side_m", self.area_side_m),
            ("delay.cpu_cycles_per_sample", self.cpu_cycles_per_sample),
            ("delay.cpu_rate_hz", self.cpu_rate_hz),
            ("delay.bits_per_param", self.bits_per_param),
            ("delay.bandwidth_hz", self.bandwidth_hz),
            ("delay.reference_distance_m", self.reference_distance_m),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        if !self.tx_power_dbm.is_finite() || !self.noise_floor_dbm.is_finite() {
            return Err(Error::config("delay.tx_power_dbm", "power levels must be finite"));
        }
        if !(self.path_loss_exponent >= 2.0) {
            return Err(Error::config("delay.path_loss_exponent", "must be >= 2"));
        }
        if let Some(d) = self.deadline_s {
            if !(d > 0.0) {
                return Err(Error::config("delay.deadline_s", "must be > 0 when set"));
            }
        }
        if self.min_clients == 0 {
            return Err(Error::config("delay.min_clients", "must be >= 1"));
        }
        Ok(())
    }

    pub fn snr(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(self.reference_distance_m) / self.reference_distance_m;
        dbm_to_watts(self.tx_power_dbm) / (dbm_to_watts(self.noise_floor_dbm) * d.powf(self.path_loss_exponent))
    }
}

/// `n` positions drawn uniformly from the square `[0, side]^2`.
pub fn place_clients<R: Rng + ?Sized>(n: usize, side_m: f64, rng: &mut R) -> Vec<(f64, f64)> {
    (0..n).map(|_| (rng.random_range(0.0..=side_m), rng.random_range(0.0..=side_m))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientTiming {
    pub client_id: usize,
    pub compute_s: f64,
    pub transmit_s: f64,
}

impl ClientTiming {
    pub fn total_s(&self) -> f64 {
        self.compute_s + self.transmit_s
    }
}

/// Compute and upload time for one client whose shard holds `shard_size`
/// examples and whose upload carries `dim` parameters.
pub fn client_delay(cfg: &DelayConfig, client: &ClientConfig, shard_size: usize, dim: usize) -> Result<ClientTiming> {
    let (x, y) = client.position;
    if !(0.0..=cfg.area_side_m).contains(&x) || !(0.0..=cfg.area_side_m).contains(&y) {
        return Err(Error::config("delay", format!("client {} sits outside the area", client.client_id)));
    }
    let batch = client.batch_size.min(shard_size) as f64;
    let compute_s = client.local_iterations as f64 * batch * cfg.cpu_cycles_per_sample / cfg.cpu_rate_hz;

    let (sx, sy) = cfg.server_position;
    let dist = ((x - sx).powi(2) + (y - sy).powi(2)).sqrt();
    let snr = cfg.snr(dist);
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::config("delay", format!("SNR {snr} for client {} is not positive", client.client_id)));
    }
    let rate = cfg.bandwidth_hz * (1.0 + snr).log2();
    let transmit_s = dim as f64 * cfg.bits_per_param / rate;
    Ok(ClientTiming { client_id: client.client_id, compute_s, transmit_s })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTiming {
    pub clients: Vec<ClientTiming>,
    /// Ids that met the deadline, ascending.
    pub accepted: Vec<usize>,
    pub round_delay_s: f64,
    pub abandoned: bool,
}

fn compose(timings: &[&ClientTiming], rule: DelayComposition) -> f64 {
    match rule {
        DelayComposition::MaxTotal => timings.iter().map(|t| t.total_s()).fold(0.0, f64::max),
        DelayComposition::MaxComputePlusMaxTransmit => {
            timings.iter().map(|t| t.compute_s).fold(0.0, f64::max)
                + timings.iter().map(|t| t.transmit_s).fold(0.0, f64::max)
        }
    }
}

/// Apply the deadline policy. Without a deadline every client is accepted.
/// With one, clients slower than the deadline are dropped and the round is
/// abandoned (charging the full deadline) if fewer than `min_clients` remain.
pub fn round_delay(timings: &[ClientTiming], cfg: &DelayConfig) -> RoundTiming {
    let mut accepted: Vec<&ClientTiming> = match cfg.deadline_s {
        None => timings.iter().collect(),
        Some(deadline) => timings.iter().filter(|t| t.total_s() <= deadline).collect(),
    };
    accepted.sort_by_key(|t| t.client_id);
    let enough = accepted.len() >= cfg.min_clients.max(1);
    let (round_delay_s, abandoned) = match (cfg.deadline_s, enough) {
        (None, _) => (compose(&accepted, cfg.composition), false),
        (Some(deadline), true) => (compose(&accepted, cfg.composition).min(deadline), false),
        (Some(deadline), false) => (deadline, true),
    };
    RoundTiming {
        clients: timings.to_vec(),
        accepted: if abandoned { Vec::new() } else { accepted.iter().map(|t| t.client_id).collect() },
        round_delay_s,
        abandoned,
    }
}

/// Sum of round delays up to and including the first round whose accuracy
/// reaches `target`. `None` if the target is never reached.
pub fn total_delay(rounds: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut total = 0.0;
    for &(delay, accuracy) in rounds {
        total += delay;
        if accuracy >= target {
            return Some(total);
        }
    }
    None
}
