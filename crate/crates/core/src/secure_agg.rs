//! Pairwise additive masking over fixed-point integers mod 2^64.
//!
//! A session walks through four phases:
//!
//! 1. **advertise**: participants announce their ids.
//! 2. **share**: every unordered pair `(i, j)` receives a common seed. Key
//!    agreement is simulated: seeds are drawn from the session generator and
//!    handed to both parties.
//! 3. **commit**: client `i` uploads
//!    `encode(u_i) + sum_{j > i} PRG(s_ij) - sum_{j < i} PRG(s_ij)  (mod 2^64)`.
//! 4. **finalize**: for every client that dropped after sharing, the survivors
//!    reveal their seeds with it and the server strips those orphaned masks.
//!
//! Only the sum of the survivors' encodings is ever recovered. There is no
//! real cryptography here: no signatures, no authenticated key exchange, no
//! threshold secret sharing.
//!
//! Wire layout of a [`MaskedUpdate`] (all little-endian): `client_id: u64`,
//! `len: u64`, then `len` words of `u64`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::client::{ClientUpdate, Payload};
use crate::error::{Error, Result};

pub const DEFAULT_SCALE_BITS: u32 = 24;

/// Two's-complement fixed point with `scale_bits` fractional bits, wrapping mod 2^64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    scale_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec { scale_bits: DEFAULT_SCALE_BITS }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32) -> Result<Self> {
        if !(1..=52).contains(&scale_bits) {
            return Err(Error::config("secure_aggregation.scale_bits", "must lie in [1, 52]"));
        }
        Ok(FixedPointCodec { scale_bits })
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Largest magnitude that survives an encode/decode round trip.
    pub fn max_magnitude(&self) -> f64 {
        (1u64 << (63 - self.scale_bits)) as f64
    }

    /// Quantization step.
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn encode(&self, v: f64) -> Result<u64> {
        if !v.is_finite() || v.abs() >= self.max_magnitude() {
            return Err(Error::Protocol(format!("value {v} outside fixed-point range")));
        }
        Ok((v * self.scale()).round() as i64 as u64)
    }

    pub fn decode(&self, x: u64) -> f64 {
        x as i64 as f64 / self.scale()
    }

    pub fn encode_all(&self, values: &[f64]) -> Result<Vec<u64>> {
        values.iter().map(|&v| self.encode(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Advertise,
    Share,
    Commit,
    Finalize,
}

pub type PairSeed = [u8; 32];

#[derive(Debug, Clone)]
pub struct MaskSession {
    participants: BTreeSet<usize>,
    seeds: BTreeMap<(usize, usize), PairSeed>,
    round_tag: u64,
    phase: Phase,
}

fn pair_key(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

impl MaskSession {
    /// Phase 1: collect participant ids.
    pub fn advertise(participants: &[usize], round_tag: u64) -> Result<Self> {
        if participants.is_empty() {
            return Err(Error::RoundAbandoned("no participants in secure aggregation".into()));
        }
        let set: BTreeSet<usize> = participants.iter().copied().collect();
        if set.len() != participants.len() {
            return Err(Error::Protocol("duplicate participant id".into()));
        }
        Ok(MaskSession { participants: set, seeds: BTreeMap::new(), round_tag, phase: Phase::Advertise })
    }

    fn advance(&mut self, from: Phase, to: Phase) -> Result<()> {
        if self.phase != from {
            return Err(Error::Protocol(format!("cannot enter {to:?} from {:?}", self.phase)));
        }
        self.phase = to;
        Ok(())
    }

    /// Phase 2: establish one seed per unordered pair.
    pub fn share<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.advance(Phase::Advertise, Phase::Share)?;
        let ids: Vec<usize> = self.participants.iter().copied().collect();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                let mut seed = [0u8; 32];
                rng.fill_bytes(&mut seed);
                self.seeds.insert((i, j), seed);
            }
        }
        Ok(())
    }

    /// Phase 3 opens: clients may now mask and upload.
    pub fn begin_commit(&mut self) -> Result<()> {
        self.advance(Phase::Share, Phase::Commit)
    }

    /// Phase 4 opens: no further uploads are accepted.
    pub fn begin_finalize(&mut self) -> Result<()> {
        self.advance(Phase::Commit, Phase::Finalize)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round_tag(&self) -> u64 {
        self.round_tag
    }

    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.participants.iter().copied()
    }

    /// Seed shared by `i` and `j`; symmetric in its arguments.
    pub fn pair_seed(&self, i: usize, j: usize) -> Option<&PairSeed> {
        self.seeds.get(&pair_key(i, j))
    }

    /// Seeds a survivor discloses for a dropped peer, as `(survivor, seed)`.
    pub fn reveal_seeds(&self, dropped: usize, survivors: &BTreeSet<usize>) -> Result<Vec<(usize, PairSeed)>> {
        if self.phase != Phase::Finalize {
            return Err(Error::Protocol("seeds are only revealed during finalize".into()));
        }
        Ok(survivors
            .iter()
            .filter_map(|&s| self.pair_seed(s, dropped).map(|seed| (s, *seed)))
            .collect())
    }
}

/// Counter-mode mask stream keyed by the pair seed, on the stream selected by `round_tag`.
pub fn prg_stream(seed: &PairSeed, round_tag: u64, len: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    rng.set_stream(round_tag);
    (0..len).map(|_| rng.next_u64()).collect()
}

/// Net mask contribution of `own` for the pair it shares with `peer`.
fn apply_pair_mask(acc: &mut [u64], own: usize, peer: usize, seed: &PairSeed, round_tag: u64, sign: i8) {
    let stream = prg_stream(seed, round_tag, acc.len());
    // +PRG toward higher ids, -PRG toward lower ids
    let add = (peer > own) == (sign > 0);
    for (a, m) in acc.iter_mut().zip(stream) {
        *a = if add { a.wrapping_add(m) } else { a.wrapping_sub(m) };
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedUpdate {
    pub client_id: usize,
    pub masked: Vec<u64>,
}

impl MaskedUpdate {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.masked.len());
        out.extend_from_slice(&(self.client_id as u64).to_le_bytes());
        out.extend_from_slice(&(self.masked.len() as u64).to_le_bytes());
        for w in &self.masked {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(8 * i..8 * i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Protocol("truncated masked update".into()))
        };
        let client_id = word(0)? as usize;
        let len = word(1)? as usize;
        if bytes.len() != 16 + 8 * len {
            return Err(Error::Protocol(format!("masked update declares {len} words, carries {}", (bytes.len() - 16) / 8)));
        }
        let masked = (0..len).map(|k| word(2 + k)).collect::<Result<_>>()?;
        Ok(MaskedUpdate { client_id, masked })
    }
}

/// Client side of the commit phase.
pub fn mask_vector(encoded: &[u64], own_id: usize, session: &MaskSession) -> Result<MaskedUpdate> {
    if session.phase != Phase::Commit {
        return Err(Error::Protocol(format!("masking requires commit phase, session is in {:?}", session.phase)));
    }
    if !session.participants.contains(&own_id) {
        return Err(Error::Protocol(format!("client {own_id} is not a session participant")));
    }
    let mut masked = encoded.to_vec();
    for peer in session.participants() {
        if peer == own_id {
            continue;
        }
        let seed = session.pair_seed(own_id, peer).expect("seed for every pair after share");
        apply_pair_mask(&mut masked, own_id, peer, seed, session.round_tag, 1);
    }
    Ok(MaskedUpdate { client_id: own_id, masked })
}

/// Server side of finalize: sum the survivors' uploads and strip masks left
/// orphaned by dropped clients. Returns the exact modular sum of the
/// survivors' encodings.
pub fn unmask_sum(session: &MaskSession, uploads: &[MaskedUpdate], survivors: &BTreeSet<usize>) -> Result<Vec<u64>> {
    if session.phase != Phase::Finalize {
        return Err(Error::Protocol("unmasking requires finalize phase".into()));
    }
    if survivors.is_empty() {
        return Err(Error::RoundAbandoned("every client dropped".into()));
    }
    if let Some(s) = survivors.iter().find(|s| !session.participants.contains(s)) {
        return Err(Error::Protocol(format!("survivor {s} never joined the session")));
    }
    let by_id: BTreeMap<usize, &MaskedUpdate> = uploads.iter().map(|u| (u.client_id, u)).collect();
    let d = by_id
        .get(survivors.first().unwrap())
        .ok_or_else(|| Error::Protocol("missing upload from a survivor".into()))?
        .masked
        .len();
    let mut sum = vec![0u64; d];
    for s in survivors {
        let up = by_id.get(s).ok_or_else(|| Error::Protocol(format!("missing upload from survivor {s}")))?;
        if up.masked.len() != d {
            return Err(Error::Protocol(format!("client {s} uploaded {} words, expected {d}", up.masked.len())));
        }
        for (a, &m) in sum.iter_mut().zip(&up.masked) {
            *a = a.wrapping_add(m);
        }
    }
    for dropped in session.participants().filter(|p| !survivors.contains(p)) {
        for (survivor, seed) in session.reveal_seeds(dropped, survivors)? {
            apply_pair_mask(&mut sum, survivor, dropped, &seed, session.round_tag, -1);
        }
    }
    Ok(sum)
}

/// Run all four phases in-process over raw vectors and return the decoded
/// sum of the survivors' inputs.
pub fn secure_sum<R: Rng + ?Sized>(
    inputs: &[(usize, &[f64])],
    survivors: &BTreeSet<usize>,
    codec: FixedPointCodec,
    round_tag: u64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = inputs.first().map(|(_, v)| v.len()).ok_or_else(|| Error::RoundAbandoned("no participants".into()))?;
    if let Some((id, v)) = inputs.iter().find(|(_, v)| v.len() != d) {
        return Err(Error::Protocol(format!("client {id} vector has length {}, expected {d}", v.len())));
    }
    let ids: Vec<usize> = inputs.iter().map(|(id, _)| *id).collect();
    let mut session = MaskSession::advertise(&ids, round_tag)?;
    session.share(rng)?;
    session.begin_commit()?;
    let mut uploads = Vec::with_capacity(inputs.len());
    for (id, v) in inputs {
        let encoded = codec.encode_all(v)?;
        let up = mask_vector(&encoded, *id, &session)?;
        // dropped clients computed their masks but never delivered them
        if survivors.contains(id) {
            uploads.push(up);
        }
    }
    session.begin_finalize()?;
    let sum = unmask_sum(&session, &uploads, survivors)?;
    Ok(sum.into_iter().map(|x| codec.decode(x)).collect())
}

/// Secure sum over client uploads; every payload must be a single vector.
pub fn run_session<R: Rng + ?Sized>(
    updates: &[ClientUpdate],
    survivors: &BTreeSet<usize>,
    codec: FixedPointCodec,
    round_tag: u64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let inputs = updates
        .iter()
        .map(|u| match &u.payload {
            Payload::Single(v) => Ok((u.client_id, v.as_slice())),
            Payload::Set(_) => Err(Error::Protocol(format!("client {} sent a set payload", u.client_id))),
        })
        .collect::<Result<Vec<_>>>()?;
    secure_sum(&inputs, survivors, codec, round_tag, rng)
}
