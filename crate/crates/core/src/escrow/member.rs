//! Committee member actors and the round-based simulated transport.
//!
//! Message flow:
//!
//! ```text
//! deposit   service -> member  StoreShare(share)          member -> service  Ack
//! reshare   service -> old     ReshareProbe               old -> service     Ready
//!           service -> old     BeginReshare               old -> new         SubShare (x t')
//!           new -> service     Ack                        service -> old     Purge
//! release   service -> member  ShareRequest               member -> service  ShareResponse (signed)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use num_bigint::BigUint;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::sharing::{add, eval, lagrange_at_zero, mul, random_element, Share};
use crate::codec::DecodeError;
use crate::protection::KeyId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Address {
    Service,
    Member(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    StoreShare(Share),
    Ack { secret_id: KeyId, epoch: u64 },
    ReshareProbe { secret_id: KeyId, epoch: u64 },
    Ready { secret_id: KeyId, epoch: u64, index: u32 },
    BeginReshare { secret_id: KeyId, epoch: u64, participants: Vec<u32>, new_epoch: u64, new_threshold: usize, recipients: Vec<(String, u32)> },
    SubShare { secret_id: KeyId, new_epoch: u64, to_index: u32, expected: usize, values: Vec<BigUint>, secret_len: usize },
    ShareRequest { secret_id: KeyId, epoch: u64 },
    ShareResponse { share: Share, signature: Signature },
    Purge { secret_id: KeyId, epoch: u64 },
}

impl Message {
    /// The committee epoch the message concerns, used to decide whether an
    /// offline member would have received it.
    fn epoch(&self) -> u64 {
        match self {
            Message::StoreShare(s) => s.epoch,
            Message::ShareResponse { share, .. } => share.epoch,
            Message::SubShare { new_epoch, .. } => *new_epoch,
            Message::Ack { epoch, .. }
            | Message::ReshareProbe { epoch, .. }
            | Message::Ready { epoch, .. }
            | Message::BeginReshare { epoch, .. }
            | Message::ShareRequest { epoch, .. }
            | Message::Purge { epoch, .. } => *epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: Address,
    pub to: Address,
    pub message: Message,
}

pub(crate) fn share_response_bytes(share: &Share) -> Vec<u8> {
    let mut bytes = b"sai-share-v1".to_vec();
    bytes.extend(share.encode());
    bytes
}

pub fn verify_share_response(share: &Share, signature: &Signature, key: &VerifyingKey) -> bool {
    key.verify(&share_response_bytes(share), signature).is_ok()
}

struct Pending {
    expected: usize,
    secret_len: usize,
    received: usize,
    sums: Vec<BigUint>,
}

/// A committee member. Holds its own shares and nothing else.
pub struct Member {
    id: String,
    signing: SigningKey,
    shares: BTreeMap<(KeyId, u64), Share>,
    pending: HashMap<(KeyId, u64), Pending>,
}

impl fmt::Debug for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Member").field("id", &self.id).field("shares", &self.shares.len()).finish_non_exhaustive()
    }
}

impl Member {
    pub fn new(id: impl Into<String>, signing: SigningKey) -> Self {
        Self { id: id.into(), signing, shares: BTreeMap::new(), pending: HashMap::new() }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn share(&self, secret_id: &KeyId, epoch: u64) -> Option<&Share> {
        self.shares.get(&(*secret_id, epoch))
    }

    pub fn shares(&self) -> impl Iterator<Item = &Share> {
        self.shares.values()
    }

    /// Text form: signing key hex on the first line, one share hex per line after.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", hex::encode(self.signing.to_bytes()));
        for s in self.shares.values() {
            out.push_str(&hex::encode(s.encode()));
            out.push('\n');
        }
        out
    }

    pub fn from_text(id: &str, text: &str) -> Result<Self, DecodeError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let key_line = lines.next().ok_or(DecodeError::Truncated(0))?;
        let key: [u8; 32] = hex::decode(key_line.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| DecodeError::Invalid("member key".into()))?;
        let mut member = Member::new(id, SigningKey::from_bytes(&key));
        for line in lines {
            let bytes = hex::decode(line.trim()).map_err(|e| DecodeError::Invalid(e.to_string()))?;
            let share = Share::decode(&bytes)?;
            member.shares.insert((share.secret_id, share.epoch), share);
        }
        Ok(member)
    }

    pub fn handle(&mut self, from: &Address, message: Message) -> Vec<Envelope> {
        let reply = |message| vec![Envelope { from: Address::Member(self.id.clone()), to: from.clone(), message }];
        match message {
            Message::StoreShare(share) if share.member_id == self.id => {
                let (secret_id, epoch) = (share.secret_id, share.epoch);
                self.shares.insert((secret_id, epoch), share);
                reply(Message::Ack { secret_id, epoch })
            }
            Message::ReshareProbe { secret_id, epoch } => match self.shares.get(&(secret_id, epoch)) {
                Some(s) => reply(Message::Ready { secret_id, epoch, index: s.index }),
                None => vec![],
            },
            Message::BeginReshare { secret_id, epoch, participants, new_epoch, new_threshold, recipients } => {
                self.begin_reshare(secret_id, epoch, &participants, new_epoch, new_threshold, &recipients)
            }
            Message::SubShare { secret_id, new_epoch, to_index, expected, values, secret_len } => {
                self.absorb_sub_share(secret_id, new_epoch, to_index, expected, values, secret_len)
            }
            Message::ShareRequest { secret_id, epoch } => match self.shares.get(&(secret_id, epoch)) {
                Some(share) => {
                    let signature = self.signing.sign(&share_response_bytes(share));
                    reply(Message::ShareResponse { share: share.clone(), signature })
                }
                None => vec![],
            },
            Message::Purge { secret_id, epoch } => {
                self.shares.retain(|(id, e), _| !(*id == secret_id && *e <= epoch));
                vec![]
            }
            _ => vec![],
        }
    }

    fn begin_reshare(
        &mut self,
        secret_id: KeyId,
        epoch: u64,
        participants: &[u32],
        new_epoch: u64,
        new_threshold: usize,
        recipients: &[(String, u32)],
    ) -> Vec<Envelope> {
        let Some(share) = self.shares.get(&(secret_id, epoch)) else {
            return vec![];
        };
        if !participants.contains(&share.index) || new_threshold == 0 {
            return vec![];
        }
        let lambda = lagrange_at_zero(share.index, participants);
        let mut rng = ChaCha8Rng::from_seed(
            Sha256::new()
                .chain_update(b"sai-reshare-v1")
                .chain_update(self.signing.to_bytes())
                .chain_update(secret_id.0)
                .chain_update(new_epoch.to_be_bytes())
                .finalize()
                .into(),
        );
        let polys: Vec<Vec<BigUint>> = share
            .values
            .iter()
            .map(|v| {
                let mut coeffs = vec![mul(&lambda, v)];
                coeffs.extend((1..new_threshold).map(|_| random_element(&mut rng)));
                coeffs
            })
            .collect();
        recipients
            .iter()
            .map(|(id, x)| Envelope {
                from: Address::Member(self.id.clone()),
                to: Address::Member(id.clone()),
                message: Message::SubShare {
                    secret_id,
                    new_epoch,
                    to_index: *x,
                    expected: participants.len(),
                    values: polys.iter().map(|p| eval(p, *x)).collect(),
                    secret_len: share.secret_len,
                },
            })
            .collect()
    }

    fn absorb_sub_share(
        &mut self,
        secret_id: KeyId,
        new_epoch: u64,
        to_index: u32,
        expected: usize,
        values: Vec<BigUint>,
        secret_len: usize,
    ) -> Vec<Envelope> {
        let entry = self.pending.entry((secret_id, new_epoch)).or_insert_with(|| Pending {
            expected,
            secret_len,
            received: 0,
            sums: vec![BigUint::ZERO; values.len()],
        });
        if entry.sums.len() != values.len() || entry.expected != expected {
            return vec![];
        }
        for (acc, v) in entry.sums.iter_mut().zip(&values) {
            *acc = add(acc, v);
        }
        entry.received += 1;
        if entry.received < entry.expected {
            return vec![];
        }
        let done = self.pending.remove(&(secret_id, new_epoch)).expect("entry exists");
        let share = Share {
            secret_id,
            member_id: self.id.clone(),
            epoch: new_epoch,
            index: to_index,
            values: done.sums,
            secret_len: done.secret_len,
        };
        self.shares.insert((secret_id, new_epoch), share);
        vec![Envelope {
            from: Address::Member(self.id.clone()),
            to: Address::Service,
            message: Message::Ack { secret_id, epoch: new_epoch },
        }]
    }
}

/// Chooses which committee members are offline for an epoch.
#[derive(Debug, Clone)]
pub struct Adversary {
    rng: ChaCha8Rng,
    max_offline: usize,
}

impl Adversary {
    /// Takes up to `max_offline` members offline per epoch, capped at n - t.
    pub fn new(seed: u64, max_offline: usize) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), max_offline }
    }

    pub fn passive() -> Self {
        Self::new(0, 0)
    }

    pub fn choose(&mut self, member_ids: &[String], threshold: usize) -> BTreeSet<String> {
        let cap = self.max_offline.min(member_ids.len().saturating_sub(threshold));
        if cap == 0 {
            return BTreeSet::new();
        }
        let k = self.rng.gen_range(0..=cap);
        sample(&mut self.rng, member_ids.len(), k).into_iter().map(|i| member_ids[i].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub rounds: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// Deterministic round-based delivery. Messages to members that are offline
/// for the epoch a message concerns are dropped.
#[derive(Debug, Default)]
pub struct Transport {
    offline: BTreeSet<String>,
    offline_epoch: u64,
    pub stats: TransportStats,
}

impl Transport {
    pub fn set_offline(&mut self, epoch: u64, offline: BTreeSet<String>) {
        self.offline_epoch = epoch;
        self.offline = offline;
    }

    pub fn offline(&self) -> &BTreeSet<String> {
        &self.offline
    }

    /// Delivers `outbound` and everything it triggers among members until
    /// quiescent; returns the envelopes addressed to the service.
    pub fn run(&mut self, members: &mut BTreeMap<String, Member>, outbound: Vec<Envelope>) -> Vec<Envelope> {
        let mut to_service = Vec::new();
        let mut queue: VecDeque<Envelope> = outbound.into();
        while !queue.is_empty() {
            self.stats.rounds += 1;
            let mut next = VecDeque::new();
            for env in queue.drain(..) {
                match &env.to {
                    Address::Service => to_service.push(env),
                    Address::Member(id) => {
                        let down = self.offline.contains(id) && env.message.epoch() == self.offline_epoch;
                        match members.get_mut(id) {
                            Some(member) if !down => {
                                self.stats.delivered += 1;
                                next.extend(member.handle(&env.from, env.message));
                            }
                            _ => self.stats.dropped += 1,
                        }
                    }
                }
            }
            queue = next;
        }
        to_service
    }
}

pub(crate) fn generate_signing_key<R: RngCore>(rng: &mut R) -> SigningKey {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    SigningKey::from_bytes(&seed)
}
