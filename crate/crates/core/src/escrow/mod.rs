//! Committee escrow of single-use keys with policy-gated release.
//!
//! Keys are split with threshold sharing across a committee of member
//! actors, moved to new committees by proactive resharing, and handed out
//! once a [`ReleasePolicy`] is satisfied. Deposits and releases are recorded
//! on the ledger as signed [`KeyReleaseRecord`]s.

mod member;
mod sharing;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use zeroize::Zeroize;

pub use member::{verify_share_response, Address, Adversary, Envelope, Member, Message, Transport, TransportStats};
pub use sharing::{chunk_secret, combine, lagrange_at_zero, modulus, split, unchunk_secret, CombineError, Share, CHUNK_BYTES};

use crate::codec::{DecodeError, Reader, Writer};
use crate::ledger::{Ledger, LedgerError, LedgerTime, Payload};
use crate::protection::{KeyId, KeyPurpose, SingleUseKey};

pub const DEFAULT_COMMITTEE_SIZE: usize = 5;
pub const DEFAULT_THRESHOLD: usize = 3;
pub const DEFAULT_EPOCH_LEN: LedgerTime = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReleasePolicy {
    /// Released once the ledger clock reaches `release_after`.
    TimeElapsed { release_after: LedgerTime },
    /// Released on valid authorizations from both named parties.
    JointAction { client: String, insurer: String },
}

impl ReleasePolicy {
    fn write(&self, w: &mut Writer) {
        match self {
            ReleasePolicy::TimeElapsed { release_after } => {
                w.u8(0).u64(*release_after);
            }
            ReleasePolicy::JointAction { client, insurer } => {
                w.u8(1).str(client).str(insurer);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(ReleasePolicy::TimeElapsed { release_after: r.u64()? }),
            1 => Ok(ReleasePolicy::JointAction { client: r.str()?.into(), insurer: r.str()?.into() }),
            tag => Err(DecodeError::UnknownTag { what: "release policy", tag }),
        }
    }
}

impl fmt::Display for ReleasePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReleasePolicy::TimeElapsed { release_after } => write!(f, "time_elapsed({release_after})"),
            ReleasePolicy::JointAction { client, insurer } => write!(f, "joint_action({client}, {insurer})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseGrounds {
    TimeElapsed,
    JointAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReleaseEvent {
    Deposited { policy: ReleasePolicy, epoch: u64 },
    Released { at: LedgerTime, grounds: ReleaseGrounds },
}

/// Ledger record of a deposit or a release, signed by the escrow service.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyReleaseRecord {
    pub service_id: String,
    pub secret_id: KeyId,
    pub purpose: KeyPurpose,
    pub event: ReleaseEvent,
    pub signature: Signature,
}

const RECORD_MAGIC: &[u8; 4] = b"SAIK";

impl KeyReleaseRecord {
    fn new(service_id: &str, secret_id: KeyId, purpose: KeyPurpose, event: ReleaseEvent, key: &SigningKey) -> Self {
        let mut record =
            Self { service_id: service_id.into(), secret_id, purpose, event, signature: Signature::from_bytes(&[0; 64]) };
        record.signature = key.sign(&record.signed_bytes());
        record
    }

    fn write_unsigned(&self, w: &mut Writer) {
        w.raw(RECORD_MAGIC).u8(1).str(&self.service_id).raw(&self.secret_id.0).u8(self.purpose.tag());
        match &self.event {
            ReleaseEvent::Deposited { policy, epoch } => {
                w.u8(0);
                policy.write(w);
                w.varint(*epoch);
            }
            ReleaseEvent::Released { at, grounds } => {
                w.u8(1).u64(*at).u8(match grounds {
                    ReleaseGrounds::TimeElapsed => 0,
                    ReleaseGrounds::JointAction => 1,
                });
            }
        }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_unsigned(&mut w);
        w.finish()
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        key.verify(&self.signed_bytes(), &self.signature).is_ok()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_unsigned(&mut w);
        w.raw(&self.signature.to_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != RECORD_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        match r.u8()? {
            1 => {}
            v => return Err(DecodeError::Version(v)),
        }
        let service_id = r.str()?.to_owned();
        let secret_id = KeyId(r.array()?);
        let purpose = KeyPurpose::from_tag(r.u8()?)?;
        let event = match r.u8()? {
            0 => ReleaseEvent::Deposited { policy: ReleasePolicy::read(&mut r)?, epoch: r.varint()? },
            1 => ReleaseEvent::Released {
                at: r.u64()?,
                grounds: match r.u8()? {
                    0 => ReleaseGrounds::TimeElapsed,
                    1 => ReleaseGrounds::JointAction,
                    tag => return Err(DecodeError::UnknownTag { what: "release grounds", tag }),
                },
            },
            tag => return Err(DecodeError::UnknownTag { what: "key record event", tag }),
        };
        let signature = Signature::from_bytes(&r.array()?);
        r.finish()?;
        Ok(Self { service_id, secret_id, purpose, event, signature })
    }
}

/// One party's signed consent to release a specific secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    pub party: String,
    pub signature: Signature,
}

impl Authorization {
    pub fn message(secret_id: &KeyId) -> Vec<u8> {
        let mut m = b"sai-release-v1".to_vec();
        m.extend_from_slice(&secret_id.0);
        m
    }

    pub fn sign(party: &str, key: &SigningKey, secret_id: &KeyId) -> Self {
        Self { party: party.into(), signature: key.sign(&Self::message(secret_id)) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Denial {
    TooEarly { now: LedgerTime, release_after: LedgerTime },
    MissingSignature { party: String },
}

impl fmt::Display for Denial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Denial::TooEarly { now, release_after } => write!(f, "too early: clock {now}, release at {release_after}"),
            Denial::MissingSignature { party } => write!(f, "missing valid signature from {party}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EscrowError {
    #[error("invalid committee: t={t}, n={n}")]
    InvalidCommittee { t: usize, n: usize },
    #[error("unknown secret {0}")]
    UnknownSecret(KeyId),
    #[error("secret {0} already deposited")]
    AlreadyDeposited(KeyId),
    #[error("release denied: {0}")]
    Denied(Denial),
    #[error("{have} members participated, {need} required")]
    InsufficientParticipants { have: usize, need: usize },
    #[error("reconstruction failed: {0}")]
    Combine(#[from] CombineError),
    #[error("ledger rejected record: {0}")]
    Ledger(#[from] LedgerError),
    #[error("reconstructed key has {0} bytes")]
    BadKeyLength(usize),
    #[error("escrow state: {0}")]
    State(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitteeMember {
    pub id: String,
    pub key: VerifyingKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Committee {
    pub epoch: u64,
    pub members: Vec<CommitteeMember>,
    pub t: usize,
}

impl Committee {
    pub fn new(epoch: u64, members: Vec<CommitteeMember>, t: usize) -> Result<Self, EscrowError> {
        let n = members.len();
        if t < 2 || t > n {
            return Err(EscrowError::InvalidCommittee { t, n });
        }
        Ok(Self { epoch, members, t })
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    /// Share index of a member: its 1-based position.
    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.members.iter().position(|m| m.id == id).map(|i| i as u32 + 1)
    }

    fn ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id.clone()).collect()
    }

    fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.epoch, self.t);
        for m in &self.members {
            out.push_str(&format!("{} {}\n", m.id, hex::encode(m.key.to_bytes())));
        }
        out
    }

    fn from_text(text: &str) -> Result<Self, EscrowError> {
        let bad = |what: &str| EscrowError::State(format!("committee file: {what}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| bad("empty"))?;
        let (epoch, t) = head.split_once(' ').ok_or_else(|| bad("header"))?;
        let mut members = Vec::new();
        for line in lines {
            let (id, key) = line.split_once(' ').ok_or_else(|| bad("member line"))?;
            let bytes: [u8; 32] = hex::decode(key).ok().and_then(|b| b.try_into().ok()).ok_or_else(|| bad("member key"))?;
            let key = VerifyingKey::from_bytes(&bytes).map_err(|_| bad("member key"))?;
            members.push(CommitteeMember { id: id.into(), key });
        }
        Committee::new(epoch.parse().map_err(|_| bad("epoch"))?, members, t.parse().map_err(|_| bad("threshold"))?)
    }
}

/// Creates `n` fresh member actors named `e<epoch>-m<k>` and their committee.
pub fn generate_committee<R: rand::RngCore>(epoch: u64, n: usize, t: usize, rng: &mut R) -> Result<(Committee, Vec<Member>), EscrowError> {
    let members: Vec<Member> = (1..=n).map(|k| Member::new(format!("e{epoch}-m{k}"), member::generate_signing_key(rng))).collect();
    let info = members.iter().map(|m| CommitteeMember { id: m.id().into(), key: m.verifying_key() }).collect();
    Ok((Committee::new(epoch, info, t)?, members))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EscrowConfig {
    pub n: usize,
    pub t: usize,
    pub epoch_len: LedgerTime,
}

impl Default for EscrowConfig {
    fn default() -> Self {
        Self { n: DEFAULT_COMMITTEE_SIZE, t: DEFAULT_THRESHOLD, epoch_len: DEFAULT_EPOCH_LEN }
    }
}

#[derive(Debug)]
pub enum Release {
    Key(SingleUseKey),
    /// The key went out on an earlier request; here is that record.
    AlreadyReleased(KeyReleaseRecord),
}

#[derive(Debug, Clone)]
struct SecretMeta {
    purpose: KeyPurpose,
    policy: ReleasePolicy,
    released: Option<KeyReleaseRecord>,
}

/// Coordinator for the committee. It never holds shares; it only routes
/// messages, checks policies, and combines the shares returned on release.
pub struct EscrowService {
    service_id: String,
    signing: SigningKey,
    ledger: Arc<Ledger>,
    config: EscrowConfig,
    committee: Committee,
    members: BTreeMap<String, Member>,
    transport: Transport,
    adversary: Adversary,
    parties: HashMap<String, VerifyingKey>,
    secrets: BTreeMap<KeyId, SecretMeta>,
    rng: ChaCha20Rng,
}

impl fmt::Debug for EscrowService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EscrowService")
            .field("service_id", &self.service_id)
            .field("epoch", &self.committee.epoch)
            .field("secrets", &self.secrets.len())
            .finish_non_exhaustive()
    }
}

impl EscrowService {
    /// Builds a service with a freshly generated epoch-0 committee and
    /// registers its record-signing key with the ledger.
    pub fn new(service_id: &str, signing: SigningKey, ledger: Arc<Ledger>, config: EscrowConfig, seed: u64) -> Result<Self, EscrowError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (committee, members) = generate_committee(0, config.n, config.t, &mut rng)?;
        Ok(Self::assemble(service_id, signing, ledger, config, committee, members, rng))
    }

    fn assemble(
        service_id: &str,
        signing: SigningKey,
        ledger: Arc<Ledger>,
        config: EscrowConfig,
        committee: Committee,
        members: Vec<Member>,
        rng: ChaCha20Rng,
    ) -> Self {
        ledger.register_escrow(service_id, signing.verifying_key());
        let mut service = Self {
            service_id: service_id.into(),
            signing,
            ledger,
            config,
            committee,
            members: members.into_iter().map(|m| (m.id().to_owned(), m)).collect(),
            transport: Transport::default(),
            adversary: Adversary::passive(),
            parties: HashMap::new(),
            secrets: BTreeMap::new(),
            rng,
        };
        service.draw_offline();
        service
    }

    /// Replaces the adversary and redraws the offline set for the current epoch.
    pub fn set_adversary(&mut self, adversary: Adversary) {
        self.adversary = adversary;
        self.draw_offline();
    }

    fn draw_offline(&mut self) {
        let offline = self.adversary.choose(&self.committee.ids(), self.committee.t);
        self.transport.set_offline(self.committee.epoch, offline);
    }

    pub fn service_id(&self) -> &str {
        &self.service_id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn config(&self) -> EscrowConfig {
        self.config
    }

    pub fn committee(&self) -> &Committee {
        &self.committee
    }

    pub fn member(&self, id: &str) -> Option<&Member> {
        self.members.get(id)
    }

    pub fn offline_members(&self) -> Vec<String> {
        self.transport.offline().iter().cloned().collect()
    }

    pub fn transport_stats(&self) -> TransportStats {
        self.transport.stats
    }

    /// Registers the key a named party signs release authorizations with.
    pub fn register_party(&mut self, party: &str, key: VerifyingKey) {
        self.parties.insert(party.into(), key);
    }

    pub fn policy(&self, secret_id: &KeyId) -> Option<&ReleasePolicy> {
        self.secrets.get(secret_id).map(|s| &s.policy)
    }

    pub fn is_released(&self, secret_id: &KeyId) -> bool {
        self.secrets.get(secret_id).is_some_and(|s| s.released.is_some())
    }

    pub fn secret_ids(&self) -> impl Iterator<Item = &KeyId> {
        self.secrets.keys()
    }

    /// Whether the clock has passed the end of the current committee epoch.
    pub fn rotation_due(&self, now: LedgerTime) -> bool {
        now / self.config.epoch_len.max(1) > self.committee.epoch
    }

    /// Splits the key across the current committee. The key is consumed and
    /// its material wiped; a Deposited record goes to the ledger.
    pub fn deposit_secret(&mut self, key: SingleUseKey, policy: ReleasePolicy, now: LedgerTime) -> Result<KeyId, EscrowError> {
        let secret_id = key.key_id;
        if self.secrets.contains_key(&secret_id) {
            return Err(EscrowError::AlreadyDeposited(secret_id));
        }
        let mut material = *key.material();
        let purpose = key.purpose;
        drop(key);
        let chunks = chunk_secret(&material);
        material.zeroize();
        let c = &self.committee;
        let outbound = split(&chunks, c.t, c.n(), &mut self.rng)
            .into_iter()
            .zip(&c.members)
            .enumerate()
            .map(|(i, (values, m))| Envelope {
                from: Address::Service,
                to: Address::Member(m.id.clone()),
                message: Message::StoreShare(Share {
                    secret_id,
                    member_id: m.id.clone(),
                    epoch: c.epoch,
                    index: i as u32 + 1,
                    values,
                    secret_len: 32,
                }),
            })
            .collect();
        let acks = self.transport.run(&mut self.members, outbound);
        let have = acks.iter().filter(|e| matches!(e.message, Message::Ack { secret_id: s, .. } if s == secret_id)).count();
        if have < self.committee.t {
            return Err(EscrowError::InsufficientParticipants { have, need: self.committee.t });
        }
        let record = KeyReleaseRecord::new(
            &self.service_id,
            secret_id,
            purpose,
            ReleaseEvent::Deposited { policy: policy.clone(), epoch: self.committee.epoch },
            &self.signing,
        );
        self.ledger.append(Payload::KeyRelease(record), now)?;
        self.secrets.insert(secret_id, SecretMeta { purpose, policy, released: None });
        Ok(secret_id)
    }

    /// Hands every unreleased secret to `new_members` under threshold `t`,
    /// then invalidates the old committee's shares.
    pub fn reshare(&mut self, new_members: Vec<Member>, t: usize) -> Result<&Committee, EscrowError> {
        let info = new_members.iter().map(|m| CommitteeMember { id: m.id().into(), key: m.verifying_key() }).collect();
        self.handoff(info, new_members, t)
    }

    /// Proactive refresh: reshares to the same membership and threshold.
    pub fn refresh(&mut self) -> Result<&Committee, EscrowError> {
        let info = self.committee.members.clone();
        let t = self.committee.t;
        self.handoff(info, Vec::new(), t)
    }

    fn handoff(&mut self, info: Vec<CommitteeMember>, new_members: Vec<Member>, t: usize) -> Result<&Committee, EscrowError> {
        let epoch = self.committee.epoch;
        let new_epoch = epoch + 1;
        let new_committee = Committee::new(new_epoch, info, t)?;
        if let Some(m) = new_committee.members.iter().find(|m| !self.members.contains_key(&m.id) && !new_members.iter().any(|a| a.id() == m.id)) {
            return Err(EscrowError::State(format!("no actor for member {}", m.id)));
        }
        let live: Vec<KeyId> = self.secrets.iter().filter(|(_, m)| m.released.is_none()).map(|(k, _)| *k).collect();

        let probes = live
            .iter()
            .flat_map(|&secret_id| {
                self.committee.members.iter().map(move |m| Envelope {
                    from: Address::Service,
                    to: Address::Member(m.id.clone()),
                    message: Message::ReshareProbe { secret_id, epoch },
                })
            })
            .collect();
        let mut ready: BTreeMap<KeyId, Vec<(u32, String)>> = BTreeMap::new();
        for env in self.transport.run(&mut self.members, probes) {
            if let (Address::Member(id), Message::Ready { secret_id, index, .. }) = (env.from, env.message) {
                ready.entry(secret_id).or_default().push((index, id));
            }
        }
        for secret_id in &live {
            let have = ready.get(secret_id).map_or(0, Vec::len);
            if have < self.committee.t {
                return Err(EscrowError::InsufficientParticipants { have, need: self.committee.t });
            }
        }

        for m in new_members {
            self.members.insert(m.id().to_owned(), m);
        }
        let recipients: Vec<(String, u32)> =
            new_committee.members.iter().enumerate().map(|(i, m)| (m.id.clone(), i as u32 + 1)).collect();
        let mut begin = Vec::new();
        for secret_id in &live {
            let mut chosen = ready.remove(secret_id).unwrap_or_default();
            chosen.sort();
            chosen.truncate(self.committee.t);
            let participants: Vec<u32> = chosen.iter().map(|(x, _)| *x).collect();
            begin.extend(chosen.into_iter().map(|(_, id)| Envelope {
                from: Address::Service,
                to: Address::Member(id),
                message: Message::BeginReshare {
                    secret_id: *secret_id,
                    epoch,
                    participants: participants.clone(),
                    new_epoch,
                    new_threshold: t,
                    recipients: recipients.clone(),
                },
            }));
        }
        let acks = self.transport.run(&mut self.members, begin);
        for secret_id in &live {
            let have = acks.iter().filter(|e| matches!(e.message, Message::Ack { secret_id: s, .. } if s == *secret_id)).count();
            if have < t {
                return Err(EscrowError::InsufficientParticipants { have, need: t });
            }
        }

        let purge = live
            .iter()
            .flat_map(|&secret_id| {
                self.committee.members.iter().map(move |m| Envelope {
                    from: Address::Service,
                    to: Address::Member(m.id.clone()),
                    message: Message::Purge { secret_id, epoch },
                })
            })
            .collect();
        self.transport.run(&mut self.members, purge);
        let retired: Vec<String> =
            self.committee.ids().into_iter().filter(|id| new_committee.index_of(id).is_none()).collect();
        for id in retired {
            self.members.remove(&id);
        }
        self.committee = new_committee;
        self.draw_offline();
        Ok(&self.committee)
    }

    /// Reshares to a freshly generated committee of the configured size.
    pub fn rotate(&mut self) -> Result<&Committee, EscrowError> {
        let (_, members) = generate_committee(self.committee.epoch + 1, self.config.n, self.config.t, &mut self.rng)?;
        self.reshare(members, self.config.t)
    }

    fn check_policy(&self, policy: &ReleasePolicy, secret_id: &KeyId, credentials: &[Authorization], now: LedgerTime) -> Result<ReleaseGrounds, Denial> {
        match policy {
            ReleasePolicy::TimeElapsed { release_after } => {
                if now >= *release_after {
                    Ok(ReleaseGrounds::TimeElapsed)
                } else {
                    Err(Denial::TooEarly { now, release_after: *release_after })
                }
            }
            ReleasePolicy::JointAction { client, insurer } => {
                let message = Authorization::message(secret_id);
                for party in [client, insurer] {
                    let signed = self.parties.get(party).is_some_and(|key| {
                        credentials.iter().any(|a| &a.party == party && key.verify(&message, &a.signature).is_ok())
                    });
                    if !signed {
                        return Err(Denial::MissingSignature { party: party.clone() });
                    }
                }
                Ok(ReleaseGrounds::JointAction)
            }
        }
    }

    /// Releases the key if its policy is satisfied. Keys go out once; later
    /// requests get the release record instead.
    pub fn request_release(&mut self, secret_id: &KeyId, credentials: &[Authorization], now: LedgerTime) -> Result<Release, EscrowError> {
        let meta = self.secrets.get(secret_id).ok_or(EscrowError::UnknownSecret(*secret_id))?;
        if let Some(record) = &meta.released {
            return Ok(Release::AlreadyReleased(record.clone()));
        }
        let grounds = self.check_policy(&meta.policy, secret_id, credentials, now).map_err(EscrowError::Denied)?;
        let purpose = meta.purpose;

        let epoch = self.committee.epoch;
        let requests = self
            .committee
            .members
            .iter()
            .map(|m| Envelope {
                from: Address::Service,
                to: Address::Member(m.id.clone()),
                message: Message::ShareRequest { secret_id: *secret_id, epoch },
            })
            .collect();
        let mut shares = Vec::new();
        for env in self.transport.run(&mut self.members, requests) {
            let (Address::Member(id), Message::ShareResponse { share, signature }) = (env.from, env.message) else {
                continue;
            };
            let authentic = self.committee.members.iter().any(|m| {
                m.id == id && share.member_id == id && self.committee.index_of(&id) == Some(share.index) && verify_share_response(&share, &signature, &m.key)
            });
            if authentic && share.secret_id == *secret_id {
                shares.push(share);
            }
        }
        let mut material = combine(&shares, self.committee.t)?;
        let bytes: [u8; 32] = material.as_slice().try_into().map_err(|_| EscrowError::BadKeyLength(material.len()))?;
        material.zeroize();
        let key = SingleUseKey::from_parts(*secret_id, purpose, bytes);

        let record = KeyReleaseRecord::new(&self.service_id, *secret_id, purpose, ReleaseEvent::Released { at: now, grounds }, &self.signing);
        self.ledger.append(Payload::KeyRelease(record.clone()), now)?;
        if let Some(meta) = self.secrets.get_mut(secret_id) {
            meta.released = Some(record);
        }
        let purge = self
            .committee
            .members
            .iter()
            .map(|m| Envelope {
                from: Address::Service,
                to: Address::Member(m.id.clone()),
                message: Message::Purge { secret_id: *secret_id, epoch },
            })
            .collect();
        self.transport.run(&mut self.members, purge);
        Ok(Release::Key(key))
    }

    /// Writes `committee.txt` and one `<member>.shares` file per member.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("committee.txt"), self.committee.to_text())?;
        for (id, member) in &self.members {
            fs::write(dir.join(format!("{id}.shares")), member.to_text())?;
        }
        Ok(())
    }

    /// Rebuilds a service from [`Self::save`] output. Secret metadata comes
    /// from this service's key records on the ledger.
    pub fn load(service_id: &str, signing: SigningKey, ledger: Arc<Ledger>, config: EscrowConfig, dir: &Path, seed: u64) -> Result<Self, EscrowError> {
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| EscrowError::State(format!("{name}: {e}")));
        let committee = Committee::from_text(&read("committee.txt")?)?;
        let members = committee
            .members
            .iter()
            .map(|m| Member::from_text(&m.id, &read(&format!("{}.shares", m.id))?).map_err(|e| EscrowError::State(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let rng = ChaCha20Rng::seed_from_u64(seed ^ ledger.height().rotate_left(32) ^ committee.epoch);
        let mut service = Self::assemble(service_id, signing, Arc::clone(&ledger), config, committee, members, rng);
        for record in ledger.records() {
            let Payload::KeyRelease(k) = &record.payload else { continue };
            if k.service_id != service_id {
                continue;
            }
            match &k.event {
                ReleaseEvent::Deposited { policy, .. } => {
                    service.secrets.insert(k.secret_id, SecretMeta { purpose: k.purpose, policy: policy.clone(), released: None });
                }
                ReleaseEvent::Released { .. } => {
                    if let Some(meta) = service.secrets.get_mut(&k.secret_id) {
                        meta.released = Some(k.clone());
                    }
                }
            }
        }
        Ok(service)
    }
}
