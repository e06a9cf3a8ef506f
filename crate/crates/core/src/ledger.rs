//! In-process append-only ledger standing in for the chain backend.
//!
//! The append path plays the role of the contracts: rule tables must carry
//! a valid insurer signature and a fresh version; event publications must fit
//! in [`MAX_EVENT_BYTES`], carry a valid signature from an enrolled device and
//! advance the interval index for their pseudonym; key-release records must be
//! signed by a registered escrow service and follow deposit-then-release.
//!
//! Dump format: one record per line, `height timestamp kind hex(payload)`,
//! with `kind` one of `rule_table`, `event`, `key_release`. Payload encodings:
//!
//! ```text
//! rule_table   canonical_text:str | signature:64
//! event        "SAIE" | 1 | pseudonym:32 | org:str | interval:varint | score:f64
//!              | violated_rules:blob | evidence_url:str | signature:64
//! key_release  see escrow::KeyReleaseRecord::encode
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::RangeInclusive;
use std::sync::{Arc, RwLock};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::escrow::{KeyReleaseRecord, ReleaseEvent};
use crate::evidence::EvidenceLocator;
use crate::protection::{KeyId, ProtectedBlob};
use crate::rules::{parse_rule_table, RuleTable};
use crate::telemetry::{DeviceId, SamplePoint, Value};
use crate::time::Timestamp;

/// Simulated ledger clock, in seconds.
pub type LedgerTime = u64;

pub const MAX_EVENT_BYTES: usize = 1024;
/// Intervals per pseudonym epoch: 24 h of 300 s intervals.
pub const PSEUDONYM_EPOCH_INTERVALS: u64 = 288;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("unknown org {0}")]
    UnknownOrg(String),
    #[error("org {0} already registered")]
    DuplicateOrg(String),
    #[error("device {0} already enrolled")]
    DuplicateEnrollment(DeviceId),
    #[error("bad signature on {0}")]
    BadSignature(&'static str),
    #[error("publication is {size} bytes, limit {limit}")]
    Oversized { size: usize, limit: usize },
    #[error("interval {interval} for pseudonym {pseudonym} does not advance past {last}")]
    Replay { pseudonym: Pseudonym, interval: u64, last: u64 },
    #[error("pseudonym {0} matches no enrolled device")]
    UnknownPseudonym(Pseudonym),
    #[error("rule table version {version} for {org} is not above {current}")]
    StaleVersion { org: String, version: u64, current: u64 },
    #[error("clock moved backwards: {at} < {last}")]
    ClockRegression { at: LedgerTime, last: LedgerTime },
    #[error("unknown escrow service {0}")]
    UnknownEscrow(String),
    #[error("key record for {secret}: {msg}")]
    KeyRecord { secret: KeyId, msg: &'static str },
    #[error("no rule table for {org} effective at {at}")]
    NoApplicableTable { org: String, at: Timestamp },
    #[error("dump line {line}: {msg}")]
    Dump { line: usize, msg: String },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pseudonym(pub [u8; 32]);

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pseudonym({})", &hex::encode(self.0)[..16])
    }
}

impl std::str::FromStr for Pseudonym {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        bytes.try_into().map(Pseudonym).map_err(|_| "pseudonym is 32 bytes".into())
    }
}

/// Insurer-held key for pseudonym derivation.
#[derive(Clone, PartialEq, Eq)]
pub struct OrgSecret(pub [u8; 32]);

impl fmt::Debug for OrgSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("OrgSecret(..)")
    }
}

/// HMAC-SHA256 under the org secret over `device || epoch`.
pub fn derive_pseudonym(device: DeviceId, org_secret: &OrgSecret, epoch: u64) -> Pseudonym {
    let mut mac = Hmac::<Sha256>::new_from_slice(&org_secret.0).expect("hmac takes any key length");
    mac.update(b"sai-pseudonym-v1");
    mac.update(device.as_bytes());
    mac.update(&epoch.to_be_bytes());
    Pseudonym(mac.finalize().into_bytes().into())
}

pub fn pseudonym_epoch(interval_index: u64) -> u64 {
    interval_index / PSEUDONYM_EPOCH_INTERVALS
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventPublication {
    pub pseudonym: Pseudonym,
    pub org_id: String,
    pub interval_index: u64,
    pub risk_score: f64,
    pub violated_rules: ProtectedBlob,
    pub evidence_url: EvidenceLocator,
    pub signature: Signature,
}

const EVENT_MAGIC: &[u8; 4] = b"SAIE";

impl EventPublication {
    fn write_unsigned(&self, w: &mut Writer) {
        w.raw(EVENT_MAGIC)
            .u8(1)
            .raw(&self.pseudonym.0)
            .str(&self.org_id)
            .varint(self.interval_index)
            .f64(self.risk_score)
            .raw(&self.violated_rules.encode())
            .str(&self.evidence_url.url());
    }

    /// The bytes covered by the device signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(512);
        self.write_unsigned(&mut w);
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(600);
        self.write_unsigned(&mut w);
        w.raw(&self.signature.to_bytes());
        w.finish()
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != EVENT_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        match r.u8()? {
            1 => {}
            v => return Err(DecodeError::Version(v)),
        }
        let pseudonym = Pseudonym(r.array()?);
        let org_id = r.str()?.to_owned();
        let interval_index = r.varint()?;
        let risk_score = r.f64()?;
        let violated_rules = ProtectedBlob::read(&mut r)?;
        let url = r.str()?;
        let evidence_url = url.parse().map_err(|_| DecodeError::Invalid(format!("bad evidence url {url:?}")))?;
        let signature = Signature::from_bytes(&r.array()?);
        r.finish()?;
        Ok(Self { pseudonym, org_id, interval_index, risk_score, violated_rules, evidence_url, signature })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    RuleTable(RuleTable),
    Event(EventPublication),
    KeyRelease(KeyReleaseRecord),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::RuleTable(_) => "rule_table",
            Payload::Event(_) => "event",
            Payload::KeyRelease(_) => "key_release",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::RuleTable(t) => {
                let mut w = Writer::new();
                w.str(&t.canonical_text());
                w.raw(&t.signature.map(|s| s.to_bytes()).unwrap_or([0; 64]));
                w.finish()
            }
            Payload::Event(e) => e.encode(),
            Payload::KeyRelease(k) => k.encode(),
        }
    }

    pub fn decode(kind: &str, bytes: &[u8]) -> Result<Self, String> {
        match kind {
            "rule_table" => {
                let mut r = Reader::new(bytes);
                let text = r.str().map_err(|e| e.to_string())?;
                let sig = Signature::from_bytes(&r.array().map_err(|e| e.to_string())?);
                r.finish().map_err(|e| e.to_string())?;
                let mut table = parse_rule_table(text).map_err(|e| e.to_string())?;
                table.signature = Some(sig);
                Ok(Payload::RuleTable(table))
            }
            "event" => EventPublication::decode(bytes).map(Payload::Event).map_err(|e| e.to_string()),
            "key_release" => KeyReleaseRecord::decode(bytes).map(Payload::KeyRelease).map_err(|e| e.to_string()),
            other => Err(format!("unknown record kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRecord {
    pub height: u64,
    pub timestamp: LedgerTime,
    pub payload: Payload,
}

impl LedgerRecord {
    pub fn dump_line(&self) -> String {
        format!("{} {} {} {}", self.height, self.timestamp, self.payload.kind(), hex::encode(self.payload.encode()))
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [height, ts, kind, payload] = parts[..] else {
            return Err(format!("expected 4 fields, found {}", parts.len()));
        };
        let bytes = hex::decode(payload).map_err(|e| e.to_string())?;
        Ok(Self {
            height: height.parse().map_err(|e| format!("height: {e}"))?,
            timestamp: ts.parse().map_err(|e| format!("timestamp: {e}"))?,
            payload: Payload::decode(kind, &bytes)?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EventFilter {
    pub org_id: Option<String>,
    pub pseudonym: Option<Pseudonym>,
    pub heights: Option<RangeInclusive<u64>>,
}

impl EventFilter {
    fn matches(&self, height: u64, e: &EventPublication) -> bool {
        self.org_id.as_ref().is_none_or(|o| *o == e.org_id)
            && self.pseudonym.is_none_or(|p| p == e.pseudonym)
            && self.heights.as_ref().is_none_or(|r| r.contains(&height))
    }
}

struct OrgState {
    key: VerifyingKey,
    secret: OrgSecret,
    devices: BTreeMap<DeviceId, VerifyingKey>,
    /// epoch -> pseudonym -> device, filled lazily
    pseudonyms: HashMap<u64, HashMap<Pseudonym, DeviceId>>,
}

impl OrgState {
    fn device_for(&mut self, pseudonym: &Pseudonym, epoch: u64) -> Option<VerifyingKey> {
        let devices = &self.devices;
        let secret = &self.secret;
        let table = self
            .pseudonyms
            .entry(epoch)
            .or_insert_with(|| devices.keys().map(|d| (derive_pseudonym(*d, secret, epoch), *d)).collect());
        table.get(pseudonym).and_then(|d| devices.get(d)).copied()
    }
}

#[derive(Default)]
struct State {
    records: Vec<Arc<LedgerRecord>>,
    orgs: HashMap<String, OrgState>,
    escrows: HashMap<String, VerifyingKey>,
    latest_version: HashMap<String, u64>,
    last_interval: HashMap<Pseudonym, u64>,
    deposited: HashSet<KeyId>,
    released: HashSet<KeyId>,
}

/// Append-only record store with validation on the append path. Appends
/// serialize on a write lock; queries read a consistent prefix.
#[derive(Default)]
pub struct Ledger {
    state: RwLock<State>,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger").field("height", &self.height()).finish_non_exhaustive()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_org(&self, org_id: &str, key: VerifyingKey, secret: OrgSecret) -> Result<(), LedgerError> {
        let mut s = self.state.write().unwrap();
        if s.orgs.contains_key(org_id) {
            return Err(LedgerError::DuplicateOrg(org_id.into()));
        }
        s.orgs.insert(
            org_id.into(),
            OrgState { key, secret, devices: BTreeMap::new(), pseudonyms: HashMap::new() },
        );
        Ok(())
    }

    /// Registers a device verification key with its insurer, once.
    pub fn enroll_device(&self, org_id: &str, device: DeviceId, key: VerifyingKey) -> Result<(), LedgerError> {
        let mut s = self.state.write().unwrap();
        let org = s.orgs.get_mut(org_id).ok_or_else(|| LedgerError::UnknownOrg(org_id.into()))?;
        if org.devices.contains_key(&device) {
            return Err(LedgerError::DuplicateEnrollment(device));
        }
        org.devices.insert(device, key);
        org.pseudonyms.clear();
        Ok(())
    }

    pub fn register_escrow(&self, service_id: &str, key: VerifyingKey) {
        self.state.write().unwrap().escrows.insert(service_id.into(), key);
    }

    /// Number of records; also the height of the newest one.
    pub fn height(&self) -> u64 {
        self.state.read().unwrap().records.len() as u64
    }

    pub fn append(&self, payload: Payload, at: LedgerTime) -> Result<u64, LedgerError> {
        let mut s = self.state.write().unwrap();
        if let Some(last) = s.records.last() {
            if at < last.timestamp {
                return Err(LedgerError::ClockRegression { at, last: last.timestamp });
            }
        }
        s.validate(&payload)?;
        s.commit(&payload);
        let height = s.records.len() as u64 + 1;
        s.records.push(Arc::new(LedgerRecord { height, timestamp: at, payload }));
        Ok(height)
    }

    pub fn records(&self) -> Vec<Arc<LedgerRecord>> {
        self.state.read().unwrap().records.clone()
    }

    pub fn record(&self, height: u64) -> Option<Arc<LedgerRecord>> {
        let s = self.state.read().unwrap();
        height.checked_sub(1).and_then(|i| s.records.get(i as usize)).cloned()
    }

    pub fn query_events(&self, filter: &EventFilter) -> Vec<EventPublication> {
        self.query_events_with_height(filter).into_iter().map(|(_, e)| e).collect()
    }

    pub fn query_events_with_height(&self, filter: &EventFilter) -> Vec<(u64, EventPublication)> {
        let s = self.state.read().unwrap();
        s.records
            .iter()
            .filter_map(|r| match &r.payload {
                Payload::Event(e) if filter.matches(r.height, e) => Some((r.height, e.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn find_event(&self, pseudonym: &Pseudonym, interval_index: u64) -> Option<EventPublication> {
        let filter = EventFilter { pseudonym: Some(*pseudonym), ..Default::default() };
        self.query_events(&filter).into_iter().find(|e| e.interval_index == interval_index)
    }

    pub fn key_records(&self, secret: &KeyId) -> Vec<KeyReleaseRecord> {
        let s = self.state.read().unwrap();
        s.records
            .iter()
            .filter_map(|r| match &r.payload {
                Payload::KeyRelease(k) if k.secret_id == *secret => Some(k.clone()),
                _ => None,
            })
            .collect()
    }

    /// Highest version of the org's table with `effective_from <= at`.
    pub fn resolve_rule_table(&self, org_id: &str, at: Timestamp) -> Result<RuleTable, LedgerError> {
        let s = self.state.read().unwrap();
        s.records
            .iter()
            .filter_map(|r| match &r.payload {
                Payload::RuleTable(t) if t.org_id == org_id && t.effective_from <= at => Some(t),
                _ => None,
            })
            .max_by_key(|t| t.version)
            .cloned()
            .ok_or_else(|| LedgerError::NoApplicableTable { org: org_id.into(), at })
    }

    pub fn org_key(&self, org_id: &str) -> Option<VerifyingKey> {
        self.state.read().unwrap().orgs.get(org_id).map(|o| o.key)
    }

    pub fn device_key(&self, org_id: &str, device: DeviceId) -> Option<VerifyingKey> {
        self.state.read().unwrap().orgs.get(org_id).and_then(|o| o.devices.get(&device).copied())
    }

    /// SHA-256 over the dump lines of the first `n` records.
    pub fn prefix_digest(&self, n: usize) -> [u8; 32] {
        let s = self.state.read().unwrap();
        let mut h = Sha256::new();
        for r in s.records.iter().take(n) {
            h.update(r.dump_line().as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn dump(&self) -> String {
        let s = self.state.read().unwrap();
        let mut out = String::new();
        for r in &s.records {
            out.push_str(&r.dump_line());
            out.push('\n');
        }
        out
    }

    /// Re-appends every record of a dump, validating each one. Registrations
    /// (orgs, devices, escrow services) must already be in place.
    pub fn restore(&self, dump: &str) -> Result<(), LedgerError> {
        for (i, line) in dump.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |msg: String| LedgerError::Dump { line: i + 1, msg };
            let record = LedgerRecord::parse_line(line).map_err(err)?;
            let expected = self.height() + 1;
            if record.height != expected {
                return Err(err(format!("height {} where {expected} was expected", record.height)));
            }
            self.append(record.payload, record.timestamp)?;
        }
        Ok(())
    }
}

impl State {
    fn validate(&mut self, payload: &Payload) -> Result<(), LedgerError> {
        match payload {
            Payload::RuleTable(t) => {
                let org = self.orgs.get(&t.org_id).ok_or_else(|| LedgerError::UnknownOrg(t.org_id.clone()))?;
                if !t.verify(&org.key) {
                    return Err(LedgerError::BadSignature("rule table"));
                }
                if let Some(&current) = self.latest_version.get(&t.org_id) {
                    if t.version <= current {
                        return Err(LedgerError::StaleVersion { org: t.org_id.clone(), version: t.version, current });
                    }
                }
                Ok(())
            }
            Payload::Event(e) => {
                let size = e.encoded_len();
                if size > MAX_EVENT_BYTES {
                    return Err(LedgerError::Oversized { size, limit: MAX_EVENT_BYTES });
                }
                let org = self.orgs.get_mut(&e.org_id).ok_or_else(|| LedgerError::UnknownOrg(e.org_id.clone()))?;
                let device_key = org
                    .device_for(&e.pseudonym, pseudonym_epoch(e.interval_index))
                    .ok_or(LedgerError::UnknownPseudonym(e.pseudonym))?;
                if device_key.verify(&e.signed_bytes(), &e.signature).is_err() {
                    return Err(LedgerError::BadSignature("event publication"));
                }
                if let Some(&last) = self.last_interval.get(&e.pseudonym) {
                    if e.interval_index <= last {
                        return Err(LedgerError::Replay { pseudonym: e.pseudonym, interval: e.interval_index, last });
                    }
                }
                Ok(())
            }
            Payload::KeyRelease(k) => {
                let key = self.escrows.get(&k.service_id).ok_or_else(|| LedgerError::UnknownEscrow(k.service_id.clone()))?;
                if !k.verify(key) {
                    return Err(LedgerError::BadSignature("key release record"));
                }
                let err = |msg| LedgerError::KeyRecord { secret: k.secret_id, msg };
                match k.event {
                    ReleaseEvent::Deposited { .. } if self.deposited.contains(&k.secret_id) => Err(err("already deposited")),
                    ReleaseEvent::Released { .. } if !self.deposited.contains(&k.secret_id) => Err(err("released before deposit")),
                    ReleaseEvent::Released { .. } if self.released.contains(&k.secret_id) => Err(err("already released")),
                    _ => Ok(()),
                }
            }
        }
    }

    fn commit(&mut self, payload: &Payload) {
        match payload {
            Payload::RuleTable(t) => {
                self.latest_version.insert(t.org_id.clone(), t.version);
            }
            Payload::Event(e) => {
                self.last_interval.insert(e.pseudonym, e.interval_index);
            }
            Payload::KeyRelease(k) => {
                match k.event {
                    ReleaseEvent::Deposited { .. } => self.deposited.insert(k.secret_id),
                    ReleaseEvent::Released { .. } => self.released.insert(k.secret_id),
                };
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("oracle source {0} is not registered")]
    UnregisteredSource(String),
}

/// A datum vouched for by an external source.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDatum {
    pub source_id: String,
    pub query: String,
    pub value: Value,
    pub timestamp: Timestamp,
    pub signature: Signature,
}

impl SignedDatum {
    fn signed_bytes(source_id: &str, query: &str, value: &Value, timestamp: Timestamp) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("sai-oracle-v1").str(source_id).str(query).u8(value.data_type().tag());
        match value {
            Value::Bool(b) => w.u8(u8::from(*b)),
            Value::Float(v) => w.f64(*v),
            Value::Int(v) => w.i64(*v),
        };
        w.i64(timestamp.centis());
        w.finish()
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        let bytes = Self::signed_bytes(&self.source_id, &self.query, &self.value, self.timestamp);
        key.verify(&bytes, &self.signature).is_ok()
    }

    /// The datum as a logged sample on `field`, for rules over external series.
    pub fn to_sample_point(&self, field: &str) -> SamplePoint {
        SamplePoint::new(field, self.value, self.timestamp)
    }
}

type Answer = Box<dyn Fn(&str, Timestamp) -> Value + Send + Sync>;

struct Source {
    key: SigningKey,
    answer: Answer,
}

/// Pluggable stand-in for external data sources.
#[derive(Default)]
pub struct OracleHub {
    sources: BTreeMap<String, Source>,
}

impl OracleHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, source_id: &str, key: SigningKey, answer: impl Fn(&str, Timestamp) -> Value + Send + Sync + 'static) {
        self.sources.insert(source_id.into(), Source { key, answer: Box::new(answer) });
    }

    /// A time authority answering every query with the query time in whole seconds.
    pub fn register_time_authority(&mut self, source_id: &str, key: SigningKey) {
        self.register(source_id, key, |_, at| Value::Int(at.secs()));
    }

    pub fn verifying_key(&self, source_id: &str) -> Option<VerifyingKey> {
        self.sources.get(source_id).map(|s| s.key.verifying_key())
    }

    pub fn query(&self, source_id: &str, query: &str, at: Timestamp) -> Result<SignedDatum, OracleError> {
        let source = self.sources.get(source_id).ok_or_else(|| OracleError::UnregisteredSource(source_id.into()))?;
        let value = (source.answer)(query, at);
        let signature = source.key.sign(&SignedDatum::signed_bytes(source_id, query, &value, at));
        Ok(SignedDatum { source_id: source_id.into(), query: query.into(), value, timestamp: at, signature })
    }
}

impl fmt::Debug for OracleHub {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleHub").field("sources", &self.sources.keys().collect::<Vec<_>>()).finish()
    }
}
