//! One insurer, its enrolled devices, the ledger, the escrow committee and
//! the evidence store, wired together with keys derived from a seed.
//!
//! State directory layout written by [`World::save`]:
//!
//! ```text
//! world.meta        key=value lines: seed, org, clock, reveal_horizon, device=<name> <next_interval>
//! ledger.dump       Ledger::dump output
//! escrow/           committee.txt and <member>.shares files
//! evidence/         content-addressed sealed blobs
//! insurer.keys      keys released to the insurer: <key_id> <purpose> <material hex>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assessment::{assess, Assessment, AssessmentError, EventData};
use crate::claims::{adjudicate_claim, audit_event, audit_for_claim, AuditOutcome, Claim, ClaimsError, Revealer, RevealedEvent};
use crate::escrow::{Authorization, EscrowConfig, EscrowError, EscrowService, ReleasePolicy};
use crate::evidence::{EvidenceError, EvidenceLocator, EvidenceStore};
use crate::fixtures::DEMO_ORG;
use crate::ledger::{derive_pseudonym, pseudonym_epoch, EventPublication, Ledger, LedgerError, LedgerTime, OrgSecret, Payload, Pseudonym};
use crate::protection::{DeviceKeyPair, KeyId, KeyPurpose, ProtectionError, Protector, PublicationContext, ReleasePolicies, SingleUseKey};
use crate::rules::{RuleError, RuleTable};
use crate::telemetry::{DeviceId, IntervalLog};

pub const INSURER_PARTY: &str = "insurer";
pub const ESCROW_SERVICE: &str = "escrow";
/// Default delay before violated-rules keys open on their own: 30 days.
pub const DEFAULT_REVEAL_HORIZON: LedgerTime = 30 * 24 * 3600;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Escrow(#[from] EscrowError),
    #[error(transparent)]
    Protection(#[from] ProtectionError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Claims(#[from] ClaimsError),
    #[error(transparent)]
    Assessment(#[from] AssessmentError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Telemetry(#[from] crate::telemetry::TelemetryError),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("clock cannot move from {now} back to {to}")]
    ClockRegression { now: LedgerTime, to: LedgerTime },
    #[error("state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldConfig {
    pub org_id: String,
    pub seed: u64,
    pub escrow: EscrowConfig,
    pub reveal_horizon: LedgerTime,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { org_id: DEMO_ORG.into(), seed: 0, escrow: EscrowConfig::default(), reveal_horizon: DEFAULT_REVEAL_HORIZON }
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

fn derive(seed: u64, label: &str) -> [u8; 32] {
    Sha256::new()
        .chain_update(b"sai-world-v1")
        .chain_update(seed.to_be_bytes())
        .chain_update(label.as_bytes())
        .finalize()
        .into()
}

fn derive_u64(seed: u64, label: &str) -> u64 {
    u64::from_be_bytes(derive(seed, label)[..8].try_into().expect("8 bytes"))
}

pub struct Device {
    pub name: String,
    pub id: DeviceId,
    pub next_interval: u64,
    protector: Protector<ChaCha20Rng>,
    client_key: SigningKey,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device").field("name", &self.name).field("id", &self.id).field("next_interval", &self.next_interval).finish()
    }
}

impl Device {
    pub fn verifying_key(&self) -> VerifyingKey {
        self.protector.keys().verifying_key()
    }

    pub fn authorize(&self, key_id: &KeyId) -> Authorization {
        Authorization::sign(&self.name, &self.client_key, key_id)
    }
}

#[derive(Debug, Clone)]
pub struct PublishReceipt {
    pub height: u64,
    pub publication: EventPublication,
    pub evidence_size: usize,
    /// Wall-clock time spent sealing and signing.
    pub encryption: Duration,
}

pub struct World {
    config: WorldConfig,
    pub ledger: Arc<Ledger>,
    pub escrow: EscrowService,
    pub store: EvidenceStore,
    insurer_key: SigningKey,
    org_secret: OrgSecret,
    revealer: Revealer,
    devices: BTreeMap<String, Device>,
    clock: LedgerTime,
}

impl fmt::Debug for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("World")
            .field("org", &self.config.org_id)
            .field("clock", &self.clock)
            .field("height", &self.ledger.height())
            .field("devices", &self.devices.len())
            .finish_non_exhaustive()
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, WorldError> {
        Self::with_store(config, EvidenceStore::in_memory())
    }

    pub fn with_store(config: WorldConfig, store: EvidenceStore) -> Result<Self, WorldError> {
        let ledger = Arc::new(Ledger::new());
        let insurer_key = if config.org_id == DEMO_ORG {
            crate::fixtures::demo_insurer_key()
        } else {
            SigningKey::from_bytes(&derive(config.seed, &format!("insurer/{}", config.org_id)))
        };
        let org_secret = OrgSecret(derive(config.seed, &format!("org-secret/{}", config.org_id)));
        ledger.register_org(&config.org_id, insurer_key.verifying_key(), org_secret.clone())?;
        let mut escrow = EscrowService::new(
            ESCROW_SERVICE,
            SigningKey::from_bytes(&derive(config.seed, "escrow-service")),
            Arc::clone(&ledger),
            config.escrow,
            derive_u64(config.seed, "escrow-rng"),
        )?;
        escrow.register_party(INSURER_PARTY, insurer_key.verifying_key());
        Ok(Self {
            config,
            ledger,
            escrow,
            store,
            insurer_key,
            org_secret,
            revealer: Revealer::new(),
            devices: BTreeMap::new(),
            clock: 0,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn org_id(&self) -> &str {
        &self.config.org_id
    }

    pub fn clock(&self) -> LedgerTime {
        self.clock
    }

    pub fn advance_clock(&mut self, by: LedgerTime) {
        self.clock += by;
    }

    pub fn set_clock(&mut self, to: LedgerTime) -> Result<(), WorldError> {
        if to < self.clock {
            return Err(WorldError::ClockRegression { now: self.clock, to });
        }
        self.clock = to;
        Ok(())
    }

    pub fn insurer_verifying_key(&self) -> VerifyingKey {
        self.insurer_key.verifying_key()
    }

    /// Signs the table with the insurer key and appends it to the ledger.
    pub fn publish_rule_table(&mut self, table: RuleTable) -> Result<u64, WorldError> {
        let signed = table.sign(&self.insurer_key);
        Ok(self.ledger.append(Payload::RuleTable(signed), self.clock)?)
    }

    fn device_keys(&self, name: &str) -> (DeviceKeyPair, SigningKey) {
        let seed = self.config.seed;
        let id_bytes: [u8; 16] = derive(seed, &format!("device-id/{name}"))[..16].try_into().expect("16 bytes");
        let signing = SigningKey::from_bytes(&derive(seed, &format!("device-key/{name}")));
        let client = SigningKey::from_bytes(&derive(seed, &format!("client-key/{name}")));
        (DeviceKeyPair::new(DeviceId::from_bytes(id_bytes), signing), client)
    }

    fn protector_rng(&self, name: &str, next_interval: u64) -> ChaCha20Rng {
        let label = format!("device-rng/{name}/{next_interval}/{}", self.ledger.height());
        ChaCha20Rng::from_seed(derive(self.config.seed, &label))
    }

    /// Enrolls a device under `name`, which is also its party name for
    /// joint-action releases.
    pub fn enroll_device(&mut self, name: &str) -> Result<DeviceId, WorldError> {
        self.attach_device(name, 0, true)
    }

    fn attach_device(&mut self, name: &str, next_interval: u64, register: bool) -> Result<DeviceId, WorldError> {
        if self.devices.contains_key(name) {
            return Err(WorldError::State(format!("device name {name} already enrolled")));
        }
        let (keys, client_key) = self.device_keys(name);
        let id = keys.device;
        if register {
            self.ledger.enroll_device(&self.config.org_id, id, keys.verifying_key())?;
        }
        self.escrow.register_party(name, client_key.verifying_key());
        let protector = Protector::new(keys, self.protector_rng(name, next_interval));
        self.devices.insert(name.into(), Device { name: name.into(), id, next_interval, protector, client_key });
        Ok(id)
    }

    pub fn device(&self, name: &str) -> Result<&Device, WorldError> {
        self.devices.get(name).ok_or_else(|| WorldError::UnknownDevice(name.into()))
    }

    pub fn devices(&self) -> impl Iterator<Item = &Device> {
        self.devices.values()
    }

    pub fn pseudonym(&self, device: DeviceId, interval_index: u64) -> Pseudonym {
        derive_pseudonym(device, &self.org_secret, pseudonym_epoch(interval_index))
    }

    /// Assesses a log against the table the ledger says applies at its start.
    pub fn assess(&self, log: &IntervalLog) -> Result<Assessment, WorldError> {
        let table = self.ledger.resolve_rule_table(&self.config.org_id, log.start_time)?;
        let verified = table.verified(&self.insurer_key.verifying_key())?;
        Ok(assess(log, &verified)?)
    }

    pub fn release_policies(&self, device: &str) -> ReleasePolicies {
        ReleasePolicies {
            violated_rules: ReleasePolicy::TimeElapsed { release_after: self.clock + self.config.reveal_horizon },
            evidence: ReleasePolicy::JointAction { client: device.into(), insurer: INSURER_PARTY.into() },
        }
    }

    /// Protects the event, stores the evidence, appends the publication and
    /// deposits both keys with escrow.
    pub fn publish_event(&mut self, device: &str, event: &EventData) -> Result<PublishReceipt, WorldError> {
        let policies = self.release_policies(device);
        let pseudonym = self.pseudonym(self.device(device)?.id, event.interval_index);
        let ctx = PublicationContext { org_id: self.config.org_id.clone(), pseudonym };
        let dev = self.devices.get_mut(device).ok_or_else(|| WorldError::UnknownDevice(device.into()))?;
        let started = Instant::now();
        let protected = dev.protector.protect_event(event, &ctx, &policies)?;
        let encryption = started.elapsed();
        let locator = self.store.put(&protected.evidence)?;
        debug_assert_eq!(locator, protected.bundle.publication.evidence_url);
        let publication = protected.bundle.publication.clone();
        let height = self.ledger.append(Payload::Event(publication.clone()), self.clock)?;
        dev.next_interval = dev.next_interval.max(event.interval_index + 1);
        let [vr, ev] = protected.bundle.handoffs.clone();
        self.escrow.deposit_secret(protected.violated_rules_key, vr.policy, self.clock)?;
        self.escrow.deposit_secret(protected.evidence_key, ev.policy, self.clock)?;
        Ok(PublishReceipt { height, publication, evidence_size: protected.evidence.encoded_len(), encryption })
    }

    /// Client and insurer consent for one key.
    pub fn joint_authorization(&self, device: &str, key_id: &KeyId) -> Result<Vec<Authorization>, WorldError> {
        Ok(vec![self.device(device)?.authorize(key_id), Authorization::sign(INSURER_PARTY, &self.insurer_key, key_id)])
    }

    pub fn insurer_authorization(&self, key_id: &KeyId) -> Authorization {
        Authorization::sign(INSURER_PARTY, &self.insurer_key, key_id)
    }

    /// Insurer-side reveal of both components with the client's consent for
    /// the evidence. The violated-rules key opens only once its horizon passed.
    pub fn reveal_event(&mut self, device: &str, publication: &EventPublication) -> Result<RevealedEvent, WorldError> {
        let evidence_auth = self.joint_authorization(device, &self.store.get(&publication.evidence_url)?.key_id)?;
        Ok(self.revealer.reveal_event(&mut self.escrow, &self.store, publication, &[], &evidence_auth, self.clock)?)
    }

    /// Evidence only, by joint action.
    pub fn reveal_evidence(&mut self, device: &str, publication: &EventPublication) -> Result<IntervalLog, WorldError> {
        let key_id = self.store.get(&publication.evidence_url)?.key_id;
        let auth = self.joint_authorization(device, &key_id)?;
        let (_, log) = self.revealer.reveal_evidence(&mut self.escrow, &self.store, publication, &auth, self.clock)?;
        Ok(log)
    }

    pub fn reveal_violations(&mut self, publication: &EventPublication) -> Result<crate::assessment::ViolationSummary, WorldError> {
        Ok(self.revealer.reveal_violations(&mut self.escrow, publication, &[], self.clock)?)
    }

    /// The enrolled key of the device whose pseudonym this publication carries.
    pub fn resolve_device_key(&self, publication: &EventPublication) -> Option<VerifyingKey> {
        self.devices
            .values()
            .find(|d| self.pseudonym(d.id, publication.interval_index) == publication.pseudonym)
            .and_then(|d| self.ledger.device_key(&self.config.org_id, d.id))
    }

    fn table_for(&self, revealed: &RevealedEvent) -> Result<RuleTable, WorldError> {
        Ok(self.ledger.resolve_rule_table(&self.config.org_id, revealed.evidence.start_time)?)
    }

    /// Audits an already revealed event.
    pub fn audit_revealed(&self, publication: &EventPublication, revealed: &RevealedEvent) -> Result<crate::claims::AuditReport, WorldError> {
        let table = self.table_for(revealed)?;
        let device_key = self.resolve_device_key(publication);
        Ok(audit_event(publication, revealed, &table, &self.insurer_key.verifying_key(), device_key.as_ref())?)
    }

    /// Reveals and audits; an escrow denial is reported as an outcome.
    pub fn audit(&mut self, device: &str, publication: &EventPublication) -> Result<AuditOutcome, WorldError> {
        match self.reveal_event(device, publication) {
            Ok(revealed) => Ok(AuditOutcome::Completed(self.audit_revealed(publication, &revealed)?)),
            Err(WorldError::Claims(ClaimsError::Denied(d))) => Ok(AuditOutcome::Denied(d)),
            Err(e) => Err(e),
        }
    }

    /// Reveals, audits against the incident, and adjudicates.
    pub fn process_claim(&mut self, device: &str, claim: Claim) -> Result<(Claim, AuditOutcome), WorldError> {
        let publication = self
            .ledger
            .find_event(&claim.pseudonym, claim.interval_index)
            .ok_or_else(|| WorldError::State(format!("no publication for {} at {}", claim.pseudonym, claim.interval_index)))?;
        let outcome = match self.reveal_event(device, &publication) {
            Ok(revealed) => {
                let table = self.table_for(&revealed)?;
                let device_key = self.resolve_device_key(&publication);
                AuditOutcome::Completed(audit_for_claim(
                    &claim,
                    &publication,
                    &revealed,
                    &table,
                    &self.insurer_key.verifying_key(),
                    device_key.as_ref(),
                )?)
            }
            Err(WorldError::Claims(ClaimsError::Denied(d))) => AuditOutcome::Denied(d),
            Err(e) => return Err(e),
        };
        Ok((adjudicate_claim(claim, &outcome), outcome))
    }

    /// Drops stored evidence and the cached keys for a publication.
    pub fn evict(&mut self, publication: &EventPublication) -> Result<(), WorldError> {
        if let Ok(blob) = self.store.get(&publication.evidence_url) {
            self.revealer.forget(&blob.key_id);
        }
        self.revealer.forget(&publication.violated_rules.key_id);
        self.store.evict(&publication.evidence_url)?;
        Ok(())
    }

    pub fn evidence_locator(publication: &EventPublication) -> EvidenceLocator {
        publication.evidence_url
    }

    /// Writes the state directory; the evidence store must already live in
    /// `dir/evidence` (see [`World::open`]).
    pub fn save(&self, dir: &Path) -> Result<(), WorldError> {
        fs::create_dir_all(dir)?;
        let mut meta = format!(
            "seed={}\norg={}\nclock={}\nreveal_horizon={}\n",
            self.config.seed, self.config.org_id, self.clock, self.config.reveal_horizon
        );
        for d in self.devices.values() {
            meta.push_str(&format!("device={} {}\n", d.name, d.next_interval));
        }
        fs::write(dir.join("world.meta"), meta)?;
        fs::write(dir.join("ledger.dump"), self.ledger.dump())?;
        self.escrow.save(&dir.join("escrow"))?;
        let mut keys = String::new();
        let mut ids: Vec<&KeyId> = self.revealer_keys().collect();
        ids.sort();
        for id in ids {
            let k = self.revealer.key(id).expect("listed");
            keys.push_str(&format!("{} {} {}\n", k.key_id, k.purpose, hex::encode(k.material())));
        }
        fs::write(dir.join("insurer.keys"), keys)?;
        Ok(())
    }

    fn revealer_keys(&self) -> impl Iterator<Item = &KeyId> {
        self.revealer.key_ids()
    }

    /// Opens a state directory, creating a fresh world there if it holds none.
    pub fn open(dir: &Path, config: WorldConfig) -> Result<Self, WorldError> {
        fs::create_dir_all(dir)?;
        let store = EvidenceStore::open_dir(dir.join("evidence"))?;
        let meta_path = dir.join("world.meta");
        if !meta_path.exists() {
            return Self::with_store(config, store);
        }
        let meta = fs::read_to_string(meta_path)?;
        let bad = |what: &str| WorldError::State(format!("world.meta: {what}"));
        let mut config = config;
        let mut clock = 0;
        let mut devices = Vec::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            match k {
                "seed" => config.seed = v.parse().map_err(|_| bad("seed"))?,
                "org" => config.org_id = v.into(),
                "clock" => clock = v.parse().map_err(|_| bad("clock"))?,
                "reveal_horizon" => config.reveal_horizon = v.parse().map_err(|_| bad("reveal_horizon"))?,
                "device" => {
                    let (name, next) = v.split_once(' ').ok_or_else(|| bad("device"))?;
                    devices.push((name.to_owned(), next.parse::<u64>().map_err(|_| bad("device interval"))?));
                }
                _ => return Err(bad(k)),
            }
        }
        let mut world = Self::with_store(config, store)?;
        for (name, _) in &devices {
            let (keys, _) = world.device_keys(name);
            world.ledger.enroll_device(&world.config.org_id, keys.device, keys.verifying_key())?;
        }
        world.ledger.restore(&fs::read_to_string(dir.join("ledger.dump"))?)?;
        for (name, next) in devices {
            world.attach_device(&name, next, false)?;
        }
        world.escrow = EscrowService::load(
            ESCROW_SERVICE,
            SigningKey::from_bytes(&derive(world.config.seed, "escrow-service")),
            Arc::clone(&world.ledger),
            world.config.escrow,
            &dir.join("escrow"),
            derive_u64(world.config.seed, &format!("escrow-rng/{}", world.ledger.height())),
        )?;
        world.escrow.register_party(INSURER_PARTY, world.insurer_key.verifying_key());
        let names: Vec<String> = world.devices.keys().cloned().collect();
        for name in names {
            let (_, client) = world.device_keys(&name);
            world.escrow.register_party(&name, client.verifying_key());
        }
        for line in fs::read_to_string(dir.join("insurer.keys")).unwrap_or_default().lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, purpose, material] = parts[..] else { return Err(bad("insurer.keys line")) };
            let purpose = match purpose {
                "violated_rules" => KeyPurpose::ViolatedRules,
                "evidence" => KeyPurpose::Evidence,
                _ => return Err(bad("key purpose")),
            };
            let material: [u8; 32] = hex::decode(material).ok().and_then(|b| b.try_into().ok()).ok_or_else(|| bad("key material"))?;
            world.revealer.insert_key(SingleUseKey::from_parts(id.parse().map_err(|_| bad("key id"))?, purpose, material));
        }
        world.clock = clock;
        Ok(world)
    }
}
