//! Protecting an assessed interval before publication.
//!
//! The violated-rules list and the evidence log are sealed under two distinct
//! single-use AES-256-GCM keys. The risk score stays in plaintext. The device
//! then signs the on-chain publication with its enrolled key.
//!
//! Sealed blob encoding:
//!
//! ```text
//! version:u8=1 | key_id:16 | purpose:u8 | nonce:12 | tag:16 | ciphertext:varint-len bytes
//! ```
//!
//! The AEAD associated data is `key_id || purpose`. Violated-rules plaintext
//! is `len:u32 | summary | zero padding` to a multiple of
//! [`VIOLATION_PAD_BLOCK`] bytes, so its ciphertext length only reveals a
//! coarse size class.

use std::collections::HashSet;
use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use thiserror::Error;
use zeroize::Zeroize;

use crate::assessment::{EventData, ViolationSummary};
use crate::codec::{DecodeError, Reader, Writer};
use crate::escrow::ReleasePolicy;
use crate::evidence::EvidenceLocator;
use crate::ledger::{EventPublication, Pseudonym};
use crate::telemetry::{serialize_log, DeviceId};

pub const VIOLATION_PAD_BLOCK: usize = 256;
const BLOB_VERSION: u8 = 1;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
/// Upper bound on encoded blob size minus plaintext size.
pub const MAX_BLOB_OVERHEAD: usize = 1 + 16 + 1 + NONCE_LEN + TAG_LEN + 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtectionError {
    #[error("key {0} was already used")]
    KeyReuse(KeyId),
    #[error("blob sealed under key {blob} ({blob_purpose}), got key {key} ({key_purpose})")]
    KeyMismatch { blob: KeyId, blob_purpose: KeyPurpose, key: KeyId, key_purpose: KeyPurpose },
    #[error("integrity check failed for blob under key {0}")]
    Integrity(KeyId),
    #[error("event belongs to device {event}, keys to {keys}")]
    DeviceMismatch { event: DeviceId, keys: DeviceId },
    #[error("malformed blob: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyPurpose {
    ViolatedRules,
    Evidence,
}

impl KeyPurpose {
    pub(crate) fn tag(self) -> u8 {
        match self {
            KeyPurpose::ViolatedRules => 0,
            KeyPurpose::Evidence => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(KeyPurpose::ViolatedRules),
            1 => Ok(KeyPurpose::Evidence),
            tag => Err(DecodeError::UnknownTag { what: "key purpose", tag }),
        }
    }
}

impl fmt::Display for KeyPurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyPurpose::ViolatedRules => "violated_rules",
            KeyPurpose::Evidence => "evidence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 16]);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl std::str::FromStr for KeyId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        bytes.try_into().map(KeyId).map_err(|_| "key id is 16 bytes".to_string())
    }
}

/// A 256-bit symmetric key used for exactly one blob. Material is wiped on drop.
#[derive(Clone, PartialEq, Eq)]
pub struct SingleUseKey {
    pub key_id: KeyId,
    pub purpose: KeyPurpose,
    material: [u8; 32],
}

impl SingleUseKey {
    pub fn from_parts(key_id: KeyId, purpose: KeyPurpose, material: [u8; 32]) -> Self {
        Self { key_id, purpose, material }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, purpose: KeyPurpose) -> Self {
        let mut key_id = [0u8; 16];
        let mut material = [0u8; 32];
        rng.fill_bytes(&mut key_id);
        rng.fill_bytes(&mut material);
        Self { key_id: KeyId(key_id), purpose, material }
    }

    pub fn material(&self) -> &[u8; 32] {
        &self.material
    }
}

impl Drop for SingleUseKey {
    fn drop(&mut self) {
        self.material.zeroize();
    }
}

impl fmt::Debug for SingleUseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SingleUseKey").field("key_id", &self.key_id).field("purpose", &self.purpose).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectedBlob {
    pub key_id: KeyId,
    pub purpose: KeyPurpose,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

impl ProtectedBlob {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.ciphertext.len() + MAX_BLOB_OVERHEAD);
        w.u8(BLOB_VERSION)
            .raw(&self.key_id.0)
            .u8(self.purpose.tag())
            .raw(&self.nonce)
            .raw(&self.tag)
            .bytes(&self.ciphertext);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let blob = Self::read(&mut r)?;
        r.finish()?;
        Ok(blob)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            BLOB_VERSION => {}
            v => return Err(DecodeError::Version(v)),
        }
        Ok(Self {
            key_id: KeyId(r.array()?),
            purpose: KeyPurpose::from_tag(r.u8()?)?,
            nonce: r.array()?,
            tag: r.array()?,
            ciphertext: r.bytes()?.to_vec(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }
}

fn aad(key_id: KeyId, purpose: KeyPurpose) -> [u8; 17] {
    let mut out = [0u8; 17];
    out[..16].copy_from_slice(&key_id.0);
    out[16] = purpose.tag();
    out
}

/// Seals with an explicit nonce. The same key, nonce and plaintext always
/// produce the same blob, which is what lets an auditor check that a revealed
/// plaintext is the one that was published.
pub fn seal_with_nonce(key: &SingleUseKey, nonce: [u8; NONCE_LEN], plaintext: &[u8]) -> ProtectedBlob {
    let cipher = Aes256Gcm::new_from_slice(key.material()).expect("32-byte key");
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), &aad(key.key_id, key.purpose), &mut buf)
        .expect("plaintext within AES-GCM limits");
    ProtectedBlob { key_id: key.key_id, purpose: key.purpose, nonce, tag: tag.into(), ciphertext: buf }
}

pub fn seal<R: RngCore + CryptoRng>(rng: &mut R, key: &SingleUseKey, plaintext: &[u8]) -> ProtectedBlob {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    seal_with_nonce(key, nonce, plaintext)
}

pub fn decrypt_blob(blob: &ProtectedBlob, key: &SingleUseKey) -> Result<Vec<u8>, ProtectionError> {
    if blob.key_id != key.key_id || blob.purpose != key.purpose {
        return Err(ProtectionError::KeyMismatch {
            blob: blob.key_id,
            blob_purpose: blob.purpose,
            key: key.key_id,
            key_purpose: key.purpose,
        });
    }
    let cipher = Aes256Gcm::new_from_slice(key.material()).expect("32-byte key");
    let mut buf = blob.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&blob.nonce),
            &aad(blob.key_id, blob.purpose),
            &mut buf,
            Tag::from_slice(&blob.tag),
        )
        .map_err(|_| ProtectionError::Integrity(blob.key_id))?;
    Ok(buf)
}

pub fn pad_violations(summary: &ViolationSummary) -> Vec<u8> {
    let body = summary.encode();
    let mut out = Vec::with_capacity(body.len() + 4 + VIOLATION_PAD_BLOCK);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    let padded = out.len().div_ceil(VIOLATION_PAD_BLOCK) * VIOLATION_PAD_BLOCK;
    out.resize(padded, 0);
    out
}

pub fn unpad_violations(bytes: &[u8]) -> Result<ViolationSummary, DecodeError> {
    if !bytes.len().is_multiple_of(VIOLATION_PAD_BLOCK) {
        return Err(DecodeError::Invalid("violations plaintext not block-padded".into()));
    }
    let mut r = Reader::new(bytes);
    let len = r.u32()? as usize;
    let body = r.take(len)?;
    if r.take(r.remaining())?.iter().any(|&b| b != 0) {
        return Err(DecodeError::Invalid("non-zero padding".into()));
    }
    ViolationSummary::decode(body)
}

pub struct DeviceKeyPair {
    pub device: DeviceId,
    signing: SigningKey,
}

impl DeviceKeyPair {
    pub fn new(device: DeviceId, signing: SigningKey) -> Self {
        Self { device, signing }
    }

    pub fn generate<R: RngCore + CryptoRng>(device: DeviceId, rng: &mut R) -> Self {
        Self { device, signing: SigningKey::generate(rng) }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }
}

impl fmt::Debug for DeviceKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceKeyPair")
            .field("device", &self.device)
            .field("verifying_key", &hex::encode(self.verifying_key().as_bytes()))
            .finish()
    }
}

pub fn sign_contribution(bytes: &[u8], keys: &DeviceKeyPair) -> Signature {
    keys.signing.sign(bytes)
}

pub fn verify_contribution(bytes: &[u8], signature: &Signature, key: &VerifyingKey) -> bool {
    key.verify(bytes, signature).is_ok()
}

/// Where and under which org a publication goes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicationContext {
    pub org_id: String,
    pub pseudonym: Pseudonym,
}

/// Release policy per sealed component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleasePolicies {
    pub violated_rules: ReleasePolicy,
    pub evidence: ReleasePolicy,
}

/// Tells escrow which key goes under which policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyHandoff {
    pub key_id: KeyId,
    pub purpose: KeyPurpose,
    pub policy: ReleasePolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublishBundle {
    pub publication: EventPublication,
    pub handoffs: [KeyHandoff; 2],
}

/// Everything protect_event hands back: the signed bundle, the evidence blob
/// for off-chain storage, and the two keys destined for escrow.
#[derive(Debug)]
pub struct ProtectedEvent {
    pub bundle: PublishBundle,
    pub evidence: ProtectedBlob,
    pub violated_rules_key: SingleUseKey,
    pub evidence_key: SingleUseKey,
}

/// Device-side publisher. Owns the device signing key and an exclusive
/// randomness source, and remembers every key id it has put into a bundle.
pub struct Protector<R> {
    keys: DeviceKeyPair,
    rng: R,
    used: HashSet<KeyId>,
}

impl<R: RngCore + CryptoRng> Protector<R> {
    pub fn new(keys: DeviceKeyPair, rng: R) -> Self {
        Self { keys, rng, used: HashSet::new() }
    }

    pub fn keys(&self) -> &DeviceKeyPair {
        &self.keys
    }

    pub fn device(&self) -> DeviceId {
        self.keys.device
    }

    pub fn fresh_key(&mut self, purpose: KeyPurpose) -> SingleUseKey {
        loop {
            let key = SingleUseKey::generate(&mut self.rng, purpose);
            if !self.used.contains(&key.key_id) {
                return key;
            }
        }
    }

    pub fn protect_event(
        &mut self,
        event: &EventData,
        ctx: &PublicationContext,
        policies: &ReleasePolicies,
    ) -> Result<ProtectedEvent, ProtectionError> {
        let vk = self.fresh_key(KeyPurpose::ViolatedRules);
        let ek = self.fresh_key(KeyPurpose::Evidence);
        self.protect_with_keys(event, ctx, policies, vk, ek)
    }

    /// Like [`Self::protect_event`] with caller-supplied keys. Rejects keys
    /// already used by this device and a pair sharing an id or material.
    pub fn protect_with_keys(
        &mut self,
        event: &EventData,
        ctx: &PublicationContext,
        policies: &ReleasePolicies,
        violated_rules_key: SingleUseKey,
        evidence_key: SingleUseKey,
    ) -> Result<ProtectedEvent, ProtectionError> {
        if event.device != self.keys.device {
            return Err(ProtectionError::DeviceMismatch { event: event.device, keys: self.keys.device });
        }
        for key in [&violated_rules_key, &evidence_key] {
            if self.used.contains(&key.key_id) {
                return Err(ProtectionError::KeyReuse(key.key_id));
            }
        }
        if violated_rules_key.key_id == evidence_key.key_id || violated_rules_key.material() == evidence_key.material() {
            return Err(ProtectionError::KeyReuse(evidence_key.key_id));
        }
        let wrong_purpose = |key: &SingleUseKey, purpose| ProtectionError::KeyMismatch {
            blob: key.key_id,
            blob_purpose: purpose,
            key: key.key_id,
            key_purpose: key.purpose,
        };
        if violated_rules_key.purpose != KeyPurpose::ViolatedRules {
            return Err(wrong_purpose(&violated_rules_key, KeyPurpose::ViolatedRules));
        }
        if evidence_key.purpose != KeyPurpose::Evidence {
            return Err(wrong_purpose(&evidence_key, KeyPurpose::Evidence));
        }

        let violations = seal(&mut self.rng, &violated_rules_key, &pad_violations(&event.violation_summary()));
        let evidence = seal(&mut self.rng, &evidence_key, &serialize_log(&event.evidence));
        let mut publication = EventPublication {
            pseudonym: ctx.pseudonym,
            org_id: ctx.org_id.clone(),
            interval_index: event.interval_index,
            risk_score: event.risk_score,
            violated_rules: violations,
            evidence_url: EvidenceLocator::for_blob(&evidence),
            signature: Signature::from_bytes(&[0; 64]),
        };
        publication.signature = sign_contribution(&publication.signed_bytes(), &self.keys);

        self.used.insert(violated_rules_key.key_id);
        self.used.insert(evidence_key.key_id);
        Ok(ProtectedEvent {
            bundle: PublishBundle {
                handoffs: [
                    KeyHandoff {
                        key_id: violated_rules_key.key_id,
                        purpose: KeyPurpose::ViolatedRules,
                        policy: policies.violated_rules.clone(),
                    },
                    KeyHandoff {
                        key_id: evidence_key.key_id,
                        purpose: KeyPurpose::Evidence,
                        policy: policies.evidence.clone(),
                    },
                ],
                publication,
            },
            evidence,
            violated_rules_key,
            evidence_key,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::{RuleTally, ViolationRecord};
    use crate::telemetry::{deserialize_log, IntervalLog, SamplePoint, Value};
    use crate::time::Timestamp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn protector(seed: u64) -> Protector<ChaCha20Rng> {
        let mut r = rng(seed);
        let keys = DeviceKeyPair::generate(DeviceId::from_bytes([1; 16]), &mut r);
        Protector::new(keys, r)
    }

    fn ctx() -> PublicationContext {
        PublicationContext { org_id: "CompanyOne".into(), pseudonym: Pseudonym([9; 32]) }
    }

    fn policies() -> ReleasePolicies {
        ReleasePolicies {
            violated_rules: ReleasePolicy::TimeElapsed { release_after: 100 },
            evidence: ReleasePolicy::JointAction { client: "client".into(), insurer: "insurer".into() },
        }
    }

    fn event(violations: Vec<ViolationRecord>) -> EventData {
        let mut log = IntervalLog::new(DeviceId::from_bytes([1; 16]), 7, Timestamp(0), 300);
        log.append_sample(SamplePoint::new("Velocity", Value::Float(34.0), Timestamp(100))).unwrap();
        EventData {
            device: log.device,
            interval_index: 7,
            risk_score: violations.iter().map(|v| v.penalty).sum(),
            violations,
            evidence: log,
        }
    }

    fn speeding() -> Vec<ViolationRecord> {
        vec![ViolationRecord { rule_id: "R2".into(), timestamp: Timestamp(100), observed: Value::Float(34.0), penalty: 40.0 }]
    }

    #[test]
    fn round_trip_both_blobs() {
        let mut p = protector(1);
        let ev = event(speeding());
        let out = p.protect_event(&ev, &ctx(), &policies()).unwrap();
        let pubn = &out.bundle.publication;
        assert_eq!(pubn.risk_score, 40.0);
        let v = decrypt_blob(&pubn.violated_rules, &out.violated_rules_key).unwrap();
        assert_eq!(unpad_violations(&v).unwrap(), ev.violation_summary());
        let e = decrypt_blob(&out.evidence, &out.evidence_key).unwrap();
        assert_eq!(deserialize_log(&e).unwrap(), ev.evidence);
        assert_eq!(pubn.evidence_url, EvidenceLocator::for_blob(&out.evidence));
        assert!(verify_contribution(&pubn.signed_bytes(), &pubn.signature, &p.keys().verifying_key()));
        assert_ne!(out.violated_rules_key.key_id, out.evidence_key.key_id);
        assert_eq!(out.bundle.handoffs[0].key_id, out.violated_rules_key.key_id);
        assert_eq!(out.bundle.handoffs[1].policy, policies().evidence);
    }

    #[test]
    fn empty_violations_still_publish_a_padded_blob() {
        let mut p = protector(2);
        let out = p.protect_event(&event(vec![]), &ctx(), &policies()).unwrap();
        let blob = &out.bundle.publication.violated_rules;
        assert_eq!(blob.ciphertext.len(), VIOLATION_PAD_BLOCK);
        let plain = decrypt_blob(blob, &out.violated_rules_key).unwrap();
        assert!(unpad_violations(&plain).unwrap().is_empty());
    }

    #[test]
    fn tamper_and_key_guards() {
        let mut p = protector(3);
        let out = p.protect_event(&event(speeding()), &ctx(), &policies()).unwrap();
        let mut bad = out.evidence.clone();
        bad.ciphertext[0] ^= 0x01;
        assert_eq!(decrypt_blob(&bad, &out.evidence_key), Err(ProtectionError::Integrity(bad.key_id)));
        let mut bad_tag = out.evidence.clone();
        bad_tag.tag[3] ^= 0x80;
        assert!(matches!(decrypt_blob(&bad_tag, &out.evidence_key), Err(ProtectionError::Integrity(_))));
        assert!(matches!(
            decrypt_blob(&out.evidence, &out.violated_rules_key),
            Err(ProtectionError::KeyMismatch { .. })
        ));
    }

    #[test]
    fn rejects_reused_keys() {
        let mut p = protector(4);
        let ev = event(speeding());
        let vk = p.fresh_key(KeyPurpose::ViolatedRules);
        let ek = p.fresh_key(KeyPurpose::Evidence);
        let (vk2, ek2) = (vk.clone(), ek.clone());
        p.protect_with_keys(&ev, &ctx(), &policies(), vk, ek).unwrap();
        assert!(matches!(
            p.protect_with_keys(&ev, &ctx(), &policies(), vk2, ek2),
            Err(ProtectionError::KeyReuse(_))
        ));
        let vk = p.fresh_key(KeyPurpose::ViolatedRules);
        let same = SingleUseKey::from_parts(vk.key_id, KeyPurpose::Evidence, *vk.material());
        assert!(matches!(p.protect_with_keys(&ev, &ctx(), &policies(), vk, same), Err(ProtectionError::KeyReuse(_))));
    }

    #[test]
    fn signatures() {
        let a = protector(5);
        let b = protector(6);
        let sig = sign_contribution(b"bundle", a.keys());
        assert!(verify_contribution(b"bundle", &sig, &a.keys().verifying_key()));
        assert!(!verify_contribution(b"bundle", &sig, &b.keys().verifying_key()));
        assert!(!verify_contribution(b"bundlf", &sig, &a.keys().verifying_key()));
    }

    #[test]
    fn keys_never_repeat() {
        let mut p = protector(7);
        let mut ids = HashSet::new();
        let mut materials = HashSet::new();
        for i in 0..500u64 {
            let mut ev = event(speeding());
            ev.interval_index = i;
            let out = p.protect_event(&ev, &ctx(), &policies()).unwrap();
            for k in [&out.violated_rules_key, &out.evidence_key] {
                assert!(ids.insert(k.key_id));
                assert!(materials.insert(*k.material()));
            }
        }
    }

    #[test]
    fn ciphertext_length_depends_only_on_plaintext_length() {
        let mut r = rng(8);
        let k = SingleUseKey::generate(&mut r, KeyPurpose::Evidence);
        let a = seal(&mut r, &k, &[0u8; 333]);
        let b = seal(&mut r, &k, &[0xffu8; 333]);
        assert_eq!(a.encode().len(), b.encode().len());

        let few = ViolationSummary { tallies: vec![RuleTally { rule_id: "R1".into(), firings: 1, penalty: 5.0 }] };
        let many = ViolationSummary {
            tallies: (0..4).map(|i| RuleTally { rule_id: format!("R{i}"), firings: 900, penalty: 1e4 }).collect(),
        };
        assert_eq!(pad_violations(&few).len(), pad_violations(&many).len());
        assert_eq!(pad_violations(&ViolationSummary::default()).len(), VIOLATION_PAD_BLOCK);
    }

    #[test]
    fn blob_overhead_is_bounded() {
        let mut r = rng(9);
        let k = SingleUseKey::generate(&mut r, KeyPurpose::Evidence);
        for n in [0usize, 1, 127, 128, 40_000, 70_000] {
            let blob = seal(&mut r, &k, &vec![7u8; n]);
            assert!(blob.encoded_len() <= n + MAX_BLOB_OVERHEAD);
            assert_eq!(ProtectedBlob::decode(&blob.encode()).unwrap(), blob);
        }
    }

    #[test]
    fn unpad_rejects_garbage() {
        let mut bytes = pad_violations(&ViolationSummary::default());
        *bytes.last_mut().unwrap() = 1;
        assert!(unpad_violations(&bytes).is_err());
        assert!(unpad_violations(&[0; 10]).is_err());
    }
}
