//! Revealing protected publications, auditing them by recomputation, and
//! adjudicating claims on the result.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use ed25519_dalek::VerifyingKey;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assessment::{assess_unverified, AssessmentError, RuleTally, ViolationSummary};
use crate::codec::DecodeError;
use crate::escrow::{Authorization, Denial, EscrowError, EscrowService, Release};
use crate::evidence::{EvidenceError, EvidenceLocator, EvidenceStore};
use crate::ledger::{EventPublication, LedgerTime, Pseudonym};
use crate::protection::{
    decrypt_blob, pad_violations, seal_with_nonce, unpad_violations, verify_contribution, KeyId, KeyPurpose, ProtectedBlob,
    ProtectionError, SingleUseKey,
};
use crate::rules::RuleTable;
use crate::telemetry::{deserialize_log, serialize_log, IntervalLog, SamplePoint, TelemetryError};

#[derive(Debug, Error)]
pub enum ClaimsError {
    #[error("release denied: {0}")]
    Denied(Denial),
    #[error("escrow: {0}")]
    Escrow(EscrowError),
    #[error("key {0} was released earlier and is not cached here")]
    KeyUnavailable(KeyId),
    #[error("blob under {key} is sealed for {actual}, not {requested}")]
    WrongTarget { key: KeyId, requested: KeyPurpose, actual: KeyPurpose },
    #[error(transparent)]
    Protection(#[from] ProtectionError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("revealed evidence is not a log: {0}")]
    Telemetry(#[from] TelemetryError),
    #[error("revealed violations are malformed: {0}")]
    Decode(#[from] DecodeError),
}

impl From<EscrowError> for ClaimsError {
    fn from(e: EscrowError) -> Self {
        match e {
            EscrowError::Denied(d) => ClaimsError::Denied(d),
            other => ClaimsError::Escrow(other),
        }
    }
}

/// Obtains keys from escrow on behalf of one party and keeps the ones it
/// received, since escrow hands each key out only once.
#[derive(Default)]
pub struct Revealer {
    keys: HashMap<KeyId, SingleUseKey>,
}

impl fmt::Debug for Revealer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Revealer").field("keys", &self.keys.len()).finish()
    }
}

impl Revealer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(&self, key_id: &KeyId) -> Option<&SingleUseKey> {
        self.keys.get(key_id)
    }

    pub fn insert_key(&mut self, key: SingleUseKey) {
        self.keys.insert(key.key_id, key);
    }

    pub fn key_ids(&self) -> impl Iterator<Item = &KeyId> {
        self.keys.keys()
    }

    pub fn forget(&mut self, key_id: &KeyId) {
        self.keys.remove(key_id);
    }

    pub fn obtain_key(
        &mut self,
        escrow: &mut EscrowService,
        key_id: &KeyId,
        credentials: &[Authorization],
        now: LedgerTime,
    ) -> Result<&SingleUseKey, ClaimsError> {
        if !self.keys.contains_key(key_id) {
            match escrow.request_release(key_id, credentials, now)? {
                Release::Key(k) => {
                    self.keys.insert(*key_id, k);
                }
                Release::AlreadyReleased(_) => return Err(ClaimsError::KeyUnavailable(*key_id)),
            }
        }
        Ok(&self.keys[key_id])
    }

    /// Decrypts one sealed component. Nothing is returned unless escrow
    /// releases the key for exactly this blob.
    pub fn reveal_protected(
        &mut self,
        escrow: &mut EscrowService,
        blob: &ProtectedBlob,
        which: KeyPurpose,
        credentials: &[Authorization],
        now: LedgerTime,
    ) -> Result<Vec<u8>, ClaimsError> {
        if blob.purpose != which {
            return Err(ClaimsError::WrongTarget { key: blob.key_id, requested: which, actual: blob.purpose });
        }
        let key = self.obtain_key(escrow, &blob.key_id, credentials, now)?;
        Ok(decrypt_blob(blob, key)?)
    }

    pub fn reveal_violations(
        &mut self,
        escrow: &mut EscrowService,
        publication: &EventPublication,
        credentials: &[Authorization],
        now: LedgerTime,
    ) -> Result<ViolationSummary, ClaimsError> {
        let plain = self.reveal_protected(escrow, &publication.violated_rules, KeyPurpose::ViolatedRules, credentials, now)?;
        Ok(unpad_violations(&plain)?)
    }

    /// Fetches the evidence blob named by the publication and decrypts it.
    pub fn reveal_evidence(
        &mut self,
        escrow: &mut EscrowService,
        store: &EvidenceStore,
        publication: &EventPublication,
        credentials: &[Authorization],
        now: LedgerTime,
    ) -> Result<(ProtectedBlob, IntervalLog), ClaimsError> {
        let blob = store.get(&publication.evidence_url)?;
        let plain = self.reveal_protected(escrow, &blob, KeyPurpose::Evidence, credentials, now)?;
        Ok((blob, deserialize_log(&plain)?))
    }

    /// Reveals both components and bundles them with their keys for audit.
    pub fn reveal_event(
        &mut self,
        escrow: &mut EscrowService,
        store: &EvidenceStore,
        publication: &EventPublication,
        violation_credentials: &[Authorization],
        evidence_credentials: &[Authorization],
        now: LedgerTime,
    ) -> Result<RevealedEvent, ClaimsError> {
        let violations = self.reveal_violations(escrow, publication, violation_credentials, now)?;
        let (evidence_blob, evidence) = self.reveal_evidence(escrow, store, publication, evidence_credentials, now)?;
        Ok(RevealedEvent {
            violations,
            evidence,
            evidence_nonce: evidence_blob.nonce,
            violated_rules_key: self.keys[&publication.violated_rules.key_id].clone(),
            evidence_key: self.keys[&evidence_blob.key_id].clone(),
        })
    }
}

/// Plaintext of both sealed components plus the keys that opened them.
#[derive(Debug, Clone)]
pub struct RevealedEvent {
    pub violations: ViolationSummary,
    pub evidence: IntervalLog,
    pub evidence_nonce: [u8; 12],
    pub violated_rules_key: SingleUseKey,
    pub evidence_key: SingleUseKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignatureChecks {
    pub device: bool,
    pub rule_table: bool,
}

impl SignatureChecks {
    pub fn all_valid(&self) -> bool {
        self.device && self.rule_table
    }
}

/// Whether each revealed plaintext re-seals to exactly what was published.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bindings {
    pub violations: bool,
    pub evidence: bool,
    pub interval: bool,
}

impl Bindings {
    pub fn all(&self) -> bool {
        self.violations && self.evidence && self.interval
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub rule_id: String,
    pub published: Option<RuleTally>,
    pub recomputed: Option<RuleTally>,
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |t: &Option<RuleTally>| t.as_ref().map_or("none".to_string(), |t| format!("{}x/{}", t.firings, t.penalty));
        write!(f, "{} published={} recomputed={}", self.rule_id, show(&self.published), show(&self.recomputed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub pseudonym: Pseudonym,
    pub interval_index: u64,
    pub recomputed_score: f64,
    pub published_score: f64,
    pub discrepancies: Vec<Discrepancy>,
    pub signatures: SignatureChecks,
    pub bindings: Bindings,
    /// Set by claim audits: whether the evidence contains every incident point.
    pub substantiated: Option<bool>,
    pub matched: bool,
}

impl AuditReport {
    /// `key=value` lines, then one `discrepancy=` line per rule.
    pub fn to_lines(&self) -> String {
        let mut out = format!(
            "pseudonym={}\ninterval={}\npublished_score={}\nrecomputed_score={}\ndevice_signature={}\nrule_table_signature={}\nviolations_bound={}\nevidence_bound={}\n",
            self.pseudonym,
            self.interval_index,
            self.published_score,
            self.recomputed_score,
            self.signatures.device,
            self.signatures.rule_table,
            self.bindings.violations,
            self.bindings.evidence,
        );
        if let Some(s) = self.substantiated {
            out.push_str(&format!("substantiated={s}\n"));
        }
        for d in &self.discrepancies {
            out.push_str(&format!("discrepancy={d}\n"));
        }
        out.push_str(&format!("match={}\n", self.matched));
        out
    }
}

fn tally_diff(published: &ViolationSummary, recomputed: &ViolationSummary) -> Vec<Discrepancy> {
    let ids: BTreeSet<&str> = published.tallies.iter().chain(&recomputed.tallies).map(|t| t.rule_id.as_str()).collect();
    ids.into_iter()
        .filter_map(|id| {
            let (p, r) = (published.get(id), recomputed.get(id));
            (p != r).then(|| Discrepancy { rule_id: id.into(), published: p.cloned(), recomputed: r.cloned() })
        })
        .collect()
}

/// Recomputes the assessment from revealed evidence and compares it with
/// the publication. `device_key` is the key enrolled for the device the
/// pseudonym resolves to, if any. `matched` requires equal scores, equal per-rule tallies,
/// valid device and table signatures, and both plaintexts re-sealing to the
/// published bytes.
pub fn audit_event(
    publication: &EventPublication,
    revealed: &RevealedEvent,
    table: &RuleTable,
    org_key: &VerifyingKey,
    device_key: Option<&VerifyingKey>,
) -> Result<AuditReport, AssessmentError> {
    let signatures = SignatureChecks {
        device: device_key.is_some_and(|k| verify_contribution(&publication.signed_bytes(), &publication.signature, k)),
        rule_table: table.verify(org_key) && table.org_id == publication.org_id,
    };

    let resealed_violations =
        seal_with_nonce(&revealed.violated_rules_key, publication.violated_rules.nonce, &pad_violations(&revealed.violations));
    let resealed_evidence = seal_with_nonce(&revealed.evidence_key, revealed.evidence_nonce, &serialize_log(&revealed.evidence));
    let bindings = Bindings {
        violations: resealed_violations == publication.violated_rules,
        evidence: EvidenceLocator::for_blob(&resealed_evidence) == publication.evidence_url,
        interval: revealed.evidence.interval_index == publication.interval_index,
    };

    let recomputed = assess_unverified(&revealed.evidence, table)?.event;
    let discrepancies = tally_diff(&revealed.violations, &recomputed.violation_summary());
    let scores_equal = recomputed.risk_score.to_bits() == publication.risk_score.to_bits();
    Ok(AuditReport {
        pseudonym: publication.pseudonym,
        interval_index: publication.interval_index,
        recomputed_score: recomputed.risk_score,
        published_score: publication.risk_score,
        matched: scores_equal && discrepancies.is_empty() && signatures.all_valid() && bindings.all(),
        discrepancies,
        signatures,
        bindings,
        substantiated: None,
    })
}

/// User-supplied media. Only its digest is kept; it never enters recomputation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub name: String,
    pub sha256: [u8; 32],
    pub size: usize,
}

impl Attachment {
    pub fn new(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self { name: name.into(), sha256: Sha256::digest(bytes).into(), size: bytes.len() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidentReport {
    pub description: String,
    /// Logged points describing the circumstances of the incident.
    pub circumstances: Vec<SamplePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionReason {
    AuditMismatch,
    SignatureFailure,
    PolicyUnsatisfied,
}

impl RejectionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectionReason::AuditMismatch => "audit_mismatch",
            RejectionReason::SignatureFailure => "signature_failure",
            RejectionReason::PolicyUnsatisfied => "policy_unsatisfied",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimStatus {
    Pending,
    Accepted,
    Rejected(RejectionReason),
}

impl fmt::Display for ClaimStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClaimStatus::Pending => f.write_str("pending"),
            ClaimStatus::Accepted => f.write_str("accepted"),
            ClaimStatus::Rejected(r) => write!(f, "rejected({})", r.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    pub claim_id: String,
    pub pseudonym: Pseudonym,
    pub interval_index: u64,
    pub incident: IncidentReport,
    pub supplementary: Vec<Attachment>,
    pub status: ClaimStatus,
}

impl Claim {
    pub fn new(claim_id: impl Into<String>, pseudonym: Pseudonym, interval_index: u64, incident: IncidentReport) -> Self {
        Self { claim_id: claim_id.into(), pseudonym, interval_index, incident, supplementary: Vec::new(), status: ClaimStatus::Pending }
    }

    pub fn to_line(&self) -> String {
        format!(
            "claim={} pseudonym={} interval={} attachments={} status={}",
            self.claim_id,
            self.pseudonym,
            self.interval_index,
            self.supplementary.len(),
            self.status
        )
    }
}

/// What the insurer learned when trying to audit a claim.
#[derive(Debug, Clone, PartialEq)]
pub enum AuditOutcome {
    Completed(AuditReport),
    Denied(Denial),
}

/// [`audit_event`] plus the incident check: every circumstance point of the
/// claim must appear verbatim in the revealed evidence.
pub fn audit_for_claim(
    claim: &Claim,
    publication: &EventPublication,
    revealed: &RevealedEvent,
    table: &RuleTable,
    org_key: &VerifyingKey,
    device_key: Option<&VerifyingKey>,
) -> Result<AuditReport, AssessmentError> {
    let mut report = audit_event(publication, revealed, table, org_key, device_key)?;
    let points = revealed.evidence.points();
    let substantiated = claim.pseudonym == publication.pseudonym
        && claim.interval_index == publication.interval_index
        && claim.incident.circumstances.iter().all(|c| points.contains(c));
    report.substantiated = Some(substantiated);
    report.matched &= substantiated;
    Ok(report)
}

/// Terminal decision on a pending claim. Claims already decided are returned unchanged.
pub fn adjudicate_claim(mut claim: Claim, outcome: &AuditOutcome) -> Claim {
    if claim.status != ClaimStatus::Pending {
        return claim;
    }
    claim.status = match outcome {
        AuditOutcome::Denied(_) => ClaimStatus::Rejected(RejectionReason::PolicyUnsatisfied),
        AuditOutcome::Completed(r) if !r.signatures.all_valid() => ClaimStatus::Rejected(RejectionReason::SignatureFailure),
        AuditOutcome::Completed(r) if !r.matched => ClaimStatus::Rejected(RejectionReason::AuditMismatch),
        AuditOutcome::Completed(_) => ClaimStatus::Accepted,
    };
    claim
}
