//! The reference rule table and log shipped with the crate, and the demo
//! insurer key that signs the table.

use ed25519_dalek::SigningKey;
use sha2::{Digest, Sha256};

use crate::rules::{parse_rule_table, RuleTable};
use crate::telemetry::{log_from_text, IntervalLog};

pub const DEMO_ORG: &str = "CompanyOne";
pub const TABLE1_RULES: &str = include_str!("../fixtures/table1.rules");
pub const TABLE2_LOG: &str = include_str!("../fixtures/table2.log");

/// Deterministic demo key. Not secret: anyone can derive it.
pub fn demo_insurer_key() -> SigningKey {
    SigningKey::from_bytes(&Sha256::digest(b"sai demo insurer key: CompanyOne").into())
}

pub fn table1() -> RuleTable {
    parse_rule_table(TABLE1_RULES).expect("bundled table parses")
}

pub fn table2() -> IntervalLog {
    log_from_text(TABLE2_LOG).expect("bundled log parses")
}
