//! Privacy-preserving telematic insurance at desk scale.
//!
//! Devices log sensor series, score each interval locally against an
//! insurer-signed rule table, and publish the plaintext score together with
//! an encrypted violated-rules list and a locator for encrypted evidence. The
//! two single-use keys are escrowed with a threshold committee and released
//! only after a time horizon or on joint client/insurer authorization, which
//! is what claims and audits rely on.

pub mod assessment;
pub mod claims;
pub mod codec;
pub mod escrow;
pub mod evidence;
pub mod fixtures;
pub mod game;
pub mod harness;
pub mod ledger;
pub mod protection;
pub mod rules;
pub mod telemetry;
pub mod time;
pub mod world;

pub use assessment::{risk_assessment, EventData, ViolationRecord, ViolationSummary};
pub use rules::{parse_rule_table, RuleTable};
pub use telemetry::{DeviceId, IntervalLog, SamplePoint, Value};
pub use time::Timestamp;
