//! The local risk assessment: fold an interval log through a verified rule
//! table.
//!
//! Every point is checked against every rule on its series and each firing
//! contributes its own penalty, so repeated firings of one rule all count. A
//! predicate that holds with a zero penalty (a velocity of exactly 30 under
//! `value >= 30 | +10*(value-30)`) is still recorded as a violation.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::rules::{RuleTable, VerifiedRuleTable};
use crate::telemetry::{DataType, DeviceId, IntervalLog, Value};
use crate::time::Timestamp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssessmentError {
    #[error("series {field} is logged as {logged} but rule {rule_id} expects {expected}")]
    TypeMismatch { field: String, rule_id: String, logged: DataType, expected: DataType },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationRecord {
    pub rule_id: String,
    pub timestamp: Timestamp,
    pub observed: Value,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventData {
    pub device: DeviceId,
    pub interval_index: u64,
    pub risk_score: f64,
    pub violations: Vec<ViolationRecord>,
    pub evidence: IntervalLog,
}

impl EventData {
    pub fn violation_summary(&self) -> ViolationSummary {
        ViolationSummary::from_records(&self.violations)
    }
}

/// Per-rule tally of the firings in one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTally {
    pub rule_id: String,
    pub firings: u32,
    pub penalty: f64,
}

/// The violated-rules list as published: one tally per fired rule, ordered
/// by rule id. Point-level detail stays in the evidence log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViolationSummary {
    pub tallies: Vec<RuleTally>,
}

const SUMMARY_VERSION: u8 = 1;

impl ViolationSummary {
    pub fn from_records(records: &[ViolationRecord]) -> Self {
        let mut by_rule: BTreeMap<&str, RuleTally> = BTreeMap::new();
        for v in records {
            let t = by_rule.entry(&v.rule_id).or_insert_with(|| RuleTally {
                rule_id: v.rule_id.clone(),
                firings: 0,
                penalty: 0.0,
            });
            t.firings += 1;
            t.penalty += v.penalty;
        }
        Self { tallies: by_rule.into_values().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.tallies.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&RuleTally> {
        self.tallies.iter().find(|t| t.rule_id == rule_id)
    }

    pub fn total_firings(&self) -> u64 {
        self.tallies.iter().map(|t| u64::from(t.firings)).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(SUMMARY_VERSION).varint(self.tallies.len() as u64);
        for t in &self.tallies {
            w.str(&t.rule_id).varint(u64::from(t.firings)).f64(t.penalty);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        match r.u8()? {
            SUMMARY_VERSION => {}
            v => return Err(DecodeError::Version(v)),
        }
        let n = r.varint()?;
        let mut tallies = Vec::new();
        for _ in 0..n {
            let rule_id = r.str()?.to_owned();
            let firings = u32::try_from(r.varint()?).map_err(|_| DecodeError::Varint)?;
            let penalty = r.f64()?;
            if tallies.last().is_some_and(|p: &RuleTally| p.rule_id >= rule_id) {
                return Err(DecodeError::Invalid("tallies not ordered by rule id".into()));
            }
            tallies.push(RuleTally { rule_id, firings, penalty });
        }
        r.finish()?;
        Ok(Self { tallies })
    }
}

/// Outcome of an assessment together with the series the table asked for
/// but the log does not carry.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub event: EventData,
    pub missing_series: Vec<String>,
}

pub fn risk_assessment(log: &IntervalLog, table: &VerifiedRuleTable<'_>) -> Result<EventData, AssessmentError> {
    assess(log, table).map(|a| a.event)
}

pub fn assess(log: &IntervalLog, table: &VerifiedRuleTable<'_>) -> Result<Assessment, AssessmentError> {
    assess_unverified(log, table.table())
}

/// Assessment without the signature gate. Auditors use it to recompute a
/// score even when the table signature is what failed.
pub(crate) fn assess_unverified(log: &IntervalLog, table: &RuleTable) -> Result<Assessment, AssessmentError> {
    let logged = log.series();
    let mut by_field: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut missing_series = Vec::new();
    for (i, rule) in table.rules.iter().enumerate() {
        match logged.get(rule.field_name.as_str()) {
            None => {
                if !missing_series.contains(&rule.field_name) {
                    log::warn!("rule {} references series {} absent from the log", rule.rule_id, rule.field_name);
                    missing_series.push(rule.field_name.clone());
                }
            }
            Some(&ty) if ty != rule.data_type => {
                return Err(AssessmentError::TypeMismatch {
                    field: rule.field_name.clone(),
                    rule_id: rule.rule_id.clone(),
                    logged: ty,
                    expected: rule.data_type,
                });
            }
            Some(_) => by_field.entry(rule.field_name.as_str()).or_default().push(i),
        }
    }

    let mut violations = Vec::new();
    let mut risk_score = 0.0;
    for point in log.points() {
        let Some(rules) = by_field.get(point.field_name.as_str()) else {
            continue;
        };
        for &i in rules {
            let rule = &table.rules[i];
            if let Some(penalty) = rule.fire(&point.value) {
                risk_score += penalty;
                violations.push(ViolationRecord {
                    rule_id: rule.rule_id.clone(),
                    timestamp: point.timestamp,
                    observed: point.value,
                    penalty,
                });
            }
        }
    }

    Ok(Assessment {
        event: EventData {
            device: log.device,
            interval_index: log.interval_index,
            risk_score,
            violations,
            evidence: log.clone(),
        },
        missing_series,
    })
}

/// Points of `log` that satisfy at least one predicate in `table`.
pub fn offending_points(log: &IntervalLog, table: &RuleTable) -> Vec<usize> {
    log.points()
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            table
                .rules
                .iter()
                .any(|r| r.field_name == p.field_name && r.data_type == p.value.data_type() && r.predicate.holds(&p.value))
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::parse_rule_table;
    use crate::telemetry::{default_series, generate_synthetic_interval, SamplePoint};
    use ed25519_dalek::SigningKey;
    use proptest::prelude::*;

    const TABLE: &str = "\
# org: CompanyOne
# version: 1
# effective_from: 2021-01-01T00:00:00.00
CompanyOne | R1 | Precipitation | boolean | value is True | +5
CompanyOne | R2 | Velocity | float | value >= 30 | +10*(value-30)
CompanyOne | R3 | Acceleration | float | |value| >= 1.34 | +15
CompanyOne | R4 | EngineRPM | integer | value >= 6000 | +10
";

    fn signed(text: &str) -> (RuleTable, SigningKey) {
        let key = SigningKey::from_bytes(&[3; 32]);
        (parse_rule_table(text).unwrap().sign(&key), key)
    }

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn table_two_log() -> IntervalLog {
        let rows = [
            ("Precipitation", Value::Bool(true), "2021-01-31T16:40:44.26"),
            ("Precipitation", Value::Bool(true), "2021-01-31T16:40:46.26"),
            ("Precipitation", Value::Bool(false), "2021-01-31T16:40:48.26"),
            ("Velocity", Value::Float(28.0), "2021-01-31T16:40:47.26"),
            ("Velocity", Value::Float(30.0), "2021-01-31T16:40:47.76"),
            ("Velocity", Value::Float(34.0), "2021-01-31T16:40:48.26"),
            ("Acceleration", Value::Float(2.0), "2021-01-31T16:40:47.86"),
            ("Acceleration", Value::Float(1.6), "2021-01-31T16:40:48.06"),
            ("Acceleration", Value::Float(0.8), "2021-01-31T16:40:48.26"),
            ("EngineRPM", Value::Int(6500), "2021-01-31T16:40:47.86"),
            ("EngineRPM", Value::Int(4000), "2021-01-31T16:40:48.06"),
            ("EngineRPM", Value::Int(2000), "2021-01-31T16:40:48.26"),
        ];
        let points = rows.iter().map(|(f, v, t)| SamplePoint::new(*f, *v, ts(t))).collect();
        IntervalLog::from_points(DeviceId::default(), 0, ts("2021-01-31T16:40:00.00"), 300, points).unwrap()
    }

    #[test]
    fn reference_rows_score_ninety() {
        let (table, key) = signed(TABLE);
        let verified = table.verified(&key.verifying_key()).unwrap();
        let event = risk_assessment(&table_two_log(), &verified).unwrap();
        assert_eq!(event.risk_score, 90.0);
        let got: Vec<(&str, f64)> = event.violations.iter().map(|v| (v.rule_id.as_str(), v.penalty)).collect();
        // timestamp order
        assert_eq!(
            got,
            [("R1", 5.0), ("R1", 5.0), ("R2", 0.0), ("R3", 15.0), ("R4", 10.0), ("R3", 15.0), ("R2", 40.0)]
        );
        let summary = event.violation_summary();
        let tallies: Vec<(&str, u32, f64)> =
            summary.tallies.iter().map(|t| (t.rule_id.as_str(), t.firings, t.penalty)).collect();
        assert_eq!(tallies, [("R1", 2, 10.0), ("R2", 2, 40.0), ("R3", 2, 30.0), ("R4", 1, 10.0)]);
        assert_eq!(event.evidence, table_two_log());
    }

    #[test]
    fn vacuous_cases() {
        let (empty, key) = signed("# org: CompanyOne\n# version: 1\n# effective_from: 2021-01-01T00:00:00\n");
        let event = risk_assessment(&table_two_log(), &empty.verified(&key.verifying_key()).unwrap()).unwrap();
        assert_eq!(event.risk_score, 0.0);
        assert!(event.violations.is_empty());

        let (table, key) = signed(TABLE);
        let log = IntervalLog::new(DeviceId::default(), 4, Timestamp(0), 300);
        let a = assess(&log, &table.verified(&key.verifying_key()).unwrap()).unwrap();
        assert_eq!(a.event.risk_score, 0.0);
        assert_eq!(a.event.evidence, log);
        assert_eq!(a.missing_series.len(), 4);
    }

    #[test]
    fn mismatched_series_type_is_an_error() {
        let (table, key) = signed(TABLE);
        let mut log = IntervalLog::new(DeviceId::default(), 0, Timestamp(0), 300);
        log.append_sample(SamplePoint::new("EngineRPM", Value::Float(7000.0), Timestamp(10))).unwrap();
        let err = risk_assessment(&log, &table.verified(&key.verifying_key()).unwrap()).unwrap_err();
        assert!(matches!(err, AssessmentError::TypeMismatch { .. }));
    }

    #[test]
    fn summary_encoding() {
        let (table, key) = signed(TABLE);
        let event = risk_assessment(&table_two_log(), &table.verified(&key.verifying_key()).unwrap()).unwrap();
        let s = event.violation_summary();
        assert_eq!(ViolationSummary::decode(&s.encode()).unwrap(), s);
        assert!(ViolationSummary::decode(&[9]).is_err());
        let empty = ViolationSummary::default();
        assert_eq!(ViolationSummary::decode(&empty.encode()).unwrap(), empty);
    }

    fn small_log() -> impl Strategy<Value = IntervalLog> {
        let point = (0usize..4, 0i64..30_000, any::<bool>(), -5f64..45.0, 0i64..9000);
        proptest::collection::vec(point, 0..50).prop_map(|raw| {
            let points = raw
                .into_iter()
                .map(|(s, off, b, f, i)| {
                    let (name, value) = match s {
                        0 => ("Precipitation", Value::Bool(b)),
                        1 => ("Velocity", Value::Float((f * 4.0).round() / 4.0)),
                        2 => ("Acceleration", Value::Float((f / 10.0 * 100.0).round() / 100.0)),
                        _ => ("EngineRPM", Value::Int(i)),
                    };
                    SamplePoint::new(name, value, Timestamp(off))
                })
                .collect::<Vec<_>>();
            let mut seen = std::collections::HashSet::new();
            let points = points.into_iter().filter(|p| seen.insert((p.field_name.clone(), p.timestamp))).collect();
            IntervalLog::from_points(DeviceId::default(), 0, Timestamp(0), 300, points).unwrap()
        })
    }

    fn tables() -> impl Strategy<Value = String> {
        (0f64..40.0, 0f64..3.0, 1i64..20, 0u8..16).prop_map(|(v, a, k, mask)| {
            let rows = [
                "CompanyOne | R1 | Precipitation | boolean | value is True | +5".to_string(),
                format!("CompanyOne | R2 | Velocity | float | value >= {v} | +{k}*(value-{v})"),
                format!("CompanyOne | R3 | Acceleration | float | |value| > {a} | +15"),
                format!("CompanyOne | R4 | EngineRPM | integer | value < 1500 | +{k}"),
            ];
            let mut text = "# org: CompanyOne\n# version: 1\n# effective_from: 1970-01-01T00:00:00\n".to_string();
            for (i, r) in rows.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    text.push_str(r);
                    text.push('\n');
                }
            }
            text
        })
    }

    /// Independent scorer: re-reads each printed row with plain string
    /// splitting and applies it to every point.
    fn brute_force_score(log: &IntervalLog, table_text: &str) -> f64 {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for line in table_text.lines().filter(|l| !l.starts_with('#')) {
            rows.push(line.split(" | ").map(str::to_owned).collect());
        }
        let mut total = 0.0;
        for p in log.points() {
            for row in &rows {
                if row[2] != p.field_name {
                    continue;
                }
                let x = p.value.as_f64();
                let pred = row[4].as_str();
                let fires = if pred == "value is True" {
                    matches!(p.value, Value::Bool(true))
                } else {
                    let parts: Vec<&str> = pred.split(' ').collect();
                    let lhs = if parts[0] == "|value|" { x.abs() } else { x };
                    let c: f64 = parts[2].parse().unwrap();
                    match parts[1] {
                        ">=" => lhs >= c,
                        ">" => lhs > c,
                        "<" => lhs < c,
                        "<=" => lhs <= c,
                        _ => lhs == c,
                    }
                };
                if !fires {
                    continue;
                }
                let pen = row[5].trim_start_matches('+');
                total += match pen.split_once("*(value-") {
                    Some((k, c)) => {
                        let k: f64 = k.parse().unwrap();
                        let c: f64 = c.trim_end_matches(')').parse().unwrap();
                        (k * (x - c)).max(0.0)
                    }
                    None => pen.parse::<f64>().unwrap(),
                };
            }
        }
        total
    }

    fn score(log: &IntervalLog, table: &RuleTable) -> f64 {
        assess_unverified(log, table).unwrap().event.risk_score
    }

    proptest! {
        #[test]
        fn matches_brute_force_oracle(log in small_log(), text in tables()) {
            let table = parse_rule_table(&text).unwrap();
            let canonical = table.canonical_text();
            let expected = brute_force_score(&log, &canonical);
            prop_assert!((score(&log, &table) - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }

        #[test]
        fn score_is_additive_over_partitions(log in small_log(), text in tables(), mask in any::<u64>()) {
            let table = parse_rule_table(&text).unwrap();
            let (mut a, mut b) = (log.clone(), log.clone());
            let mut i = 0;
            a.retain_points(|_| { i += 1; mask & (1 << (i % 64)) != 0 });
            let mut j = 0;
            b.retain_points(|_| { j += 1; mask & (1 << (j % 64)) == 0 });
            let whole = score(&log, &table);
            let parts = score(&a, &table) + score(&b, &table);
            prop_assert!((whole - parts).abs() <= 1e-9 * whole.abs().max(1.0));
        }

        #[test]
        fn adding_a_point_never_lowers_the_score(log in small_log(), text in tables(), f in -5f64..45.0, off in 0i64..30_000) {
            let table = parse_rule_table(&text).unwrap();
            let before = score(&log, &table);
            prop_assume!(log.points_of("Velocity").all(|p| p.timestamp != Timestamp(off)));
            let mut more = log.points().to_vec();
            more.push(SamplePoint::new("Velocity", Value::Float(f), Timestamp(off)));
            let bigger = IntervalLog::from_points(log.device, 0, Timestamp(0), 300, more).unwrap();
            prop_assert!(score(&bigger, &table) >= before);
        }

        #[test]
        fn input_order_does_not_matter(log in small_log(), text in tables(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let table = parse_rule_table(&text).unwrap();
            let mut pts = log.points().to_vec();
            pts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = IntervalLog::from_points(log.device, 0, Timestamp(0), 300, pts).unwrap();
            prop_assert_eq!(
                assess_unverified(&shuffled, &table).unwrap(),
                assess_unverified(&log, &table).unwrap()
            );
        }
    }

    #[test]
    fn default_interval_is_assessable() {
        let (table, key) = signed(TABLE);
        let log = generate_synthetic_interval(&default_series(), 5, DeviceId::default(), 0, Timestamp(0), 300).unwrap();
        let event = risk_assessment(&log, &table.verified(&key.verifying_key()).unwrap()).unwrap();
        assert!(event.risk_score > 0.0);
        let offending = offending_points(&log, &table);
        assert_eq!(offending.len(), event.violations.len());
    }
}
