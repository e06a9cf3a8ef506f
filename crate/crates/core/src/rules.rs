//! Insurer rule tables: parsing, canonical encoding, signing and per-point
//! evaluation.
//!
//! Text format, one rule per line, fields separated by `" | "`:
//!
//! ```text
//! # org: CompanyOne
//! # version: 1
//! # effective_from: 2021-01-01T00:00:00.00
//! CompanyOne | R1 | Precipitation | boolean | value is True | +5
//! CompanyOne | R2 | Velocity | float | value >= 30 | +10*(value-30)
//! CompanyOne | R3 | Acceleration | float | |value| >= 1.34 | +15
//! CompanyOne | R4 | EngineRPM | integer | value >= 6000 | +10
//! # signature: <128 hex chars>
//! ```
//!
//! The canonical encoding that gets signed is the UTF-8 text produced by
//! [`RuleTable::canonical_text`]: the three headers in the order above, then
//! one canonical row per rule in table order, each line terminated by `\n`,
//! without the signature line. Unicode operators (`≥`, `≤`, `×`, `−`) and
//! `abs(value)` are accepted on input and printed in ASCII form.

use std::collections::HashSet;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use thiserror::Error;

use crate::telemetry::{DataType, SamplePoint, Value};
use crate::time::Timestamp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("line {line}: rule {rule_id} is ill-typed for {data_type}: {msg}")]
    TypeMismatch { line: usize, rule_id: String, data_type: DataType, msg: String },
    #[error("duplicate rule id {0}")]
    DuplicateRuleId(String),
    #[error("line {line}: negative penalty {text:?}")]
    NegativePenalty { line: usize, text: String },
    #[error("rule {rule_id} evaluates {expected} series {field}, got {got_field} ({got})")]
    PointMismatch { rule_id: String, field: String, expected: DataType, got_field: String, got: DataType },
    #[error("rule table {org_id} v{version} signature does not verify")]
    BadSignature { org_id: String, version: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Ge,
    Gt,
    Le,
    Lt,
    Eq,
}

impl Comparator {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Ge => lhs >= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Lt => lhs < rhs,
            Comparator::Eq => lhs == rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
            Comparator::Le => "<=",
            Comparator::Lt => "<",
            Comparator::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predicate {
    /// `value is True` / `value is False`
    Is(bool),
    /// `value ⋈ c` or `|value| ⋈ c`
    Threshold { abs: bool, cmp: Comparator, literal: f64 },
}

impl Predicate {
    pub fn holds(&self, value: &Value) -> bool {
        match (*self, value) {
            (Predicate::Is(expected), Value::Bool(b)) => *b == expected,
            (Predicate::Is(_), _) => false,
            (Predicate::Threshold { abs, cmp, literal }, v) => {
                let x = v.as_f64();
                cmp.holds(if abs { x.abs() } else { x }, literal)
            }
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Is(true) => f.write_str("value is True"),
            Predicate::Is(false) => f.write_str("value is False"),
            Predicate::Threshold { abs, cmp, literal } => {
                let lhs = if *abs { "|value|" } else { "value" };
                write!(f, "{lhs} {} {literal}", cmp.symbol())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// `+k`
    Constant(f64),
    /// `+k*(value-c)`, clamped at zero
    Linear { k: f64, c: f64 },
}

impl Penalty {
    pub fn apply(&self, value: &Value) -> f64 {
        match *self {
            Penalty::Constant(k) => k,
            Penalty::Linear { k, c } => {
                let p = k * (value.as_f64() - c);
                if p > 0.0 {
                    p
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Penalty::Constant(k) => write!(f, "+{k}"),
            Penalty::Linear { k, c } if c < 0.0 => write!(f, "+{k}*(value+{})", -c),
            Penalty::Linear { k, c } => write!(f, "+{k}*(value-{c})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub org_id: String,
    pub rule_id: String,
    pub field_name: String,
    pub data_type: DataType,
    pub predicate: Predicate,
    pub penalty: Penalty,
}

impl Rule {
    /// Penalty of a type-matching value, `None` when the predicate does not hold.
    pub fn fire(&self, value: &Value) -> Option<f64> {
        self.predicate.holds(value).then(|| self.penalty.apply(value))
    }

    pub fn evaluate(&self, point: &SamplePoint) -> Result<Option<Violation>, RuleError> {
        if point.field_name != self.field_name || point.value.data_type() != self.data_type {
            return Err(RuleError::PointMismatch {
                rule_id: self.rule_id.clone(),
                field: self.field_name.clone(),
                expected: self.data_type,
                got_field: point.field_name.clone(),
                got: point.value.data_type(),
            });
        }
        Ok(self.fire(&point.value).map(|penalty| Violation { penalty }))
    }

    fn canonical_row(&self) -> String {
        format!(
            "{} | {} | {} | {} | {} | {}",
            self.org_id, self.rule_id, self.field_name, self.data_type, self.predicate, self.penalty
        )
    }
}

/// A fired rule for one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub penalty: f64,
}

pub fn evaluate_rule(rule: &Rule, point: &SamplePoint) -> Result<Option<Violation>, RuleError> {
    rule.evaluate(point)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    pub org_id: String,
    pub version: u64,
    pub effective_from: Timestamp,
    pub rules: Vec<Rule>,
    pub signature: Option<Signature>,
}

impl RuleTable {
    pub fn new(org_id: impl Into<String>, version: u64, effective_from: Timestamp, rules: Vec<Rule>) -> Self {
        Self { org_id: org_id.into(), version, effective_from, rules, signature: None }
    }

    pub fn canonical_text(&self) -> String {
        let mut out = format!(
            "# org: {}\n# version: {}\n# effective_from: {}\n",
            self.org_id, self.version, self.effective_from
        );
        for rule in &self.rules {
            out.push_str(&rule.canonical_row());
            out.push('\n');
        }
        out
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.canonical_text().into_bytes()
    }

    /// Canonical text followed by the signature line when signed.
    pub fn to_text(&self) -> String {
        let mut out = self.canonical_text();
        if let Some(sig) = &self.signature {
            out.push_str(&format!("# signature: {}\n", hex::encode(sig.to_bytes())));
        }
        out
    }

    pub fn sign(mut self, insurer_key: &SigningKey) -> Self {
        self.signature = Some(insurer_key.sign(&self.canonical_bytes()));
        self
    }

    pub fn verify(&self, org_key: &VerifyingKey) -> bool {
        self.signature
            .as_ref()
            .is_some_and(|sig| org_key.verify(&self.canonical_bytes(), sig).is_ok())
    }

    /// Checks the signature and hands out a table the assessment will accept.
    pub fn verified(&self, org_key: &VerifyingKey) -> Result<VerifiedRuleTable<'_>, RuleError> {
        if self.verify(org_key) {
            Ok(VerifiedRuleTable(self))
        } else {
            Err(RuleError::BadSignature { org_id: self.org_id.clone(), version: self.version })
        }
    }

    pub fn rule(&self, rule_id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }
}

pub fn sign_rule_table(table: RuleTable, insurer_key: &SigningKey) -> RuleTable {
    table.sign(insurer_key)
}

pub fn verify_rule_table(table: &RuleTable, org_key: &VerifyingKey) -> bool {
    table.verify(org_key)
}

/// A rule table whose signature has been checked against its org key.
#[derive(Debug, Clone, Copy)]
pub struct VerifiedRuleTable<'a>(&'a RuleTable);

impl<'a> VerifiedRuleTable<'a> {
    pub fn table(&self) -> &'a RuleTable {
        self.0
    }
}

impl std::ops::Deref for VerifiedRuleTable<'_> {
    type Target = RuleTable;
    fn deref(&self) -> &RuleTable {
        self.0
    }
}

fn normalize(s: &str) -> String {
    s.replace('≥', ">=").replace('≤', "<=").replace('×', "*").replace('−', "-").replace('$', "")
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_predicate(text: &str) -> Result<Predicate, String> {
    let norm = normalize(text);
    let words: Vec<&str> = norm.split_whitespace().collect();
    if let ["value", "is", truth] = words[..] {
        return match truth.to_ascii_lowercase().as_str() {
            "true" => Ok(Predicate::Is(true)),
            "false" => Ok(Predicate::Is(false)),
            _ => Err(format!("expected True or False after 'is', got {truth:?}")),
        };
    }
    let compact: String = norm.chars().filter(|c| !c.is_whitespace()).collect();
    let (abs, rest) = if let Some(r) = compact.strip_prefix("|value|") {
        (true, r)
    } else if let Some(r) = compact.strip_prefix("abs(value)") {
        (true, r)
    } else if let Some(r) = compact.strip_prefix("value") {
        (false, r)
    } else {
        return Err(format!("predicate must start with value or |value|: {text:?}"));
    };
    let (cmp, lit) = [
        (">=", Comparator::Ge),
        ("<=", Comparator::Le),
        ("==", Comparator::Eq),
        (">", Comparator::Gt),
        ("<", Comparator::Lt),
        ("=", Comparator::Eq),
    ]
    .into_iter()
    .find_map(|(sym, cmp)| rest.strip_prefix(sym).map(|lit| (cmp, lit)))
    .ok_or_else(|| format!("expected a comparison operator in {text:?}"))?;
    let literal = parse_number(lit).ok_or_else(|| format!("bad literal {lit:?}"))?;
    Ok(Predicate::Threshold { abs, cmp, literal })
}

enum PenaltyParse {
    Ok(Penalty),
    Negative,
    Bad(String),
}

fn parse_penalty(text: &str) -> PenaltyParse {
    let compact: String = normalize(text).chars().filter(|c| !c.is_whitespace()).collect();
    let body = compact.strip_prefix('+').unwrap_or(&compact);
    if let Some((k, rest)) = body.split_once('*') {
        let Some(k) = parse_number(k) else {
            return PenaltyParse::Bad(format!("bad coefficient in {text:?}"));
        };
        let inner = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')'));
        let Some(offset) = inner.and_then(|i| i.strip_prefix("value")) else {
            return PenaltyParse::Bad(format!("expected k*(value-c), got {text:?}"));
        };
        let c = if offset.is_empty() {
            Some(0.0)
        } else if let Some(c) = offset.strip_prefix('-') {
            parse_number(c)
        } else {
            offset.strip_prefix('+').and_then(parse_number).map(|c| -c)
        };
        return match c {
            None => PenaltyParse::Bad(format!("bad offset in {text:?}")),
            Some(_) if k < 0.0 => PenaltyParse::Negative,
            Some(c) => PenaltyParse::Ok(Penalty::Linear { k, c }),
        };
    }
    match parse_number(body) {
        Some(k) if k < 0.0 => PenaltyParse::Negative,
        Some(k) => PenaltyParse::Ok(Penalty::Constant(k)),
        None => PenaltyParse::Bad(format!("bad penalty {text:?}")),
    }
}

fn type_check(rule: &Rule, line: usize) -> Result<(), RuleError> {
    let mismatch = |msg: &str| RuleError::TypeMismatch {
        line,
        rule_id: rule.rule_id.clone(),
        data_type: rule.data_type,
        msg: msg.into(),
    };
    match (rule.data_type, &rule.predicate, &rule.penalty) {
        (DataType::Boolean, Predicate::Is(_), Penalty::Constant(_)) => Ok(()),
        (DataType::Boolean, Predicate::Threshold { .. }, _) => Err(mismatch("boolean series need 'value is True'")),
        (DataType::Boolean, _, Penalty::Linear { .. }) => Err(mismatch("linear penalty on a boolean series")),
        (_, Predicate::Is(_), _) => Err(mismatch("'is True' applies to boolean series only")),
        _ => Ok(()),
    }
}

pub fn parse_rule_table(text: &str) -> Result<RuleTable, RuleError> {
    let mut org = None;
    let mut version = None;
    let mut effective_from = None;
    let mut signature = None;
    let mut rules: Vec<Rule> = Vec::new();
    let mut seen = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let syntax = |column: usize, msg: String| RuleError::Syntax { line, column, msg };
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        if let Some(header) = row.strip_prefix('#') {
            let Some((key, val)) = header.split_once(':') else {
                continue;
            };
            let val = val.trim();
            match key.trim() {
                "org" => org = Some(val.to_owned()),
                "version" => version = Some(val.parse::<u64>().map_err(|e| syntax(1, format!("version: {e}")))?),
                "effective_from" => {
                    effective_from = Some(val.parse::<Timestamp>().map_err(|e| syntax(1, e.to_string()))?)
                }
                "signature" => {
                    let bytes = hex::decode(val).map_err(|e| syntax(1, format!("signature: {e}")))?;
                    let sig = Signature::from_slice(&bytes).map_err(|e| syntax(1, format!("signature: {e}")))?;
                    signature = Some(sig);
                }
                _ => {}
            }
            continue;
        }

        let cols: Vec<&str> = raw.trim().split(" | ").map(str::trim).collect();
        let [org_id, rule_id, field, ty, pred, pen] = cols[..] else {
            return Err(syntax(cols.len().min(6), format!("expected 6 fields, found {}", cols.len())));
        };
        for (column, value) in [org_id, rule_id, field].into_iter().enumerate() {
            if value.is_empty() || value.contains(char::is_whitespace) {
                return Err(syntax(column + 1, format!("bad identifier {value:?}")));
            }
        }
        let data_type: DataType = ty.parse().map_err(|e| syntax(4, e))?;
        let predicate = parse_predicate(pred).map_err(|e| syntax(5, e))?;
        let penalty = match parse_penalty(pen) {
            PenaltyParse::Ok(p) => p,
            PenaltyParse::Negative => return Err(RuleError::NegativePenalty { line, text: pen.to_owned() }),
            PenaltyParse::Bad(msg) => return Err(syntax(6, msg)),
        };
        let rule = Rule {
            org_id: org_id.to_owned(),
            rule_id: rule_id.to_owned(),
            field_name: field.to_owned(),
            data_type,
            predicate,
            penalty,
        };
        type_check(&rule, line)?;
        if !seen.insert(rule.rule_id.clone()) {
            return Err(RuleError::DuplicateRuleId(rule.rule_id));
        }
        rules.push(rule);
    }

    let missing = |what: &str| RuleError::Syntax { line: 0, column: 0, msg: format!("missing header '{what}'") };
    let org_id = match org {
        Some(o) => o,
        None => rules.first().map(|r| r.org_id.clone()).ok_or_else(|| missing("org"))?,
    };
    if let Some(bad) = rules.iter().find(|r| r.org_id != org_id) {
        return Err(RuleError::Syntax {
            line: 0,
            column: 1,
            msg: format!("rule {} belongs to {}, table is {org_id}", bad.rule_id, bad.org_id),
        });
    }
    Ok(RuleTable {
        org_id,
        version: version.ok_or_else(|| missing("version"))?,
        effective_from: effective_from.ok_or_else(|| missing("effective_from"))?,
        rules,
        signature,
    })
}
