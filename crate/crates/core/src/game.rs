//! Payoff simulation of the malicious-user game.
//!
//! Agents drive for `horizon` intervals. Incidents are drawn from each
//! agent's true log: an interval with `k` offending points has an incident
//! with probability `1 - (1 - p)^k`, and the incident's circumstance is one
//! of those points picked uniformly. Participants publish every interval
//! through the real pipeline and pay `fee_per_risk_point` times the published
//! score. After the horizon the clock moves past the reveal horizon and every
//! incident is claimed through [`World::process_claim`].
//!
//! An accepted claim pays `claim_payout`; an incident without one costs
//! `uninsured_loss`. Suppressors drop a fraction of their offending points
//! from the log they assess and publish, so their fees fall and their
//! evidence may no longer contain the incident.
//!
//! The defaults are one regime where the disincentive shows, not a general
//! result: incident probability is high enough that expected payouts
//! outweigh what suppression saves in fees.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::claims::{AuditOutcome, Claim, ClaimStatus, IncidentReport};
use crate::fixtures::table1;
use crate::rules::RuleTable;
use crate::assessment::offending_points;
use crate::telemetry::{default_series, generate_synthetic_interval, IntervalLog, TelemetryError};
use crate::time::Timestamp;
use crate::world::{World, WorldConfig, WorldError};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("claim {0} accepted without a matching audit")]
    UngatedAcceptance(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentStrategy {
    Honest,
    /// Omits this fraction of offending points from the reported log.
    Suppressor(f64),
    NonParticipant,
}

impl AgentStrategy {
    pub fn participates(self) -> bool {
        !matches!(self, AgentStrategy::NonParticipant)
    }
}

impl fmt::Display for AgentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentStrategy::Honest => f.write_str("honest"),
            AgentStrategy::Suppressor(x) => write!(f, "suppressor({x})"),
            AgentStrategy::NonParticipant => f.write_str("nonparticipant"),
        }
    }
}

impl FromStr for AgentStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "honest" => Ok(AgentStrategy::Honest),
            "nonparticipant" | "non-participant" => Ok(AgentStrategy::NonParticipant),
            "suppressor" => Ok(AgentStrategy::Suppressor(1.0)),
            _ => {
                let inner = s
                    .strip_prefix("suppressor(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("suppressor:"))
                    .ok_or_else(|| format!("unknown strategy {s:?}"))?;
                let f: f64 = inner.parse().map_err(|_| format!("bad drop fraction {inner:?}"))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(format!("drop fraction {f} outside [0, 1]"));
                }
                Ok(AgentStrategy::Suppressor(f))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub incident_probability_per_risk_point: f64,
    pub claim_payout: f64,
    /// Charged per unit of published risk score.
    pub fee_per_risk_point: f64,
    pub uninsured_loss: f64,
    pub horizon: u64,
    pub interval_s: u32,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            incident_probability_per_risk_point: 0.005,
            claim_payout: 1000.0,
            fee_per_risk_point: 0.01,
            uninsured_loss: 1000.0,
            horizon: 8,
            interval_s: 60,
            seed: 0,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), GameError> {
        let p = self.incident_probability_per_risk_point;
        if !(0.0..=1.0).contains(&p) {
            return Err(GameError::InvalidParameter { name: "incident_probability_per_risk_point", value: p });
        }
        for (name, value) in [
            ("claim_payout", self.claim_payout),
            ("fee_per_risk_point", self.fee_per_risk_point),
            ("uninsured_loss", self.uninsured_loss),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(GameError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    pub fn incident_probability(&self, risk_points: usize) -> f64 {
        1.0 - (1.0 - self.incident_probability_per_risk_point).powi(risk_points as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffLedger {
    pub agent: String,
    pub strategy: AgentStrategy,
    pub fees_paid: f64,
    pub claims_filed: u32,
    pub claims_accepted: u32,
    pub payouts_received: f64,
    pub uninsured_losses: f64,
    pub incidents: u32,
}

impl PayoffLedger {
    fn new(agent: String, strategy: AgentStrategy) -> Self {
        Self {
            agent,
            strategy,
            fees_paid: 0.0,
            claims_filed: 0,
            claims_accepted: 0,
            payouts_received: 0.0,
            uninsured_losses: 0.0,
            incidents: 0,
        }
    }

    pub fn net(&self) -> f64 {
        self.payouts_received - self.fees_paid - self.uninsured_losses
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.claims_filed > 0).then(|| f64::from(self.claims_accepted) / f64::from(self.claims_filed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimRecord {
    pub agent: String,
    pub interval_index: u64,
    /// The incident's circumstance point was left out of the reported log.
    pub circumstance_suppressed: bool,
    pub status: ClaimStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameResult {
    pub seed: u64,
    pub ledgers: Vec<PayoffLedger>,
    pub claims: Vec<ClaimRecord>,
}

pub const CSV_HEADER: &str = "seed,agent,strategy,fees_paid,claims_filed,claims_accepted,payouts_received,uninsured_losses,net";

impl GameResult {
    pub fn csv_rows(&self) -> String {
        self.ledgers
            .iter()
            .map(|l| {
                format!(
                    "{},{},{},{:.4},{},{},{:.4},{:.4},{:.4}\n",
                    self.seed,
                    l.agent,
                    l.strategy,
                    l.fees_paid,
                    l.claims_filed,
                    l.claims_accepted,
                    l.payouts_received,
                    l.uninsured_losses,
                    l.net()
                )
            })
            .collect()
    }
}

pub fn to_csv(results: &[GameResult]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in results {
        out.push_str(&r.csv_rows());
    }
    out
}

fn rng_for(seed: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(
        Sha256::new().chain_update(b"sai-game-v1").chain_update(seed.to_be_bytes()).chain_update(label.as_bytes()).finalize().into(),
    )
}

fn interval_start(params: &WorldParams, interval: u64) -> Timestamp {
    let base: Timestamp = "2021-02-01T00:00:00.00".parse().expect("valid literal");
    base.plus_secs(interval as i64 * i64::from(params.interval_s))
}

/// Drops `round(fraction * k)` of the `k` offending points, chosen uniformly.
pub fn suppress(log: &IntervalLog, table: &RuleTable, fraction: f64, rng: &mut impl Rng) -> IntervalLog {
    let mut offending = offending_points(log, table);
    let drop = (fraction * offending.len() as f64).round() as usize;
    offending.shuffle(rng);
    let dropped: std::collections::HashSet<usize> = offending.into_iter().take(drop).collect();
    let kept = log.points().iter().enumerate().filter(|(i, _)| !dropped.contains(i)).map(|(_, p)| p.clone()).collect();
    IntervalLog::from_points(log.device, log.interval_index, log.start_time, log.duration_s, kept).expect("subset of a valid log")
}

struct PendingClaim {
    agent: usize,
    claim: Claim,
    circumstance_suppressed: bool,
}

/// One seeded run of the game.
pub fn simulate_game(agents: &[AgentStrategy], params: &WorldParams) -> Result<GameResult, GameError> {
    params.validate()?;
    for a in agents {
        if let AgentStrategy::Suppressor(f) = *a {
            if !(0.0..=1.0).contains(&f) {
                return Err(GameError::InvalidParameter { name: "drop_fraction", value: f });
            }
        }
    }
    let mut world = World::new(WorldConfig::with_seed(params.seed))?;
    world.publish_rule_table(table1())?;
    let table = table1();
    let models = default_series();
    let names: Vec<String> = (0..agents.len()).map(|i| format!("agent-{i}")).collect();
    let mut ledgers: Vec<PayoffLedger> = names.iter().zip(agents).map(|(n, s)| PayoffLedger::new(n.clone(), *s)).collect();
    let mut devices = Vec::with_capacity(agents.len());
    for name in &names {
        devices.push(world.enroll_device(name)?);
    }

    let mut pending = Vec::new();
    for interval in 0..params.horizon {
        let start = interval_start(params, interval);
        for (i, strategy) in agents.iter().enumerate() {
            let mut rng = rng_for(params.seed, &format!("{}/{interval}", names[i]));
            let drive_seed = rng.gen();
            let truth = generate_synthetic_interval(&models, drive_seed, devices[i], interval, start, params.interval_s)?;
            let risky = offending_points(&truth, &table);
            let incident = rng.gen_bool(params.incident_probability(risky.len())).then(|| truth.points()[risky[rng.gen_range(0..risky.len())]].clone());

            let reported = match *strategy {
                AgentStrategy::NonParticipant => None,
                AgentStrategy::Honest => Some(truth.clone()),
                AgentStrategy::Suppressor(f) => Some(suppress(&truth, &table, f, &mut rng)),
            };
            if let Some(reported) = &reported {
                let event = world.assess(reported)?.event;
                ledgers[i].fees_paid += params.fee_per_risk_point * event.risk_score;
                world.publish_event(&names[i], &event)?;
            }
            let Some(point) = incident else { continue };
            ledgers[i].incidents += 1;
            match reported {
                None => ledgers[i].uninsured_losses += params.uninsured_loss,
                Some(reported) => {
                    let pseudonym = world.pseudonym(devices[i], interval);
                    let report = IncidentReport { description: format!("incident at {}", point.timestamp), circumstances: vec![point.clone()] };
                    pending.push(PendingClaim {
                        agent: i,
                        claim: Claim::new(format!("{}-{interval}", names[i]), pseudonym, interval, report),
                        circumstance_suppressed: !reported.points().contains(&point),
                    });
                }
            }
        }
        world.advance_clock(u64::from(params.interval_s));
    }

    world.advance_clock(world.config().reveal_horizon);
    let mut claims = Vec::with_capacity(pending.len());
    for p in pending {
        let ledger = &mut ledgers[p.agent];
        ledger.claims_filed += 1;
        let (claim, outcome) = world.process_claim(&names[p.agent], p.claim)?;
        if claim.status == ClaimStatus::Accepted {
            if !matches!(&outcome, AuditOutcome::Completed(r) if r.matched) {
                return Err(GameError::UngatedAcceptance(claim.claim_id));
            }
            ledger.claims_accepted += 1;
            ledger.payouts_received += params.claim_payout;
        } else {
            ledger.uninsured_losses += params.uninsured_loss;
        }
        claims.push(ClaimRecord {
            agent: names[p.agent].clone(),
            interval_index: claim.interval_index,
            circumstance_suppressed: p.circumstance_suppressed,
            status: claim.status,
        });
    }
    Ok(GameResult { seed: params.seed, ledgers, claims })
}

/// Runs seeds `first..first + count`, spread over the available cores.
pub fn simulate_seeds(agents: &[AgentStrategy], params: &WorldParams, first: u64, count: u64) -> Result<Vec<GameResult>, GameError> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1) as usize);
    let seeds: Vec<u64> = (first..first + count).collect();
    let chunk = seeds.len().div_ceil(workers).max(1);
    let mut results: Vec<Result<GameResult, GameError>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter().map(|&seed| simulate_game(agents, &WorldParams { seed, ..*params })).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("game worker panicked")).collect()
    });
    results.sort_by_key(|r| r.as_ref().map_or(u64::MAX, |g| g.seed));
    results.into_iter().collect()
}

/// Mean net payoff per strategy label, in first-seen order.
pub fn mean_net_by_strategy(results: &[GameResult]) -> Vec<(String, f64)> {
    let mut acc: Vec<(String, f64, u32)> = Vec::new();
    for l in results.iter().flat_map(|r| &r.ledgers) {
        let label = l.strategy.to_string();
        match acc.iter_mut().find(|(s, _, _)| *s == label) {
            Some(e) => {
                e.1 += l.net();
                e.2 += 1;
            }
            None => acc.push((label, l.net(), 1)),
        }
    }
    acc.into_iter().map(|(s, sum, n)| (s, sum / f64::from(n))).collect()
}
