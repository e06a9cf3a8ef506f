use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ed25519_dalek::VerifyingKey;

use sai_core::assessment::assess;
use sai_core::claims::{Attachment, AuditOutcome, Claim, ClaimStatus, IncidentReport};
use sai_core::fixtures::{demo_insurer_key, table1, DEMO_ORG};
use sai_core::game::{mean_net_by_strategy, simulate_seeds, to_csv, AgentStrategy, WorldParams};
use sai_core::harness::{run_experiment, write_artifacts, ExperimentConfig, FULL_SCALE_RUNS};
use sai_core::ledger::{EventPublication, Pseudonym};
use sai_core::rules::parse_rule_table;
use sai_core::telemetry::{default_series, generate_synthetic_interval, log_from_text, log_to_text, parse_sample_row, DeviceId, IntervalLog};
use sai_core::world::{World, WorldConfig};
use sai_core::Timestamp;

const EXIT_MISMATCH: u8 = 3;
const EXIT_DENIED: u8 = 4;

#[derive(Parser)]
#[command(name = "sai", version, about = "Telematic insurance pipeline on a simulated ledger")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interval log in text form.
    GenerateLog {
        #[arg(long, default_value_t = 0)]
        interval: u64,
        #[arg(long, default_value_t = 300)]
        duration: u32,
        #[arg(long, default_value = "2021-02-01T00:00:00.00")]
        start: Timestamp,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a log against a signed rule table.
    Assess {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        /// Insurer verifying key in hex; defaults to the demo key.
        #[arg(long)]
        org_key: Option<String>,
    },
    /// Assess a log and publish it from an enrolled device.
    Publish {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "device-0")]
        device: String,
        /// Publish this rule table first (signed by the insurer).
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Reveal a published event's protected parts.
    Reveal {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, default_value_t = Component::Evidence)]
        component: Component,
    },
    /// Reveal and recompute a published event.
    Audit {
        #[command(flatten)]
        target: Target,
    },
    /// File a claim for a published event and adjudicate it.
    Claim {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "claim-0")]
        id: String,
        #[arg(long, default_value = "")]
        description: String,
        /// Incident point as `Field | type | value | 'timestamp'`; repeatable.
        #[arg(long)]
        circumstance: Vec<String>,
        /// Supplementary file; only its digest is kept. Repeatable.
        #[arg(long)]
        attach: Vec<PathBuf>,
    },
    /// Hand the escrowed shares to a refreshed or new committee.
    EscrowReshare {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum, default_value_t = ReshareMode::Rotate)]
        mode: ReshareMode,
    },
    /// Time the pipeline over many runs and write artifacts.
    Bench {
        #[arg(long, default_value_t = sai_core::harness::DEFAULT_RUNS)]
        runs: u64,
        /// Use the full-scale run count.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = sai_core::harness::DEFAULT_INTERVAL_S)]
        interval: u32,
        #[arg(long, default_value_t = sai_core::harness::WARMUP_RUNS)]
        warmup: u64,
        #[arg(long)]
        no_reveal: bool,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Simulate the malicious-user game and print per-agent payoffs as CSV.
    Game {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "honest,suppressor(1.0),nonparticipant")]
        agents: Vec<AgentStrategy>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        incident_probability: Option<f64>,
        #[arg(long)]
        fee_per_risk_point: Option<f64>,
        #[arg(long)]
        claim_payout: Option<f64>,
        #[arg(long)]
        uninsured_loss: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Target {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    device: String,
    #[arg(long)]
    interval: u64,
    /// Move the clock forward this many seconds first.
    #[arg(long, default_value_t = 0)]
    advance: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Evidence,
    Violations,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReshareMode {
    Refresh,
    Rotate,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn open_world(state: &Path, seed: u64) -> Result<World> {
    World::open(state, WorldConfig::with_seed(seed)).with_context(|| format!("opening state {}", state.display()))
}

fn locate(world: &mut World, target: &Target) -> Result<EventPublication> {
    world.advance_clock(target.advance);
    let id = world.device(&target.device)?.id;
    let pseudonym: Pseudonym = world.pseudonym(id, target.interval);
    world
        .ledger
        .find_event(&pseudonym, target.interval)
        .with_context(|| format!("no publication from {} at interval {}", target.device, target.interval))
}

fn rebind(log: IntervalLog, device: DeviceId) -> Result<IntervalLog> {
    let mut bound = IntervalLog::from_points(device, log.interval_index, log.start_time, log.duration_s, log.points().to_vec())?;
    for e in log.lifecycle() {
        bound.record_lifecycle(*e)?;
    }
    Ok(bound)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::GenerateLog { interval, duration, start, out } => {
            let device = DeviceId::from_bytes(seed.to_be_bytes().repeat(2).try_into().expect("16 bytes"));
            let log = generate_synthetic_interval(&default_series(), seed, device, interval, start, duration)?;
            emit(out.as_deref(), &log_to_text(&log))?;
        }
        Command::Assess { log, rules, org_key } => {
            let log = log_from_text(&read(&log)?)?;
            let table = parse_rule_table(&read(&rules)?)?;
            let key = match org_key {
                Some(h) => {
                    let bytes: [u8; 32] = hex::decode(h)?.try_into().map_err(|_| anyhow::anyhow!("org key is 32 bytes"))?;
                    VerifyingKey::from_bytes(&bytes)?
                }
                None if table.org_id == DEMO_ORG => demo_insurer_key().verifying_key(),
                None => bail!("--org-key is required for org {}", table.org_id),
            };
            let a = assess(&log, &table.verified(&key)?)?;
            println!("risk_score={}", a.event.risk_score);
            for v in &a.event.violations {
                println!("violation={} {} {} penalty={}", v.rule_id, v.timestamp, v.observed, v.penalty);
            }
            for m in &a.missing_series {
                eprintln!("warning: log has no series {m}");
            }
        }
        Command::Publish { state, log, device, rules } => {
            let mut world = open_world(&state, seed)?;
            let log = log_from_text(&read(&log)?)?;
            if let Some(rules) = rules {
                world.publish_rule_table(parse_rule_table(&read(&rules)?)?)?;
            } else if world.ledger.resolve_rule_table(world.org_id(), log.start_time).is_err() {
                world.publish_rule_table(table1())?;
            }
            if world.device(&device).is_err() {
                world.enroll_device(&device)?;
            }
            let log = rebind(log, world.device(&device)?.id)?;
            let event = world.assess(&log)?.event;
            let receipt = world.publish_event(&device, &event)?;
            world.advance_clock(u64::from(log.duration_s));
            world.save(&state)?;
            let p = &receipt.publication;
            println!("height={}", receipt.height);
            println!("pseudonym={}", p.pseudonym);
            println!("interval={}", p.interval_index);
            println!("risk_score={}", p.risk_score);
            println!("evidence={}", p.evidence_url.url());
            println!("publication_bytes={}", p.encoded_len());
        }
        Command::Reveal { target, component } => {
            let mut world = open_world(&target.state, seed)?;
            let pubn = locate(&mut world, &target)?;
            let result = match component {
                Component::Evidence => world.reveal_evidence(&target.device, &pubn).map(|log| log_to_text(&log)),
                Component::Violations => world.reveal_violations(&pubn).map(|v| {
                    v.tallies.iter().map(|t| format!("{} firings={} penalty={}\n", t.rule_id, t.firings, t.penalty)).collect()
                }),
            };
            world.save(&target.state)?;
            match result {
                Ok(text) => print!("{text}"),
                Err(sai_core::world::WorldError::Claims(sai_core::claims::ClaimsError::Denied(d))) => {
                    eprintln!("denied: {d}");
                    return Ok(ExitCode::from(EXIT_DENIED));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Audit { target } => {
            let mut world = open_world(&target.state, seed)?;
            let pubn = locate(&mut world, &target)?;
            let outcome = world.audit(&target.device, &pubn)?;
            world.save(&target.state)?;
            match outcome {
                AuditOutcome::Completed(r) => {
                    print!("{}", r.to_lines());
                    if !r.matched {
                        return Ok(ExitCode::from(EXIT_MISMATCH));
                    }
                }
                AuditOutcome::Denied(d) => {
                    eprintln!("denied: {d}");
                    return Ok(ExitCode::from(EXIT_DENIED));
                }
            }
        }
        Command::Claim { target, id, description, circumstance, attach } => {
            let circumstances = circumstance
                .iter()
                .map(|c| parse_sample_row(c).map_err(|e| anyhow::anyhow!("circumstance {c:?}: {e}")))
                .collect::<Result<Vec<_>>>()?;
            let mut world = open_world(&target.state, seed)?;
            let pubn = locate(&mut world, &target)?;
            let mut claim = Claim::new(id, pubn.pseudonym, pubn.interval_index, IncidentReport { description, circumstances });
            for path in &attach {
                let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                claim.supplementary.push(Attachment::new(path.display().to_string(), &bytes));
            }
            let (claim, outcome) = world.process_claim(&target.device, claim)?;
            world.save(&target.state)?;
            if let AuditOutcome::Completed(r) = &outcome {
                print!("{}", r.to_lines());
            }
            println!("{}", claim.to_line());
            if claim.status != ClaimStatus::Accepted {
                return Ok(ExitCode::from(EXIT_MISMATCH));
            }
        }
        Command::EscrowReshare { state, mode } => {
            let mut world = open_world(&state, seed)?;
            let committee = match mode {
                ReshareMode::Refresh => world.escrow.refresh()?,
                ReshareMode::Rotate => world.escrow.rotate()?,
            };
            println!("epoch={}", committee.epoch);
            println!("threshold={}", committee.t);
            for m in &committee.members {
                println!("member={} {}", m.id, hex::encode(m.key.as_bytes()));
            }
            let stats = world.escrow.transport_stats();
            eprintln!("transport rounds={} delivered={} dropped={}", stats.rounds, stats.delivered, stats.dropped);
            world.save(&state)?;
        }
        Command::Bench { runs, full, interval, warmup, no_reveal, out } => {
            let cfg = ExperimentConfig { runs: if full { FULL_SCALE_RUNS } else { runs }, interval_s: interval, seed, reveal: !no_reveal, warmup };
            let report = run_experiment(&cfg)?;
            write_artifacts(&report, &out)?;
            print!("{}", report.timings.to_table());
            print!("{}", report.sizes.to_text());
            eprintln!("artifacts in {}", out.display());
        }
        Command::Game { seeds, agents, horizon, incident_probability, fee_per_risk_point, claim_payout, uninsured_loss, out } => {
            let d = WorldParams::default();
            let params = WorldParams {
                horizon: horizon.unwrap_or(d.horizon),
                incident_probability_per_risk_point: incident_probability.unwrap_or(d.incident_probability_per_risk_point),
                fee_per_risk_point: fee_per_risk_point.unwrap_or(d.fee_per_risk_point),
                claim_payout: claim_payout.unwrap_or(d.claim_payout),
                uninsured_loss: uninsured_loss.unwrap_or(d.uninsured_loss),
                seed,
                ..d
            };
            let results = simulate_seeds(&agents, &params, seed, seeds)?;
            emit(out.as_deref(), &to_csv(&results))?;
            for (strategy, mean) in mean_net_by_strategy(&results) {
                eprintln!("mean_net {strategy} {mean:.4}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
