use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use ed25519_dalek::{Signature, SigningKey};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sai_core::assessment::{risk_assessment, RuleTally};
use sai_core::claims::{audit_event, RevealedEvent};
use sai_core::escrow::{
    combine, Authorization, CombineError, Denial, EscrowConfig, EscrowError, EscrowService, Release, ReleasePolicy, Share,
};
use sai_core::fixtures::{demo_insurer_key, table1, table2};
use sai_core::game::{simulate_seeds, AgentStrategy, WorldParams};
use sai_core::harness::{run_experiment, write_artifacts, ExperimentConfig, DETERMINISTIC_ARTIFACTS};
use sai_core::ledger::{EventFilter, EventPublication, Ledger};
use sai_core::protection::{decrypt_blob, KeyId, KeyPurpose, SingleUseKey, MAX_BLOB_OVERHEAD};
use sai_core::rules::{parse_rule_table, RuleTable};
use sai_core::telemetry::{default_series, generate_synthetic_interval, serialize_log, IntervalLog, SamplePoint, Value};
use sai_core::world::{World, WorldConfig, DEFAULT_REVEAL_HORIZON};
use sai_core::Timestamp;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn base_time() -> Timestamp {
    "2021-02-01T00:00:00.00".parse().unwrap()
}

fn golden_fixture() -> Outcome {
    let table = table1();
    let key = demo_insurer_key().verifying_key();
    let verified = table.verified(&key).map_err(|e| e.to_string())?;
    let event = risk_assessment(&table2(), &verified).map_err(|e| e.to_string())?;
    let summary = event.violation_summary();
    let firings: Vec<(&str, u32)> = summary.tallies.iter().map(|t| (t.rule_id.as_str(), t.firings)).collect();
    ensure!(event.risk_score == 90.0, "score {}", event.risk_score);
    ensure!(firings == [("R1", 2), ("R2", 2), ("R3", 2), ("R4", 1)], "multiset {firings:?}");
    let r2_zero = event.violations.iter().filter(|v| v.rule_id == "R2" && v.penalty == 0.0).count();
    ensure!(r2_zero == 1, "{r2_zero} zero-penalty R2 entries");
    let again = risk_assessment(&table2(), &verified).map_err(|e| e.to_string())?;
    ensure!(again == event, "assessment not deterministic");
    Ok("score=90 R1:2 R2:2 (one at 0) R3:2 R4:1".into())
}

fn timing_and_space() -> (Outcome, Outcome) {
    let started = Instant::now();
    let cfg = ExperimentConfig { runs: 10_000, ..ExperimentConfig::default() };
    let points = generate_synthetic_interval(&default_series(), 0, sai_core::DeviceId::from_bytes([0; 16]), 0, base_time(), cfg.interval_s).unwrap().len();
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let elapsed = started.elapsed().as_secs_f64();
    let assess = report.timings.summary(sai_core::harness::Phase::RiskAssessment);
    let enc = report.timings.summary(sai_core::harness::Phase::Encryption);
    let timing = (|| {
        ensure!(points == 3750, "{points} points per interval");
        ensure!(assess.n == 10_000 && enc.n == 10_000, "sample counts {} {}", assess.n, enc.n);
        ensure!(assess.mean <= 55.0, "mean assessment {:.4} ms", assess.mean);
        ensure!(enc.mean <= 15.0, "mean encryption {:.4} ms", enc.mean);
        Ok(format!(
            "assessment mean {:.4} ms, encryption mean {:.4} ms over 10000 runs of 3750 points ({elapsed:.1} s total)",
            assess.mean, enc.mean
        ))
    })();

    let s = report.sizes;
    let space = (|| {
        let events = report.world.ledger.query_events(&EventFilter::default());
        ensure!(events.len() == 10_000, "{} publications on ledger", events.len());
        let max_on_chain = events.iter().map(EventPublication::encoded_len).max().unwrap_or(0);
        ensure!(s.max_log_bytes <= 100_000, "log {} bytes", s.max_log_bytes);
        ensure!(max_on_chain <= 1024 && s.max_publication_bytes <= 1024, "publication {max_on_chain} bytes");
        ensure!(s.max_evidence_overhead <= MAX_BLOB_OVERHEAD, "evidence overhead {} bytes", s.max_evidence_overhead);
        Ok(format!(
            "log mean {:.0} B (max {}), publication max {} B, evidence overhead {} B (limit {})",
            s.mean_log_bytes, s.max_log_bytes, max_on_chain, s.max_evidence_overhead, MAX_BLOB_OVERHEAD
        ))
    })();
    (timing, space)
}

fn random_table(rng: &mut ChaCha8Rng, version: u64, effective_from: Timestamp) -> RuleTable {
    let mut rows = Vec::new();
    let cmp = |rng: &mut ChaCha8Rng| *[">=", ">", "<=", "<"].choose(rng).unwrap();
    if rng.gen_bool(0.8) {
        rows.push(format!("R1 | Precipitation | boolean | value is True | +{}", rng.gen_range(0..20)));
    }
    if rng.gen_bool(0.8) {
        let a = f64::from(rng.gen_range(1500..4000)) / 100.0;
        let op = cmp(rng);
        let penalty = if op.starts_with('>') {
            format!("+{}*(value-{a})", rng.gen_range(1..20))
        } else {
            format!("+{}", rng.gen_range(0..20))
        };
        rows.push(format!("R2 | Velocity | float | value {op} {a} | {penalty}"));
    }
    if rng.gen_bool(0.8) {
        let b = f64::from(rng.gen_range(50..250)) / 100.0;
        rows.push(format!("R3 | Acceleration | float | |value| {} {b} | +{}", cmp(rng), rng.gen_range(0..30)));
    }
    if rng.gen_bool(0.8) || rows.is_empty() {
        rows.push(format!("R4 | EngineRPM | integer | value {} {} | +{}", cmp(rng), rng.gen_range(1000..7000), rng.gen_range(0..30)));
    }
    let mut text = format!("# org: CompanyOne\n# version: {version}\n# effective_from: {effective_from}\n");
    for r in rows {
        text.push_str(&format!("CompanyOne | {r}\n"));
    }
    parse_rule_table(&text).unwrap()
}

fn round_trip() -> Outcome {
    const RUNS: u64 = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut world = World::new(WorldConfig::with_seed(4)).map_err(|e| e.to_string())?;
    world.enroll_device("dev").map_err(|e| e.to_string())?;
    let device = world.device("dev").unwrap().id;
    let (mut matched, mut fired) = (0, 0);
    for run in 0..RUNS {
        let start = base_time().plus_secs(run as i64 * 100);
        world.publish_rule_table(random_table(&mut rng, run + 1, start)).map_err(|e| e.to_string())?;
        let log = generate_synthetic_interval(&default_series(), rng.gen(), device, run, start, rng.gen_range(5..60)).unwrap();
        let event = world.assess(&log).map_err(|e| e.to_string())?.event;
        let pubn = world.publish_event("dev", &event).map_err(|e| e.to_string())?.publication;
        world.advance_clock(DEFAULT_REVEAL_HORIZON);
        let revealed = world.reveal_event("dev", &pubn).map_err(|e| format!("run {run}: {e}"))?;
        ensure!(revealed.violations == event.violation_summary(), "run {run}: violations differ");
        ensure!(revealed.evidence == log && serialize_log(&revealed.evidence) == serialize_log(&log), "run {run}: evidence differs");
        let report = world.audit_revealed(&pubn, &revealed).map_err(|e| e.to_string())?;
        ensure!(report.matched, "run {run}: audit mismatch\n{}", report.to_lines());
        matched += 1;
        fired += usize::from(!event.violations.is_empty());
    }
    Ok(format!("{matched}/{RUNS} honest runs matched bit-exactly, {fired} with violations, {RUNS} distinct rule tables"))
}

fn flip_sig(sig: &Signature, byte: usize) -> Signature {
    let mut b = sig.to_bytes();
    b[byte % 64] ^= 1 << (byte % 8);
    Signature::from_bytes(&b)
}

fn mutate_point(log: &IntervalLog, idx: usize) -> IntervalLog {
    let mut points: Vec<SamplePoint> = log.points().to_vec();
    let p = &mut points[idx % log.len()];
    p.value = match p.value {
        Value::Bool(b) => Value::Bool(!b),
        Value::Int(i) => Value::Int(i + 1),
        Value::Float(f) => Value::Float(f + 0.01),
    };
    IntervalLog::from_points(log.device, log.interval_index, log.start_time, log.duration_s, points).unwrap()
}

fn tamper_detection() -> Outcome {
    const CASES: usize = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut world = World::new(WorldConfig::with_seed(5)).map_err(|e| e.to_string())?;
    world.publish_rule_table(table1()).map_err(|e| e.to_string())?;
    world.enroll_device("dev").map_err(|e| e.to_string())?;
    let device = world.device("dev").unwrap().id;
    let mut honest: Vec<(EventPublication, RevealedEvent)> = Vec::new();
    for run in 0..40u64 {
        let log = generate_synthetic_interval(&default_series(), run, device, run, base_time().plus_secs(run as i64 * 20), 20).unwrap();
        let event = world.assess(&log).map_err(|e| e.to_string())?.event;
        let pubn = world.publish_event("dev", &event).map_err(|e| e.to_string())?.publication;
        world.advance_clock(DEFAULT_REVEAL_HORIZON);
        let revealed = world.reveal_event("dev", &pubn).map_err(|e| e.to_string())?;
        honest.push((pubn, revealed));
    }
    let table = world.ledger.resolve_rule_table("CompanyOne", base_time()).map_err(|e| e.to_string())?;
    let org_key = world.insurer_verifying_key();

    let kinds = ["evidence point", "violation entry", "score", "device signature", "rule-table signature", "ciphertext byte"];
    let mut counts = [0usize; 6];
    let mut false_accepts = Vec::new();
    for case in 0..CASES {
        let kind = case % kinds.len();
        counts[kind] += 1;
        let (pubn, revealed) = honest.choose(&mut rng).unwrap();
        let (mut pubn, mut revealed, mut table) = (pubn.clone(), revealed.clone(), table.clone());
        let device_key = world.resolve_device_key(&pubn);
        match kind {
            0 => revealed.evidence = mutate_point(&revealed.evidence, rng.gen()),
            1 => {
                if revealed.violations.tallies.is_empty() {
                    revealed.violations.tallies.push(RuleTally { rule_id: "R1".into(), firings: 1, penalty: 5.0 });
                } else {
                    let n = revealed.violations.tallies.len();
                    let t = &mut revealed.violations.tallies[rng.gen_range(0..n)];
                    if rng.gen() {
                        t.firings += 1;
                    } else {
                        t.penalty += 1.0;
                    }
                }
            }
            2 => pubn.risk_score += [0.5, -0.5, 1.0, 1e-9][rng.gen_range(0..4)],
            3 => pubn.signature = flip_sig(&pubn.signature, rng.gen()),
            4 => table.signature = Some(flip_sig(table.signature.as_ref().unwrap(), rng.gen())),
            _ => {
                let (blob, key) = if rng.gen() {
                    (pubn.violated_rules.clone(), &revealed.violated_rules_key)
                } else {
                    (world.store.get(&pubn.evidence_url).map_err(|e| e.to_string())?, &revealed.evidence_key)
                };
                let mut blob = blob;
                let n = blob.ciphertext.len();
                blob.ciphertext[rng.gen_range(0..n)] ^= 1 << rng.gen_range(0..8);
                if decrypt_blob(&blob, key).is_ok() {
                    false_accepts.push(format!("case {case}: tampered {} ciphertext decrypted", blob.purpose));
                }
                continue;
            }
        }
        let report = audit_event(&pubn, &revealed, &table, &org_key, device_key.as_ref()).map_err(|e| e.to_string())?;
        if report.matched {
            false_accepts.push(format!("case {case}: {} mutation accepted", kinds[kind]));
        }
    }
    ensure!(false_accepts.is_empty(), "{} false accepts: {:?}", false_accepts.len(), &false_accepts[..false_accepts.len().min(5)]);
    let per_kind: Vec<String> = kinds.iter().zip(counts).map(|(k, c)| format!("{k} {c}")).collect();
    Ok(format!("{CASES} mutations, 0 false accepts ({})", per_kind.join(", ")))
}

fn escrow_service(seed: u64) -> (EscrowService, SigningKey, SigningKey) {
    let ledger = Arc::new(Ledger::new());
    let mut svc = EscrowService::new("escrow", SigningKey::from_bytes(&[42; 32]), ledger, EscrowConfig::default(), seed).unwrap();
    let client = SigningKey::from_bytes(&[1; 32]);
    let insurer = SigningKey::from_bytes(&[2; 32]);
    svc.register_party("client", client.verifying_key());
    svc.register_party("insurer", insurer.verifying_key());
    (svc, client, insurer)
}

fn joint() -> ReleasePolicy {
    ReleasePolicy::JointAction { client: "client".into(), insurer: "insurer".into() }
}

fn random_key(rng: &mut ChaCha8Rng, purpose: KeyPurpose) -> SingleUseKey {
    SingleUseKey::from_parts(KeyId(rng.gen()), purpose, rng.gen())
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0u32..1 << n).map(move |mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
}

fn escrow() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let (mut svc, client, insurer) = escrow_service(6);
    let key = random_key(&mut rng, KeyPurpose::Evidence);
    let id = svc.deposit_secret(key.clone(), joint(), 0).map_err(|e| e.to_string())?;
    let shares: Vec<Share> =
        svc.committee().members.iter().map(|m| svc.member(&m.id).unwrap().share(&id, 0).unwrap().clone()).collect();
    let (mut recovered, mut refused) = (0, 0);
    for subset in subsets(5).filter(|s| !s.is_empty()) {
        let picked: Vec<Share> = subset.iter().map(|&i| shares[i].clone()).collect();
        match (subset.len(), combine(&picked, 3)) {
            (k, Ok(secret)) if k >= 3 => {
                ensure!(secret == key.material(), "subset {subset:?} recovered a wrong key");
                recovered += usize::from(k == 3);
            }
            (k, Err(CombineError::BelowThreshold { .. })) if k < 3 => refused += 1,
            (k, r) => return Err(format!("subset of {k}: {r:?}")),
        }
    }
    ensure!(recovered == 10 && refused == 15, "{recovered} 3-subsets recovered, {refused} sub-threshold refused");

    let c = Authorization::sign("client", &client, &id);
    let i = Authorization::sign("insurer", &insurer, &id);
    let stranger = Authorization::sign("client", &SigningKey::from_bytes(&[3; 32]), &id);
    for creds in [vec![c.clone()], vec![i.clone()], vec![stranger, i.clone()], vec![]] {
        ensure!(matches!(svc.request_release(&id, &creds, 1), Err(EscrowError::Denied(_))), "joint release with {} creds", creds.len());
    }
    ensure!(matches!(svc.request_release(&id, &[c, i], 1), Ok(Release::Key(k)) if k == key), "joint release with both failed");

    let (mut svc, ..) = escrow_service(60);
    let timed = random_key(&mut rng, KeyPurpose::ViolatedRules);
    let tid = svc.deposit_secret(timed.clone(), ReleasePolicy::TimeElapsed { release_after: 50 }, 0).map_err(|e| e.to_string())?;
    let mut seen = vec![svc.committee().members.iter().map(|m| m.id.clone()).collect::<Vec<_>>()];
    for _ in 0..3 {
        svc.rotate().map_err(|e| e.to_string())?;
        let ids: Vec<String> = svc.committee().members.iter().map(|m| m.id.clone()).collect();
        ensure!(seen.iter().all(|old| old.iter().all(|o| !ids.contains(o))), "rotation reused members");
        seen.push(ids);
    }
    ensure!(svc.committee().epoch == 3, "epoch {}", svc.committee().epoch);
    ensure!(matches!(svc.request_release(&tid, &[], 50), Ok(Release::Key(k)) if k == timed), "secret lost across rotations");

    let (mut svc, client, insurer) = escrow_service(61);
    let stranger = SigningKey::from_bytes(&[3; 32]);
    let mut secrets = Vec::new();
    for _ in 0..300 {
        let policy = if rng.gen() { ReleasePolicy::TimeElapsed { release_after: rng.gen_range(0..20_000) } } else { joint() };
        let id = svc.deposit_secret(random_key(&mut rng, KeyPurpose::Evidence), policy.clone(), 0).map_err(|e| e.to_string())?;
        secrets.push((id, policy));
    }
    let (mut now, mut early, mut wrongly_denied, mut releases, mut requests) = (0u64, 0, 0, 0, 0);
    while requests < 10_000 {
        now += rng.gen_range(0..3);
        let (id, policy) = secrets.choose(&mut rng).unwrap().clone();
        let other: KeyId = KeyId(rng.gen());
        let mut creds = Vec::new();
        let (mut client_ok, mut insurer_ok) = (false, false);
        if rng.gen_bool(0.3) {
            creds.push(Authorization::sign("client", &client, &id));
            client_ok = true;
        }
        if rng.gen_bool(0.3) {
            creds.push(Authorization::sign("insurer", &insurer, &id));
            insurer_ok = true;
        }
        if rng.gen_bool(0.3) {
            creds.push(Authorization::sign("client", &stranger, &id));
        }
        if rng.gen_bool(0.3) {
            creds.push(Authorization::sign("insurer", &insurer, &other));
        }
        creds.shuffle(&mut rng);
        let satisfied = match policy {
            ReleasePolicy::TimeElapsed { release_after } => now >= release_after,
            ReleasePolicy::JointAction { .. } => client_ok && insurer_ok,
        };
        requests += 1;
        match svc.request_release(&id, &creds, now) {
            Ok(Release::Key(_)) => {
                releases += 1;
                early += usize::from(!satisfied);
            }
            Ok(Release::AlreadyReleased(_)) => {}
            Err(EscrowError::Denied(Denial::TooEarly { .. } | Denial::MissingSignature { .. })) => wrongly_denied += usize::from(satisfied),
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure!(early == 0, "{early} releases before policy satisfaction");
    ensure!(wrongly_denied == 0, "{wrongly_denied} satisfied requests denied");
    Ok(format!(
        "10/10 3-subsets recover, 15/15 sub-threshold refused, 3 rotations kept the secret, {requests} randomized requests with {releases} releases and 0 early, joint action needs both"
    ))
}

fn incentive_game() -> Outcome {
    let agents = [AgentStrategy::Honest, AgentStrategy::Suppressor(1.0), AgentStrategy::NonParticipant];
    let params = WorldParams::default();
    let results = simulate_seeds(&agents, &params, 0, 100).map_err(|e| e.to_string())?;
    ensure!(results.len() == 100, "{} seeds", results.len());
    let (mut honest, mut supp, mut filed, mut accepted) = (0.0, 0.0, 0, 0);
    for r in &results {
        let [h, s, n] = &r.ledgers[..] else { return Err("ledger count".into()) };
        honest += h.net();
        supp += s.net();
        filed += s.claims_filed;
        accepted += s.claims_accepted;
        ensure!(n.fees_paid == 0.0 && n.payouts_received == 0.0 && n.claims_filed == 0, "seed {}: nonparticipant was insured", r.seed);
        ensure!(
            n.uninsured_losses == f64::from(n.incidents) * params.uninsured_loss,
            "seed {}: nonparticipant absorbed {} for {} incidents",
            r.seed,
            n.uninsured_losses,
            n.incidents
        );
    }
    let (honest, supp) = (honest / 100.0, supp / 100.0);
    ensure!(filed > 0, "suppressors filed no claims; regime does not exercise audits");
    ensure!(accepted == 0, "suppressors won {accepted}/{filed} claims");
    ensure!(supp < honest, "mean net suppressor {supp:.2} >= honest {honest:.2}");
    Ok(format!("100 seeds: suppressor accepted 0/{filed}, mean net honest {honest:.2} > suppressor {supp:.2}; nonparticipants absorb every loss"))
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig { runs: 1000, seed: 7, ..ExperimentConfig::default() };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for name in ["a", "b"] {
        let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
        write_artifacts(&report, &dir.path().join(name)).map_err(|e| e.to_string())?;
    }
    let mut bytes = 0;
    for f in DETERMINISTIC_ARTIFACTS {
        let a = std::fs::read(dir.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("b").join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{f} differs between runs");
        bytes += a.len();
    }
    Ok(format!("bench --runs 1000 --seed 7 twice: {} identical ({bytes} bytes)", DETERMINISTIC_ARTIFACTS.join(", ")))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    })
}

#[test]
fn acceptance() {
    let (timing, space) = catch_unwind(timing_and_space).unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    let results = [
        ("1 golden fixture", guarded(golden_fixture)),
        ("2 timing", timing),
        ("3 space", space),
        ("4 round trip", guarded(round_trip)),
        ("5 tamper detection", guarded(tamper_detection)),
        ("6 escrow", guarded(escrow)),
        ("7 incentive game", guarded(incentive_game)),
        ("8 determinism", guarded(determinism)),
    ];
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (name, r) in &results {
        let _ = match r {
            Ok(detail) => writeln!(err, "criterion {name}: PASS: {detail}"),
            Err(detail) => {
                failed.push(*name);
                writeln!(err, "criterion {name}: FAIL: {detail}")
            }
        };
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
