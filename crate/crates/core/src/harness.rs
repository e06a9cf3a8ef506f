//! Repeated runs of the four-phase pipeline with per-phase timings.
//!
//! Each run generates one synthetic interval for a single device, assesses
//! it, protects and publishes it (sealing, evidence store, ledger append,
//! escrow deposit of both keys), and optionally reveals the evidence by
//! joint action before evicting it. Warm-up runs go through a throwaway
//! world, so they leave no trace in the artifacts.
//!
//! Artifacts written by [`write_artifacts`]:
//!
//! ```text
//! logs.digest      <run> <sha256 of the serialized log>
//! bundles.digest   <run> <sha256 of the encoded publication>
//! ledger.dump      the full ledger
//! sizes.txt        size report, key=value
//! stats.csv        phase,n,mean_ms,max_ms,min_ms,stddev_ms (timings, not deterministic)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::fixtures::table1;
use crate::telemetry::{default_series, generate_synthetic_interval, serialize_log};
use crate::time::Timestamp;
use crate::world::{World, WorldConfig, WorldError};

pub const DEFAULT_RUNS: u64 = 10_000;
pub const FULL_SCALE_RUNS: u64 = 100_000;
pub const DEFAULT_INTERVAL_S: u32 = 300;
pub const WARMUP_RUNS: u64 = 100;
const BENCH_DEVICE: &str = "bench-device";

/// Running mean and variance (Welford) plus extremes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub n: u64,
    pub mean: f64,
    m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        if self.n == 1 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = Self::default();
        for &x in samples {
            s.push(x);
        }
        s
    }

    /// Population standard deviation.
    pub fn stddev(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    LogData,
    RiskAssessment,
    PublishEvents,
    Encryption,
    Reveal,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::LogData, Phase::RiskAssessment, Phase::PublishEvents, Phase::Encryption, Phase::Reveal];

    pub fn name(self) -> &'static str {
        match self {
            Phase::LogData => "log_data",
            Phase::RiskAssessment => "risk_assessment",
            Phase::PublishEvents => "publish_events",
            Phase::Encryption => "encryption",
            Phase::Reveal => "reveal",
        }
    }
}

/// Samples in milliseconds per phase. `encryption` is the sealing and
/// signing part of `publish_events`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTimings {
    pub log_data: Vec<f64>,
    pub risk_assessment: Vec<f64>,
    pub publish_events: Vec<f64>,
    pub encryption: Vec<f64>,
    pub reveal: Vec<f64>,
}

impl PhaseTimings {
    pub fn samples(&self, phase: Phase) -> &[f64] {
        match phase {
            Phase::LogData => &self.log_data,
            Phase::RiskAssessment => &self.risk_assessment,
            Phase::PublishEvents => &self.publish_events,
            Phase::Encryption => &self.encryption,
            Phase::Reveal => &self.reveal,
        }
    }

    pub fn summary(&self, phase: Phase) -> Summary {
        Summary::from_samples(self.samples(phase))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,n,mean_ms,max_ms,min_ms,stddev_ms\n");
        for phase in Phase::ALL {
            let s = self.summary(phase);
            if s.n > 0 {
                let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{:.6}", phase.name(), s.n, s.mean, s.max, s.min, s.stddev());
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>7} {:>10} {:>10} {:>10} {:>10}\n", "phase", "n", "mean ms", "max ms", "min ms", "stddev");
        for phase in Phase::ALL {
            let s = self.summary(phase);
            if s.n > 0 {
                let _ = writeln!(
                    out,
                    "{:<16} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    phase.name(),
                    s.n,
                    s.mean,
                    s.max,
                    s.min,
                    s.stddev()
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SizeReport {
    pub runs: u64,
    pub mean_log_bytes: f64,
    pub max_log_bytes: usize,
    pub mean_publication_bytes: f64,
    pub max_publication_bytes: usize,
    pub mean_evidence_bytes: f64,
    /// Largest `ciphertext - plaintext` seen for an evidence blob.
    pub max_evidence_overhead: usize,
    pub min_evidence_overhead: usize,
}

impl SizeReport {
    pub fn to_text(&self) -> String {
        format!(
            "runs={}\nmean_log_bytes={:.2}\nmax_log_bytes={}\nmean_publication_bytes={:.2}\nmax_publication_bytes={}\nmean_evidence_bytes={:.2}\nmax_evidence_overhead={}\nmin_evidence_overhead={}\n",
            self.runs,
            self.mean_log_bytes,
            self.max_log_bytes,
            self.mean_publication_bytes,
            self.max_publication_bytes,
            self.mean_evidence_bytes,
            self.max_evidence_overhead,
            self.min_evidence_overhead,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentConfig {
    pub runs: u64,
    pub interval_s: u32,
    pub seed: u64,
    pub reveal: bool,
    pub warmup: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { runs: DEFAULT_RUNS, interval_s: DEFAULT_INTERVAL_S, seed: 0, reveal: true, warmup: WARMUP_RUNS }
    }
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub timings: PhaseTimings,
    pub sizes: SizeReport,
    pub log_digests: Vec<[u8; 32]>,
    pub bundle_digests: Vec<[u8; 32]>,
    pub world: World,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn bench_world(seed: u64) -> Result<World, WorldError> {
    let mut world = World::new(WorldConfig::with_seed(seed))?;
    world.publish_rule_table(table1())?;
    world.enroll_device(BENCH_DEVICE)?;
    Ok(world)
}

struct RunOutput {
    log_digest: [u8; 32],
    bundle_digest: [u8; 32],
    log_bytes: usize,
    publication_bytes: usize,
    evidence_bytes: usize,
}

fn one_run(world: &mut World, seed: u64, run: u64, cfg: &ExperimentConfig, timings: Option<&mut PhaseTimings>) -> Result<RunOutput, WorldError> {
    let models = default_series();
    let device = world.device(BENCH_DEVICE)?.id;
    let start: Timestamp = "2021-02-01T00:00:00.00".parse().expect("valid literal");
    let start = start.plus_secs(run as i64 * i64::from(cfg.interval_s));

    let t0 = Instant::now();
    let log = generate_synthetic_interval(&models, seed, device, run, start, cfg.interval_s)?;
    let t1 = Instant::now();
    let event = world.assess(&log)?.event;
    let t2 = Instant::now();
    let receipt = world.publish_event(BENCH_DEVICE, &event)?;
    let t3 = Instant::now();
    if cfg.reveal {
        let revealed = world.reveal_evidence(BENCH_DEVICE, &receipt.publication)?;
        debug_assert_eq!(revealed, log);
    }
    let t4 = Instant::now();
    world.evict(&receipt.publication)?;
    world.advance_clock(u64::from(cfg.interval_s));

    if let Some(t) = timings {
        t.log_data.push(ms(t1 - t0));
        t.risk_assessment.push(ms(t2 - t1));
        t.publish_events.push(ms(t3 - t2));
        t.encryption.push(ms(receipt.encryption));
        if cfg.reveal {
            t.reveal.push(ms(t4 - t3));
        }
    }
    let plain = serialize_log(&log);
    let encoded = receipt.publication.encode();
    Ok(RunOutput {
        log_digest: Sha256::digest(&plain).into(),
        bundle_digest: Sha256::digest(&encoded).into(),
        log_bytes: plain.len(),
        publication_bytes: encoded.len(),
        evidence_bytes: receipt.evidence_size,
    })
}

/// Runs the pipeline `runs` times. Event content is a pure function of the
/// seed; only the timings vary between invocations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, WorldError> {
    if cfg.runs == 0 {
        return Err(WorldError::State("runs must be at least 1".into()));
    }
    if cfg.warmup > 0 {
        let mut scratch = bench_world(cfg.seed ^ 0x5741_524d)?;
        for run in 0..cfg.warmup {
            one_run(&mut scratch, cfg.seed ^ 0x5741_524d, run, cfg, None)?;
        }
    }

    let mut world = bench_world(cfg.seed)?;
    let mut timings = PhaseTimings::default();
    let mut sizes = SizeReport { runs: cfg.runs, min_evidence_overhead: usize::MAX, ..SizeReport::default() };
    let (mut log_sum, mut pub_sum, mut ev_sum) = (0f64, 0f64, 0f64);
    let mut log_digests = Vec::with_capacity(cfg.runs as usize);
    let mut bundle_digests = Vec::with_capacity(cfg.runs as usize);
    for run in 0..cfg.runs {
        let out = one_run(&mut world, cfg.seed, run, cfg, Some(&mut timings))?;
        log_sum += out.log_bytes as f64;
        pub_sum += out.publication_bytes as f64;
        ev_sum += out.evidence_bytes as f64;
        sizes.max_log_bytes = sizes.max_log_bytes.max(out.log_bytes);
        sizes.max_publication_bytes = sizes.max_publication_bytes.max(out.publication_bytes);
        let overhead = out.evidence_bytes.saturating_sub(out.log_bytes);
        sizes.max_evidence_overhead = sizes.max_evidence_overhead.max(overhead);
        sizes.min_evidence_overhead = sizes.min_evidence_overhead.min(overhead);
        log_digests.push(out.log_digest);
        bundle_digests.push(out.bundle_digest);
    }
    let n = cfg.runs as f64;
    sizes.mean_log_bytes = log_sum / n;
    sizes.mean_publication_bytes = pub_sum / n;
    sizes.mean_evidence_bytes = ev_sum / n;
    Ok(ExperimentReport { timings, sizes, log_digests, bundle_digests, world })
}

fn digest_lines(digests: &[[u8; 32]]) -> String {
    digests.iter().enumerate().fold(String::new(), |mut out, (i, d)| {
        let _ = writeln!(out, "{i} {}", hex::encode(d));
        out
    })
}

pub fn write_artifacts(report: &ExperimentReport, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("logs.digest"), digest_lines(&report.log_digests))?;
    fs::write(dir.join("bundles.digest"), digest_lines(&report.bundle_digests))?;
    fs::write(dir.join("ledger.dump"), report.world.ledger.dump())?;
    fs::write(dir.join("sizes.txt"), report.sizes.to_text())?;
    fs::write(dir.join("stats.csv"), report.timings.to_csv())?;
    Ok(())
}

/// Names of the artifacts whose bytes depend only on the seed.
pub const DETERMINISTIC_ARTIFACTS: [&str; 4] = ["logs.digest", "bundles.digest", "ledger.dump", "sizes.txt"];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(samples: &[f64]) -> (f64, f64, f64, f64) {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let max = samples.iter().cloned().fold(f64::MIN, f64::max);
        let min = samples.iter().cloned().fold(f64::MAX, f64::min);
        (mean, max, min, var.sqrt())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn single_sample_summary() {
        let s = Summary::from_samples(&[3.25]);
        assert_eq!((s.n, s.mean, s.max, s.min, s.stddev()), (1, 3.25, 3.25, 3.25, 0.0));
    }

    #[test]
    fn known_summary() {
        let s = Summary::from_samples(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.stddev(), 2.0);
        assert_eq!((s.min, s.max), (2.0, 9.0));
    }

    proptest! {
        #[test]
        fn summary_matches_two_pass(samples in prop::collection::vec(0.0f64..1e4, 1..200)) {
            let s = Summary::from_samples(&samples);
            let (mean, max, min, sd) = naive(&samples);
            prop_assert!(close(s.mean, mean));
            prop_assert_eq!(s.max, max);
            prop_assert_eq!(s.min, min);
            prop_assert!((s.stddev() - sd).abs() <= 1e-9 * sd.max(1.0));
        }
    }

    #[test]
    fn one_run_experiment() {
        let cfg = ExperimentConfig { runs: 1, interval_s: 30, seed: 3, reveal: true, warmup: 0 };
        let r = run_experiment(&cfg).unwrap();
        for phase in Phase::ALL {
            let s = r.timings.summary(phase);
            assert_eq!(s.n, 1);
            assert_eq!(s.mean, s.max);
            assert_eq!(s.min, s.max);
            assert_eq!(s.stddev(), 0.0);
        }
        assert_eq!(r.sizes.runs, 1);
        assert!(r.sizes.mean_log_bytes > 0.0 && r.sizes.max_publication_bytes <= 1024);
        assert!(run_experiment(&ExperimentConfig { runs: 0, ..cfg }).is_err());
    }

    #[test]
    fn content_is_seed_determined() {
        let cfg = ExperimentConfig { runs: 4, interval_s: 20, seed: 11, reveal: false, warmup: 2 };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&ExperimentConfig { warmup: 0, reveal: true, ..cfg }).unwrap();
        assert_eq!(a.log_digests, b.log_digests);
        assert_eq!(a.bundle_digests, b.bundle_digests);
        assert_eq!(a.sizes, b.sizes);
        assert!(a.timings.reveal.is_empty());
        let c = run_experiment(&ExperimentConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.log_digests, c.log_digests);
    }
}
