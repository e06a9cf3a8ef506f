//! Logged sensor series for one assessment interval.
//!
//! An [`IntervalLog`] keeps its points ordered by `(timestamp, field_name)`.
//! That total order is what both file forms reproduce, so a log survives
//! serialization unchanged.
//!
//! Binary layout (all integers big-endian, `varint` = LEB128, `svarint` =
//! zigzag LEB128):
//!
//! ```text
//! "SAIL" | version:u8=1 | device:16 | interval:varint | start:i64 (centis)
//!        | duration:u32 (s) | n_series:varint | n_lifecycle:varint
//! series*  (strictly ascending by name)
//!     name:str | type:u8 | count:varint
//!     | first offset from start:svarint | (count-1) deltas:svarint
//!     | values: bool 1 byte, float f64 bits, integer i64
//! lifecycle* kind:u8 | offset from start:svarint
//! ```
//!
//! The text form mirrors the tabular layout used for inspection:
//!
//! ```text
//! # device: 00000000-0000-0000-0000-000000000000
//! # interval: 0
//! # start: 2021-01-31T16:40:00.00
//! # duration: 300
//! Velocity | float | 28 | 2021-01-31T16:40:47.26
//! @ vehicle_start | 2021-01-31T16:40:01.00
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;
use uuid::Uuid;

use crate::codec::{DecodeError, Reader, Writer};
use crate::time::{Timestamp, CENTIS_PER_SECOND};

pub const DEFAULT_INTERVAL_SECS: u32 = 300;
const LOG_MAGIC: &[u8; 4] = b"SAIL";
const LOG_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("timestamp {ts} outside interval [{start}, {end})")]
    OutOfInterval { ts: Timestamp, start: Timestamp, end: Timestamp },
    #[error("series {field} holds {expected} values, got {got}")]
    TypeMismatch { field: String, expected: DataType, got: DataType },
    #[error("series {field}: timestamp {ts} does not follow last sample {last}")]
    NonMonotone { field: String, ts: Timestamp, last: Timestamp },
    #[error("non-finite float in series {0}")]
    NonFinite(String),
    #[error("sampling frequency must be positive ({0})")]
    InvalidFrequency(String),
    #[error("duplicate series {0}")]
    DuplicateSeries(String),
    #[error("lifecycle: {0}")]
    Lifecycle(String),
    #[error("points are not sorted: {0}")]
    Unsorted(String),
    #[error("malformed log: {0}")]
    Decode(#[from] DecodeError),
    #[error("line {line}: {msg}")]
    Text { line: usize, msg: String },
}

/// Opaque device identifier registered with the insurer at enrollment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DeviceId(pub Uuid);

impl DeviceId {
    pub fn from_bytes(b: [u8; 16]) -> Self {
        Self(Uuid::from_bytes(b))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        self.0.as_bytes()
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_bytes(rng.gen())
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.hyphenated().fmt(f)
    }
}

impl FromStr for DeviceId {
    type Err = uuid::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(Self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DataType {
    Boolean,
    Float,
    Integer,
}

impl DataType {
    pub(crate) fn tag(self) -> u8 {
        match self {
            DataType::Boolean => 0,
            DataType::Float => 1,
            DataType::Integer => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(DataType::Boolean),
            1 => Ok(DataType::Float),
            2 => Ok(DataType::Integer),
            tag => Err(DecodeError::UnknownTag { what: "data type", tag }),
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataType::Boolean => "boolean",
            DataType::Float => "float",
            DataType::Integer => "integer",
        })
    }
}

impl FromStr for DataType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // Table-style labels carry units ("Float m/s"); only the first word counts.
        let head = s.split_whitespace().next().unwrap_or("");
        match head.to_ascii_lowercase().as_str() {
            "boolean" | "bool" => Ok(DataType::Boolean),
            "float" => Ok(DataType::Float),
            "integer" | "int" => Ok(DataType::Integer),
            _ => Err(format!("unknown data type {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Bool(bool),
    Float(f64),
    Int(i64),
}

impl Value {
    pub fn data_type(&self) -> DataType {
        match self {
            Value::Bool(_) => DataType::Boolean,
            Value::Float(_) => DataType::Float,
            Value::Int(_) => DataType::Integer,
        }
    }

    /// Numeric view used by thresholds and linear penalties.
    pub fn as_f64(&self) -> f64 {
        match *self {
            Value::Bool(b) => f64::from(u8::from(b)),
            Value::Float(v) => v,
            Value::Int(v) => v as f64,
        }
    }

    pub fn parse_typed(s: &str, ty: DataType) -> Result<Self, String> {
        let s = s.trim();
        match ty {
            DataType::Boolean => match s {
                "True" | "true" => Ok(Value::Bool(true)),
                "False" | "false" => Ok(Value::Bool(false)),
                _ => Err(format!("expected True/False, got {s:?}")),
            },
            DataType::Float => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Value::Float(v)),
                _ => Err(format!("expected finite float, got {s:?}")),
            },
            DataType::Integer => s.parse().map(Value::Int).map_err(|_| format!("expected integer, got {s:?}")),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(true) => f.write_str("True"),
            Value::Bool(false) => f.write_str("False"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Int(v) => write!(f, "{v}"),
        }
    }
}

/// Sampling frequency in Hz as a positive rational `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frequency {
    num: u32,
    den: u32,
}

impl Frequency {
    pub fn new(num: u32, den: u32) -> Result<Self, TelemetryError> {
        if num == 0 || den == 0 {
            return Err(TelemetryError::InvalidFrequency(format!("{num}/{den} Hz")));
        }
        Ok(Self { num, den })
    }

    pub fn hz(hz: u32) -> Result<Self, TelemetryError> {
        Self::new(hz, 1)
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// floor(freq × duration)
    pub fn samples_in(&self, duration_s: u32) -> u64 {
        u64::from(self.num) * u64::from(duration_s) / u64::from(self.den)
    }

    /// Offset of the k-th sample from the interval start, in centiseconds.
    fn offset_centis(&self, k: u64) -> i64 {
        (k * CENTIS_PER_SECOND as u64 * u64::from(self.den) / u64::from(self.num)) as i64
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{} Hz", self.num)
        } else {
            write!(f, "{}/{} Hz", self.num, self.den)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSpec {
    pub field_name: String,
    pub data_type: DataType,
    pub unit: String,
    pub sampling_freq: Frequency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub field_name: String,
    pub value: Value,
    pub timestamp: Timestamp,
}

impl SamplePoint {
    pub fn new(field_name: impl Into<String>, value: Value, timestamp: Timestamp) -> Self {
        Self { field_name: field_name.into(), value, timestamp }
    }

    fn order_key(&self) -> (Timestamp, &str) {
        (self.timestamp, &self.field_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleKind {
    DeviceConnected,
    DeviceRemoved,
    VehicleStart,
    VehicleStop,
}

impl LifecycleKind {
    fn tag(self) -> u8 {
        match self {
            LifecycleKind::DeviceConnected => 0,
            LifecycleKind::DeviceRemoved => 1,
            LifecycleKind::VehicleStart => 2,
            LifecycleKind::VehicleStop => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(LifecycleKind::DeviceConnected),
            1 => Ok(LifecycleKind::DeviceRemoved),
            2 => Ok(LifecycleKind::VehicleStart),
            3 => Ok(LifecycleKind::VehicleStop),
            tag => Err(DecodeError::UnknownTag { what: "lifecycle kind", tag }),
        }
    }

    fn name(self) -> &'static str {
        match self {
            LifecycleKind::DeviceConnected => "device_connected",
            LifecycleKind::DeviceRemoved => "device_removed",
            LifecycleKind::VehicleStart => "vehicle_start",
            LifecycleKind::VehicleStop => "vehicle_stop",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            LifecycleKind::DeviceConnected,
            LifecycleKind::DeviceRemoved,
            LifecycleKind::VehicleStart,
            LifecycleKind::VehicleStop,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LifecycleEvent {
    pub kind: LifecycleKind,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalLog {
    pub device: DeviceId,
    pub interval_index: u64,
    pub start_time: Timestamp,
    pub duration_s: u32,
    points: Vec<SamplePoint>,
    lifecycle: Vec<LifecycleEvent>,
}

impl IntervalLog {
    pub fn new(device: DeviceId, interval_index: u64, start_time: Timestamp, duration_s: u32) -> Self {
        Self { device, interval_index, start_time, duration_s, points: Vec::new(), lifecycle: Vec::new() }
    }

    /// Builds a log from points in any order, validating every invariant.
    pub fn from_points(
        device: DeviceId,
        interval_index: u64,
        start_time: Timestamp,
        duration_s: u32,
        mut points: Vec<SamplePoint>,
    ) -> Result<Self, TelemetryError> {
        points.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        let log = Self { device, interval_index, start_time, duration_s, points, lifecycle: Vec::new() };
        log.validate()?;
        Ok(log)
    }

    pub fn end_time(&self) -> Timestamp {
        self.start_time.plus_secs(i64::from(self.duration_s))
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        ts >= self.start_time && ts < self.end_time()
    }

    pub fn points(&self) -> &[SamplePoint] {
        &self.points
    }

    pub fn lifecycle(&self) -> &[LifecycleEvent] {
        &self.lifecycle
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Series present in the log with their value types, ordered by name.
    pub fn series(&self) -> BTreeMap<&str, DataType> {
        let mut out = BTreeMap::new();
        for p in &self.points {
            out.entry(p.field_name.as_str()).or_insert(p.value.data_type());
        }
        out
    }

    pub fn points_of<'a>(&'a self, field: &'a str) -> impl Iterator<Item = &'a SamplePoint> + 'a {
        self.points.iter().filter(move |p| p.field_name == field)
    }

    /// Removes every point matching `pred`, keeping the order of the rest.
    pub fn retain_points(&mut self, pred: impl FnMut(&SamplePoint) -> bool) {
        self.points.retain(pred);
    }

    pub fn append_sample(&mut self, point: SamplePoint) -> Result<(), TelemetryError> {
        self.check_point(&point)?;
        if let Some(last) = self.points_of(&point.field_name).last() {
            if last.value.data_type() != point.value.data_type() {
                return Err(TelemetryError::TypeMismatch {
                    field: point.field_name.clone(),
                    expected: last.value.data_type(),
                    got: point.value.data_type(),
                });
            }
            if point.timestamp <= last.timestamp {
                return Err(TelemetryError::NonMonotone {
                    field: point.field_name.clone(),
                    ts: point.timestamp,
                    last: last.timestamp,
                });
            }
        }
        let at = self.points.partition_point(|p| p.order_key() <= point.order_key());
        self.points.insert(at, point);
        Ok(())
    }

    pub fn record_lifecycle(&mut self, event: LifecycleEvent) -> Result<(), TelemetryError> {
        if !self.contains(event.timestamp) {
            return Err(self.out_of_interval(event.timestamp));
        }
        if let Some(last) = self.lifecycle.last() {
            if event.timestamp < last.timestamp {
                return Err(TelemetryError::Lifecycle(format!(
                    "{} at {} precedes previous event at {}",
                    event.kind.name(),
                    event.timestamp,
                    last.timestamp
                )));
            }
        }
        check_alternation(self.lifecycle.iter().chain(std::iter::once(&event)))?;
        self.lifecycle.push(event);
        Ok(())
    }

    fn out_of_interval(&self, ts: Timestamp) -> TelemetryError {
        TelemetryError::OutOfInterval { ts, start: self.start_time, end: self.end_time() }
    }

    fn check_point(&self, p: &SamplePoint) -> Result<(), TelemetryError> {
        if !self.contains(p.timestamp) {
            return Err(self.out_of_interval(p.timestamp));
        }
        if let Value::Float(v) = p.value {
            if !v.is_finite() {
                return Err(TelemetryError::NonFinite(p.field_name.clone()));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), TelemetryError> {
        let mut types: BTreeMap<&str, DataType> = BTreeMap::new();
        for pair in self.points.windows(2) {
            if pair[0].order_key() == pair[1].order_key() {
                return Err(TelemetryError::NonMonotone {
                    field: pair[1].field_name.clone(),
                    ts: pair[1].timestamp,
                    last: pair[0].timestamp,
                });
            }
            if pair[0].order_key() > pair[1].order_key() {
                return Err(TelemetryError::Unsorted(format!(
                    "{} {} after {} {}",
                    pair[1].field_name, pair[1].timestamp, pair[0].field_name, pair[0].timestamp
                )));
            }
        }
        for p in &self.points {
            self.check_point(p)?;
            let expected = *types.entry(&p.field_name).or_insert(p.value.data_type());
            if expected != p.value.data_type() {
                return Err(TelemetryError::TypeMismatch {
                    field: p.field_name.clone(),
                    expected,
                    got: p.value.data_type(),
                });
            }
        }
        for e in &self.lifecycle {
            if !self.contains(e.timestamp) {
                return Err(self.out_of_interval(e.timestamp));
            }
        }
        if self.lifecycle.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
            return Err(TelemetryError::Lifecycle("events out of order".into()));
        }
        check_alternation(self.lifecycle.iter())
    }
}

/// Device and vehicle state must toggle; no kind may repeat within its pair.
fn check_alternation<'a>(events: impl Iterator<Item = &'a LifecycleEvent>) -> Result<(), TelemetryError> {
    let (mut attach, mut run) = (None, None);
    for e in events {
        let slot = match e.kind {
            LifecycleKind::DeviceConnected | LifecycleKind::DeviceRemoved => &mut attach,
            LifecycleKind::VehicleStart | LifecycleKind::VehicleStop => &mut run,
        };
        if *slot == Some(e.kind) {
            return Err(TelemetryError::Lifecycle(format!("two consecutive {} events", e.kind.name())));
        }
        *slot = Some(e.kind);
    }
    Ok(())
}

/// Value distribution for one synthetic series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueModel {
    Bernoulli { p: f64 },
    /// Gaussian clipped to `[floor, ceil]` where given; floats are rounded to 0.01.
    Gaussian { mean: f64, sd: f64, floor: Option<f64>, ceil: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesModel {
    pub spec: SeriesSpec,
    pub model: ValueModel,
}

impl SeriesModel {
    fn sample(&self, rng: &mut ChaCha8Rng, normal: Option<&Normal<f64>>) -> Value {
        match (self.model, self.spec.data_type) {
            (ValueModel::Bernoulli { p }, DataType::Boolean) => Value::Bool(rng.gen_bool(p)),
            (ValueModel::Bernoulli { p }, ty) => {
                let v = f64::from(u8::from(rng.gen_bool(p)));
                numeric(v, ty)
            }
            (ValueModel::Gaussian { floor, ceil, .. }, ty) => {
                let mut v = normal.expect("gaussian model").sample(rng);
                if let Some(lo) = floor {
                    v = v.max(lo);
                }
                if let Some(hi) = ceil {
                    v = v.min(hi);
                }
                match ty {
                    DataType::Boolean => Value::Bool(v >= 0.5),
                    ty => numeric(v, ty),
                }
            }
        }
    }
}

fn numeric(v: f64, ty: DataType) -> Value {
    match ty {
        DataType::Integer => Value::Int(v.round() as i64),
        _ => Value::Float((v * 100.0).round() / 100.0),
    }
}

/// The four series of the reference configuration with their default weights.
pub fn default_series() -> Vec<SeriesModel> {
    let spec = |name: &str, ty, unit: &str, num, den| SeriesSpec {
        field_name: name.into(),
        data_type: ty,
        unit: unit.into(),
        sampling_freq: Frequency::new(num, den).expect("positive"),
    };
    vec![
        SeriesModel {
            spec: spec("Precipitation", DataType::Boolean, "", 1, 2),
            model: ValueModel::Bernoulli { p: 0.1 },
        },
        SeriesModel {
            spec: spec("Velocity", DataType::Float, "m/s", 2, 1),
            model: ValueModel::Gaussian { mean: 20.0, sd: 8.0, floor: Some(0.0), ceil: None },
        },
        SeriesModel {
            spec: spec("Acceleration", DataType::Float, "m/s^2", 5, 1),
            model: ValueModel::Gaussian { mean: 0.0, sd: 0.8, floor: None, ceil: None },
        },
        SeriesModel {
            spec: spec("EngineRPM", DataType::Integer, "rpm", 5, 1),
            model: ValueModel::Gaussian { mean: 2500.0, sd: 1200.0, floor: Some(600.0), ceil: None },
        },
    ]
}

/// Pseudo-random interval with uniformly spaced samples per series.
///
/// The output is a pure function of the arguments: the generator is seeded
/// from `seed` and uses `interval_index` as its stream.
pub fn generate_synthetic_interval(
    models: &[SeriesModel],
    seed: u64,
    device: DeviceId,
    interval_index: u64,
    start_time: Timestamp,
    duration_s: u32,
) -> Result<IntervalLog, TelemetryError> {
    let mut seen = std::collections::HashSet::new();
    for m in models {
        if !seen.insert(m.spec.field_name.as_str()) {
            return Err(TelemetryError::DuplicateSeries(m.spec.field_name.clone()));
        }
        match m.model {
            ValueModel::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                return Err(TelemetryError::InvalidFrequency(format!("bernoulli p={p}")));
            }
            ValueModel::Gaussian { sd, .. } if !(sd.is_finite() && sd >= 0.0) => {
                return Err(TelemetryError::InvalidFrequency(format!("gaussian sd={sd}")));
            }
            _ => {}
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(interval_index);

    let total: u64 = models.iter().map(|m| m.spec.sampling_freq.samples_in(duration_s)).sum();
    let mut points = Vec::with_capacity(total as usize);
    for m in models {
        let normal = match m.model {
            ValueModel::Gaussian { mean, sd, .. } => Some(Normal::new(mean, sd).expect("checked sd")),
            ValueModel::Bernoulli { .. } => None,
        };
        let freq = m.spec.sampling_freq;
        for k in 0..freq.samples_in(duration_s) {
            points.push(SamplePoint {
                field_name: m.spec.field_name.clone(),
                value: m.sample(&mut rng, normal.as_ref()),
                timestamp: start_time.plus_centis(freq.offset_centis(k)),
            });
        }
    }
    points.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    Ok(IntervalLog { device, interval_index, start_time, duration_s, points, lifecycle: Vec::new() })
}

pub fn serialize_log(log: &IntervalLog) -> Vec<u8> {
    let series = log.series();
    let mut w = Writer::with_capacity(64 + log.points.len() * 9);
    w.raw(LOG_MAGIC)
        .u8(LOG_VERSION)
        .raw(log.device.as_bytes())
        .varint(log.interval_index)
        .i64(log.start_time.centis())
        .u32(log.duration_s)
        .varint(series.len() as u64)
        .varint(log.lifecycle.len() as u64);

    let start = log.start_time.centis();
    for (name, ty) in &series {
        let pts: Vec<&SamplePoint> = log.points_of(name).collect();
        w.str(name).u8(ty.tag()).varint(pts.len() as u64);
        let mut prev = start;
        for p in &pts {
            w.svarint(p.timestamp.centis() - prev);
            prev = p.timestamp.centis();
        }
        for p in &pts {
            match p.value {
                Value::Bool(b) => w.u8(u8::from(b)),
                Value::Float(v) => w.f64(v),
                Value::Int(v) => w.i64(v),
            };
        }
    }
    for e in &log.lifecycle {
        w.u8(e.kind.tag()).svarint(e.timestamp.centis() - start);
    }
    w.finish()
}

pub fn deserialize_log(bytes: &[u8]) -> Result<IntervalLog, TelemetryError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != LOG_MAGIC {
        return Err(DecodeError::BadMagic.into());
    }
    match r.u8()? {
        LOG_VERSION => {}
        v => return Err(DecodeError::Version(v).into()),
    }
    let device = DeviceId::from_bytes(r.array()?);
    let interval_index = r.varint()?;
    let start_time = Timestamp(r.i64()?);
    let duration_s = r.u32()?;
    let n_series = r.varint()?;
    let n_lifecycle = r.varint()?;

    let mut log = IntervalLog::new(device, interval_index, start_time, duration_s);
    let mut prev_name: Option<String> = None;
    for _ in 0..n_series {
        let name = r.str()?.to_owned();
        if prev_name.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(TelemetryError::Unsorted(format!("series {name} out of order")));
        }
        let ty = DataType::from_tag(r.u8()?)?;
        let count = usize::try_from(r.varint()?).map_err(|_| DecodeError::Varint)?;
        if count > r.remaining() {
            return Err(DecodeError::Truncated(r.position()).into());
        }
        let mut stamps = Vec::with_capacity(count);
        let mut prev = start_time.centis();
        for i in 0..count {
            let delta = r.svarint()?;
            if i > 0 && delta < 0 {
                return Err(TelemetryError::Unsorted(format!("series {name} has a negative time delta")));
            }
            prev = prev.checked_add(delta).ok_or(DecodeError::Varint)?;
            stamps.push(Timestamp(prev));
        }
        for ts in stamps {
            let value = match ty {
                DataType::Boolean => match r.u8()? {
                    0 => Value::Bool(false),
                    1 => Value::Bool(true),
                    tag => return Err(DecodeError::UnknownTag { what: "boolean", tag }.into()),
                },
                DataType::Float => Value::Float(r.f64()?),
                DataType::Integer => Value::Int(r.i64()?),
            };
            log.points.push(SamplePoint { field_name: name.clone(), value, timestamp: ts });
        }
        prev_name = Some(name);
    }
    for _ in 0..n_lifecycle {
        let kind = LifecycleKind::from_tag(r.u8()?)?;
        let ts = Timestamp(start_time.centis() + r.svarint()?);
        log.lifecycle.push(LifecycleEvent { kind, timestamp: ts });
    }
    r.finish()?;
    // Series arrive grouped by name; a stable sort by timestamp restores the
    // (timestamp, name) order because ties keep series order.
    log.points.sort_by_key(|p| p.timestamp);
    log.validate()?;
    Ok(log)
}

/// Row-per-sample text form.
pub fn log_to_text(log: &IntervalLog) -> String {
    let mut out = format!(
        "# device: {}\n# interval: {}\n# start: {}\n# duration: {}\n",
        log.device, log.interval_index, log.start_time, log.duration_s
    );
    for p in &log.points {
        out.push_str(&format!("{} | {} | {} | {}\n", p.field_name, p.value.data_type(), p.value, p.timestamp));
    }
    for e in &log.lifecycle {
        out.push_str(&format!("@ {} | {}\n", e.kind.name(), e.timestamp));
    }
    out
}

/// Parses one `Field | type | value | 'timestamp'` row.
pub fn parse_sample_row(row: &str) -> Result<SamplePoint, String> {
    let cols: Vec<&str> = row.split('|').map(str::trim).collect();
    let [field, ty, value, ts] = cols[..] else {
        return Err(format!("expected 4 columns, found {}", cols.len()));
    };
    let ty: DataType = ty.parse()?;
    let value = Value::parse_typed(value, ty)?;
    let timestamp = ts.parse().map_err(|e: crate::time::TimestampError| e.to_string())?;
    Ok(SamplePoint::new(field, value, timestamp))
}

/// Parses the text form. Rows may appear in any order; they are re-sorted.
pub fn log_from_text(text: &str) -> Result<IntervalLog, TelemetryError> {
    let mut device = None;
    let mut interval = None;
    let mut start = None;
    let mut duration = None;
    let mut points = Vec::new();
    let mut lifecycle = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| TelemetryError::Text { line, msg };
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
                "device" => device = Some(val.parse::<DeviceId>().map_err(|e| err(e.to_string()))?),
                "interval" => interval = Some(val.parse::<u64>().map_err(|e| err(e.to_string()))?),
                "start" => start = Some(val.parse::<Timestamp>().map_err(|e| err(e.to_string()))?),
                "duration" => duration = Some(val.parse::<u32>().map_err(|e| err(e.to_string()))?),
                _ => {}
            }
            continue;
        }
        let cols: Vec<&str> = row.split('|').map(str::trim).collect();
        if let Some(kind) = cols[0].strip_prefix('@') {
            let [_, ts] = cols[..] else {
                return Err(err("lifecycle rows have 2 columns".into()));
            };
            let kind = LifecycleKind::parse(kind.trim()).ok_or_else(|| err(format!("unknown lifecycle kind {kind:?}")))?;
            let timestamp = ts.parse().map_err(|e: crate::time::TimestampError| err(e.to_string()))?;
            lifecycle.push(LifecycleEvent { kind, timestamp });
            continue;
        }
        points.push(parse_sample_row(row).map_err(err)?);
    }

    let missing = |what: &str| TelemetryError::Text { line: 0, msg: format!("missing header {what}") };
    let mut log = IntervalLog::from_points(
        device.ok_or_else(|| missing("device"))?,
        interval.ok_or_else(|| missing("interval"))?,
        start.ok_or_else(|| missing("start"))?,
        duration.unwrap_or(DEFAULT_INTERVAL_SECS),
        points,
    )?;
    lifecycle.sort_by_key(|e| e.timestamp);
    for e in lifecycle {
        log.record_lifecycle(e)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t0() -> Timestamp {
        "2021-01-31T16:40:00.00".parse().unwrap()
    }

    fn default_log(seed: u64) -> IntervalLog {
        generate_synthetic_interval(&default_series(), seed, DeviceId::default(), 0, t0(), 300).unwrap()
    }

    #[test]
    fn precipitation_count() {
        let models: Vec<_> = default_series().into_iter().filter(|m| m.spec.field_name == "Precipitation").collect();
        let log = generate_synthetic_interval(&models, 1, DeviceId::default(), 0, t0(), 300).unwrap();
        // floor(0.5 * 300)
        assert_eq!(log.len(), 150);
    }

    #[test]
    fn default_configuration_counts() {
        let log = default_log(3);
        // 600 + 1500 + 1500 + 150
        assert_eq!(log.len(), 3750);
        for m in default_series() {
            let expected = (m.spec.sampling_freq.as_f64() * 300.0).floor() as usize;
            assert_eq!(log.points_of(&m.spec.field_name).count(), expected);
        }
    }

    #[test]
    fn zero_duration_is_empty_and_valid() {
        let log = generate_synthetic_interval(&default_series(), 9, DeviceId::default(), 0, t0(), 0).unwrap();
        assert!(log.is_empty());
        assert_eq!(deserialize_log(&serialize_log(&log)).unwrap(), log);
    }

    #[test]
    fn rejects_zero_frequency_and_duplicate_series() {
        assert!(Frequency::new(0, 1).is_err());
        assert!(Frequency::new(1, 0).is_err());
        let mut models = default_series();
        models.push(models[0].clone());
        assert!(matches!(
            generate_synthetic_interval(&models, 1, DeviceId::default(), 0, t0(), 300),
            Err(TelemetryError::DuplicateSeries(_))
        ));
    }

    #[test]
    fn generator_is_deterministic_per_stream() {
        assert_eq!(default_log(11), default_log(11));
        assert_ne!(default_log(11), default_log(12));
        let other = generate_synthetic_interval(&default_series(), 11, DeviceId::default(), 1, t0(), 300).unwrap();
        assert_ne!(other.points(), default_log(11).points());
    }

    #[test]
    fn append_sample_cases() {
        let mut log = IntervalLog::new(DeviceId::default(), 0, t0(), 300);
        let at = "2021-01-31T16:40:47.26".parse().unwrap();
        log.append_sample(SamplePoint::new("Velocity", Value::Float(28.0), at)).unwrap();
        assert_eq!(log.points(), &[SamplePoint::new("Velocity", Value::Float(28.0), at)]);

        log.append_sample(SamplePoint::new("Velocity", Value::Float(30.0), at.plus_centis(50))).unwrap();
        assert_eq!(log.len(), 2);

        let before = t0().plus_centis(-1);
        assert!(matches!(
            log.append_sample(SamplePoint::new("Velocity", Value::Float(1.0), before)),
            Err(TelemetryError::OutOfInterval { .. })
        ));
        assert!(matches!(
            log.append_sample(SamplePoint::new("Velocity", Value::Int(1), at.plus_centis(60))),
            Err(TelemetryError::TypeMismatch { .. })
        ));
        assert!(matches!(
            log.append_sample(SamplePoint::new("Velocity", Value::Float(1.0), at)),
            Err(TelemetryError::NonMonotone { .. })
        ));
        assert!(matches!(
            log.append_sample(SamplePoint::new("Velocity", Value::Float(1.0), at.plus_centis(50))),
            Err(TelemetryError::NonMonotone { .. })
        ));
        let dup = vec![SamplePoint::new("Velocity", Value::Float(1.0), at), SamplePoint::new("Velocity", Value::Float(2.0), at)];
        assert!(matches!(IntervalLog::from_points(DeviceId::default(), 0, t0(), 300, dup), Err(TelemetryError::NonMonotone { .. })));
        let end = log.end_time();
        assert!(log.append_sample(SamplePoint::new("EngineRPM", Value::Int(1), end)).is_err());
    }

    #[test]
    fn lifecycle_alternation() {
        let mut log = IntervalLog::new(DeviceId::default(), 0, t0(), 300);
        let ev = |kind, s| LifecycleEvent { kind, timestamp: t0().plus_secs(s) };
        log.record_lifecycle(ev(LifecycleKind::DeviceConnected, 0)).unwrap();
        log.record_lifecycle(ev(LifecycleKind::VehicleStart, 1)).unwrap();
        log.record_lifecycle(ev(LifecycleKind::DeviceRemoved, 2)).unwrap();
        assert!(log.record_lifecycle(ev(LifecycleKind::DeviceRemoved, 3)).is_err());
        assert!(log.record_lifecycle(ev(LifecycleKind::VehicleStop, 1)).is_err());
        log.record_lifecycle(ev(LifecycleKind::VehicleStop, 4)).unwrap();
        let bytes = serialize_log(&log);
        assert_eq!(deserialize_log(&bytes).unwrap(), log);
        assert_eq!(log_from_text(&log_to_text(&log)).unwrap(), log);
    }

    #[test]
    fn encoded_sizes() {
        let empty = IntervalLog::new(DeviceId::default(), 0, t0(), 300);
        let n = serialize_log(&empty).len();
        assert!(n < 128, "header-only encoding is {n} bytes");
        for seed in 0..5 {
            let n = serialize_log(&default_log(seed)).len();
            assert!(n <= 100 * 1024, "default interval encodes to {n} bytes");
        }
    }

    #[test]
    fn deserialize_rejects_malformed_input() {
        let bytes = serialize_log(&default_log(1));
        assert!(matches!(deserialize_log(&bytes[..bytes.len() - 3]), Err(TelemetryError::Decode(_))));
        assert!(matches!(deserialize_log(b"XXXX"), Err(TelemetryError::Decode(DecodeError::BadMagic))));

        // Series type tag lives right after the first series name.
        let mut bad = bytes.clone();
        let name_at = bad.windows(12).position(|w| w == b"Acceleration").unwrap();
        bad[name_at + 12] = 9;
        assert!(matches!(
            deserialize_log(&bad),
            Err(TelemetryError::Decode(DecodeError::UnknownTag { what: "data type", .. }))
        ));

        // Hand-built series with a backwards step.
        let mut w = Writer::new();
        w.raw(LOG_MAGIC).u8(LOG_VERSION).raw(&[0; 16]).varint(0).i64(0).u32(300).varint(1).varint(0);
        w.str("Velocity").u8(DataType::Float.tag()).varint(2).svarint(100).svarint(-10).f64(1.0).f64(2.0);
        assert!(matches!(deserialize_log(&w.finish()), Err(TelemetryError::Unsorted(_))));
    }

    fn arb_log() -> impl Strategy<Value = IntervalLog> {
        let point = (0usize..3, 0i64..30_000, any::<bool>(), -1e6f64..1e6, any::<i64>());
        proptest::collection::vec(point, 0..60).prop_map(|raw| {
            let names = ["Acceleration", "EngineRPM", "Precipitation"];
            let points = raw
                .into_iter()
                .map(|(s, off, b, f, i)| {
                    let value = match s {
                        0 => Value::Float(f),
                        1 => Value::Int(i),
                        _ => Value::Bool(b),
                    };
                    SamplePoint::new(names[s], value, Timestamp(off))
                })
                .collect::<Vec<_>>();
            let mut seen = std::collections::HashSet::new();
            let points = points.into_iter().filter(|p| seen.insert((p.field_name.clone(), p.timestamp))).collect();
            IntervalLog::from_points(DeviceId::from_bytes([7; 16]), 42, Timestamp(0), 300, points).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn binary_and_text_round_trip(log in arb_log()) {
            let bytes = serialize_log(&log);
            let back = deserialize_log(&bytes).unwrap();
            prop_assert_eq!(&back, &log);
            prop_assert_eq!(serialize_log(&back), bytes);
            prop_assert_eq!(log_from_text(&log_to_text(&log)).unwrap(), log);
        }

        #[test]
        fn timestamps_monotone_per_series(seed in any::<u64>()) {
            let log = generate_synthetic_interval(&default_series(), seed, DeviceId::default(), 0, Timestamp(0), 30).unwrap();
            for name in ["Velocity", "Acceleration", "EngineRPM", "Precipitation"] {
                let ts: Vec<_> = log.points_of(name).map(|p| p.timestamp).collect();
                prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(ts.iter().all(|t| log.contains(*t)));
            }
        }
    }
}
