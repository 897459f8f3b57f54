//! Synthetic CAN capture generation: periodic background traffic with attack
//! messages injected at fixed intervals.
//!
//! Attack timing follows the Car Hacking collection procedure: DoS frames
//! (id 0x000) every 0.3 ms, fuzzy frames with random id and payload every
//! 0.5 ms, and gear/RPM spoofing frames every 1 ms. Injected traffic
//! coexists with the background (pure interleaving, no displacement).
//!
//! All generation is a pure function of the inputs and a seed; the generator
//! is ChaCha8, so captures are bit-reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::{AttackClass, CanFrame, LabeledRecord, MAX_CAN_ID};
use crate::derive_seed;

/// DoS injection interval: one frame every 0.3 ms.
pub const DOS_INTERVAL_US: u64 = 300;
/// Fuzzy injection interval: one frame every 0.5 ms.
pub const FUZZY_INTERVAL_US: u64 = 500;
/// Spoofing injection interval: one frame every 1 ms.
pub const SPOOF_INTERVAL_US: u64 = 1_000;

/// Default gear-spoofing target arbitration id (configurable).
pub const DEFAULT_GEAR_TARGET: u16 = 0x43F;
/// Default RPM-spoofing target arbitration id (configurable).
pub const DEFAULT_RPM_TARGET: u16 = 0x316;
/// Default spoofing payload when a spec does not provide one.
pub const DEFAULT_SPOOF_PAYLOAD: [u8; 8] = [0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77];

/// How a background id fills its payload over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadMode {
    /// Same bytes on every message.
    Constant,
    /// First byte counts messages modulo 256, the rest stay fixed.
    Counter,
    /// The two trailing bytes drift by -1/0/+1 per message (sensor-style
    /// drift); the leading bytes stay fixed.
    RandomWalk,
}

/// One periodic background transmitter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundSource {
    pub can_id: u16,
    pub period_us: u64,
    pub mode: PayloadMode,
}

/// Background traffic description: a set of periodic ids, a capture duration
/// and the RNG seed for payload generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundProfile {
    pub sources: Vec<BackgroundSource>,
    pub duration_us: u64,
    pub seed: u64,
}

impl BackgroundProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sources.is_empty() {
            return Err(SimError::EmptyProfile);
        }
        for s in &self.sources {
            if s.period_us == 0 {
                return Err(SimError::InvalidPeriod { can_id: s.can_id });
            }
            if s.can_id > MAX_CAN_ID || s.can_id == 0 {
                return Err(SimError::InvalidBackgroundId { can_id: s.can_id });
            }
        }
        Ok(())
    }
}

/// One attack to inject into a capture window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackClass,
    pub interval_us: u64,
    /// Target arbitration id, required for spoofing kinds.
    pub target_id: Option<u16>,
    /// Fixed payload for spoofing kinds.
    pub payload: Option<Vec<u8>>,
    pub start_us: u64,
    pub end_us: u64,
}

impl AttackSpec {
    pub fn dos(start_us: u64, end_us: u64) -> AttackSpec {
        AttackSpec {
            kind: AttackClass::DoS,
            interval_us: DOS_INTERVAL_US,
            target_id: None,
            payload: None,
            start_us,
            end_us,
        }
    }

    pub fn fuzzy(start_us: u64, end_us: u64) -> AttackSpec {
        AttackSpec {
            kind: AttackClass::Fuzzy,
            interval_us: FUZZY_INTERVAL_US,
            target_id: None,
            payload: None,
            start_us,
            end_us,
        }
    }

    pub fn gear_spoof(start_us: u64, end_us: u64) -> AttackSpec {
        AttackSpec {
            kind: AttackClass::GearSpoof,
            interval_us: SPOOF_INTERVAL_US,
            target_id: Some(DEFAULT_GEAR_TARGET),
            payload: Some(DEFAULT_SPOOF_PAYLOAD.to_vec()),
            start_us,
            end_us,
        }
    }

    pub fn rpm_spoof(start_us: u64, end_us: u64) -> AttackSpec {
        AttackSpec {
            kind: AttackClass::RpmSpoof,
            interval_us: SPOOF_INTERVAL_US,
            target_id: Some(DEFAULT_RPM_TARGET),
            payload: Some(DEFAULT_SPOOF_PAYLOAD.to_vec()),
            start_us,
            end_us,
        }
    }

    fn is_spoof(&self) -> bool {
        matches!(self.kind, AttackClass::GearSpoof | AttackClass::RpmSpoof)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.kind == AttackClass::Normal {
            return Err(SimError::NormalAttackKind);
        }
        if self.interval_us == 0 {
            return Err(SimError::InvalidInterval);
        }
        if self.start_us > self.end_us {
            return Err(SimError::InvalidWindow {
                start_us: self.start_us,
                end_us: self.end_us,
            });
        }
        if self.is_spoof() {
            match self.target_id {
                None => return Err(SimError::MissingSpoofTarget(self.kind)),
                Some(id) if id > MAX_CAN_ID => {
                    return Err(SimError::InvalidBackgroundId { can_id: id })
                }
                _ => {}
            }
            match &self.payload {
                None => return Err(SimError::MissingSpoofPayload(self.kind)),
                Some(p) if p.len() > 8 => return Err(SimError::InvalidSpoofPayload(p.len())),
                _ => {}
            }
        } else if self.target_id.is_some() {
            return Err(SimError::UnexpectedSpoofTarget(self.kind));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("background profile has no sources")]
    EmptyProfile,
    #[error("background id {can_id:#05x} has period 0")]
    InvalidPeriod { can_id: u16 },
    #[error("background id {can_id:#05x} invalid: must be 0x001..=0x7ff")]
    InvalidBackgroundId { can_id: u16 },
    #[error("attack spec kind must not be Normal")]
    NormalAttackKind,
    #[error("attack interval must be positive")]
    InvalidInterval,
    #[error("attack window start {start_us}us after end {end_us}us")]
    InvalidWindow { start_us: u64, end_us: u64 },
    #[error("{0} spec requires a target id")]
    MissingSpoofTarget(AttackClass),
    #[error("{0} spec requires a fixed payload")]
    MissingSpoofPayload(AttackClass),
    #[error("{0} spec must not carry a spoof target id")]
    UnexpectedSpoofTarget(AttackClass),
    #[error("spoof payload of {0} bytes exceeds 8")]
    InvalidSpoofPayload(usize),
    #[error("attack window ends at {end_us}us, beyond the capture duration {duration_us}us")]
    WindowOutsideCapture { end_us: u64, duration_us: u64 },
    #[error("more than one attack spec for class {0}")]
    DuplicateClass(AttackClass),
}

/// Per-class record counts (total / normal / injected), one row per
/// class as in the Car Hacking dataset overview.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: u64,
    pub normal: u64,
    pub injected: u64,
}

/// Capture manifest: one row per class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "Normal")]
    pub normal: ClassCounts,
    #[serde(rename = "DoS")]
    pub dos: ClassCounts,
    #[serde(rename = "Fuzzy")]
    pub fuzzy: ClassCounts,
    #[serde(rename = "GearSpoof")]
    pub gear: ClassCounts,
    #[serde(rename = "RpmSpoof")]
    pub rpm: ClassCounts,
}

impl Manifest {
    pub fn from_records(records: &[LabeledRecord]) -> Manifest {
        let mut m = Manifest::default();
        for rec in records {
            let row = m.row_mut(rec.label);
            row.total += 1;
            if rec.injected {
                row.injected += 1;
            } else {
                row.normal += 1;
            }
        }
        m
    }

    pub fn row(&self, class: AttackClass) -> &ClassCounts {
        match class {
            AttackClass::Normal => &self.normal,
            AttackClass::DoS => &self.dos,
            AttackClass::Fuzzy => &self.fuzzy,
            AttackClass::GearSpoof => &self.gear,
            AttackClass::RpmSpoof => &self.rpm,
        }
    }

    fn row_mut(&mut self, class: AttackClass) -> &mut ClassCounts {
        match class {
            AttackClass::Normal => &mut self.normal,
            AttackClass::DoS => &mut self.dos,
            AttackClass::Fuzzy => &mut self.fuzzy,
            AttackClass::GearSpoof => &mut self.gear,
            AttackClass::RpmSpoof => &mut self.rpm,
        }
    }

    pub fn total(&self) -> u64 {
        AttackClass::ALL.iter().map(|c| self.row(*c).total).sum()
    }
}

fn random_payload(rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..8).map(|_| rng.random::<u8>()).collect()
}

/// Generates the periodic background capture. Every source emits at
/// t = 0, p, 2p, ... up to and including the duration, so each id appears
/// `floor(duration/period) + 1` times. Output is sorted by timestamp.
pub fn generate_normal(profile: &BackgroundProfile) -> Result<Vec<LabeledRecord>, SimError> {
    profile.validate()?;
    let mut records = Vec::new();
    for (i, source) in profile.sources.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, i as u64));
        let base = random_payload(&mut rng);
        let mut payload = base.clone();
        let count = profile.duration_us / source.period_us + 1;
        for k in 0..count {
            match source.mode {
                PayloadMode::Constant => {}
                PayloadMode::Counter => payload[0] = (k % 256) as u8,
                PayloadMode::RandomWalk => {
                    for b in payload.iter_mut().skip(6) {
                        let step = rng.random_range(-1i8..=1);
                        *b = b.wrapping_add(step as u8);
                    }
                }
            }
            let frame = CanFrame {
                timestamp_us: k * source.period_us,
                can_id: source.can_id,
                dlc: 8,
                data: payload.clone(),
            };
            records.push(LabeledRecord::new(frame, AttackClass::Normal));
        }
    }
    records.sort_by_key(|r| r.frame.timestamp_us);
    Ok(records)
}

fn injected_frame(spec: &AttackSpec, t: u64, rng: &mut ChaCha8Rng) -> CanFrame {
    match spec.kind {
        AttackClass::DoS => CanFrame {
            timestamp_us: t,
            can_id: 0x000,
            dlc: 8,
            data: vec![0; 8],
        },
        AttackClass::Fuzzy => CanFrame {
            timestamp_us: t,
            can_id: rng.random_range(0..=MAX_CAN_ID),
            dlc: 8,
            data: random_payload(rng),
        },
        AttackClass::GearSpoof | AttackClass::RpmSpoof => {
            let data = spec.payload.clone().unwrap_or_default();
            CanFrame {
                timestamp_us: t,
                can_id: spec.target_id.unwrap_or(0),
                dlc: data.len() as u8,
                data,
            }
        }
        AttackClass::Normal => unreachable!("validated"),
    }
}

fn build_injections(spec: &AttackSpec, seed: u64) -> Vec<LabeledRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (spec.end_us - spec.start_us) / spec.interval_us + 1;
    (0..count)
        .map(|k| {
            let t = spec.start_us + k * spec.interval_us;
            LabeledRecord::new(injected_frame(spec, t, &mut rng), spec.kind)
        })
        .collect()
}

fn merge_by_timestamp(mut records: Vec<LabeledRecord>) -> Vec<LabeledRecord> {
    // Stable sort keeps background before injections at equal timestamps.
    records.sort_by_key(|r| r.frame.timestamp_us);
    records
}

/// Interleaves one attack's injections into a sorted capture. The original
/// records are untouched; the window must end within the capture.
pub fn inject_attack(
    capture: &[LabeledRecord],
    spec: &AttackSpec,
    seed: u64,
) -> Result<Vec<LabeledRecord>, SimError> {
    spec.validate()?;
    let duration_us = capture.last().map_or(0, |r| r.frame.timestamp_us);
    if spec.end_us > duration_us {
        return Err(SimError::WindowOutsideCapture {
            end_us: spec.end_us,
            duration_us,
        });
    }
    let mut merged = capture.to_vec();
    merged.extend(build_injections(spec, seed));
    Ok(merge_by_timestamp(merged))
}

/// Generates a full labeled capture: background plus at most one attack per
/// class, with a per-class count manifest.
pub fn simulate_capture(
    profile: &BackgroundProfile,
    specs: &[AttackSpec],
    seed: u64,
) -> Result<(Vec<LabeledRecord>, Manifest), SimError> {
    for spec in specs {
        spec.validate()?;
        if spec.end_us > profile.duration_us {
            return Err(SimError::WindowOutsideCapture {
                end_us: spec.end_us,
                duration_us: profile.duration_us,
            });
        }
        if specs.iter().filter(|s| s.kind == spec.kind).count() > 1 {
            return Err(SimError::DuplicateClass(spec.kind));
        }
    }
    let mut records = generate_normal(profile)?;
    // Injection seeds are derived per class so adding or removing one attack
    // never perturbs the others.
    let mut ordered: Vec<&AttackSpec> = specs.iter().collect();
    ordered.sort_by_key(|s| s.kind.index());
    for spec in ordered {
        records.extend(build_injections(spec, derive_seed(seed, spec.kind.index() as u64)));
    }
    let records = merge_by_timestamp(records);
    let manifest = Manifest::from_records(&records);
    Ok((records, manifest))
}
