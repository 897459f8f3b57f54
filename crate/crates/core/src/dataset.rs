//! Dataset partitioning: stratified 70/30 splitting, balanced subsampling
//! with the normal class kept ten times smaller than each attack class, and
//! deterministic per-epoch batch shuffling.
//!
//! The default pipeline (`prepare_bundle`) reserves the outer test split
//! before any subsampling: full capture -> 70/30 train-pool/test, subsample
//! the pool, then an inner 70/30 train/validation split. The split and
//! subsample operations are also public on their own, so the opposite
//! order (subsample the full capture, then split) is a two-line
//! composition.
//!
//! Labeled captures are persisted either as one CSV per class (the class
//! comes from the file stem) or as a merged CSV whose lines carry a trailing
//! class column on top of the plain log format.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::{self, AttackClass, LabeledRecord, LogError, ParseError, ParseErrorKind};
use crate::derive_seed;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no records to split")]
    Empty,
    #[error("fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("subsample fraction {0} outside (0, 1]")]
    InvalidSubsample(f64),
    #[error("subsample fraction {p} selects zero records for class {class} ({n} present)")]
    SubsampleEmpty { class: AttackClass, p: f64, n: usize },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Split parameters; see module docs for the pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Outer train fraction; the remainder is the held-out test set.
    pub train_fraction: f64,
    /// Per-attack-class subsample fraction `p`; Normal uses `p/10`.
    pub subsample: f64,
    /// Inner train fraction of the subsampled pool; remainder is validation.
    pub inner_train_fraction: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(subsample: f64, seed: u64) -> SplitConfig {
        SplitConfig {
            train_fraction: 0.7,
            subsample,
            inner_train_fraction: 0.7,
            seed,
        }
    }
}

/// Disjoint train/validation/test record sets.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Vec<LabeledRecord>,
    pub validation: Vec<LabeledRecord>,
    pub test: Vec<LabeledRecord>,
}

impl DatasetBundle {
    pub fn class_counts(records: &[LabeledRecord]) -> [usize; AttackClass::COUNT] {
        let mut counts = [0usize; AttackClass::COUNT];
        for r in records {
            counts[r.label.index()] += 1;
        }
        counts
    }
}

/// Record indices (into the input capture) taken by each split part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub config: SplitConfig,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn class_buckets(labels: &[AttackClass]) -> [Vec<usize>; AttackClass::COUNT] {
    let mut buckets: [Vec<usize>; AttackClass::COUNT] = Default::default();
    for (i, label) in labels.iter().enumerate() {
        buckets[label.index()].push(i);
    }
    buckets
}

/// Splits indices per class: part A receives `round(fraction * n_class)`
/// elements of each class, chosen by a seed-deterministic shuffle. Both
/// parts are returned in ascending index order.
pub fn stratified_split_indices(
    labels: &[AttackClass],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if labels.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut part_a = Vec::new();
    let mut part_b = Vec::new();
    for (class_idx, mut bucket) in class_buckets(labels).into_iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class_idx as u64));
        bucket.shuffle(&mut rng);
        let take = (fraction * bucket.len() as f64).round() as usize;
        part_a.extend_from_slice(&bucket[..take]);
        part_b.extend_from_slice(&bucket[take..]);
    }
    part_a.sort_unstable();
    part_b.sort_unstable();
    Ok((part_a, part_b))
}

/// Record-level wrapper around [`stratified_split_indices`].
pub fn stratified_split(
    records: &[LabeledRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledRecord>, Vec<LabeledRecord>), DatasetError> {
    let labels: Vec<AttackClass> = records.iter().map(|r| r.label).collect();
    let (a, b) = stratified_split_indices(&labels, fraction, seed)?;
    Ok((gather(records, &a), gather(records, &b)))
}

fn gather(records: &[LabeledRecord], indices: &[usize]) -> Vec<LabeledRecord> {
    indices.iter().map(|&i| records[i].clone()).collect()
}

/// Samples `floor(p * n)` records per attack class and `floor(p/10 * n)` of
/// the normal class, without replacement. Errors if any class present in the
/// input would end up empty.
pub fn balanced_subsample_indices(
    labels: &[AttackClass],
    p: f64,
    seed: u64,
) -> Result<Vec<usize>, DatasetError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DatasetError::InvalidSubsample(p));
    }
    let mut keep = Vec::new();
    for (class_idx, mut bucket) in class_buckets(labels).into_iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let class = AttackClass::from_index(class_idx).unwrap();
        let fraction = if class == AttackClass::Normal { p / 10.0 } else { p };
        let take = (fraction * bucket.len() as f64).floor() as usize;
        if take == 0 {
            return Err(DatasetError::SubsampleEmpty {
                class,
                p,
                n: bucket.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class_idx as u64));
        bucket.shuffle(&mut rng);
        keep.extend_from_slice(&bucket[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Record-level wrapper around [`balanced_subsample_indices`].
pub fn balanced_subsample(
    records: &[LabeledRecord],
    p: f64,
    seed: u64,
) -> Result<Vec<LabeledRecord>, DatasetError> {
    let labels: Vec<AttackClass> = records.iter().map(|r| r.label).collect();
    let keep = balanced_subsample_indices(&labels, p, seed)?;
    Ok(gather(records, &keep))
}

/// Runs the full partitioning pipeline and reports the chosen indices.
pub fn prepare_bundle(
    records: &[LabeledRecord],
    config: SplitConfig,
) -> Result<(DatasetBundle, SplitManifest), DatasetError> {
    let labels: Vec<AttackClass> = records.iter().map(|r| r.label).collect();
    let (pool, test) =
        stratified_split_indices(&labels, config.train_fraction, derive_seed(config.seed, 0))?;
    let pool_labels: Vec<AttackClass> = pool.iter().map(|&i| labels[i]).collect();
    let sub = balanced_subsample_indices(&pool_labels, config.subsample, derive_seed(config.seed, 1))?;
    let sub_global: Vec<usize> = sub.iter().map(|&i| pool[i]).collect();
    let sub_labels: Vec<AttackClass> = sub_global.iter().map(|&i| labels[i]).collect();
    let (train_local, val_local) = stratified_split_indices(
        &sub_labels,
        config.inner_train_fraction,
        derive_seed(config.seed, 2),
    )?;
    let train: Vec<usize> = train_local.iter().map(|&i| sub_global[i]).collect();
    let validation: Vec<usize> = val_local.iter().map(|&i| sub_global[i]).collect();
    let bundle = DatasetBundle {
        train: gather(records, &train),
        validation: gather(records, &validation),
        test: gather(records, &test),
    };
    let manifest = SplitManifest {
        config,
        train,
        validation,
        test,
    };
    Ok((bundle, manifest))
}

/// Deterministic per-epoch batch index plan.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    n: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<BatchPlan, DatasetError> {
        if batch_size == 0 {
            return Err(DatasetError::InvalidBatchSize);
        }
        Ok(BatchPlan {
            n,
            batch_size,
            seed,
            drop_last,
        })
    }

    /// Reshuffles from (seed, epoch) and chunks into batches.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect();
        if self.drop_last {
            if let Some(last) = batches.last() {
                if last.len() < self.batch_size {
                    batches.pop();
                }
            }
        }
        batches
    }
}

/// Reads every per-class capture (`normal.csv`, `dos.csv`, ...) found in a
/// directory, in class order.
pub fn read_capture_dir(dir: impl AsRef<Path>) -> Result<Vec<LabeledRecord>, DatasetError> {
    let dir = dir.as_ref();
    let mut records = Vec::new();
    for class in AttackClass::ALL {
        let path = dir.join(format!("{}.csv", class.stem()));
        if path.is_file() {
            records.extend(can::read_log_file(&path, class)?);
        }
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(records)
}

/// Writes a merged labeled capture: each line is the plain log line plus a
/// trailing class column.
pub fn write_labeled_csv<W: Write>(mut w: W, records: &[LabeledRecord]) -> io::Result<()> {
    for rec in records {
        writeln!(w, "{},{}", can::emit_record(rec), rec.label.stem())?;
    }
    Ok(())
}

pub fn write_labeled_csv_file(path: impl AsRef<Path>, records: &[LabeledRecord]) -> io::Result<()> {
    let mut file = io::BufWriter::new(File::create(path)?);
    write_labeled_csv(&mut file, records)?;
    file.flush()
}

/// Reads a merged labeled capture written by [`write_labeled_csv`].
pub fn read_labeled_csv<R: BufRead>(reader: R) -> Result<Vec<LabeledRecord>, DatasetError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(LogError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |kind: ParseErrorKind| {
            DatasetError::Log(LogError::Parse(ParseError { line: i + 1, kind }))
        };
        let (rest, class_name) = line
            .trim_end_matches(['\r', '\n'])
            .rsplit_once(',')
            .ok_or_else(|| {
                parse_err(ParseErrorKind::FieldCount {
                    expected: 5,
                    found: 1,
                })
            })?;
        let class = AttackClass::parse_name(class_name)
            .ok_or_else(|| parse_err(ParseErrorKind::InvalidFlag(class_name.to_string())))?;
        let rec = can::parse_record(rest, class).map_err(parse_err)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn read_labeled_csv_file(path: impl AsRef<Path>) -> Result<Vec<LabeledRecord>, DatasetError> {
    let file = File::open(path).map_err(LogError::from)?;
    read_labeled_csv(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::CanFrame;

    fn record(class: AttackClass, i: usize) -> LabeledRecord {
        let frame = CanFrame::new(i as u64, 0x100 + (i % 8) as u16, vec![i as u8]).unwrap();
        LabeledRecord::new(frame, class)
    }

    fn records_per_class(n: usize) -> Vec<LabeledRecord> {
        let mut out = Vec::new();
        for class in AttackClass::ALL {
            for i in 0..n {
                out.push(record(class, i));
            }
        }
        out
    }

    #[test]
    fn seventy_thirty_per_class() {
        let records = records_per_class(100);
        let (a, b) = stratified_split(&records, 0.7, 1).unwrap();
        assert_eq!(a.len(), 350);
        assert_eq!(b.len(), 150);
        for class in AttackClass::ALL {
            assert_eq!(DatasetBundle::class_counts(&a)[class.index()], 70);
            assert_eq!(DatasetBundle::class_counts(&b)[class.index()], 30);
        }
    }

    #[test]
    fn single_record_rounds_up() {
        let records = vec![record(AttackClass::DoS, 0)];
        let (a, b) = stratified_split(&records, 0.7, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 0));
    }

    #[test]
    fn split_is_seed_deterministic_and_partitions() {
        let records = records_per_class(33);
        let (a1, b1) = stratified_split_indices(
            &records.iter().map(|r| r.label).collect::<Vec<_>>(),
            0.7,
            5,
        )
        .unwrap();
        let (a2, b2) = stratified_split_indices(
            &records.iter().map(|r| r.label).collect::<Vec<_>>(),
            0.7,
            5,
        )
        .unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let mut union: Vec<usize> = a1.iter().chain(b1.iter()).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (0..records.len()).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_fraction_rejected() {
        let records = records_per_class(2);
        assert!(matches!(
            stratified_split(&records, 1.0, 1),
            Err(DatasetError::InvalidFraction(_))
        ));
    }

    #[test]
    fn subsample_uses_floor_and_tenth_for_normal() {
        // Attack-class count taken from the Car Hacking DoS capture.
        let mut records: Vec<LabeledRecord> = Vec::new();
        for i in 0..587_521 {
            records.push(record(AttackClass::DoS, i));
        }
        let kept = balanced_subsample(&records, 0.01, 3).unwrap();
        assert_eq!(kept.len(), 5_875);

        let mut normals: Vec<LabeledRecord> = Vec::new();
        for i in 0..1_000_000 {
            normals.push(record(AttackClass::Normal, i));
        }
        let kept = balanced_subsample(&normals, 0.01, 3).unwrap();
        assert_eq!(kept.len(), 1_000);
    }

    #[test]
    fn subsample_p_one_keeps_attacks_downsamples_normal() {
        let records = records_per_class(50);
        let kept = balanced_subsample(&records, 1.0, 3).unwrap();
        let counts = DatasetBundle::class_counts(&kept);
        assert_eq!(counts[AttackClass::Normal.index()], 5);
        for class in &AttackClass::ALL[1..] {
            assert_eq!(counts[class.index()], 50);
        }
    }

    #[test]
    fn subsample_ratio_property() {
        let records = records_per_class(200);
        let kept = balanced_subsample(&records, 0.5, 3).unwrap();
        let counts = DatasetBundle::class_counts(&kept);
        for class in &AttackClass::ALL[1..] {
            assert_eq!(counts[AttackClass::Normal.index()], counts[class.index()] / 10);
        }
    }

    #[test]
    fn subsample_empty_class_is_an_error() {
        let records = records_per_class(5);
        let err = balanced_subsample(&records, 0.1, 3).unwrap_err();
        assert!(matches!(err, DatasetError::SubsampleEmpty { .. }));
    }

    #[test]
    fn batch_sizes_with_and_without_drop_last() {
        let plan = BatchPlan::new(10, 4, 1, false).unwrap();
        let sizes: Vec<usize> = plan.epoch(0).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let plan = BatchPlan::new(10, 4, 1, true).unwrap();
        assert_eq!(plan.epoch(0).len(), 2);
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let plan = BatchPlan::new(64, 8, 9, false).unwrap();
        assert_eq!(plan.epoch(0), plan.epoch(0));
        assert_ne!(plan.epoch(0), plan.epoch(1));
    }

    #[test]
    fn bundle_parts_are_disjoint_and_test_not_subsampled() {
        let records = records_per_class(100);
        let (bundle, manifest) = prepare_bundle(&records, SplitConfig::new(0.5, 11)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for idx in manifest
            .train
            .iter()
            .chain(manifest.validation.iter())
            .chain(manifest.test.iter())
        {
            assert!(seen.insert(*idx), "index {idx} appears in two parts");
        }
        // Test side keeps the full 30 records per class.
        let counts = DatasetBundle::class_counts(&bundle.test);
        for class in AttackClass::ALL {
            assert_eq!(counts[class.index()], 30);
        }
        // Pool side: attacks floor(0.5*70)=35 -> 24/11 inner split; normal floor(3.5)=3.
        assert_eq!(bundle.train.len() + bundle.validation.len(), 4 * 35 + 3);
    }

    #[test]
    fn labeled_csv_round_trip() {
        let records = records_per_class(4);
        let mut buf = Vec::new();
        write_labeled_csv(&mut buf, &records).unwrap();
        let back = read_labeled_csv(&buf[..]).unwrap();
        assert_eq!(back, records);
    }
}
