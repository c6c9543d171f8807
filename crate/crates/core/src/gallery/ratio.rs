//! Pairwise object scale statistics.
//!
//! For every gallery image with objects of at least two distinct categories,
//! each ordered pair of boxes yields the area ratio `area(obj1) / area(obj2)`.
//! The table folds these into per-pair `[min, max]` intervals. Ratios are kept
//! as exact rationals so that `(a, b)` and `(b, a)` are exact reciprocals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive};
use rayon::prelude::*;

use super::{read_sidecar, GalleryIndex};
use crate::backends::Detector;
use crate::error::{Error, Result};
use crate::types::BBox;

/// Donor area as a fraction of base-image area, used when a pair was never observed.
pub const FALLBACK_INTERVAL: (f64, f64) = (0.05, 0.30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatioRecord {
    pub obj1: String,
    pub obj2: String,
    pub ratio: BigRational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatioStats {
    pub min: BigRational,
    pub max: BigRational,
    pub count: u64,
}

impl RatioStats {
    pub fn min_f64(&self) -> f64 {
        self.min.to_f64().unwrap_or(f64::NAN)
    }

    pub fn max_f64(&self) -> f64 {
        self.max.to_f64().unwrap_or(f64::NAN)
    }

    fn reciprocal(&self) -> RatioStats {
        RatioStats {
            min: self.max.recip(),
            max: self.min.recip(),
            count: self.count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioInterval {
    pub min: f64,
    pub max: f64,
    /// Set when the pair was never observed; the bounds are then a fraction
    /// of the base-image area rather than a ratio to a base object.
    pub fallback: bool,
}

/// One record per ordered pair of boxes with distinct labels and non-zero area.
pub fn records_for_image(boxes: &[BBox]) -> Vec<RatioRecord> {
    let mut records = Vec::new();
    for a in boxes.iter().filter(|b| b.area() > 0) {
        for b in boxes.iter().filter(|b| b.area() > 0) {
            if a.label == b.label {
                continue;
            }
            records.push(RatioRecord {
                obj1: a.label.clone(),
                obj2: b.label.clone(),
                ratio: BigRational::new(BigInt::from(a.area()), BigInt::from(b.area())),
            });
        }
    }
    records
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RatioTable {
    pairs: BTreeMap<(String, String), RatioStats>,
}

impl RatioTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: RatioRecord) {
        let key = (record.obj1, record.obj2);
        match self.pairs.get_mut(&key) {
            Some(stats) => {
                if record.ratio < stats.min {
                    stats.min = record.ratio.clone();
                }
                if record.ratio > stats.max {
                    stats.max = record.ratio;
                }
                stats.count += 1;
            }
            None => {
                self.pairs.insert(
                    key,
                    RatioStats {
                        min: record.ratio.clone(),
                        max: record.ratio,
                        count: 1,
                    },
                );
            }
        }
    }

    pub fn observe_image(&mut self, boxes: &[BBox]) {
        for record in records_for_image(boxes) {
            self.insert(record);
        }
    }

    pub fn merge(&mut self, other: RatioTable) {
        for ((obj1, obj2), stats) in other.pairs {
            match self.pairs.get_mut(&(obj1.clone(), obj2.clone())) {
                Some(mine) => {
                    if stats.min < mine.min {
                        mine.min = stats.min;
                    }
                    if stats.max > mine.max {
                        mine.max = stats.max;
                    }
                    mine.count += stats.count;
                }
                None => {
                    self.pairs.insert((obj1, obj2), stats);
                }
            }
        }
    }

    pub fn get(&self, obj1: &str, obj2: &str) -> Option<&RatioStats> {
        self.pairs.get(&(obj1.to_string(), obj2.to_string()))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, &RatioStats)> {
        self.pairs
            .iter()
            .map(|((a, b), s)| (a.as_str(), b.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stored interval for the pair, or [`FALLBACK_INTERVAL`] flagged as fallback.
    pub fn interval(&self, obj1: &str, obj2: &str) -> RatioInterval {
        match self.get(obj1, obj2) {
            Some(stats) => RatioInterval {
                min: stats.min_f64(),
                max: stats.max_f64(),
                fallback: false,
            },
            None => RatioInterval {
                min: FALLBACK_INTERVAL.0,
                max: FALLBACK_INTERVAL.1,
                fallback: true,
            },
        }
    }

    /// `obj1 TAB obj2 TAB ratio_min TAB ratio_max TAB count`, sorted by pair.
    pub fn to_tsv_string(&self) -> String {
        let mut out = String::new();
        for ((a, b), stats) in &self.pairs {
            let _ = writeln!(
                out,
                "{a}\t{b}\t{}\t{}\t{}",
                stats.min_f64(),
                stats.max_f64(),
                stats.count
            );
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv_string()).map_err(|e| Error::io(path, e))
    }

    /// Parses the TSV form. Decimal values lose exactness, so the
    /// lexicographically smaller direction of each pair is authoritative and
    /// the other direction is rebuilt as its exact reciprocal.
    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut raw: BTreeMap<(String, String), RatioStats> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::malformed(origin, format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let parse_ratio = |s: &str| -> Result<BigRational> {
                let v: f64 = s.parse().map_err(|_| bad("ratio is not a number"))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad("ratio must be positive and finite"));
                }
                BigRational::from_float(v).ok_or_else(|| bad("ratio is not representable"))
            };
            let min = parse_ratio(fields[2])?;
            let max = parse_ratio(fields[3])?;
            if min > max {
                return Err(bad("ratio_min exceeds ratio_max"));
            }
            let count: u64 = fields[4]
                .parse()
                .map_err(|_| bad("count is not an integer"))?;
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(bad("empty category"));
            }
            raw.insert(
                (fields[0].to_string(), fields[1].to_string()),
                RatioStats { min, max, count },
            );
        }

        let mut pairs = BTreeMap::new();
        for ((a, b), stats) in &raw {
            if a < b || !raw.contains_key(&(b.clone(), a.clone())) {
                let canonical = if a < b {
                    stats.clone()
                } else {
                    stats.reciprocal()
                };
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                if let Some(reverse) = raw.get(&(hi.clone(), lo.clone())) {
                    let derived = canonical.reciprocal();
                    if reverse.count != derived.count
                        || !close(&reverse.min, &derived.min)
                        || !close(&reverse.max, &derived.max)
                    {
                        return Err(Error::malformed(
                            origin,
                            format!("rows ({lo}, {hi}) and ({hi}, {lo}) are not reciprocal"),
                        ));
                    }
                }
                pairs.insert((hi.clone(), lo.clone()), canonical.reciprocal());
                pairs.insert((lo.clone(), hi.clone()), canonical);
            }
        }
        Ok(RatioTable { pairs })
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

fn close(a: &BigRational, b: &BigRational) -> bool {
    let tol = BigRational::new(BigInt::one(), BigInt::from(1_000_000_000u64));
    ((a - b).abs() / b.abs()) <= tol
}

pub fn ratio_interval(table: &RatioTable, obj1: &str, obj2: &str) -> RatioInterval {
    table.interval(obj1, obj2)
}

/// Folds every gallery image into a table. Sidecar boxes are used when
/// present; images that fail to load or detect are skipped.
pub fn build_ratio_table(index: &GalleryIndex, detector: &dyn Detector) -> RatioTable {
    let entries: Vec<_> = index.all_entries().collect();
    let per_image: Vec<Vec<RatioRecord>> = entries
        .par_iter()
        .map(|entry| {
            let boxes = match read_sidecar(&entry.image_path) {
                Ok(Some(boxes)) => boxes,
                Ok(None) => match entry
                    .load_image()
                    .and_then(|img| detector.detect(&img, None))
                {
                    Ok(boxes) => boxes,
                    Err(_) => return Vec::new(),
                },
                Err(_) => return Vec::new(),
            };
            records_for_image(&boxes)
        })
        .collect();
    let mut table = RatioTable::new();
    for record in per_image.into_iter().flatten() {
        table.insert(record);
    }
    table
}
