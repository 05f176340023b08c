//! Per-class average precision and grouped mAP reports.

use serde::{Deserialize, Serialize};

use crate::data::Group;
use crate::error::{Error, Result};

/// Non-interpolated average precision.
///
/// Samples are ranked by descending score, ties broken by ascending index.
/// Returns [`Error::NoPositives`] when `labels` has no positive entry.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "average_precision",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("average_precision: NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without test positives.
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(with = "nan_as_null")]
    pub map_total: f64,
    #[serde(with = "nan_as_null")]
    pub map_head: f64,
    #[serde(with = "nan_as_null")]
    pub map_medium: f64,
    #[serde(with = "nan_as_null")]
    pub map_tail: f64,
    /// Scored classes in head, medium, tail order.
    pub n_classes_per_group: [usize; 3],
    pub skipped_classes: Vec<usize>,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Builds the report from row-major n×c score and label matrices.
///
/// Group means over empty groups are NaN (serialized as `null`).
pub fn map_report(scores: &[f64], labels: &[u8], c: usize, groups: &[Group]) -> Result<EvalReport> {
    if c == 0 || scores.len() != labels.len() || scores.len() % c != 0 || groups.len() != c {
        return Err(Error::Dimension {
            op: "map_report",
            lhs: vec![scores.len(), c],
            rhs: vec![labels.len(), groups.len()],
        });
    }
    let n = scores.len() / c;
    let mut per_class_ap = Vec::with_capacity(c);
    let mut skipped_classes = Vec::new();
    let mut buckets: [Vec<f64>; 3] = Default::default();
    let mut all = Vec::new();
    for j in 0..c {
        let col_s: Vec<f64> = (0..n).map(|i| scores[i * c + j]).collect();
        let col_y: Vec<u8> = (0..n).map(|i| labels[i * c + j]).collect();
        match average_precision(&col_s, &col_y) {
            Ok(ap) => {
                per_class_ap.push(Some(ap));
                all.push(ap);
                buckets[groups[j].index()].push(ap);
            }
            Err(Error::NoPositives) => {
                per_class_ap.push(None);
                skipped_classes.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        per_class_ap,
        map_total: mean(&all),
        map_head: mean(&buckets[0]),
        map_medium: mean(&buckets[1]),
        map_tail: mean(&buckets[2]),
        n_classes_per_group: [buckets[0].len(), buckets[1].len(), buckets[2].len()],
        skipped_classes,
    })
}

impl EvalReport {
    pub fn map_for(&self, group: Group) -> f64 {
        match group {
            Group::Head => self.map_head,
            Group::Medium => self.map_medium,
            Group::Tail => self.map_tail,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
