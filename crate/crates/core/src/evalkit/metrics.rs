//! Per-frame outcomes and the precision / normalized precision / success
//! curves.
//!
//! Every curve value is `count / n` for an integer count, and every summary
//! is the left-to-right mean of the sampled values, so any implementation
//! that counts the same frames produces bit-identical numbers.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{center_distance, iou, normalized_center_distance, BBox};
use crate::error::Result;

/// Center-error threshold, in pixels, read off the precision curve.
pub const PRECISION_AT: f64 = 20.0;
pub const PRECISION_STEPS: usize = 51;
pub const NORM_PRECISION_STEPS: usize = 51;
pub const SUCCESS_STEPS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub distance: f64,
    pub norm_distance: f64,
    pub overlap: f64,
}

impl Outcome {
    pub const PERFECT: Outcome = Outcome {
        distance: 0.0,
        norm_distance: 0.0,
        overlap: 1.0,
    };
    pub const MISSED: Outcome = Outcome {
        distance: f64::INFINITY,
        norm_distance: f64::INFINITY,
        overlap: 0.0,
    };
}

/// How a frame where both prediction and annotation are absent is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BothAbsent {
    /// Correctly reported absence counts as a perfect frame.
    #[default]
    Perfect,
    /// The frame is left out of the metrics.
    Exclude,
}

/// Threshold comparison for the success curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SuccessRule {
    /// `overlap > t`, except that the last grid point `t = 1` counts
    /// `overlap >= 1`; a perfect tracker then scores exactly 1.
    #[default]
    StrictClosedEnd,
    /// `overlap > t` everywhere; a perfect tracker scores 20/21.
    Strict,
}

impl SuccessRule {
    pub fn passes(self, overlap: f64, t: f64) -> bool {
        match self {
            SuccessRule::StrictClosedEnd if t >= 1.0 => overlap >= 1.0,
            _ => overlap > t,
        }
    }
}

/// Outcome of one frame, or `None` when the protocol excludes it.
pub fn frame_outcome(pred: &BBox, gt: &BBox, both_absent: BothAbsent) -> Result<Option<Outcome>> {
    pred.validate()?;
    gt.validate()?;
    Ok(match (pred.is_absent(), gt.is_absent()) {
        (true, true) => match both_absent {
            BothAbsent::Perfect => Some(Outcome::PERFECT),
            BothAbsent::Exclude => None,
        },
        (true, false) | (false, true) => Some(Outcome::MISSED),
        (false, false) => {
            // a present but degenerate annotation cannot normalize a distance
            let norm = if gt.w > 0.0 && gt.h > 0.0 {
                normalized_center_distance(pred, gt)?
            } else {
                f64::INFINITY
            };
            Some(Outcome {
                distance: center_distance(pred, gt)?,
                norm_distance: norm,
                overlap: iou(pred, gt)?,
            })
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub summary: f64,
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..PRECISION_STEPS).map(|k| k as f64).collect()
}

pub fn norm_precision_thresholds() -> Vec<f64> {
    (0..NORM_PRECISION_STEPS).map(|k| k as f64 / 100.0).collect()
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_STEPS).map(|k| k as f64 / 20.0).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Fraction of sorted values `<= t` for every threshold.
fn at_most(sorted: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&d| d <= t) as f64 / n)
        .collect()
}

/// Fraction of frames with center error `<= t` for `t = 0..=50` px;
/// the summary is the value at 20 px.
pub fn precision_curve(outcomes: &[Outcome]) -> MetricCurve {
    let thresholds = precision_thresholds();
    let values = at_most(&sorted(outcomes.iter().map(|o| o.distance)), &thresholds);
    let summary = values[PRECISION_AT as usize];
    MetricCurve {
        thresholds,
        values,
        summary,
    }
}

/// Fraction of frames with normalized error `<= t` on a 51-point grid over
/// `[0, 0.5]`; the summary is the mean of the samples.
pub fn norm_precision_curve(outcomes: &[Outcome]) -> MetricCurve {
    let thresholds = norm_precision_thresholds();
    let values = at_most(&sorted(outcomes.iter().map(|o| o.norm_distance)), &thresholds);
    let summary = mean(&values);
    MetricCurve {
        thresholds,
        values,
        summary,
    }
}

/// Fraction of frames whose overlap passes each threshold of a 21-point grid
/// over `[0, 1]`; the summary is the mean of the samples.
pub fn success_curve(outcomes: &[Outcome], rule: SuccessRule) -> MetricCurve {
    let thresholds = success_thresholds();
    let s = sorted(outcomes.iter().map(|o| o.overlap));
    let n = s.len().max(1) as f64;
    let values = thresholds
        .iter()
        .map(|&t| {
            let failing = match rule {
                SuccessRule::StrictClosedEnd if t >= 1.0 => s.partition_point(|&o| o < 1.0),
                _ => s.partition_point(|&o| o <= t),
            };
            (s.len() - failing) as f64 / n
        })
        .collect::<Vec<_>>();
    let summary = mean(&values);
    MetricCurve {
        thresholds,
        values,
        summary,
    }
}

/// The three curves for one set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub success: MetricCurve,
    pub precision: MetricCurve,
    pub norm_precision: MetricCurve,
}

impl Curves {
    pub fn of(outcomes: &[Outcome], rule: SuccessRule) -> Self {
        Self {
            success: success_curve(outcomes, rule),
            precision: precision_curve(outcomes),
            norm_precision: norm_precision_curve(outcomes),
        }
    }

    /// Point-wise mean of several curve sets (sequence-mean aggregation).
    pub fn average(all: &[Curves]) -> Option<Self> {
        let first = all.first()?;
        let avg = |pick: fn(&Curves) -> &MetricCurve, point: Option<usize>| {
            let base = pick(first);
            let values: Vec<f64> = (0..base.values.len())
                .map(|i| mean(&all.iter().map(|c| pick(c).values[i]).collect::<Vec<_>>()))
                .collect();
            let summary = match point {
                Some(i) => values[i],
                None => mean(&values),
            };
            MetricCurve {
                thresholds: base.thresholds.clone(),
                values,
                summary,
            }
        };
        Some(Self {
            success: avg(|c| &c.success, None),
            precision: avg(|c| &c.precision, Some(PRECISION_AT as usize)),
            norm_precision: avg(|c| &c.norm_precision, None),
        })
    }

    pub fn sr(&self) -> f64 {
        self.success.summary
    }

    pub fn pr(&self) -> f64 {
        self.precision.summary
    }

    pub fn npr(&self) -> f64 {
        self.norm_precision.summary
    }
}
