//! Success-rate statistics and run-report aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{to_csv, RunReport};

/// Two-sided 95% standard-normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub successes: u64,
    pub trials: u64,
}

impl TrialOutcome {
    pub fn new(successes: u64, trials: u64) -> Result<Self> {
        if trials == 0 || successes > trials {
            return Err(Error::Config(vec![format!(
                "need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}"
            )]));
        }
        Ok(Self { successes, trials })
    }

    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    /// Observed proportion `k/n`.
    pub sr: f64,
    pub lo: f64,
    pub hi: f64,
    /// `(hi - lo) / 2`.
    pub half_width: f64,
}

impl IntervalResult {
    /// `"19.7 ± 4.5"`, both in percent with one decimal.
    pub fn percent_label(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.sr, 100.0 * self.half_width)
    }
}

/// Wilson score interval at the 95% level.
pub fn wilson_interval(o: TrialOutcome) -> IntervalResult {
    wilson_interval_z(o, Z_95)
}

/// Wilson score interval for a given two-sided normal quantile `z`.
pub fn wilson_interval_z(o: TrialOutcome, z: f64) -> IntervalResult {
    let n = o.trials as f64;
    let p = o.rate();
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // At p = 0 or 1 the bound is exact in real arithmetic; pin it.
    let lo = if o.successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if o.successes == o.trials {
        1.0
    } else {
        (center + half).min(1.0)
    };
    IntervalResult {
        sr: p,
        lo,
        hi,
        half_width: (hi - lo) / 2.0,
    }
}

/// Arithmetic mean of per-embodiment success rates.
pub fn macro_sr(srs: &[f64]) -> Result<f64> {
    if srs.is_empty() {
        return Err(Error::Empty("success-rate list"));
    }
    Ok(srs.iter().sum::<f64>() / srs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Best,
    Second,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub steps: usize,
    pub parameter_count: usize,
    pub val_loss: f64,
    pub final_train_loss: Option<f64>,
    pub rank: Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub schema_version: u32,
    pub metric: String,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// One row per report in name order. Lower validation loss ranks higher;
/// equal values share a rank.
pub fn aggregate_report(runs: &[RunReport]) -> Result<SummaryTable> {
    let Some(first) = runs.first() else {
        return Err(Error::Empty("report set"));
    };
    let version = first.schema_version;
    if let Some(other) = runs.iter().find(|r| r.schema_version != version) {
        return Err(Error::SchemaMismatch {
            first: version,
            second: other.schema_version,
        });
    }
    let mut distinct: Vec<f64> = runs.iter().map(|r| r.val_loss).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rank_of = |v: f64| match distinct.iter().position(|&d| d == v) {
        Some(0) => Rank::Best,
        Some(1) => Rank::Second,
        _ => Rank::Other,
    };
    let mut rows: Vec<SummaryRow> = runs
        .iter()
        .map(|r| SummaryRow {
            name: r.name.clone(),
            steps: r.steps,
            parameter_count: r.parameter_count,
            val_loss: r.val_loss,
            final_train_loss: r.final_train_loss,
            rank: rank_of(r.val_loss),
        })
        .collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(SummaryTable {
        schema_version: version,
        metric: "val_loss".into(),
        rows,
    })
}
