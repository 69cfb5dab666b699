//! Training once per value of one loss weight.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::LossWeights;

use super::config::TrainConfig;
use super::data::{DatasetBundle, Split};
use super::train::{ensure_split, evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub acc: f64,
    pub f1: f64,
}

/// Parses `start:end:step` (inclusive of `end` when it lies on the grid)
/// or a single number.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Config(format!("range `{text}`: cannot parse `{s}`")))
    };
    match parts.as_slice() {
        [single] => Ok(vec![num(single)?]),
        [start, end, step] => {
            let (start, end, step) = (num(start)?, num(end)?, num(step)?);
            if step <= 0.0 || end < start {
                return Err(Error::Config(format!(
                    "range `{text}` needs step > 0 and end >= start"
                )));
            }
            let count = ((end - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..count)
                .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        _ => Err(Error::Config(format!(
            "range `{text}` must be `start:end:step` or a single value"
        ))),
    }
}

/// Trains and evaluates on the test split for each value of `λ_index`
/// (1-based), keeping every other setting of `config`.
pub fn sweep_lambda(
    config: &TrainConfig,
    data: &DatasetBundle,
    index: usize,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if !(1..=4).contains(&index) {
        return Err(Error::Config(format!(
            "lambda index must be 1..=4, got {index}"
        )));
    }
    let data = ensure_split(data, config)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = config.clone();
        let mut weights = cfg.lambda.0;
        weights[index - 1] = value;
        cfg.lambda = LossWeights::new(weights)?;
        let outcome = train(&cfg, &data)?;
        let report = evaluate(&outcome.model, &data, Split::Test)?;
        rows.push(SweepRow {
            value,
            acc: report.acc,
            f1: report.f1,
        });
    }
    Ok(rows)
}

/// Header line `lambda{index} acc f1` followed by one line per row.
pub fn sweep_table(index: usize, rows: &[SweepRow]) -> String {
    let mut s = format!("lambda{index}\tacc\tf1\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}", r.value, r.acc, r.f1);
    }
    s
}
