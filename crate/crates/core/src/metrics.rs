//! Evaluation metrics, target assignment and JSON-lines metric reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Debug;
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SI_SDR_CAP_DB;

fn check_pair(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::shape(format!(
            "metric on {} vs {} samples",
            est.len(),
            reference.len()
        )));
    }
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::Data("metric reference has zero energy".into()));
    }
    Ok(energy)
}

/// `10 log10(num / den)` clamped to `±SI_SDR_CAP_DB`.
fn capped_db(num: f64, den: f64) -> f64 {
    let floor = 10f64.powf(-SI_SDR_CAP_DB / 10.0);
    if den <= num * floor {
        SI_SDR_CAP_DB
    } else if num <= den * floor {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (num / den).log10()
    }
}

/// Scale-invariant SDR in dB (larger is better).
pub fn metric_si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ss = check_pair(est, reference)?;
    let alpha = reference.iter().zip(est).map(|(r, e)| r * e).sum::<f64>() / ss;
    let resid: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    Ok(capped_db(alpha * alpha * ss, resid))
}

/// SI-SDR improvement of `est` over the unprocessed `mix`.
pub fn metric_si_sdr_i(est: &[f64], mix: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(metric_si_sdr(est, reference)? - metric_si_sdr(mix, reference)?)
}

/// `10 log10(‖ref‖² / ‖est − ref‖²)` in dB, capped like SI-SDR.
pub fn metric_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    let ss = check_pair(est, reference)?;
    let err: f64 = est.iter().zip(reference).map(|(e, r)| (e - r).powi(2)).sum();
    Ok(capped_db(ss, err))
}

/// Orders `sources` like `visual_order`. No permutation search happens: the
/// visual stream order alone defines which target each output is scored on.
pub fn assign_targets<K, V>(visual_order: &[K], sources: &HashMap<K, V>) -> Result<Vec<V>>
where
    K: Eq + Hash + Debug,
    V: Clone,
{
    let unique: HashSet<&K> = visual_order.iter().collect();
    if unique.len() != visual_order.len() || visual_order.len() != sources.len() {
        return Err(Error::Data(format!(
            "visual order {visual_order:?} is not a bijection onto {} sources",
            sources.len()
        )));
    }
    visual_order
        .iter()
        .map(|k| {
            sources
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no source for speaker {k:?}")))
        })
        .collect()
}

/// Metrics of one output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMetrics {
    pub si_sdr: f64,
    pub si_sdr_i: f64,
    pub snr: f64,
}

/// One utterance; the headline numbers average over speakers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub si_sdr: f64,
    pub si_sdr_i: f64,
    pub snr: f64,
    /// SNR of the unprocessed mixture against each target, averaged.
    pub input_snr: f64,
    pub speakers: Vec<SpeakerMetrics>,
}

impl ItemMetrics {
    /// Scores estimates against references already in visual-stream order.
    pub fn compute(id: impl Into<String>, est: &[Vec<f64>], mix: &[f64], refs: &[Vec<f64>]) -> Result<Self> {
        if est.len() != refs.len() || est.is_empty() {
            return Err(Error::shape(format!(
                "{} estimates for {} references",
                est.len(),
                refs.len()
            )));
        }
        let mut speakers = Vec::with_capacity(est.len());
        let mut input_snr = 0.0;
        for (e, r) in est.iter().zip(refs) {
            speakers.push(SpeakerMetrics {
                si_sdr: metric_si_sdr(e, r)?,
                si_sdr_i: metric_si_sdr_i(e, mix, r)?,
                snr: metric_snr(e, r)?,
            });
            input_snr += metric_snr(mix, r)?;
        }
        let n = speakers.len() as f64;
        let mean = |f: fn(&SpeakerMetrics) -> f64| speakers.iter().map(f).sum::<f64>() / n;
        Ok(ItemMetrics {
            id: id.into(),
            si_sdr: mean(|s| s.si_sdr),
            si_sdr_i: mean(|s| s.si_sdr_i),
            snr: mean(|s| s.snr),
            input_snr: input_snr / n,
            speakers,
        })
    }
}

/// Mean and 95% confidence half-width (normal approximation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, ci95: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Summary { mean, ci95: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Summary {
            mean,
            ci95: 1.96 * (var / n as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub failed: usize,
    pub si_sdr: Summary,
    pub si_sdr_i: Summary,
    pub snr: Summary,
}

impl Aggregate {
    pub fn of(items: &[ItemMetrics], failed: usize) -> Self {
        let col = |f: fn(&ItemMetrics) -> f64| items.iter().map(f).collect::<Vec<_>>();
        Aggregate {
            count: items.len(),
            failed,
            si_sdr: Summary::of(&col(|i| i.si_sdr)),
            si_sdr_i: Summary::of(&col(|i| i.si_sdr_i)),
            snr: Summary::of(&col(|i| i.snr)),
        }
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportLine {
    Item(ItemMetrics),
    Error { id: String, error: String },
    Aggregate { aggregate: Aggregate },
}

/// Per-utterance results plus their aggregate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    pub errors: Vec<(String, String)>,
}

impl MetricReport {
    pub fn aggregate(&self) -> Aggregate {
        Aggregate::of(&self.items, self.errors.len())
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let mut line = |l: &ReportLine| -> Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")
                .map_err(|e| Error::Format(format!("writing report: {e}")))
        };
        for item in &self.items {
            line(&ReportLine::Item(item.clone()))?;
        }
        for (id, error) in &self.errors {
            line(&ReportLine::Error {
                id: id.clone(),
                error: error.clone(),
            })?;
        }
        line(&ReportLine::Aggregate {
            aggregate: self.aggregate(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses a report; returns the items, errors and the stored aggregate.
    pub fn read_jsonl(r: impl BufRead) -> Result<(Self, Option<Aggregate>)> {
        let mut report = MetricReport::default();
        let mut agg = None;
        for line in r.lines() {
            let line = line.map_err(|e| Error::Format(format!("reading report: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                ReportLine::Item(i) => report.items.push(i),
                ReportLine::Error { id, error } => report.errors.push((id, error)),
                ReportLine::Aggregate { aggregate } => agg = Some(aggregate),
            }
        }
        Ok((report, agg))
    }
}
