//! Evaluation driver: runs an estimator over a manifest and scores it.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{ItemMetrics, MetricReport};
use crate::model::Model;
use crate::par;
use crate::synth::{LoadedItem, MixtureManifest};
use crate::tensor::Real;
use crate::wav::{write_wav, WavFormat};

/// What produces the per-stream estimates.
pub enum Estimator<'a, T: Real> {
    Model(&'a Model<T>),
    /// Every output is the unprocessed mixture.
    Identity,
    /// Every output is its true source.
    Oracle,
}

impl<T: Real> Estimator<'_, T> {
    pub fn estimate(&self, item: &LoadedItem) -> Result<Vec<Waveform>> {
        match self {
            Estimator::Model(m) => m.separate(&item.mixture, &item.visuals),
            Estimator::Identity => Ok(vec![item.mixture.clone(); item.sources.len()]),
            Estimator::Oracle => Ok(item.sources.clone()),
        }
    }
}

/// Scores one loaded item; output `c` is compared with source `c`.
pub fn score_item<T: Real>(est: &Estimator<T>, item: &LoadedItem, export: Option<&Path>) -> Result<ItemMetrics> {
    let outs = est.estimate(item)?;
    if outs.len() != item.sources.len() {
        return Err(Error::Data(format!(
            "{}: {} estimates for {} sources",
            item.id,
            outs.len(),
            item.sources.len()
        )));
    }
    if let Some(dir) = export {
        for (c, w) in outs.iter().enumerate() {
            write_wav(&dir.join(format!("{}_est{c}.wav", item.id)), w, WavFormat::Float32)?;
        }
    }
    let est: Vec<Vec<f64>> = outs.into_iter().map(|w| w.samples).collect();
    let refs: Vec<Vec<f64>> = item.sources.iter().map(|w| w.samples.clone()).collect();
    ItemMetrics::compute(&item.id, &est, &item.mixture.samples, &refs)
}

/// Evaluates every manifest item. Items that fail to load or separate
/// become error records; the run continues.
pub fn evaluate<T: Real>(est: &Estimator<T>, manifest: &MixtureManifest, export: Option<&Path>) -> Result<MetricReport> {
    if let Some(dir) = export {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let results = par::map_indexed(manifest.items.len(), |i| {
        manifest
            .load_item(i)
            .and_then(|item| score_item(est, &item, export))
    });
    let mut report = MetricReport::default();
    for (rec, r) in manifest.items.iter().zip(results) {
        match r {
            Ok(m) => report.items.push(m),
            Err(e) => report.errors.push((rec.id.clone(), e.to_string())),
        }
    }
    Ok(report)
}

/// [`evaluate`] on items already in memory.
pub fn evaluate_items<T: Real>(est: &Estimator<T>, items: &[LoadedItem]) -> MetricReport {
    let results = par::map_indexed(items.len(), |i| score_item(est, &items[i], None));
    let mut report = MetricReport::default();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(m) => report.items.push(m),
            Err(e) => report.errors.push((item.id.clone(), e.to_string())),
        }
    }
    report
}
