use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::{Checkpoint, Dtype};
use crate::dsp::normalize_variance;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::model::{separate_spectra, spectra_to_waves, mixture_planes, Ctx, Mode, Model, ModelConfig, ParamStore, TensorMap};
use crate::synth::LoadedItem;
use crate::tensor::{Real, Tensor};
use crate::train::{lr_at, Adam, TrainConfig, TrainState};
use crate::visual::VisualEmbeddingSequence;

/// A training item in network form: the variance-normalized mixture
/// spectrum and targets scaled by the same factor.
#[derive(Clone, Debug)]
pub struct Example<T: Real> {
    pub id: String,
    /// `[2, M, F]`.
    pub mixture: Tensor<T>,
    /// One `[N]` waveform per stream, in stream order.
    pub targets: Vec<Tensor<T>>,
    pub visuals: Vec<VisualEmbeddingSequence>,
}

impl<T: Real> Example<T> {
    pub fn new(cfg: &ModelConfig, item: &LoadedItem) -> Result<Self> {
        if item.sources.len() != item.visuals.len() {
            return Err(Error::Data(format!(
                "{}: {} sources but {} embedding streams",
                item.id,
                item.sources.len(),
                item.visuals.len()
            )));
        }
        let (norm, state) = normalize_variance(&item.mixture);
        let targets = item
            .sources
            .iter()
            .map(|s| {
                if s.len() != item.mixture.len() {
                    return Err(Error::Data(format!("{}: source length differs from mixture", item.id)));
                }
                Tensor::from_vec(
                    &[s.len()],
                    s.samples.iter().map(|&v| T::lit(v / state.scale)).collect(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Example {
            id: item.id.clone(),
            mixture: mixture_planes(cfg, &norm.samples),
            targets,
            visuals: item.visuals.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.first().map_or(0, |t| t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

/// Forward pass and loss of one example with streams taken in `perm` order.
fn example_loss<'a, T: Real>(
    cfg: &ModelConfig,
    store: &'a ParamStore<T>,
    ex: &Example<T>,
    perm: &[usize],
    mode: Mode,
    track: bool,
    seed: u64,
    weights: LossWeights,
) -> Result<(Ctx<'a, T>, Var<T>, LossReport)> {
    let ctx = Ctx::new(store, mode, track, seed);
    let visuals: Vec<VisualEmbeddingSequence> = perm.iter().map(|&c| ex.visuals[c].clone()).collect();
    let targets: Vec<Tensor<T>> = perm.iter().map(|&c| ex.targets[c].clone()).collect();
    let sep = separate_spectra(&ctx, cfg, &Var::constant(ex.mixture.clone()), &visuals)?;
    let waves = spectra_to_waves(cfg, &sep.spectra, ex.len())?;
    let (loss, report) = total_loss(&waves, &targets, &cfg.stft(), weights)?;
    Ok((ctx, loss, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    /// Mean loss of the batch before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub early_stopped: bool,
}

/// Owns the model being trained together with optimizer and loop state.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub state: TrainState,
    pub optimizer: Adam<T>,
    pub history: Vec<HistoryRow>,
    best: Option<ParamStore<T>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train_config: TrainConfig,
    state: TrainState,
    history: Vec<HistoryRow>,
    adam_t: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            state: TrainState::new(&config),
            model,
            config,
            optimizer: Adam::default(),
            history: Vec::new(),
            best: None,
        })
    }

    /// Mean loss over `batch` without touching any state.
    pub fn batch_loss(&self, batch: &[&Example<T>], perms: &[Vec<usize>], mode: Mode, seed: u64) -> Result<f64> {
        let mut total = 0.0;
        for (k, (ex, perm)) in batch.iter().zip(perms).enumerate() {
            let (_, _, r) = example_loss(
                self.model.config(),
                self.model.params(),
                ex,
                perm,
                mode,
                false,
                derive_seed(seed, k as u64, 0),
                self.config.loss_weights,
            )?;
            total += r.total;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// One optimizer step on the mean loss of `batch`. Training-mode batch
    /// statistics are folded into the running averages afterwards.
    pub fn step(&mut self, batch: &[&Example<T>], perms: &[Vec<usize>], lr: f64, seed: u64) -> Result<StepReport> {
        if batch.is_empty() || batch.len() != perms.len() {
            return Err(Error::Config("empty batch or permutation count mismatch".into()));
        }
        let cfg = self.model.config().clone();
        let inv = 1.0 / batch.len() as f64;
        let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut updates = Vec::new();
        let mut loss = 0.0;
        for (k, (ex, perm)) in batch.iter().zip(perms).enumerate() {
            let (ctx, l, report) = example_loss(
                &cfg,
                self.model.params(),
                ex,
                perm,
                Mode::Train,
                true,
                derive_seed(seed, k as u64, 0),
                self.config.loss_weights,
            )?;
            loss += report.total * inv;
            let g = l.backward_with(Tensor::scalar(T::lit(inv)));
            for (name, v) in ctx.leaves() {
                let gv = g.get_or_zeros(&v);
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&gv),
                    None => {
                        acc.insert(name, gv);
                    }
                }
            }
            updates.extend(ctx.take_updates());
        }
        let mut grads: Vec<(String, Tensor<T>)> = acc.into_iter().collect();
        let sq: f64 = grads.iter().map(|(_, g)| g.sq_norm().as_f64()).sum();
        let grad_norm = sq.sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
            return Err(Error::Numeric(format!(
                "non-finite training signal at epoch {} step {}: loss {loss}, gradient norm {grad_norm}, items {ids:?}",
                self.state.epoch, self.state.step
            )));
        }
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                let s = T::lit(clip / grad_norm);
                grads.iter_mut().for_each(|(_, g)| *g = g.scale(s));
            }
        }
        self.optimizer.step(&mut self.model.params_mut().params, &grads, lr)?;
        let momentum = cfg.bn_momentum;
        self.model.params_mut().apply_running(&updates, momentum)?;
        self.state.step += 1;
        Ok(StepReport { loss, grad_norm })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    fn steps_exhausted(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Shuffled pass over `train`; returns the mean pre-update loss.
    pub fn run_epoch(&mut self, train: &[Example<T>]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, Some(&self.state), &self.config);
        self.state.current_lr = lr;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let perms: Vec<Vec<usize>> = batch
                .iter()
                .map(|ex| {
                    let mut p: Vec<usize> = (0..ex.visuals.len()).collect();
                    if self.config.swap_augment {
                        p.shuffle(&mut rng);
                    }
                    p
                })
                .collect();
            let seed = derive_seed(self.config.seed, epoch as u64, self.state.step as u64);
            let r = self.step(&batch, &perms, lr, seed)?;
            sum += r.loss * batch.len() as f64;
            count += batch.len();
        }
        Ok(if count > 0 { sum / count as f64 } else { f64::NAN })
    }

    /// Mean inference-mode loss with streams in manifest order.
    pub fn validate(&self, val: &[Example<T>]) -> Result<f64> {
        let mut total = 0.0;
        for ex in val {
            let perm: Vec<usize> = (0..ex.visuals.len()).collect();
            let (_, _, r) = example_loss(
                self.model.config(),
                self.model.params(),
                ex,
                &perm,
                Mode::Eval,
                false,
                0,
                self.config.loss_weights,
            )?;
            total += r.total;
        }
        Ok(total / val.len().max(1) as f64)
    }

    /// Runs epochs until early stopping, `max_epochs` or `max_steps`. An
    /// empty validation set falls back to the training loss. With `out`, the
    /// history CSV, `last.ckpt` and `best.ckpt` are kept up to date there.
    pub fn fit(
        &mut self,
        train: &[Example<T>],
        val: &[Example<T>],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&HistoryRow),
    ) -> Result<TrainSummary> {
        let mut early = false;
        while self.state.epoch < self.config.max_epochs && !self.steps_exhausted() {
            let epoch = self.state.epoch;
            let lr = lr_at(epoch, Some(&self.state), &self.config);
            let train_loss = self.run_epoch(train)?;
            let val_loss = if val.is_empty() { train_loss } else { self.validate(val)? };
            if !val_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite validation loss at epoch {epoch} step {}",
                    self.state.step
                )));
            }
            let row = HistoryRow {
                epoch,
                train_loss,
                val_loss,
                lr,
            };
            self.history.push(row.clone());
            let improved = self.state.observe(epoch, val_loss, &self.config);
            if improved {
                self.best = Some(self.model.params().clone());
            }
            if let Some(dir) = out {
                self.write_history(&dir.join("history.csv"))?;
                let ck = self.checkpoint();
                let dtype = Dtype::of::<T>();
                ck.save(&dir.join("last.ckpt"), dtype)?;
                if improved {
                    ck.save(&dir.join("best.ckpt"), dtype)?;
                }
            }
            on_epoch(&row);
            if self.state.should_stop(&self.config) {
                early = true;
                break;
            }
        }
        Ok(TrainSummary {
            epochs: self.history.len(),
            steps: self.state.step,
            best_val_loss: self.state.best_val_loss,
            best_epoch: self.state.best_epoch,
            early_stopped: early,
        })
    }

    /// The model at the best validation loss seen by this trainer, or the
    /// current one when no epoch has finished.
    pub fn best_model(&self) -> Result<Model<T>> {
        match &self.best {
            Some(p) => Model::from_parts(self.model.config().clone(), p.clone()),
            None => Ok(self.model.clone()),
        }
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Full state: parameters, optimizer moments, loop state and history.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for (prefix, map) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for (name, t) in map.iter() {
                ck.extra
                    .insert(format!("{prefix}{name}"), t.cast())
                    .expect("unique optimizer names");
            }
        }
        ck.meta = serde_json::to_value(Meta {
            train_config: self.config.clone(),
            state: self.state.clone(),
            history: self.history.clone(),
            adam_t: self.optimizer.t,
        })
        .expect("serializable training metadata");
        ck
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. `config`
    /// overrides the stored training configuration when given.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let model = ck.to_model::<T>()?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint lacks training state: {e}")))?;
        let config = config.unwrap_or(meta.train_config);
        config.validate()?;
        let mut optimizer = Adam::default();
        optimizer.t = meta.adam_t;
        let mut m = TensorMap::new();
        let mut v = TensorMap::new();
        for (name, t) in ck.extra.iter() {
            if let Some(p) = name.strip_prefix("adam.m.") {
                m.insert(p, t.cast())?;
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v.insert(p, t.cast())?;
            }
        }
        optimizer.m = m;
        optimizer.v = v;
        Ok(Trainer {
            model,
            config,
            state: meta.state,
            optimizer,
            history: meta.history,
            best: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_item, CorpusConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            blocks: 1,
            hidden: 8,
            bottleneck: 2,
            ffn: 8,
            heads: 2,
            visual_dim: 8,
            vtcn_blocks: 1,
            win_length: 16,
            pe_max_len: 128,
            ..ModelConfig::default()
        }
    }

    fn examples(cfg: &ModelConfig, n: usize) -> Vec<Example<f64>> {
        let corpus = CorpusConfig {
            num_items: n,
            duration_s: 0.05,
            visual_dim: 8,
            ..Default::default()
        };
        (0..n)
            .map(|i| Example::new(cfg, &synth_item(&corpus, i).unwrap().1).unwrap())
            .collect()
    }

    #[test]
    fn small_step_descends() {
        let cfg = tiny_model();
        let data = examples(&cfg, 2);
        let mut tr = Trainer::new(Model::<f64>::new(cfg, 1).unwrap(), TrainConfig::default()).unwrap();
        let batch: Vec<&Example<f64>> = data.iter().collect();
        let perms = vec![vec![0, 1]; 2];
        let before = tr.batch_loss(&batch, &perms, Mode::Train, 9).unwrap();
        tr.step(&batch, &perms, 1e-5, 9).unwrap();
        let after = tr.batch_loss(&batch, &perms, Mode::Train, 9).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = tiny_model();
        let data = examples(&cfg, 3);
        let tc = TrainConfig {
            warmup_epochs: 2,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(Model::<f64>::new(cfg.clone(), 4).unwrap(), tc.clone()).unwrap();
        full.fit(&data, &data[..1], None, |_| {}).unwrap();

        let mut first = Trainer::new(Model::<f64>::new(cfg, 4).unwrap(), TrainConfig { max_epochs: 2, ..tc }).unwrap();
        first.fit(&data, &data[..1], None, |_| {}).unwrap();
        let mut bytes = Vec::new();
        first.checkpoint().write_to(&mut bytes, Dtype::F64).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::<f64>::from_checkpoint(&ck, Some(TrainConfig { max_epochs: 3, ..first.config.clone() })).unwrap();
        resumed.fit(&data, &data[..1], None, |_| {}).unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.history.len(), 3);
    }

    #[test]
    fn history_and_checkpoints_written() {
        let cfg = tiny_model();
        let data = examples(&cfg, 2);
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(Model::<f64>::new(cfg, 0).unwrap(), tc).unwrap();
        let mut seen = 0;
        tr.fit(&data, &[], Some(dir.path()), |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_loss,lr");
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("best.ckpt").exists());
        assert!(Checkpoint::load(&dir.path().join("last.ckpt")).is_ok());
    }

    #[test]
    fn max_steps_caps_training() {
        let cfg = tiny_model();
        let data = examples(&cfg, 3);
        let tc = TrainConfig {
            max_steps: Some(4),
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(Model::<f64>::new(cfg, 0).unwrap(), tc).unwrap();
        let s = tr.fit(&data, &[], None, |_| {}).unwrap();
        assert_eq!(s.steps, 4);
        assert_eq!(s.epochs, 2);
    }
}
