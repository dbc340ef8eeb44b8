//! Canonical parameter names, shapes and initial values.
//!
//! | prefix | tensors |
//! |---|---|
//! | `audio_encoder` | `weight [H, 2, k_a]`, `bias [H]` |
//! | `visual.vtcn.{r}` | `bn1`, `conv1 [Fv, Fv, 1]`, `prelu [1]`, `bn2`, `conv2 [Fv, Fv, 3]` |
//! | `visual.proj` | `weight [F, Fv]`, `bias [F]` |
//! | `fusion` | `weight [H, (C+1)·H]`, `bias [H]` |
//! | `block.{b}.narrowband` | `ln_in`, `attn.{q,k,v,out} [H, H]`, `ln_attn`, `ln_ffn`, `ffn.up [H″, H]`, `ffn.tconv [H″, H″/g, k_t]`, `ffn.gn`, `ffn.down [H, H″]` |
//! | `block.{b}.crossband` | `ln1`, `fgconv1 [H, H/g, k_f]`, `prelu1`, `down [H′, H]`, `up [H, H′]`, `ln2`, `fgconv2`, `prelu2` |
//! | `block.{b}.gmhsa` | `conv_in [L(2E+H/L), H]`, `conv_out [H, H]`, `prelu`, `ln` |
//! | `shared.fullband.{i}` | `weight [F, F]`, `bias [F]` for `i < H′` |
//! | `decoder` | `weight [2C, H]`, `bias [2C]` |
//!
//! Every affine map carries `.weight` and `.bias`; normalization layers
//! carry `.weight`/`.bias` (plus `.running_mean`/`.running_var` buffers for
//! batch normalization); PReLU layers carry a single `.weight` slope.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::params::ParamStore;
use crate::model::ModelConfig;
use crate::tensor::{Real, Tensor};

/// Initial value of a registered tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitRule {
    /// Uniform on `±bound`.
    Uniform(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitRule,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Builder {
    params: Vec<TensorSpec>,
    buffers: Vec<TensorSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: InitRule) {
        self.params.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    /// Weight `[out, in, ...]` and bias with bound `1/sqrt(fan_in)`.
    fn affine(&mut self, prefix: &str, shape: &[usize]) {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.push(format!("{prefix}.weight"), shape, InitRule::Uniform(bound));
        self.push(format!("{prefix}.bias"), &[shape[0]], InitRule::Uniform(bound));
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.weight"), &[c], InitRule::Const(1.0));
        self.push(format!("{prefix}.bias"), &[c], InitRule::Const(0.0));
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.norm(prefix, c);
        for (suffix, v) in [("running_mean", 0.0), ("running_var", 1.0)] {
            self.buffers.push(TensorSpec {
                name: format!("{prefix}.{suffix}"),
                shape: vec![c],
                init: InitRule::Const(v),
            });
        }
    }

    fn prelu(&mut self, prefix: &str) {
        self.push(format!("{prefix}.weight"), &[1], InitRule::Const(0.25));
    }
}

/// Learnable tensors of one separator block.
fn block_params(b: &mut Builder, cfg: &ModelConfig, index: usize) {
    let (h, g) = (cfg.hidden, cfg.groups);
    let nb = format!("block.{index}.narrowband");
    b.norm(&format!("{nb}.ln_in"), h);
    for proj in ["q", "k", "v", "out"] {
        b.affine(&format!("{nb}.attn.{proj}"), &[h, h]);
    }
    b.norm(&format!("{nb}.ln_attn"), h);
    b.norm(&format!("{nb}.ln_ffn"), h);
    b.affine(&format!("{nb}.ffn.up"), &[cfg.ffn, h]);
    b.affine(&format!("{nb}.ffn.tconv"), &[cfg.ffn, cfg.ffn / g, cfg.t_kernel]);
    b.norm(&format!("{nb}.ffn.gn"), cfg.ffn);
    b.affine(&format!("{nb}.ffn.down"), &[h, cfg.ffn]);

    let cb = format!("block.{index}.crossband");
    for i in [1, 2] {
        b.norm(&format!("{cb}.ln{i}"), h);
        b.affine(&format!("{cb}.fgconv{i}"), &[h, h / g, cfg.f_kernel]);
        b.prelu(&format!("{cb}.prelu{i}"));
    }
    b.affine(&format!("{cb}.down"), &[cfg.bottleneck, h]);
    b.affine(&format!("{cb}.up"), &[h, cfg.bottleneck]);

    let gm = format!("block.{index}.gmhsa");
    b.affine(&format!("{gm}.conv_in"), &[cfg.gmhsa_channels(), h]);
    b.affine(&format!("{gm}.conv_out"), &[h, h]);
    b.prelu(&format!("{gm}.prelu"));
    b.norm(&format!("{gm}.ln"), h);
}

fn build(cfg: &ModelConfig) -> Builder {
    let (h, f, fv) = (cfg.hidden, cfg.bins(), cfg.visual_dim);
    let mut b = Builder::default();
    b.affine("audio_encoder", &[h, 2, cfg.encoder_kernel]);
    for r in 0..cfg.vtcn_blocks {
        let p = format!("visual.vtcn.{r}");
        b.batch_norm(&format!("{p}.bn1"), fv);
        b.affine(&format!("{p}.conv1"), &[fv, fv, 1]);
        b.prelu(&format!("{p}.prelu"));
        b.batch_norm(&format!("{p}.bn2"), fv);
        b.affine(&format!("{p}.conv2"), &[fv, fv, 3]);
    }
    b.affine("visual.proj", &[f, fv]);
    b.affine("fusion", &[h, (cfg.speakers + 1) * h]);
    for i in 0..cfg.blocks {
        block_params(&mut b, cfg, i);
    }
    for i in 0..cfg.bottleneck {
        b.affine(&format!("shared.fullband.{i}"), &[f, f]);
    }
    b.affine("decoder", &[2 * cfg.speakers, h]);
    b
}

/// Every learnable tensor, in registry order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    build(cfg).params
}

/// Non-learnable running statistics.
pub fn buffer_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    build(cfg).buffers
}

/// Learnable scalars of one block, excluding the shared full-band maps.
pub fn block_param_count(cfg: &ModelConfig) -> usize {
    let mut b = Builder::default();
    block_params(&mut b, cfg, 0);
    b.params.iter().map(TensorSpec::numel).sum()
}

/// Number of learnable scalars, each shared tensor counted once.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(TensorSpec::numel).sum()
}

/// Freshly initialized parameters, a pure function of `(cfg, seed)`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let built = build(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut make = |spec: &TensorSpec| -> Tensor<T> {
        match spec.init {
            InitRule::Const(v) => Tensor::full(&spec.shape, T::lit(v)),
            InitRule::Uniform(bound) => {
                Tensor::from_fn(&spec.shape, |_| T::lit(rng.gen_range(-bound..=bound)))
            }
        }
    };
    for spec in &built.params {
        let t = make(spec);
        store.params.insert(spec.name.clone(), t)?;
    }
    for spec in &built.buffers {
        let t = make(spec);
        store.buffers.insert(spec.name.clone(), t)?;
    }
    Ok(store)
}
