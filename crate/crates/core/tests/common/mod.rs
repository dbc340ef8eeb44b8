//! Shared helpers for the integration tests: plain-loop reference
//! implementations of every network module, random parameter stores and a
//! module-level gradient check.
#![allow(dead_code)]

use avsep::autodiff::gradcheck::{self, GradCheck};
use avsep::autodiff::{ops, Var};
use avsep::model::{init_params, Ctx, Mode, ModelConfig, ParamStore};
use avsep::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `[C, M, F]` array.
#[derive(Clone, Debug)]
pub struct A3 {
    pub c: usize,
    pub m: usize,
    pub f: usize,
    pub d: Vec<f64>,
}

impl A3 {
    pub fn zeros(c: usize, m: usize, f: usize) -> Self {
        A3 { c, m, f, d: vec![0.0; c * m * f] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        A3 { c: s[0], m: s[1], f: s[2], d: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.c, self.m, self.f], self.d.clone()).unwrap()
    }

    pub fn at(&self, c: usize, m: usize, f: usize) -> f64 {
        self.d[(c * self.m + m) * self.f + f]
    }

    pub fn set(&mut self, c: usize, m: usize, f: usize, v: f64) {
        self.d[(c * self.m + m) * self.f + f] = v;
    }

    pub fn map(&self, g: impl Fn(f64) -> f64) -> Self {
        A3 { d: self.d.iter().map(|&v| g(v)).collect(), ..self.clone() }
    }

    pub fn add(&self, o: &A3) -> Self {
        A3 { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.shape(), [self.c, self.m, self.f]);
        self.d.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.params.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn buf<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.buffers.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn linear(store: &ParamStore<f64>, prefix: &str, x: &A3) -> A3 {
    let w = p(store, &format!("{prefix}.weight"));
    let b = p(store, &format!("{prefix}.bias"));
    let cout = b.len();
    let mut y = A3::zeros(cout, x.m, x.f);
    for o in 0..cout {
        for m in 0..x.m {
            for f in 0..x.f {
                let mut acc = b[o];
                for i in 0..x.c {
                    acc += w[o * x.c + i] * x.at(i, m, f);
                }
                y.set(o, m, f, acc);
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore<f64>, prefix: &str, x: &A3, eps: f64) -> A3 {
    let g = p(store, &format!("{prefix}.weight"));
    let b = p(store, &format!("{prefix}.bias"));
    let mut y = x.clone();
    for m in 0..x.m {
        for f in 0..x.f {
            let mean = (0..x.c).map(|c| x.at(c, m, f)).sum::<f64>() / x.c as f64;
            let var = (0..x.c).map(|c| (x.at(c, m, f) - mean).powi(2)).sum::<f64>() / x.c as f64;
            for c in 0..x.c {
                y.set(c, m, f, g[c] * (x.at(c, m, f) - mean) / (var + eps).sqrt() + b[c]);
            }
        }
    }
    y
}

/// Statistics per (channel group, frequency bin) over the group's channels
/// and all frames.
pub fn group_norm(store: &ParamStore<f64>, prefix: &str, x: &A3, groups: usize, eps: f64) -> A3 {
    let g = p(store, &format!("{prefix}.weight"));
    let b = p(store, &format!("{prefix}.bias"));
    let per = x.c / groups;
    let mut y = x.clone();
    for gi in 0..groups {
        for f in 0..x.f {
            let vals: Vec<f64> = (gi * per..(gi + 1) * per)
                .flat_map(|c| (0..x.m).map(move |m| (c, m)))
                .map(|(c, m)| x.at(c, m, f))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for c in gi * per..(gi + 1) * per {
                for m in 0..x.m {
                    y.set(c, m, f, g[c] * (x.at(c, m, f) - mean) / (var + eps).sqrt() + b[c]);
                }
            }
        }
    }
    y
}

/// Same-padded grouped convolution along time (`along_time`) or frequency.
pub fn conv(store: &ParamStore<f64>, prefix: &str, x: &A3, groups: usize, along_time: bool) -> A3 {
    let w = p(store, &format!("{prefix}.weight"));
    let b = p(store, &format!("{prefix}.bias"));
    let cout = b.len();
    let cin_g = x.c / groups;
    let k = w.len() / (cout * cin_g);
    let pad = (k as isize - 1) / 2;
    let cout_g = cout / groups;
    let mut y = A3::zeros(cout, x.m, x.f);
    for o in 0..cout {
        for m in 0..x.m {
            for f in 0..x.f {
                let mut acc = b[o];
                for ci in 0..cin_g {
                    let i = (o / cout_g) * cin_g + ci;
                    for t in 0..k {
                        let off = t as isize - pad;
                        let (mm, ff) = if along_time {
                            (m as isize + off, f as isize)
                        } else {
                            (m as isize, f as isize + off)
                        };
                        if mm < 0 || ff < 0 || mm >= x.m as isize || ff >= x.f as isize {
                            continue;
                        }
                        acc += w[(o * cin_g + ci) * k + t] * x.at(i, mm as usize, ff as usize);
                    }
                }
                y.set(o, m, f, acc);
            }
        }
    }
    y
}

pub fn prelu(store: &ParamStore<f64>, prefix: &str, x: &A3) -> A3 {
    let a = p(store, &format!("{prefix}.weight"))[0];
    x.map(|v| if v >= 0.0 { v } else { a * v })
}

/// Batch normalization per channel over all other positions; `train` uses
/// the input's own (biased) statistics, otherwise the running buffers.
pub fn batch_norm(store: &ParamStore<f64>, prefix: &str, x: &A3, eps: f64, train: bool) -> A3 {
    let g = p(store, &format!("{prefix}.weight"));
    let b = p(store, &format!("{prefix}.bias"));
    let mut y = x.clone();
    for c in 0..x.c {
        let vals: Vec<f64> = (0..x.m)
            .flat_map(|m| (0..x.f).map(move |f| (m, f)))
            .map(|(m, f)| x.at(c, m, f))
            .collect();
        let (mean, var) = if train {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64)
        } else {
            (
                buf(store, &format!("{prefix}.running_mean"))[c],
                buf(store, &format!("{prefix}.running_var"))[c],
            )
        };
        for m in 0..x.m {
            for f in 0..x.f {
                y.set(c, m, f, g[c] * (x.at(c, m, f) - mean) / (var + eps).sqrt() + b[c]);
            }
        }
    }
    y
}

/// `softmax(scale · q kᵀ) v` with explicit loops; rows are tokens.
pub fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|d| e.iter().zip(v).map(|(w, vj)| w / z * vj[d]).sum())
                .collect()
        })
        .collect()
}

pub fn narrowband(store: &ParamStore<f64>, cfg: &ModelConfig, prefix: &str, x: &A3) -> A3 {
    let eps = cfg.norm_eps;
    let pre = |s: &str| format!("{prefix}.{s}");
    let a = layer_norm(store, &pre("ln_in"), x, eps);
    let q = linear(store, &pre("attn.q"), &a);
    let k = linear(store, &pre("attn.k"), &a);
    let v = linear(store, &pre("attn.v"), &a);
    let heads = cfg.heads;
    let dh = x.c / heads;
    let mut o = A3::zeros(x.c, x.m, x.f);
    for f in 0..x.f {
        for h in 0..heads {
            let tok = |t: &A3| -> Vec<Vec<f64>> {
                (0..x.m)
                    .map(|m| (0..dh).map(|d| t.at(h * dh + d, m, f)).collect())
                    .collect()
            };
            let out = attend(&tok(&q), &tok(&k), &tok(&v), 1.0 / (dh as f64).sqrt());
            for m in 0..x.m {
                for d in 0..dh {
                    o.set(h * dh + d, m, f, out[m][d]);
                }
            }
        }
    }
    let o = linear(store, &pre("attn.out"), &o);
    let u = x.add(&layer_norm(store, &pre("ln_attn"), &o, eps));
    let h = layer_norm(store, &pre("ln_ffn"), &u, eps);
    let h = linear(store, &pre("ffn.up"), &h).map(silu);
    let h = conv(store, &pre("ffn.tconv"), &h, cfg.groups, true);
    let h = group_norm(store, &pre("ffn.gn"), &h, cfg.groups, eps);
    let h = linear(store, &pre("ffn.down"), &h);
    u.add(&h)
}

pub fn crossband(store: &ParamStore<f64>, cfg: &ModelConfig, prefix: &str, x: &A3) -> A3 {
    let eps = cfg.norm_eps;
    let comp = |idx: usize, x: &A3| -> A3 {
        let h = layer_norm(store, &format!("{prefix}.ln{idx}"), x, eps);
        let h = conv(store, &format!("{prefix}.fgconv{idx}"), &h, cfg.groups, false);
        x.add(&prelu(store, &format!("{prefix}.prelu{idx}"), &h))
    };
    let a = comp(1, x);
    let t = linear(store, &format!("{prefix}.down"), &a).map(silu);
    let mut t2 = A3::zeros(t.c, t.m, t.f);
    for i in 0..t.c {
        let w = p(store, &format!("shared.fullband.{i}.weight"));
        let b = p(store, &format!("shared.fullband.{i}.bias"));
        for m in 0..t.m {
            for g in 0..t.f {
                let mut acc = b[g];
                for f in 0..t.f {
                    acc += w[g * t.f + f] * t.at(i, m, f);
                }
                t2.set(i, m, g, acc);
            }
        }
    }
    let t3 = linear(store, &format!("{prefix}.up"), &t2).map(silu);
    comp(2, &a.add(&t3))
}

pub fn gmhsa(store: &ParamStore<f64>, cfg: &ModelConfig, prefix: &str, x: &A3) -> A3 {
    let (l, e) = (cfg.heads, cfg.embed());
    let dv = x.c / l;
    let z = linear(store, &format!("{prefix}.conv_in"), x);
    let mut o = A3::zeros(x.c, x.m, x.f);
    for h in 0..l {
        let tok = |base: usize, width: usize| -> Vec<Vec<f64>> {
            (0..x.m)
                .map(|m| {
                    (0..width)
                        .flat_map(|c| (0..x.f).map(move |f| (c, f)))
                        .map(|(c, f)| z.at(base + h * width + c, m, f))
                        .collect()
                })
                .collect()
        };
        let q = tok(0, e);
        let k = tok(l * e, e);
        let v = tok(2 * l * e, dv);
        let out = attend(&q, &k, &v, 1.0 / ((e * x.f) as f64).sqrt());
        for m in 0..x.m {
            for d in 0..dv {
                for f in 0..x.f {
                    o.set(h * dv + d, m, f, out[m][d * x.f + f]);
                }
            }
        }
    }
    let o = linear(store, &format!("{prefix}.conv_out"), &o);
    let o = prelu(store, &format!("{prefix}.prelu"), &o);
    x.add(&layer_norm(store, &format!("{prefix}.ln"), &o, cfg.norm_eps))
}

pub fn audio_encode(store: &ParamStore<f64>, y: &A3) -> A3 {
    conv(store, "audio_encoder", y, 1, false)
}

pub fn vtcn(store: &ParamStore<f64>, cfg: &ModelConfig, x: &A3, train: bool) -> A3 {
    let eps = cfg.norm_eps;
    let mut x = x.clone();
    for r in 0..cfg.vtcn_blocks {
        let pre = |s: &str| format!("visual.vtcn.{r}.{s}");
        let h = x.map(|v| v.max(0.0));
        let h = batch_norm(store, &pre("bn1"), &h, eps, train);
        let h = conv(store, &pre("conv1"), &h, 1, true);
        let h = prelu(store, &pre("prelu"), &h);
        let h = batch_norm(store, &pre("bn2"), &h, eps, train);
        let h = conv(store, &pre("conv2"), &h, 1, true);
        x = x.add(&h);
    }
    x
}

pub fn fuse(store: &ParamStore<f64>, audio: &A3, visual: &A3) -> A3 {
    let mut cat = A3::zeros(audio.c + visual.c, audio.m, audio.f);
    cat.d[..audio.d.len()].copy_from_slice(&audio.d);
    cat.d[audio.d.len()..].copy_from_slice(&visual.d);
    linear(store, "fusion", &cat)
}

/// Tiny configuration within the gradient-check bounds.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        hidden: 8,
        bottleneck: 2,
        ffn: 8,
        groups: 2,
        heads: 2,
        embed_dim: Some(2),
        vtcn_blocks: 2,
        visual_dim: 4,
        win_length: 16,
        pe_max_len: 32,
        ..ModelConfig::default()
    }
}

/// Parameters and buffers drawn uniformly so that no layer sits at its
/// identity initialization; running variances stay positive.
pub fn random_store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let names: Vec<String> = store.params.names().map(String::from).collect();
    for n in names {
        let t = store.params.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.6..0.6));
    }
    let names: Vec<String> = store.buffers.names().map(String::from).collect();
    for n in names {
        let var = n.ends_with("running_var");
        let t = store.buffers.get_mut(&n).unwrap();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = if var { rng.gen_range(0.5..1.5) } else { rng.gen_range(-0.3..0.3) });
    }
    store
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Zeroes every parameter whose name starts with one of `prefixes`, except
/// normalization and PReLU tensors which keep their values.
pub fn zero_weights(store: &mut ParamStore<f64>, prefixes: &[&str]) {
    let names: Vec<String> = store.params.names().map(String::from).collect();
    for n in names {
        if prefixes.iter().any(|p| n.starts_with(p)) {
            store.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Gradient check of `module(x)` with respect to `x` and every parameter the
/// module touches, through a fixed random projection to a scalar.
pub fn module_gradcheck(
    store: &ParamStore<f64>,
    mode: Mode,
    x: Tensor<f64>,
    seed: u64,
    module: impl Fn(&Ctx<f64>, &Var<f64>) -> avsep::Result<Var<f64>>,
) -> Vec<GradCheck> {
    let probe_ctx = Ctx::new(store, mode, true, seed);
    let out = module(&probe_ctx, &Var::leaf(x.clone())).unwrap();
    let proj = random_tensor(out.shape(), seed ^ 0x77);
    let names: Vec<String> = probe_ctx.leaves().into_iter().map(|(n, _)| n).collect();
    let mut inputs: Vec<(&str, Tensor<f64>)> = vec![("input", x)];
    for n in &names {
        inputs.push((n.as_str(), store.params.get(n).unwrap().clone()));
    }
    gradcheck::check(&inputs, 1e-5, 24, |vars| {
        let ctx = Ctx::new(store, mode, false, seed);
        for (n, v) in names.iter().zip(&vars[1..]) {
            ctx.bind(n.clone(), v.clone());
        }
        ops::dot_const(&module(&ctx, &vars[0])?, &proj)
    })
    .unwrap()
}

/// Visual projection to `F` bins, linear interpolation from `Mv` to `m`
/// frames, tiled over `hidden` channels.
pub fn project_upsample(store: &ParamStore<f64>, hidden: usize, x: &A3, m: usize) -> A3 {
    let w = p(store, "visual.proj.weight");
    let b = p(store, "visual.proj.bias");
    let (fv, mv, bins) = (x.c, x.m, b.len());
    let proj = |f: usize, j: usize| -> f64 {
        b[f] + (0..fv).map(|d| w[f * fv + d] * x.at(d, j, 0)).sum::<f64>()
    };
    let mut y = A3::zeros(hidden, m, bins);
    for t in 0..m {
        let pos = if mv == 1 || m == 1 { 0.0 } else { t as f64 * (mv - 1) as f64 / (m - 1) as f64 };
        let lo = (pos.floor() as usize).min(mv - 1);
        let hi = (lo + 1).min(mv - 1);
        let a = pos - lo as f64;
        for f in 0..bins {
            let v = (1.0 - a) * proj(f, lo) + a * proj(f, hi);
            for h in 0..hidden {
                y.set(h, t, f, v);
            }
        }
    }
    y
}

/// Sinusoidal table entry for 0-based `row` and column `col` of `width`.
pub fn pe_value(row: usize, col: usize, width: usize) -> f64 {
    let angle = row as f64 / 10000f64.powf(2.0 * (col / 2) as f64 / width as f64);
    if col % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Whole separator in inference mode on a `[2, M, F]` mixture spectrum with
/// one `[Fv, Mv, 1]` embedding stack per speaker and chunk start `tau`.
pub fn separator(store: &ParamStore<f64>, cfg: &ModelConfig, mix: &A3, visuals: &[A3], tau: usize) -> A3 {
    let audio = audio_encode(store, mix);
    let (m, f, h) = (audio.m, audio.f, audio.c);
    let mut vis = A3::zeros(0, m, f);
    for v in visuals {
        let s = project_upsample(store, h, &vtcn(store, cfg, v, false), m);
        vis.d.extend_from_slice(&s.d);
        vis.c += s.c;
    }
    let mut x = fuse(store, &audio, &vis);
    for c in 0..h {
        for t in 0..m {
            for k in 0..f {
                let v = x.at(c, t, k) + pe_value(tau - 1 + t, c * f + k, h * f);
                x.set(c, t, k, v);
            }
        }
    }
    for b in 0..cfg.blocks {
        x = narrowband(store, cfg, &format!("block.{b}.narrowband"), &x);
        x = crossband(store, cfg, &format!("block.{b}.crossband"), &x);
        x = gmhsa(store, cfg, &format!("block.{b}.gmhsa"), &x);
    }
    linear(store, "decoder", &x)
}
