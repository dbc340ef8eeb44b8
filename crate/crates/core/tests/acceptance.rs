//! Acceptance criteria C1 to C8. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; the process fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use avsep::autodiff::gradcheck::{self, GradCheck};
use avsep::autodiff::{ops, Var};
use avsep::dsp::{denormalize, istft, normalize_variance, stft, StftConfig, Waveform};
use avsep::eval::{evaluate_items, Estimator};
use avsep::fusion::rcpe_tau;
use avsep::losses::{loss_mag, loss_sisdr};
use avsep::metrics::{metric_si_sdr, metric_snr, Summary};
use avsep::model::registry::{block_param_count, param_specs};
use avsep::model::{
    audio_encode, count_parameters, crossband_forward, decode, gmhsa_forward, narrowband_forward, Ctx, Mode, Model,
    ModelConfig,
};
use avsep::synth::{synth_item, CorpusConfig, LoadedItem, Split};
use avsep::train::{lr_at, Example, TrainConfig, TrainState, Trainer};
use avsep::visual::vtcn_forward;
use avsep::fusion::fuse;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c1_parameter_budget() -> Outcome {
    let cfg = ModelConfig::default();
    let n = count_parameters(&cfg);
    let (hp, f) = (cfg.bottleneck, cfg.bins());
    let shared = |c: &ModelConfig| -> usize {
        param_specs(c)
            .iter()
            .filter(|s| s.name.starts_with("shared.fullband."))
            .map(|s| s.numel())
            .sum()
    };
    let expected = hp * f * (f + 1);
    let mut per_b = Vec::new();
    for blocks in [1, 2, 6, 12] {
        let c = ModelConfig { blocks, ..cfg.clone() };
        per_b.push(shared(&c));
    }
    // Adding a block adds exactly one block's worth of unshared parameters.
    let c11 = ModelConfig { blocks: 11, ..cfg.clone() };
    let step = n - count_parameters(&c11);
    ensure(
        (9_400_000..=12_800_000).contains(&n)
            && per_b.iter().all(|&s| s == expected)
            && step == block_param_count(&cfg),
        format!(
            "{n} parameters; shared full-band {:?} vs H'F(F+1) = {expected}; per-block step {step}",
            per_b
        ),
    )
}

fn c2_dsp_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = StftConfig::default();
    let (mut worst_rt, mut worst_norm) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let len = rng.gen_range(3200..=48000);
        let gain = 10f64.powf(rng.gen_range(-3.0..1.0));
        let x: Vec<f64> = (0..len).map(|_| gain * rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::from_samples(x).unwrap();
        let back = istft(&stft(&w, &cfg), &cfg, len).unwrap();
        let err = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_rt = worst_rt.max(err);
        let (n, st) = normalize_variance(&w);
        let r = denormalize(&n, &st);
        let rel = w.samples.iter().zip(&r.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            / w.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst_norm = worst_norm.max(rel);
    }
    ensure(
        worst_rt <= 1e-6 && worst_norm <= 1e-6,
        format!("roundtrip max error {worst_rt:.2e}, normalize inverse {worst_norm:.2e} over 100 waveforms"),
    )
}

fn c3_gradients() -> Outcome {
    let cfg = tiny_config();
    let (h, m, f, fv, mv) = (cfg.hidden, 6, cfg.bins(), cfg.visual_dim, 3);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, r: Vec<GradCheck>| {
        let w = gradcheck::worst(&r);
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = e.1.max(w),
            None => worst.push((name, w)),
        }
    };
    for seed in 0..5u64 {
        let store = random_store(&cfg, 100 + seed);
        let x = random_tensor(&[h, m, f], seed);
        record(
            "audio_encode",
            module_gradcheck(&store, Mode::Eval, random_tensor(&[2, m, f], seed), seed, |c, v| {
                audio_encode(c, &cfg, v)
            }),
        );
        record(
            "vtcn_forward",
            module_gradcheck(&store, Mode::Train, random_tensor(&[fv, mv, 1], seed), seed, |c, v| {
                vtcn_forward(c, &cfg, v)
            }),
        );
        record(
            "fuse",
            module_gradcheck(&store, Mode::Eval, random_tensor(&[3 * h, m, f], seed), seed, |c, v| {
                fuse(c, &ops::slice(v, 0, 0, h)?, &ops::slice(v, 0, h, 2 * h)?)
            }),
        );
        record(
            "narrowband_forward",
            module_gradcheck(&store, Mode::Eval, x.clone(), seed, |c, v| {
                narrowband_forward(c, &cfg, "block.0.narrowband", v)
            }),
        );
        record(
            "crossband_forward",
            module_gradcheck(&store, Mode::Eval, x.clone(), seed, |c, v| {
                crossband_forward(c, &cfg, "block.1.crossband", v)
            }),
        );
        record(
            "gmhsa_forward",
            module_gradcheck(&store, Mode::Eval, x.clone(), seed, |c, v| {
                gmhsa_forward(c, &cfg, "block.0.gmhsa", v)
            }),
        );
        record("decode", module_gradcheck(&store, Mode::Eval, x, seed, decode));

        let planes = |s: u64| random_tensor(&[2, m, f], s);
        let tgt = vec![planes(seed + 10), planes(seed + 20)];
        let r = gradcheck::check(&[("est0", planes(seed + 30)), ("est1", planes(seed + 40))], 1e-5, 24, |v| {
            Ok(loss_mag(v, &tgt)?.0)
        })
        .unwrap();
        record("loss_mag", r);
        let n = 96;
        let tgt = vec![random_tensor(&[n], seed + 50), random_tensor(&[n], seed + 60)];
        let est0 = tgt[0].zip_map(&random_tensor(&[n], seed + 70), |a, b| a + 0.5 * b);
        let est1 = random_tensor(&[n], seed + 80);
        let r = gradcheck::check(&[("est0", est0), ("est1", est1)], 1e-5, 24, |v| loss_sisdr(v, &tgt)).unwrap();
        record("loss_sisdr", r);
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    ensure(max <= 1e-4, format!("worst relative error {max:.2e} ({})", detail.join(", ")))
}

fn c4_corpus(split: Split, num_items: usize, seed: u64) -> Vec<LoadedItem> {
    let corpus = CorpusConfig {
        num_items,
        duration_s: 0.48,
        visual_dim: 32,
        master_seed: seed,
        split,
        ..Default::default()
    };
    (0..num_items).map(|i| synth_item(&corpus, i).unwrap().1).collect()
}

fn c4_train() -> Model<f32> {
    let cfg = ModelConfig::toy();
    let items = c4_corpus(Split::Train, 8, 0);
    let ex: Vec<Example<f32>> = items.iter().map(|it| Example::new(&cfg, it).unwrap()).collect();
    let tc = TrainConfig {
        max_epochs: 1000,
        max_steps: Some(500),
        early_stop_patience: 1000,
        seed: 1,
        grad_clip: Some(5.0),
        ..Default::default()
    };
    let mut tr = Trainer::new(Model::<f32>::new(cfg, 1).unwrap(), tc).unwrap();
    tr.fit(&ex, &[], None, |_| {}).unwrap();
    tr.model
}

fn c4_learnability(model: &Model<f32>) -> Outcome {
    let items = c4_corpus(Split::Train, 8, 0);
    let mean = evaluate_items(&Estimator::Model(model), &items).aggregate().si_sdr_i.mean;
    let (mut consistent, mut swapped) = (0, 0);
    for it in &items {
        let out = model.separate(&it.mixture, &it.visuals).unwrap();
        let s = |e: usize, r: usize| metric_si_sdr(&out[e].samples, &it.sources[r].samples).unwrap();
        consistent += (s(0, 0) > s(0, 1) && s(1, 1) > s(1, 0)) as usize;
        let rev: Vec<_> = it.visuals.iter().rev().cloned().collect();
        let out = model.separate(&it.mixture, &rev).unwrap();
        let s = |e: usize, r: usize| metric_si_sdr(&out[e].samples, &it.sources[r].samples).unwrap();
        swapped += (s(0, 1) > s(0, 0) && s(1, 0) > s(1, 1)) as usize;
    }
    ensure(
        mean >= 5.0 && consistent >= 7 && swapped >= 7,
        format!("mean SI-SDRi {mean:.2} dB, visual-order consistent {consistent}/8, swap follows {swapped}/8"),
    )
}

fn c5_oracles() -> Outcome {
    let cfg = ModelConfig { win_length: 4, ..tiny_config() };
    let mut worst = [0.0f64; 3];
    for seed in 0..5u64 {
        let store = random_store(&cfg, 200 + seed);
        let ctx = Ctx::eval(&store);
        for (slot, f) in [(0, 2), (2, 2)] {
            let x = random_tensor(&[cfg.hidden, 3, f], seed);
            let a = A3::from_tensor(&x);
            let v = Var::constant(x);
            let (got, want) = if slot == 0 {
                let p = "block.0.narrowband";
                (narrowband_forward(&ctx, &cfg, p, &v).unwrap(), narrowband(&store, &cfg, p, &a))
            } else {
                let p = "block.1.gmhsa";
                (gmhsa_forward(&ctx, &cfg, p, &v).unwrap(), gmhsa(&store, &cfg, p, &a))
            };
            worst[slot] = worst[slot].max(want.max_abs_diff(got.value()));
        }
        let x = random_tensor(&[cfg.hidden, 2, cfg.bins()], seed);
        let p = "block.0.crossband";
        let got = crossband_forward(&ctx, &cfg, p, &Var::constant(x.clone())).unwrap();
        worst[1] = worst[1].max(crossband(&store, &cfg, p, &A3::from_tensor(&x)).max_abs_diff(got.value()));
    }
    ensure(
        worst.iter().all(|&w| w <= 1e-9),
        format!(
            "max deviation narrow-band {:.1e}, cross-band {:.1e}, global attention {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c6_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let (lr0, lr10) = (lr_at(0, None, &cfg), lr_at(10, None, &cfg));
    let mut s = TrainState::new(&cfg);
    let mut lrs = Vec::new();
    let mut stopped_after = None;
    for e in 0..100 {
        s.observe(e, 1.0, &cfg);
        lrs.push(s.current_lr);
        if s.should_stop(&cfg) {
            stopped_after = Some(e + 1);
            break;
        }
    }
    // Plateau behaviour after warmup with a loss that improves only during warmup.
    let mut p = TrainState::new(&cfg);
    let mut post = Vec::new();
    for e in 0..22 {
        p.observe(e, if e < 10 { 10.0 - e as f64 } else { 5.0 }, &cfg);
        if e >= 10 {
            post.push(p.current_lr);
        }
    }
    let expect: Vec<f64> = (1..=12).map(|k| 1e-3 * 0.9f64.powi((k / 3) as i32)).collect();
    let plateau_ok = post.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-15);
    ensure(
        lr0 == 1e-6 && lr10 == 1e-3 && plateau_ok && stopped_after == Some(11) && s.epochs_since_best == 10,
        format!(
            "lr(0) = {lr0:e}, lr(10) = {lr10:e}, post-warmup rates {:?}, constant loss stops after {:?} epochs ({} stagnant)",
            post.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            stopped_after,
            s.epochs_since_best
        ),
    )
}

fn c7_rcpe() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eval_ok = (0..100).all(|_| rcpe_tau(16, 4, Mode::Eval, &mut rng).unwrap() == 1);
    let draws = 10_000;
    let mut counts = [0usize; 14];
    for _ in 0..draws {
        counts[rcpe_tau(16, 4, Mode::Train, &mut rng).unwrap()] += 1;
    }
    let p = 1.0 / 13.0;
    let (mu, sigma) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
    let worst_z = counts[1..].iter().map(|&c| (c as f64 - mu).abs() / sigma).fold(0.0, f64::max);
    ensure(
        eval_ok && counts[0] == 0 && counts[1..].iter().all(|&c| c > 0) && worst_z <= 3.0,
        format!("eval tau always 1: {eval_ok}; counts {:?}; worst |z| {worst_z:.2}", &counts[1..]),
    )
}

fn c8_snr_buckets(model: &Model<f32>) -> Outcome {
    let items = c4_corpus(Split::Test, 24, 8);
    let mut pairs = Vec::new();
    for it in &items {
        let out = Estimator::Model(model).estimate(it).unwrap();
        for (c, src) in it.sources.iter().enumerate() {
            let input = metric_snr(&it.mixture.samples, &src.samples).unwrap();
            let processed = metric_si_sdr(&out[c].samples, &src.samples).unwrap();
            pairs.push((input, processed));
        }
    }
    let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let nb = 4;
    let width = (hi - lo) / nb as f64;
    let mut buckets = Vec::new();
    for b in 0..nb {
        let sel: Vec<(f64, f64)> = pairs
            .iter()
            .copied()
            .filter(|p| {
                let k = (((p.0 - lo) / width) as usize).min(nb - 1);
                k == b
            })
            .collect();
        if sel.is_empty() {
            continue;
        }
        let input = Summary::of(&sel.iter().map(|p| p.0).collect::<Vec<_>>());
        let out = Summary::of(&sel.iter().map(|p| p.1).collect::<Vec<_>>());
        buckets.push((sel.len(), input, out));
    }
    let span = |f: &dyn Fn(&(usize, Summary, Summary)) -> f64| {
        let v: Vec<f64> = buckets.iter().map(f).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let in_span = span(&|b| b.1.mean);
    let out_span = span(&|b| b.2.mean);
    let detail: Vec<String> = buckets
        .iter()
        .map(|(n, i, o)| format!("[n={n} in {:.1} dB: {:.2} ± {:.2}]", i.mean, o.mean, o.ci95))
        .collect();
    ensure(
        buckets.len() >= 2 && out_span < in_span,
        format!(
            "processed spread {out_span:.2} dB vs input span {in_span:.2} dB; {}",
            detail.join(" ")
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &r {
        Ok(m) => println!("{name} PASS ({secs:.1} s): {m}"),
        Err(m) => println!("{name} FAIL ({secs:.1} s): {m}"),
    }
    r.is_ok()
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| filter.is_empty() || filter.iter().any(|f| n.contains(f.as_str()));
    let mut ok = true;
    if wanted("C1") {
        ok &= run("C1 parameter budget", c1_parameter_budget);
    }
    if wanted("C2") {
        ok &= run("C2 dsp exactness", c2_dsp_exactness);
    }
    if wanted("C3") {
        ok &= run("C3 gradient correctness", c3_gradients);
    }
    if wanted("C4") || wanted("C8") {
        let t = Instant::now();
        let model = catch_unwind(c4_train).ok();
        let train_secs = t.elapsed().as_secs_f64();
        if wanted("C4") {
            ok &= run("C4 toy learnability", || match &model {
                Some(m) => c4_learnability(m).map(|s| format!("{s}; training {train_secs:.0} s")),
                None => Err("training panicked".into()),
            });
        }
        if wanted("C8") {
            ok &= run("C8 snr buckets", || match &model {
                Some(m) => c8_snr_buckets(m),
                None => Err("training panicked".into()),
            });
        }
    }
    if wanted("C5") {
        ok &= run("C5 oracle equivalence", c5_oracles);
    }
    if wanted("C6") {
        ok &= run("C6 schedule", c6_schedule);
    }
    if wanted("C7") {
        ok &= run("C7 rcpe contract", c7_rcpe);
    }
    if !ok {
        std::process::exit(1);
    }
}
