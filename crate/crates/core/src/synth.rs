//! Deterministic synthetic audio-visual corpus: harmonic "speech" with
//! syllabic envelopes, embedding streams that carry those envelopes, and
//! mixtures at controlled target-to-interferer and signal-to-noise ratios.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::par;
use crate::visual::{VisualEmbeddingSequence, DEFAULT_FPS};
use crate::wav::{read_wav, write_wav, WavFormat};

/// Embedding dimensions that carry the envelope.
pub const ENVELOPE_DIMS: usize = 8;

const F0_MIN: f64 = 80.0;
const F0_MAX: f64 = 400.0;
const HARMONICS: usize = 5;
const PEAK_LIMIT: f64 = 0.99;
const NOISE_FLOOR: f64 = 0.01;

/// Parameters of one synthetic talker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub seed: u64,
    /// Range the starting f0 is drawn from, within `[80, 400]` Hz.
    pub f0_range: (f64, f64),
    /// Range the syllable rate is drawn from, in Hz.
    pub syllable_rate: (f64, f64),
    /// Envelope depth in `(0, 1]`; the envelope floor is `1 − depth`.
    pub depth: f64,
    pub duration_s: f64,
    pub id: u64,
    pub sample_rate: u32,
    pub fps: f64,
}

impl SpeakerSpec {
    pub fn new(seed: u64, id: u64, duration_s: f64) -> Self {
        SpeakerSpec {
            seed,
            f0_range: (100.0, 300.0),
            syllable_rate: (2.0, 6.0),
            depth: 0.95,
            duration_s,
            id,
            sample_rate: DEFAULT_SAMPLE_RATE,
            fps: DEFAULT_FPS,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.f0_range;
        if !(F0_MIN <= lo && lo <= hi && hi <= F0_MAX) {
            return Err(Error::Config(format!("f0 range {lo}..{hi} outside [80, 400] Hz")));
        }
        if !(self.duration_s > 0.0) || !(self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("duration, fps and sample rate must be positive".into()));
        }
        if !(self.depth > 0.0 && self.depth <= 1.0) {
            return Err(Error::Config(format!("envelope depth {} not in (0, 1]", self.depth)));
        }
        let (r0, r1) = self.syllable_rate;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("syllable rate {r0}..{r1} invalid")));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        ((self.duration_s * self.sample_rate as f64).round() as usize).max(1)
    }

    pub fn num_frames(&self) -> usize {
        ((self.duration_s * self.fps).round() as usize).max(1)
    }
}

/// Syllable bumps: raised-cosine pulses at a random rate.
struct Syllables {
    /// (start, length, height) in seconds / linear amplitude.
    bumps: Vec<(f64, f64, f64)>,
    floor: f64,
}

impl Syllables {
    fn draw(spec: &SpeakerSpec, rng: &mut ChaCha8Rng) -> Self {
        let rate = rng.gen_range(spec.syllable_rate.0..=spec.syllable_rate.1);
        let mut bumps = Vec::new();
        let mut t = -rng.gen_range(0.0..1.0) / rate;
        while t < spec.duration_s {
            let period = rng.gen_range(0.7..1.3) / rate;
            let len = period * rng.gen_range(0.5..0.8);
            bumps.push((t, len, rng.gen_range(0.5..1.0)));
            t += period;
        }
        Syllables {
            bumps,
            floor: 1.0 - spec.depth,
        }
    }

    fn at(&self, t: f64) -> f64 {
        let mut v = 0.0f64;
        for &(s, len, h) in &self.bumps {
            if t >= s && t < s + len {
                let x = (t - s) / len;
                v = v.max(h * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * x).cos()));
            }
        }
        self.floor + (1.0 - self.floor) * v
    }
}

/// Harmonic complex (f0 plus four harmonics) with a random-walk f0 contour,
/// gated by a syllabic envelope. Returns the audio and the envelope sampled
/// at the video frame rate.
pub fn synth_speaker(spec: &SpeakerSpec) -> Result<(Waveform, Vec<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate as f64;
    let syl = Syllables::draw(spec, &mut rng);
    let mut f0 = rng.gen_range(spec.f0_range.0..=spec.f0_range.1);
    let phases: Vec<f64> = (0..HARMONICS)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let step = Normal::<f64>::new(0.0, 0.02).expect("valid normal");
    let hop = (sr / 100.0).round().max(1.0) as usize;
    let n = spec.num_samples();
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        if i % hop == 0 && i > 0 {
            f0 = (f0 * step.sample(&mut rng).exp()).clamp(F0_MIN, F0_MAX);
        }
        phase += std::f64::consts::TAU * f0 / sr;
        let tone: f64 = (0..HARMONICS)
            .map(|k| {
                let kf = (k + 1) as f64;
                if kf * f0 < sr / 2.0 {
                    (kf * phase + phases[k]).sin() / kf
                } else {
                    0.0
                }
            })
            .sum();
        samples.push(0.2 * syl.at(i as f64 / sr) * tone);
    }
    let env = (0..spec.num_frames())
        .map(|k| syl.at(k as f64 / spec.fps))
        .collect();
    Ok((Waveform::new(samples, spec.sample_rate)?, env))
}

/// Embedding stream for a talker: dimensions `0..8` hold
/// `envelope[t] · onehot(id mod 8)`, the rest small deterministic noise.
pub fn synth_visual(envelope: &[f64], id: u64, dim: usize, fps: f64) -> Result<VisualEmbeddingSequence> {
    if dim < ENVELOPE_DIMS {
        return Err(Error::Config(format!("embedding width {dim} below {ENVELOPE_DIMS}")));
    }
    if envelope.is_empty() {
        return Err(Error::Data("empty envelope".into()));
    }
    let hot = (id % ENVELOPE_DIMS as u64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0x5eed_0f_0015);
    let mut data = Vec::with_capacity(envelope.len() * dim);
    for &e in envelope {
        for d in 0..dim {
            let v = if d < ENVELOPE_DIMS {
                if d == hot {
                    e
                } else {
                    0.0
                }
            } else {
                rng.gen_range(-NOISE_FLOOR..NOISE_FLOOR)
            };
            data.push(v as f32);
        }
    }
    VisualEmbeddingSequence::new(envelope.len(), dim, fps, data)
}

/// A mixture and its (scaled) components.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: Waveform,
    /// Sources as they appear in the mixture, after level and peak scaling.
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
    /// Peak-guard gain applied to everything (1 when no clipping risk).
    pub gain: f64,
}

fn crop(w: &Waveform, len: usize) -> Vec<f64> {
    w.samples[..len].to_vec()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `y = Σ_c s_c + n`. Sources `2..C` are scaled so that
/// `10 log10(P₁ / P_c) = tir_db`; noise so that the speech-to-noise ratio is
/// `snr_db`. Everything is then scaled so `|y| ≤ 0.99`.
pub fn mix(sources: &[Waveform], tir_db: f64, noise: Option<(&Waveform, f64)>) -> Result<Mixture> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Data("mix needs at least one source".into()))?;
    let mut len = sources.iter().map(Waveform::len).min().unwrap_or(0);
    if let Some((n, _)) = noise {
        len = len.min(n.len());
    }
    let p1 = power(&crop(first, len));
    if p1 <= 0.0 {
        return Err(Error::Data("source 1 has zero power".into()));
    }
    let mut scaled = Vec::with_capacity(sources.len());
    for (c, s) in sources.iter().enumerate() {
        let x = crop(s, len);
        let p = power(&x);
        if p <= 0.0 {
            return Err(Error::Data(format!("source {} has zero power", c + 1)));
        }
        let g = if c == 0 {
            1.0
        } else {
            (p1 * 10f64.powf(-tir_db / 10.0) / p).sqrt()
        };
        scaled.push(x.into_iter().map(|v| v * g).collect::<Vec<_>>());
    }
    let mut y: Vec<f64> = (0..len).map(|i| scaled.iter().map(|s| s[i]).sum()).collect();
    let mut noise_scaled = None;
    if let Some((n, snr_db)) = noise {
        let x = crop(n, len);
        let pn = power(&x);
        if pn <= 0.0 {
            return Err(Error::Data("noise has zero power".into()));
        }
        let g = (power(&y) * 10f64.powf(-snr_db / 10.0) / pn).sqrt();
        let x: Vec<f64> = x.into_iter().map(|v| v * g).collect();
        y.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
        noise_scaled = Some(x);
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    let sr = first.sample_rate;
    let wave = |v: Vec<f64>| Waveform::new(v.into_iter().map(|s| s * gain).collect(), sr);
    Ok(Mixture {
        mixture: wave(y)?,
        sources: scaled.into_iter().map(wave).collect::<Result<_>>()?,
        noise: noise_scaled.map(wave).transpose()?,
        gain,
    })
}

/// Pink-ish noise (white noise through a 1/f shaping filter).
pub fn synth_noise(seed: u64, len: usize, sample_rate: u32) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let samples = (0..len)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            0.1 * (b0 + b1 + b2 + w * 0.1848)
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Which split a corpus is; splits draw talkers from disjoint seed ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// Talker seed of speaker `c` in item `i`; the top bits encode the split.
    pub fn speaker_seed(self, item: usize, c: usize, speakers: usize) -> u64 {
        (self.index() << 48) | (item * speakers + c) as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_items: usize,
    pub speakers: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub fps: f64,
    pub visual_dim: usize,
    pub tir_range: (f64, f64),
    /// `None` mixes without background noise.
    pub snr_range: Option<(f64, f64)>,
    pub master_seed: u64,
    pub split: Split,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_items: 8,
            speakers: 2,
            duration_s: 3.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            fps: DEFAULT_FPS,
            visual_dim: 512,
            tir_range: (-5.0, 5.0),
            snr_range: None,
            master_seed: 0,
            split: Split::Train,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) must be finite and ascending")));
    }
    Ok(())
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.speakers == 0 {
            return Err(Error::Config("num_items and speakers must be positive".into()));
        }
        if self.speakers > ENVELOPE_DIMS {
            return Err(Error::Config(format!("at most {ENVELOPE_DIMS} speakers per item")));
        }
        if self.visual_dim < ENVELOPE_DIMS {
            return Err(Error::Config(format!("visual_dim must be at least {ENVELOPE_DIMS}")));
        }
        if !(self.duration_s > 0.0 && self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("duration, fps and sample rate must be positive".into()));
        }
        check_range("tir", self.tir_range)?;
        if let Some(r) = self.snr_range {
            check_range("snr", r)?;
        }
        Ok(())
    }
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub mixture: String,
    pub sources: Vec<String>,
    pub embeddings: Vec<String>,
    pub tir_db: f64,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub speaker_seeds: Vec<u64>,
    pub speaker_ids: Vec<u64>,
    pub gain: f64,
}

/// Items of one split, with the directory their paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureManifest {
    pub split: Split,
    pub root: PathBuf,
    pub items: Vec<ItemRecord>,
}

/// An item with all of its files loaded.
#[derive(Clone, Debug)]
pub struct LoadedItem {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub visuals: Vec<VisualEmbeddingSequence>,
}

impl MixtureManifest {
    pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("{}.jsonl", split.name()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for item in &self.items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; the split is taken from the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let split = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("train")
            .parse()
            .unwrap_or(Split::Train);
        let mut items = Vec::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let item: ItemRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{} line {}: {e}", path.display(), n + 1))
            })?;
            if item.sources.len() != item.embeddings.len() || item.sources.is_empty() {
                return Err(Error::Format(format!(
                    "{} line {}: {} sources but {} embedding streams",
                    path.display(),
                    n + 1,
                    item.sources.len(),
                    item.embeddings.len()
                )));
            }
            items.push(item);
        }
        Ok(MixtureManifest {
            split,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            items,
        })
    }

    pub fn load_item(&self, index: usize) -> Result<LoadedItem> {
        let rec = self
            .items
            .get(index)
            .ok_or_else(|| Error::Data(format!("item {index} out of range")))?;
        let p = |rel: &String| self.root.join(rel);
        Ok(LoadedItem {
            id: rec.id.clone(),
            mixture: read_wav(&p(&rec.mixture))?,
            sources: rec.sources.iter().map(|s| read_wav(&p(s))).collect::<Result<_>>()?,
            visuals: rec
                .embeddings
                .iter()
                .map(|e| VisualEmbeddingSequence::load(&p(e)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Generates item `index` in memory.
pub fn synth_item(cfg: &CorpusConfig, index: usize) -> Result<(ItemRecord, LoadedItem, Option<Waveform>)> {
    let seed = cfg.master_seed ^ index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cfg.split.index());
    let tir = rng.gen_range(cfg.tir_range.0..=cfg.tir_range.1);
    let snr = cfg.snr_range.map(|(lo, hi)| rng.gen_range(lo..=hi));
    // Distinct id residues so every talker in an item has its own basis vector.
    let mut residues: Vec<u64> = (0..ENVELOPE_DIMS as u64).collect();
    for i in (1..residues.len()).rev() {
        residues.swap(i, rng.gen_range(0..=i));
    }
    let mut waves = Vec::with_capacity(cfg.speakers);
    let mut visuals = Vec::with_capacity(cfg.speakers);
    let mut speaker_seeds = Vec::with_capacity(cfg.speakers);
    let mut speaker_ids = Vec::with_capacity(cfg.speakers);
    for (c, &residue) in residues.iter().enumerate().take(cfg.speakers) {
        let sseed = cfg.split.speaker_seed(index, c, cfg.speakers);
        let id = residue + ENVELOPE_DIMS as u64 * (sseed & 0xffff_ffff);
        let mut spec = SpeakerSpec::new(sseed ^ cfg.master_seed.rotate_left(17), id, cfg.duration_s);
        spec.sample_rate = cfg.sample_rate;
        spec.fps = cfg.fps;
        let (w, env) = synth_speaker(&spec)?;
        visuals.push(synth_visual(&env, id, cfg.visual_dim, cfg.fps)?);
        waves.push(w);
        speaker_seeds.push(sseed);
        speaker_ids.push(id);
    }
    let noise = match snr {
        Some(s) => Some((synth_noise(seed.rotate_left(29) ^ 0xa5a5, waves[0].len(), cfg.sample_rate)?, s)),
        None => None,
    };
    let m = mix(&waves, tir, noise.as_ref().map(|(n, s)| (n, *s)))?;
    let split = cfg.split.name();
    let stem = format!("{split}/item{index:05}");
    let rec = ItemRecord {
        id: format!("{split}-{index:05}"),
        mixture: format!("{stem}_mix.wav"),
        sources: (0..cfg.speakers).map(|c| format!("{stem}_s{c}.wav")).collect(),
        embeddings: (0..cfg.speakers).map(|c| format!("{stem}_v{c}.aveb")).collect(),
        tir_db: tir,
        snr_db: snr,
        seed,
        speaker_seeds,
        speaker_ids,
        gain: m.gain,
    };
    let item = LoadedItem {
        id: rec.id.clone(),
        mixture: m.mixture,
        sources: m.sources,
        visuals,
    };
    Ok((rec, item, m.noise))
}

/// Writes every item of a split plus `<split>.jsonl` under `out_dir`.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<MixtureManifest> {
    cfg.validate()?;
    let split_dir = out_dir.join(cfg.split.name());
    std::fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let records = par::map_indexed(cfg.num_items, |i| -> Result<ItemRecord> {
        let (rec, item, _) = synth_item(cfg, i)?;
        write_wav(&out_dir.join(&rec.mixture), &item.mixture, WavFormat::Float32)?;
        for (c, s) in item.sources.iter().enumerate() {
            write_wav(&out_dir.join(&rec.sources[c]), s, WavFormat::Float32)?;
            item.visuals[c]
                .save(&out_dir.join(&rec.embeddings[c]))
                ?;
        }
        Ok(rec)
    });
    let manifest = MixtureManifest {
        split: cfg.split,
        root: out_dir.to_path_buf(),
        items: records.into_iter().collect::<Result<_>>()?,
    };
    manifest.write(&MixtureManifest::manifest_path(out_dir, cfg.split))?;
    Ok(manifest)
}
