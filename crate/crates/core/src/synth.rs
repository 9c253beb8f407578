//! Synthetic imaging-like videos with known sparse dynamics.
//!
//! A static positive background is modulated multiplicatively by Gaussian
//! blob sources whose amplitudes follow a stable sparse VAR: each frame is
//! `background * (1 + gain * sum_m a_m(t) g_m) + noise`. Two conditions share
//! background, source positions and self-coupling, and differ in which
//! sources receive cross-coupling.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::format::{load_tensor, save_tensor, Container};
use crate::tensor::Tensor;

pub const CONDITIONS: [&str; 2] = ["F", "N"];
pub const TARGET_RADIUS: f64 = 0.95;
const MAX_HALVINGS: usize = 100;
const BURN_IN: usize = 200;
/// Relative blob intensity above which a pixel belongs to its source.
pub const MASK_LEVEL: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_sources: usize,
    pub length: usize,
    pub series_per_condition: usize,
    pub p_true: usize,
    pub density: f64,
    pub noise_std: f64,
    pub background_floor: f64,
    pub seed: u64,
    pub blob_sigma: f64,
    pub innovation_std: f64,
    pub activity_gain: f64,
    /// Sources per condition whose incoming cross-coupling is condition specific.
    pub targets_per_condition: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 48,
            width: 32,
            n_sources: 12,
            length: 128,
            series_per_condition: 4,
            p_true: 2,
            density: 0.05,
            noise_std: 0.02,
            background_floor: 0.05,
            seed: 0,
            blob_sigma: 2.5,
            innovation_std: 0.5,
            activity_gain: 0.6,
            targets_per_condition: 1,
        }
    }
}

pub const SYNTH_KEYS: [&str; 14] = [
    "height",
    "width",
    "n_sources",
    "length",
    "series_per_condition",
    "p_true",
    "density",
    "noise_std",
    "background_floor",
    "seed",
    "blob_sigma",
    "innovation_std",
    "activity_gain",
    "targets_per_condition",
];

impl SynthConfig {
    /// Parses a config file; `seed` is required, the rest default.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, &SYNTH_KEYS)?;
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            n_sources: kv.get_or("n_sources", d.n_sources)?,
            length: kv.get_or("length", d.length)?,
            series_per_condition: kv.get_or("series_per_condition", d.series_per_condition)?,
            p_true: kv.get_or("p_true", d.p_true)?,
            density: kv.get_or("density", d.density)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            background_floor: kv.get_or("background_floor", d.background_floor)?,
            seed: kv.require("seed")?,
            blob_sigma: kv.get_or("blob_sigma", d.blob_sigma)?,
            innovation_std: kv.get_or("innovation_std", d.innovation_std)?,
            activity_gain: kv.get_or("activity_gain", d.activity_gain)?,
            targets_per_condition: kv.get_or("targets_per_condition", d.targets_per_condition)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!(
                "frame {}x{} must be nonempty and divisible by 8",
                self.height, self.width
            ));
        }
        let cells = (self.height / 8) * (self.width / 8);
        if self.n_sources == 0 || self.n_sources > cells {
            return bad(format!("n_sources must be in 1..={} for this frame size", cells));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad(format!("density must be in (0, 1], got {}", self.density));
        }
        if self.background_floor < 0.05 {
            return bad(format!(
                "background_floor must be >= 0.05, got {}",
                self.background_floor
            ));
        }
        if self.p_true == 0 || self.length <= self.p_true || self.series_per_condition == 0 {
            return bad("need p_true >= 1, length > p_true and at least one series".into());
        }
        if self.noise_std < 0.0 || self.innovation_std < 0.0 || self.blob_sigma <= 0.0 {
            return bad("noise_std and innovation_std must be >= 0, blob_sigma > 0".into());
        }
        if 2 * self.targets_per_condition > self.n_sources {
            return bad("two disjoint target sets do not fit in n_sources".into());
        }
        Ok(())
    }
}

/// Spectral radius of the VAR companion matrix of `lags` (each `m x m`, row-major).
pub fn spectral_radius(lags: &[Vec<f64>], m: usize) -> f64 {
    let p = lags.len();
    let n = m * p;
    let mut c = DMatrix::<f64>::zeros(n, n);
    for (k, a) in lags.iter().enumerate() {
        for r in 0..m {
            for col in 0..m {
                c[(r, k * m + col)] = a[r * m + col];
            }
        }
    }
    for i in m..n {
        c[(i, i - m)] = 1.0;
    }
    c.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Halves all coefficients until the companion spectral radius is at most
/// [`TARGET_RADIUS`].
pub fn stabilize(mut lags: Vec<Vec<f64>>, m: usize) -> Result<Vec<Vec<f64>>> {
    for _ in 0..=MAX_HALVINGS {
        if spectral_radius(&lags, m) <= TARGET_RADIUS {
            return Ok(lags);
        }
        lags.iter_mut().flatten().for_each(|v| *v *= 0.5);
    }
    Err(Error::Generation(format!(
        "coupling still unstable after {} halvings",
        MAX_HALVINGS
    )))
}

fn signed_magnitude(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Random sparse lag matrices with entry probability `density`.
pub fn make_stable_coupling(m: usize, p: usize, density: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Argument(format!("density must be in (0, 1], got {}", density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lags = (0..p)
        .map(|_| {
            (0..m * m)
                .map(|_| {
                    if rng.random_bool(density) {
                        signed_magnitude(&mut rng, 0.3, 0.9)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    stabilize(lags, m)
}

/// Couplings for both conditions and the targets whose rows differ.
#[derive(Clone, Debug)]
pub struct ConditionCouplings {
    pub lags: [Vec<Vec<f64>>; 2],
    pub targets: [Vec<usize>; 2],
}

/// Shared lag-1 self-coupling plus cross-coupling into disjoint target sets.
pub fn make_condition_couplings(cfg: &SynthConfig, seed: u64) -> Result<ConditionCouplings> {
    let (m, p) = (cfg.n_sources, cfg.p_true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = vec![vec![0.0; m * m]; p];
    for j in 0..m {
        base[0][j * m + j] = rng.random_range(0.4..0.7);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let nt = cfg.targets_per_condition;
    let targets = [order[..nt].to_vec(), order[nt..2 * nt].to_vec()];
    // Each target gets at least one incoming edge; density adds more.
    let per_target = ((cfg.density * (m * p) as f64).round() as usize).max(1);
    let mut lags: [Vec<Vec<f64>>; 2] = [base.clone(), base];
    for (c, set) in targets.iter().enumerate() {
        for &j in set {
            let mut placed = 0;
            while placed < per_target {
                let lag = rng.random_range(0..p);
                let src = rng.random_range(0..m);
                if src == j || lags[c][lag][j * m + src] != 0.0 {
                    continue;
                }
                lags[c][lag][j * m + src] = signed_magnitude(&mut rng, 0.5, 0.9);
                placed += 1;
            }
        }
    }
    // Joint rescaling keeps the conditions comparable.
    let mut halvings = 0;
    loop {
        let r = spectral_radius(&lags[0], m).max(spectral_radius(&lags[1], m));
        if r <= TARGET_RADIUS {
            break;
        }
        lags.iter_mut().flatten().flatten().for_each(|v| *v *= 0.5);
        halvings += 1;
        if halvings > MAX_HALVINGS {
            return Err(Error::Generation("condition couplings did not stabilize".into()));
        }
    }
    Ok(ConditionCouplings { lags, targets })
}

/// Simulates `t` steps of a VAR after a burn-in; returns `[t, m]` amplitudes.
pub fn simulate_var(lags: &[Vec<f64>], m: usize, t: usize, innovation_std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let p = lags.len();
    let total = t + BURN_IN;
    let mut a = vec![0.0; total * m];
    for s in 0..total {
        for r in 0..m {
            let mut v = innovation_std * rng.sample::<f64, _>(StandardNormal);
            for (k, lag) in lags.iter().enumerate() {
                if s > k {
                    let prev = &a[(s - k - 1) * m..(s - k) * m];
                    v += lag[r * m..(r + 1) * m]
                        .iter()
                        .zip(prev)
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                }
            }
            a[s * m + r] = v;
        }
    }
    debug_assert!(p >= 1);
    Tensor::new(vec![t, m], a[BURN_IN * m..].to_vec()).expect("amplitude shape")
}

#[derive(Clone, Debug)]
pub struct Series {
    pub id: String,
    pub condition: String,
    /// `[T, H, W]`
    pub frames: Tensor,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub background: Tensor,
    /// `[M, 2]` blob centers as (row, col).
    pub positions: Tensor,
    /// `[M, H, W]` unit-peak blob profiles.
    pub blobs: Tensor,
    pub couplings: ConditionCouplings,
    /// Per series `[T, M]` amplitudes, in dataset order.
    pub amplitudes: Vec<Tensor>,
    /// Pixels belonging to sources whose coupling differs between conditions.
    pub differing_mask: Tensor,
}

impl GroundTruth {
    /// Per-frame transient energy `sum_m a_m(t)^2` of series `i`.
    pub fn energy(&self, i: usize) -> Vec<f64> {
        let a = &self.amplitudes[i];
        let m = a.shape()[1];
        a.data()
            .chunks_exact(m)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: Vec<Series>,
    pub truth: GroundTruth,
}

fn make_background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut field = vec![0.0; h * w];
    for _ in 0..4 {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let s = rng.random_range(0.25..0.5) * h.max(w) as f64;
        let amp = rng.random_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                field[y * w + x] += amp * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo).max(1e-12);
    let data = field
        .iter()
        .map(|v| cfg.background_floor + 0.6 * (v - lo) / span)
        .collect();
    Tensor::new(vec![h, w], data).expect("background shape")
}

fn place_sources(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (h, w) = (cfg.height, cfg.width);
    let (gh, gw) = (h / 8, w / 8);
    let mut cells: Vec<usize> = (0..gh * gw).collect();
    cells.shuffle(rng);
    let mut pos = Vec::with_capacity(2 * cfg.n_sources);
    let mut blobs = vec![0.0; cfg.n_sources * h * w];
    for (m, &cell) in cells[..cfg.n_sources].iter().enumerate() {
        let cy = (cell / gw) as f64 * 8.0 + 3.5 + rng.random_range(-1.0..1.0);
        let cx = (cell % gw) as f64 * 8.0 + 3.5 + rng.random_range(-1.0..1.0);
        pos.extend([cy, cx]);
        let s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                blobs[(m * h + y) * w + x] = (-d2 / s2).exp();
            }
        }
    }
    (
        Tensor::new(vec![cfg.n_sources, 2], pos).expect("positions"),
        Tensor::new(vec![cfg.n_sources, h, w], blobs).expect("blobs"),
    )
}

/// Renders one series from amplitudes `[T, M]`.
fn render(cfg: &SynthConfig, background: &Tensor, blobs: &Tensor, amps: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let hw = cfg.height * cfg.width;
    let m = cfg.n_sources;
    let t = amps.shape()[0];
    let mut out = vec![0.0; t * hw];
    for s in 0..t {
        let frame = &mut out[s * hw..(s + 1) * hw];
        let a = &amps.data()[s * m..(s + 1) * m];
        for (px, f) in frame.iter_mut().enumerate() {
            let act: f64 = (0..m).map(|j| a[j] * blobs.data()[j * hw + px]).sum();
            let noise = if cfg.noise_std > 0.0 {
                cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *f = background.data()[px] * (1.0 + cfg.activity_gain * act) + noise;
        }
    }
    Tensor::new(vec![t, cfg.height, cfg.width], out).expect("frame stack")
}

/// Per-series generator seeded from the dataset seed, condition and index.
fn series_rng(seed: u64, condition: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + (condition as u64) * 1_000_003 + index as u64);
    rng
}

/// Series of one condition under `lags`, with their amplitudes.
pub fn generate_condition(
    cfg: &SynthConfig,
    lags: &[Vec<f64>],
    background: &Tensor,
    blobs: &Tensor,
    condition: usize,
) -> Vec<(Series, Tensor)> {
    (0..cfg.series_per_condition)
        .into_par_iter()
        .map(|i| {
            let mut rng = series_rng(cfg.seed, condition, i);
            let amps = simulate_var(lags, cfg.n_sources, cfg.length, cfg.innovation_std, &mut rng);
            let frames = render(cfg, background, blobs, &amps, &mut rng);
            let label = CONDITIONS[condition];
            (
                Series {
                    id: format!("{label}{i}"),
                    condition: label.to_string(),
                    frames,
                },
                amps,
            )
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background = make_background(cfg, &mut rng);
    let (positions, blobs) = place_sources(cfg, &mut rng);
    let couplings = make_condition_couplings(cfg, rng.random())?;
    let hw = cfg.height * cfg.width;
    let mut mask = vec![0.0; hw];
    for &j in couplings.targets.iter().flatten() {
        for px in 0..hw {
            if blobs.data()[j * hw + px] >= MASK_LEVEL {
                mask[px] = 1.0;
            }
        }
    }
    let mut series = Vec::new();
    let mut amplitudes = Vec::new();
    for c in 0..CONDITIONS.len() {
        for (s, a) in generate_condition(cfg, &couplings.lags[c], &background, &blobs, c) {
            series.push(s);
            amplitudes.push(a);
        }
    }
    Ok(Dataset {
        series,
        truth: GroundTruth {
            background,
            positions,
            blobs,
            couplings,
            amplitudes,
            differing_mask: Tensor::new(vec![cfg.height, cfg.width], mask)?,
        },
    })
}

impl GroundTruth {
    pub fn to_container(&self, series: &[Series]) -> Result<Container> {
        let mut c = Container::new();
        c.insert("background", self.background.clone())?;
        c.insert("positions", self.positions.clone())?;
        c.insert("differing_mask", self.differing_mask.clone())?;
        let m = self.positions.shape()[0];
        for (ci, label) in CONDITIONS.iter().enumerate() {
            for (k, lag) in self.couplings.lags[ci].iter().enumerate() {
                c.insert(
                    format!("coupling.{label}.lag{}", k + 1),
                    Tensor::new(vec![m, m], lag.clone())?,
                )?;
            }
            let t: Vec<f64> = self.couplings.targets[ci].iter().map(|&j| j as f64).collect();
            c.insert(format!("targets.{label}"), Tensor::from_vec(t))?;
        }
        for (s, a) in series.iter().zip(&self.amplitudes) {
            c.insert(format!("amplitudes.{}", s.id), a.clone())?;
        }
        Ok(c)
    }
}

/// Writes `<dir>/<condition>/<id>.dtb1`, `ground_truth.dtb1` and `manifest`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut manifest = String::from("# series_id\tcondition\tlength\tpath\n");
    for s in &ds.series {
        let sub = dir.join(&s.condition);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let rel = format!("{}/{}.dtb1", s.condition, s.id);
        save_tensor(&dir.join(&rel), &s.frames)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.id,
            s.condition,
            s.frames.shape()[0],
            rel
        ));
    }
    ds.truth
        .to_container(&ds.series)?
        .save(&dir.join("ground_truth.dtb1"))?;
    let path = dir.join("manifest");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads the series listed in `<dir>/manifest`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Series>> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 4 tab-separated fields",
                i + 1
            )));
        }
        let frames = load_tensor(&dir.join(cols[3]))?;
        if frames.ndim() != 3 || cols[2].parse::<usize>().ok() != Some(frames.shape()[0]) {
            return Err(Error::Format(format!(
                "manifest line {}: length does not match {:?}",
                i + 1,
                frames.shape()
            )));
        }
        out.push(Series {
            id: cols[0].to_string(),
            condition: cols[1].to_string(),
            frames,
        });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{} lists no series", path.display())));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr {
    pub correlation: f64,
    /// One side had zero variance and the correlation was set to 0.
    pub degenerate: bool,
}

/// Pearson correlation of per-frame latent energy `||z_t||^2` with `energy`.
pub fn snr_metrics(latents: &Tensor, energy: &[f64]) -> Result<Snr> {
    let t = latents.shape().first().copied().unwrap_or(0);
    if t != energy.len() || t == 0 {
        return Err(Error::dim(
            "snr_metrics",
            format!("{} latent frames vs {} energies", t, energy.len()),
        ));
    }
    let k = latents.len() / t;
    let z: Vec<f64> = latents
        .data()
        .chunks_exact(k)
        .map(|f| f.iter().map(|v| v * v).sum())
        .collect();
    let n = t as f64;
    let (mz, me) = (z.iter().sum::<f64>() / n, energy.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in z.iter().zip(energy) {
        sxy += (a - mz) * (b - me);
        sxx += (a - mz).powi(2);
        syy += (b - me).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Snr {
            correlation: 0.0,
            degenerate: true,
        });
    }
    Ok(Snr {
        correlation: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    })
}
