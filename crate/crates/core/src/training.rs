//! Training the autoencoder alone (`sequential`), with VAR forecasts decoded
//! but coefficients held constant (`embedded`), or with gradients through the
//! LARS fit (`end_to_end`).
//!
//! Each step processes one non-overlapping window of one series. With the VAR
//! in the loop, the first `p` frames of a window are decoded from their own
//! latents and the rest from one-step forecasts.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autoencoder::{compute_mean_frame, mse, Model, ModelParams};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::format::Container;
use crate::lars::SolverConfig;
use crate::synth::Series;
use crate::tensor::{Tape, Tensor, Var};
use crate::var::{
    fit_var, fit_var_on_tape, forecast_on_tape, population_std, relative_prediction_error, LatentSeries,
    VarCoefficients,
};

pub const CHECKPOINT_VERSION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Sequential,
    Embedded,
    EndToEnd,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Sequential, Regime::Embedded, Regime::EndToEnd];

    fn code(self) -> f64 {
        match self {
            Regime::Sequential => 0.0,
            Regime::Embedded => 1.0,
            Regime::EndToEnd => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Regime::Sequential),
            1 => Ok(Regime::Embedded),
            2 => Ok(Regime::EndToEnd),
            _ => Err(Error::Format(format!("unknown regime code {}", c))),
        }
    }

    pub fn var_in_loop(self) -> bool {
        self != Regime::Sequential
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Sequential => "sequential",
            Regime::Embedded => "embedded",
            Regime::EndToEnd => "end_to_end",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequential" => Ok(Regime::Sequential),
            "embedded" => Ok(Regime::Embedded),
            "end_to_end" => Ok(Regime::EndToEnd),
            _ => Err(format!("unknown regime `{}`", s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub p: usize,
    pub window: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub channel_width: usize,
    pub eps_gamma: f64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Mean-frame skip connection; only switched off for comparisons.
    pub skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::EndToEnd,
            lambda: 0.005,
            p: 5,
            window: 64,
            lr: 0.001,
            epochs: 2,
            seed: 0,
            channel_width: 32,
            eps_gamma: 1e-8,
            data_dir: None,
            out_dir: None,
            skip: true,
        }
    }
}

pub const TRAIN_KEYS: [&str; 11] = [
    "regime",
    "lambda",
    "p",
    "window",
    "lr",
    "epochs",
    "seed",
    "channel_width",
    "eps_gamma",
    "data_dir",
    "out_dir",
];

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, &TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let regime = match kv.raw("regime") {
            None => d.regime,
            Some(r) => r.parse().map_err(|msg| Error::Config {
                line: kv.line("regime"),
                msg,
            })?,
        };
        let cfg = TrainConfig {
            regime,
            lambda: kv.get_or("lambda", d.lambda)?,
            p: kv.get_or("p", d.p)?,
            window: kv.get_or("window", d.window)?,
            lr: kv.get_or("lr", d.lr)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
            channel_width: kv.get_or("channel_width", d.channel_width)?,
            eps_gamma: kv.get_or("eps_gamma", d.eps_gamma)?,
            data_dir: kv.raw("data_dir").map(PathBuf::from),
            out_dir: kv.raw("out_dir").map(PathBuf::from),
            skip: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.p == 0 || self.window <= self.p {
            return bad(format!(
                "need 1 <= p < window, got p = {}, window = {}",
                self.p, self.window
            ));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.channel_width == 0 {
            return bad("lr, epochs and channel_width must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.eps_gamma > 0.0) {
            return bad("lambda must be >= 0 and eps_gamma > 0".into());
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            eps_gamma: self.eps_gamma,
            ..SolverConfig::default()
        }
    }
}

/// Non-overlapping windows `[k*window, (k+1)*window)`; the remainder is dropped.
pub fn make_subsequences(len: usize, window: usize) -> Vec<Range<usize>> {
    if window == 0 || len < window {
        warn!("series of length {} yields no window of size {}", len, window);
        return Vec::new();
    }
    (0..len / window).map(|k| k * window..(k + 1) * window).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let b1t = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.len(), g.len(), "gradient shape mismatch");
        for (((x, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            *x -= lr * (*mi / b1t) / ((*vi / b2t).sqrt() + ADAM_EPS);
        }
    }
}

/// Latent stack `[B, 1, h, w]` to `[B, K]`.
fn flat_latents(z: Var<'_>) -> Var<'_> {
    let s = z.shape();
    z.reshape(&[s[0], s[2] * s[3]])
}

/// Latents to decode: own latents for `t < p`, forecasts after.
fn var_decoder_input<'t>(z: Var<'t>, regime: Regime, cfg: &TrainConfig, series_id: &str) -> Result<Var<'t>> {
    let shape = z.shape();
    let zf = flat_latents(z);
    let (b, k) = (shape[0], shape[2] * shape[3]);
    let sigma = population_std(zf.value().data());
    let zn = zf.scale(1.0 / sigma);
    let rows = match regime {
        Regime::EndToEnd => fit_var_on_tape(zn, sigma, cfg.p, cfg.lambda, &cfg.solver(), series_id)?.rows,
        _ => {
            let series = LatentSeries::new((*z.value()).clone().reshape(vec![b, shape[2], shape[3]])?, series_id)?;
            let coeffs = fit_var(&series, cfg.p, cfg.lambda, &cfg.solver())?;
            (0..k).map(|j| z.tape().leaf(Tensor::from_vec(coeffs.row(j)))).collect()
        }
    };
    let pred = forecast_on_tape(zn, &rows, cfg.p)?.scale(sigma);
    Ok(z.tape().concat(&[zf.slice0(0, cfg.p), pred]).reshape(&shape))
}

/// Loss of one window on the model's tape.
pub fn window_loss<'t>(model: &Model<'t, '_>, frames: &Tensor, cfg: &TrainConfig, series_id: &str) -> Result<Var<'t>> {
    let enc = model.encode(frames)?;
    let zin = if cfg.regime.var_in_loop() {
        var_decoder_input(enc.z, cfg.regime, cfg, series_id)?
    } else {
        enc.z
    };
    Ok(mse(model.decode(zin, &enc.indices)?, frames))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub l_rec: f64,
    pub r_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesResult {
    pub id: String,
    pub condition: String,
    /// `[T, h, w]`
    pub latents: Tensor,
    pub coeffs: VarCoefficients,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: EpochMetrics,
    pub series: Vec<SeriesResult>,
}

/// Pass over full series, each as one batch: refits each series' VAR on its latents,
/// then reports the reconstruction loss and relative VAR error.
pub fn evaluate(params: &ModelParams, mean: &Tensor, data: &[Series], cfg: &TrainConfig) -> Result<Evaluation> {
    let per: Vec<(f64, f64, SeriesResult)> = data
        .par_iter()
        .map(|s| -> Result<_> {
            let tape = Tape::new();
            let model = Model::new(params, mean, &tape);
            let enc = model.encode(&s.frames)?;
            let zs = enc.z.shape();
            let latents = (*enc.z.value()).clone().reshape(vec![zs[0], zs[2], zs[3]])?;
            let series = LatentSeries::new(latents.clone(), s.id.clone())?;
            let coeffs = fit_var(&series, cfg.p, cfg.lambda, &cfg.solver())?;
            let r_var = relative_prediction_error(&coeffs, &series)?.value;
            let zin = if cfg.regime.var_in_loop() {
                let rows: Vec<Var<'_>> = (0..coeffs.k)
                    .map(|j| tape.leaf(Tensor::from_vec(coeffs.row(j))))
                    .collect();
                let zf = flat_latents(enc.z);
                let pred = forecast_on_tape(zf, &rows, cfg.p)?;
                tape.concat(&[zf.slice0(0, cfg.p), pred]).reshape(&zs)
            } else {
                enc.z
            };
            let l_rec = mse(model.decode(zin, &enc.indices)?, &s.frames).item();
            Ok((
                l_rec,
                r_var,
                SeriesResult {
                    id: s.id.clone(),
                    condition: s.condition.clone(),
                    latents,
                    coeffs,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let metrics = EpochMetrics {
        l_rec: per.iter().map(|x| x.0).sum::<f64>() / n,
        r_var: per.iter().map(|x| x.1).sum::<f64>() / n,
    };
    Ok(Evaluation {
        metrics,
        series: per.into_iter().map(|x| x.2).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub mean: Tensor,
    pub metrics: Vec<EpochMetrics>,
    pub series: Vec<SeriesResult>,
}

fn check_data(data: &[Series]) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::Argument("no training series".into()))?;
    for s in data {
        if s.frames.ndim() != 3 || s.frames.shape()[1..] != first.frames.shape()[1..] {
            return Err(Error::dim(
                "train",
                format!("series {} has frames {:?}", s.id, s.frames.shape()),
            ));
        }
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, data: &[Series]) -> Result<Checkpoint> {
    cfg.validate()?;
    check_data(data)?;
    let frames: Vec<Tensor> = data.iter().map(|s| s.frames.clone()).collect();
    let mean = compute_mean_frame(&frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg.channel_width, cfg.skip, cfg.seed)?;
    let mut adam = AdamState::new(&params.tensors.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    let mut windows: Vec<(usize, Range<usize>)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            make_subsequences(s.frames.shape()[0], cfg.window)
                .into_iter()
                .map(move |r| (i, r))
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::Argument(format!(
            "no series is as long as the window {}",
            cfg.window
        )));
    }
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        windows.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (i, range) in &windows {
            step += 1;
            let s = &data[*i];
            let batch = s.frames.slice0(range.start, range.end);
            let tape = Tape::new();
            let model = Model::new(&params, &mean, &tape);
            let loss = window_loss(&model, &batch, cfg, &s.id).map_err(|e| match e {
                Error::Fit(msg) => Error::Divergence {
                    step,
                    detail: format!("VAR fit on series {}: {}", s.id, msg),
                },
                other => other,
            })?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss is {} on series {} frames {:?}", value, s.id, range),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = model.net.vars.iter().map(|&v| grads.wrt(v)).collect();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite gradient on series {}", s.id),
                });
            }
            let mut tensors: Vec<Tensor> = params.tensors.iter().map(|(_, t)| t.clone()).collect();
            adam_step(&mut tensors, &g, &mut adam, cfg.lr);
            for ((_, t), new) in params.tensors.iter_mut().zip(tensors) {
                *t = new;
            }
            epoch_loss += value;
            debug!("step {} loss {:.6e}", step, value);
        }
        let eval = evaluate(&params, &mean, data, cfg)?;
        info!(
            "{} epoch {}: train loss {:.4e}, l_rec {:.4e}, r_var {:.4}",
            cfg.regime,
            epoch + 1,
            epoch_loss / windows.len() as f64,
            eval.metrics.l_rec,
            eval.metrics.r_var
        );
        metrics.push(eval.metrics);
        last = Some(eval);
    }
    let eval = last.expect("at least one epoch");
    Ok(Checkpoint {
        config: cfg.clone(),
        params,
        mean,
        metrics,
        series: eval.series,
    })
}

fn split_seed(seed: u64) -> [f64; 2] {
    [(seed & 0xffff_ffff) as f64, (seed >> 32) as f64]
}

fn label_entry(i: usize, s: &SeriesResult) -> String {
    format!("series.{i}.label={}|{}", s.id, s.condition)
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let c = &self.config;
        let mut out = Container::new();
        out.insert("format_version", Tensor::scalar(CHECKPOINT_VERSION))?;
        let [lo, hi] = split_seed(c.seed);
        out.insert(
            "config",
            Tensor::from_vec(vec![
                c.regime.code(),
                c.lambda,
                c.p as f64,
                c.window as f64,
                c.lr,
                c.epochs as f64,
                lo,
                hi,
                c.channel_width as f64,
                c.eps_gamma,
                if c.skip { 1.0 } else { 0.0 },
            ]),
        )?;
        for (name, t) in &self.params.tensors {
            out.insert(format!("param.{name}"), t.clone())?;
        }
        out.insert("mean_frame", self.mean.clone())?;
        let m: Vec<f64> = self.metrics.iter().flat_map(|e| [e.l_rec, e.r_var]).collect();
        out.insert("metrics", Tensor::new(vec![self.metrics.len(), 2], m)?)?;
        for (i, s) in self.series.iter().enumerate() {
            out.insert(label_entry(i, s), Tensor::new(vec![0], Vec::new())?)?;
            out.insert(format!("series.{i}.latents"), s.latents.clone())?;
            out.insert(format!("series.{i}.sigma"), Tensor::scalar(s.coeffs.sigma_z))?;
            let k = s.coeffs.k;
            for lag in 1..=s.coeffs.p {
                out.insert(
                    format!("series.{i}.lag{lag}"),
                    Tensor::new(vec![k, k], s.coeffs.dense(lag))?,
                )?;
            }
        }
        Ok(out)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let version = c.require("format_version")?.item();
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} is not supported (expected {})",
                version, CHECKPOINT_VERSION
            )));
        }
        let cfgv = c.require("config")?;
        if cfgv.len() != 11 {
            return Err(Error::Format("config entry has the wrong length".into()));
        }
        let v = cfgv.data();
        let config = TrainConfig {
            regime: Regime::from_code(v[0])?,
            lambda: v[1],
            p: v[2] as usize,
            window: v[3] as usize,
            lr: v[4],
            epochs: v[5] as usize,
            seed: (v[6] as u64) | ((v[7] as u64) << 32),
            channel_width: v[8] as usize,
            eps_gamma: v[9],
            data_dir: None,
            out_dir: None,
            skip: v[10] != 0.0,
        };
        let mut params = ModelParams::init(config.channel_width, config.skip, 0)?;
        for (name, t) in params.tensors.iter_mut() {
            let stored = c.require(&format!("param.{name}"))?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}",
                    name,
                    stored.shape()
                )));
            }
            *t = stored.clone();
        }
        let mean = c.require("mean_frame")?.clone();
        let mt = c.require("metrics")?;
        let metrics = mt
            .data()
            .chunks_exact(2)
            .map(|r| EpochMetrics {
                l_rec: r[0],
                r_var: r[1],
            })
            .collect();
        let mut series = Vec::new();
        for i in 0.. {
            let prefix = format!("series.{i}.label=");
            let Some(label) = c.names_with_prefix(&prefix).next() else {
                break;
            };
            let (id, condition) = label[prefix.len()..]
                .split_once('|')
                .ok_or_else(|| Error::Format(format!("malformed series label `{}`", label)))?;
            let latents = c.require(&format!("series.{i}.latents"))?.clone();
            let sigma = c.require(&format!("series.{i}.sigma"))?.item();
            let k = latents.shape()[1] * latents.shape()[2];
            let mut rows = vec![vec![0.0; config.p * k]; k];
            for lag in 1..=config.p {
                let m = c.require(&format!("series.{i}.lag{lag}"))?;
                for r in 0..k {
                    for col in 0..k {
                        rows[r][(lag - 1) * k + col] = m.data()[r * k + col];
                    }
                }
            }
            series.push(SeriesResult {
                id: id.to_string(),
                condition: condition.to_string(),
                latents,
                coeffs: VarCoefficients::from_rows(id, config.p, k, sigma, &rows),
            });
        }
        Ok(Checkpoint {
            config,
            params,
            mean,
            metrics,
            series,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
