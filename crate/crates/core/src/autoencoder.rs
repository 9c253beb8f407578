//! Convolutional encoder/decoder with a multiplicative mean-frame skip.
//!
//! Encoder: three blocks of 3x3 conv, leaky ReLU, channel normalization and
//! 2x2 max pooling, then a 1x1 conv down to one latent channel. The decoder
//! expands with a 1x1 conv, then unpools with the encoder's indices and
//! applies 3x3 conv, normalization and leaky ReLU twice; the last block is an
//! unpool and a linear 3x3 conv back to one channel.
//!
//! With the skip, the encoder sees `x - mean` and the reconstruction is
//! `(f_dec(z) + 1) * mean`. Normalization always uses the statistics of the
//! batch being processed, so a whole series is encoded as one batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{PoolIndices, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DOWNSAMPLE: usize = 8;

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub width: usize,
    pub skip: bool,
    pub tensors: Vec<(String, Tensor)>,
}

fn layout(width: usize) -> Vec<(String, Vec<usize>)> {
    let c = width;
    let mut v = Vec::new();
    let mut block = |name: &str, c_in: usize, c_out: usize, k: usize, norm: bool| {
        v.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
        v.push((format!("{name}.b"), vec![c_out]));
        if norm {
            v.push((format!("{name}.gamma"), vec![c_out]));
            v.push((format!("{name}.beta"), vec![c_out]));
        }
    };
    block("enc1", 1, c, 3, true);
    block("enc2", c, c, 3, true);
    block("enc3", c, c, 3, true);
    block("enc_out", c, 1, 1, false);
    block("dec_in", 1, c, 1, false);
    block("dec1", c, c, 3, true);
    block("dec2", c, c, 3, true);
    block("dec_out", c, 1, 3, false);
    v
}

impl ModelParams {
    /// Conv weights uniform in `+-1/sqrt(fan_in)`, biases and norm shifts zero,
    /// norm scales one.
    pub fn init(width: usize, skip: bool, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Argument("channel width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(width)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".w") {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let n: usize = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("layout shape")
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(ModelParams { width, skip, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Network<'t> {
        let vars: Vec<Var<'t>> = self.tensors.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        Network {
            vars,
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// Parameters bound to one tape.
pub struct Network<'t> {
    pub vars: Vec<Var<'t>>,
    names: Vec<String>,
}

pub struct Encoded<'t> {
    /// `[B, 1, H/8, W/8]`
    pub z: Var<'t>,
    /// Pooling indices, finest level first.
    pub indices: [PoolIndices; 3],
}

impl<'t> Network<'t> {
    fn var(&self, name: &str) -> Var<'t> {
        let i = self.names.iter().position(|n| n == name).expect("parameter name");
        self.vars[i]
    }

    fn conv(&self, x: Var<'t>, layer: &str) -> Result<Var<'t>> {
        x.conv2d(self.var(&format!("{layer}.w")), self.var(&format!("{layer}.b")))
    }

    fn norm(&self, x: Var<'t>, layer: &str) -> Result<Var<'t>> {
        let (y, _) = x.channel_norm(
            self.var(&format!("{layer}.gamma")),
            self.var(&format!("{layer}.beta")),
            None,
        )?;
        Ok(y)
    }

    /// Encodes `[B, 1, H, W]` network input (already mean-centered with the skip).
    pub fn encode(&self, x: Var<'t>) -> Result<Encoded<'t>> {
        check_frames("encode", &x.shape())?;
        let mut h = x;
        let mut idx = Vec::with_capacity(3);
        for layer in ["enc1", "enc2", "enc3"] {
            h = self.conv(h, layer)?.leaky_relu(LEAKY_SLOPE);
            let (p, i) = self.norm(h, layer)?.maxpool2x2()?;
            idx.push(i);
            h = p;
        }
        let z = self.conv(h, "enc_out")?;
        let indices: [PoolIndices; 3] = idx.try_into().expect("three pooling levels");
        Ok(Encoded { z, indices })
    }

    /// Decodes `[B, 1, H/8, W/8]` latents to the decoder's residual output `[B, 1, H, W]`.
    pub fn decode_raw(&self, z: Var<'t>, indices: &[PoolIndices; 3]) -> Result<Var<'t>> {
        let zs = z.shape();
        let coarse = &indices[2].input_shape;
        if zs.len() != 4
            || zs[1] != 1
            || coarse.len() != 4
            || zs[0] != coarse[0]
            || zs[2] * 2 != coarse[2]
            || zs[3] * 2 != coarse[3]
        {
            return Err(Error::dim(
                "decode",
                format!("latents {:?} do not match pooling indices for {:?}", zs, coarse),
            ));
        }
        let mut h = self.conv(z, "dec_in")?;
        for (layer, level) in [("dec1", 2), ("dec2", 1)] {
            h = self.conv(h.max_unpool2x2(&indices[level])?, layer)?;
            h = self.norm(h, layer)?.leaky_relu(LEAKY_SLOPE);
        }
        self.conv(h.max_unpool2x2(&indices[0])?, "dec_out")
    }
}

/// Checks a `[B, 1, H, W]` stack with `H` and `W` divisible by 8.
fn check_frames(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::dim(op, format!("expected [B, 1, H, W], got {:?}", shape)));
    }
    if !shape[2].is_multiple_of(DOWNSAMPLE) || !shape[3].is_multiple_of(DOWNSAMPLE) {
        return Err(Error::dim(
            op,
            format!("H={} and W={} must be divisible by {}", shape[2], shape[3], DOWNSAMPLE),
        ));
    }
    Ok(())
}

/// Dataset mean frame: average of per-series temporal means.
pub fn compute_mean_frame(series: &[Tensor]) -> Result<Tensor> {
    let first = series
        .first()
        .ok_or_else(|| Error::Argument("mean frame of an empty dataset".into()))?;
    if first.ndim() != 3 {
        return Err(Error::dim(
            "compute_mean_frame",
            format!("expected [T, H, W], got {:?}", first.shape()),
        ));
    }
    let hw = first.shape()[1] * first.shape()[2];
    let mut acc = vec![0.0; hw];
    for s in series {
        if s.ndim() != 3 || s.shape()[1..] != first.shape()[1..] || s.shape()[0] == 0 {
            return Err(Error::dim(
                "compute_mean_frame",
                format!("series {:?} vs {:?}", s.shape(), first.shape()),
            ));
        }
        let t = s.shape()[0];
        let mut m = vec![0.0; hw];
        for f in s.data().chunks_exact(hw) {
            m.iter_mut().zip(f).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().zip(&m).for_each(|(a, v)| *a += v / t as f64);
    }
    let n = series.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape()[1..].to_vec(), acc)
}

/// Autoencoder with its mean frame, as one unit.
pub struct Model<'t, 'm> {
    pub net: Network<'t>,
    pub mean: &'m Tensor,
    pub skip: bool,
}

impl<'t, 'm> Model<'t, 'm> {
    pub fn new(params: &ModelParams, mean: &'m Tensor, tape: &'t Tape) -> Self {
        Model {
            net: params.bind(tape),
            mean,
            skip: params.skip,
        }
    }

    /// Encodes frames `[B, H, W]`.
    pub fn encode(&self, frames: &Tensor) -> Result<Encoded<'t>> {
        let tape = self.net.vars[0].tape();
        if frames.ndim() != 3 || frames.shape()[1..] != *self.mean.shape() {
            return Err(Error::dim(
                "encode",
                format!("frames {:?} vs mean frame {:?}", frames.shape(), self.mean.shape()),
            ));
        }
        let (b, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
        let input = if self.skip {
            let mut d = frames.data().to_vec();
            for f in d.chunks_exact_mut(h * w) {
                f.iter_mut().zip(self.mean.data()).for_each(|(x, m)| *x -= m);
            }
            Tensor::new(vec![b, 1, h, w], d)?
        } else {
            frames.clone().reshape(vec![b, 1, h, w])?
        };
        self.net.encode(tape.leaf(input))
    }

    /// Reconstructs `[B, H, W]` from latents `[B, 1, H/8, W/8]`.
    pub fn decode(&self, z: Var<'t>, indices: &[PoolIndices; 3]) -> Result<Var<'t>> {
        let out = self.net.decode_raw(z, indices)?;
        let s = out.shape();
        let out = out.reshape(&[s[0], s[2], s[3]]);
        Ok(if self.skip {
            out.mul_const(self.mean).add_const(self.mean)
        } else {
            out
        })
    }
}

/// Mean squared error over every entry.
pub fn mse<'t>(pred: Var<'t>, target: &Tensor) -> Var<'t> {
    assert_eq!(pred.len(), target.len(), "mse operands differ in size");
    pred.add_const(&target.map(|v| -v)).square().mean()
}

/// Dataset reconstruction loss: mean over series of the per-series MSE.
pub fn reconstruction_loss(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("reconstruction loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (pred, target) in pairs {
        if pred.shape() != target.shape() {
            return Err(Error::dim(
                "reconstruction_loss",
                format!("{:?} vs {:?}", pred.shape(), target.shape()),
            ));
        }
        let s: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        total += s / pred.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}
