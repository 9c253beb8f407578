//! Influence vectors from fitted VAR coefficients and their decoded
//! image-space contribution maps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autoencoder::{Model, ModelParams};
use crate::error::{Error, Result};
use crate::format::save_tensor;
use crate::tensor::{Tape, Tensor};
use crate::var::VarCoefficients;

/// Maps with a value range below this quantize to flat mid-gray.
pub const FLAT_RANGE: f64 = 1e-12;
pub const FLAT_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceVector {
    pub series_id: String,
    pub c: Vec<f64>,
}

/// `c_j = sum over lags and l != j of |a_jl|`: absolute off-diagonal mass of
/// row `j`, that is, everything feeding latent `j` from the others.
pub fn influence_vector(coeffs: &VarCoefficients) -> InfluenceVector {
    let mut c = vec![0.0; coeffs.k];
    for lag in &coeffs.lags {
        for &(row, col, v) in lag {
            if row != col {
                c[row] += v.abs();
            }
        }
    }
    InfluenceVector {
        series_id: coeffs.series_id.clone(),
        c,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContributionMap {
    /// `[H, W]`
    pub omega: Tensor,
    pub gamma_viz: f64,
    pub label: String,
}

/// Decodes `gamma_viz * c` laid out on the latent grid. Unpooling uses the
/// indices from encoding a frame whose network input is all zeros.
pub fn contribution_map(
    c: &InfluenceVector,
    gamma_viz: f64,
    params: &ModelParams,
    mean: &Tensor,
    label: impl Into<String>,
) -> Result<ContributionMap> {
    if !(gamma_viz > 0.0) {
        return Err(Error::Argument(format!(
            "gamma_viz must be positive, got {}",
            gamma_viz
        )));
    }
    let (h, w) = (mean.shape()[0], mean.shape()[1]);
    let (lh, lw) = (h / 8, w / 8);
    if c.c.len() != lh * lw {
        return Err(Error::dim(
            "contribution_map",
            format!("influence of length {} for a {}x{} latent grid", c.c.len(), lh, lw),
        ));
    }
    let tape = Tape::new();
    let model = Model::new(params, mean, &tape);
    let probe = if params.skip {
        mean.clone().reshape(vec![1, h, w])?
    } else {
        Tensor::zeros(&[1, h, w])
    };
    let enc = model.encode(&probe)?;
    let z = tape.leaf(Tensor::new(
        vec![1, 1, lh, lw],
        c.c.iter().map(|v| gamma_viz * v).collect(),
    )?);
    let out = model.decode(z, &enc.indices)?;
    Ok(ContributionMap {
        omega: (*out.value()).clone().reshape(vec![h, w])?,
        gamma_viz,
        label: label.into(),
    })
}

/// Per-series maps, computed in parallel; labels pair with `influence`.
pub fn contribution_maps(
    influence: &[InfluenceVector],
    labels: &[String],
    gamma_viz: f64,
    params: &ModelParams,
    mean: &Tensor,
) -> Result<Vec<ContributionMap>> {
    influence
        .par_iter()
        .zip(labels)
        .map(|(c, l)| contribution_map(c, gamma_viz, params, mean, l.clone()))
        .collect()
}

/// Arithmetic mean of the maps carrying `label`.
pub fn group_mean_map(maps: &[ContributionMap], label: &str) -> Result<ContributionMap> {
    let chosen: Vec<&ContributionMap> = maps.iter().filter(|m| m.label == label).collect();
    let first = chosen
        .first()
        .ok_or_else(|| Error::Argument(format!("no contribution maps for `{}`", label)))?;
    let mut acc = vec![0.0; first.omega.len()];
    for m in &chosen {
        acc.iter_mut().zip(m.omega.data()).for_each(|(a, v)| *a += v);
    }
    let n = chosen.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(ContributionMap {
        omega: Tensor::new(first.omega.shape().to_vec(), acc)?,
        gamma_viz: first.gamma_viz,
        label: label.to_string(),
    })
}

/// Min-max quantization to 8 bits.
pub fn quantize(map: &Tensor) -> Vec<u8> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range >= FLAT_RANGE) {
        return vec![FLAT_GRAY; map.len()];
    }
    map.data()
        .iter()
        .map(|v| ((v - lo) / range * 255.0).round() as u8)
        .collect()
}

/// Sidecar path: `map.pgm` pairs with `map.dtb1`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("dtb1")
}

/// Writes a binary PGM of the map and the raw values next to it.
pub fn export_map(map: &Tensor, path: &Path) -> Result<()> {
    if map.ndim() != 2 {
        return Err(Error::dim(
            "export_map",
            format!("expected [H, W], got {:?}", map.shape()),
        ));
    }
    if !map.is_finite() {
        return Err(Error::Argument("cannot export a map with non-finite values".into()));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", map.shape()[1], map.shape()[0]).into_bytes();
    bytes.extend(quantize(map));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    save_tensor(&sidecar_path(path), map)
}

/// Shannon entropy (nats) of `|map - mean|` normalized to sum to one.
/// Zero when the map equals the mean everywhere.
pub fn spatial_entropy(map: &Tensor, mean: &Tensor) -> f64 {
    let dev: Vec<f64> = map.data().iter().zip(mean.data()).map(|(a, b)| (a - b).abs()).collect();
    let total: f64 = dev.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -dev.iter()
        .filter(|d| **d > 0.0)
        .map(|d| d / total * (d / total).ln())
        .sum::<f64>()
}

/// Mask of the `fraction` largest entries by absolute value.
pub fn top_fraction_mask(map: &Tensor, fraction: f64) -> Vec<bool> {
    let n = map.len();
    let keep = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.data()[b].abs().total_cmp(&map.data()[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Writes `series_id,latent_index,value`.
pub fn write_influence_csv<W: Write>(out: &mut W, all: &[InfluenceVector]) -> std::io::Result<()> {
    writeln!(out, "series_id,latent_index,value")?;
    for v in all {
        for (j, x) in v.c.iter().enumerate() {
            writeln!(out, "{},{},{:e}", v.series_id, j, x)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::load_tensor;

    fn coeffs(k: usize, p: usize, entries: &[(usize, usize, usize, f64)]) -> VarCoefficients {
        let mut rows = vec![vec![0.0; p * k]; k];
        for &(lag, r, c, v) in entries {
            rows[r][(lag - 1) * k + c] = v;
        }
        VarCoefficients::from_rows("s", p, k, 1.0, &rows)
    }

    #[test]
    fn influence_examples() {
        assert_eq!(influence_vector(&coeffs(3, 1, &[])).c, vec![0.0; 3]);
        let eye = coeffs(3, 1, &[(1, 0, 0, 1.0), (1, 1, 1, 1.0), (1, 2, 2, 1.0)]);
        assert_eq!(influence_vector(&eye).c, vec![0.0; 3]);
        let a = coeffs(
            3,
            2,
            &[
                (1, 0, 1, 0.5),
                (2, 0, 2, -0.25),
                (1, 2, 0, -1.0),
                (2, 1, 1, 3.0),
                (2, 1, 0, 0.125),
            ],
        );
        assert_eq!(influence_vector(&a).c, vec![0.75, 0.125, 1.0]);
    }

    #[test]
    fn quantization_examples() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(quantize(&m), vec![0, 85, 170, 255]);
        assert_eq!(quantize(&Tensor::full(&[2, 3], 4.2)), vec![128; 6]);
    }

    #[test]
    fn export_writes_pgm_and_lossless_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let m = Tensor::new(vec![2, 3], vec![0.1, -0.7, 1.0 / 3.0, 2.0, 0.0, 5.5]).unwrap();
        export_map(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(load_tensor(&sidecar_path(&path)).unwrap(), m);
        let missing = dir.path().join("no/such/dir/map.pgm");
        assert!(matches!(export_map(&m, &missing), Err(Error::Io { .. })));
    }

    #[test]
    fn zero_influence_decodes_to_mean_with_zero_output_layer() {
        let mean = Tensor::new(vec![16, 8], (0..128).map(|i| 0.2 + i as f64 / 256.0).collect()).unwrap();
        let mut params = ModelParams::init(2, true, 4).unwrap();
        for (name, t) in params.tensors.iter_mut() {
            if name == "dec_out.b" {
                *t = Tensor::zeros(t.shape());
            }
        }
        let c = InfluenceVector {
            series_id: "s".into(),
            c: vec![0.0; 2],
        };
        // A zero latent decodes to all-zero residuals when every bias is zero.
        let m = contribution_map(&c, 1.0, &params, &mean, "F").unwrap();
        assert_eq!(m.omega, mean);
        assert_eq!(spatial_entropy(&m.omega, &mean), 0.0);
        let bad = InfluenceVector {
            series_id: "s".into(),
            c: vec![0.0; 3],
        };
        assert!(matches!(
            contribution_map(&bad, 1.0, &params, &mean, "F"),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn entropy_of_point_and_uniform_maps() {
        let mean = Tensor::zeros(&[2, 2]);
        let point = Tensor::new(vec![2, 2], vec![0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(spatial_entropy(&point, &mean), 0.0);
        let flat = Tensor::full(&[2, 2], -1.0);
        assert!((spatial_entropy(&flat, &mean) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn top_decile_and_iou() {
        let m = Tensor::new(vec![10], (0..10).map(|i| i as f64 - 9.5).collect()).unwrap();
        let mask = top_fraction_mask(&m, 0.1);
        assert_eq!(mask.iter().filter(|b| **b).count(), 1);
        assert!(mask[0]);
        assert_eq!(iou(&[true, true, false], &[true, false, false]), 0.5);
        assert_eq!(iou(&[false], &[false]), 0.0);
    }

    #[test]
    fn group_means_average_per_label() {
        let mk = |v: f64, l: &str| ContributionMap {
            omega: Tensor::full(&[2, 2], v),
            gamma_viz: 1.0,
            label: l.into(),
        };
        let maps = [mk(1.0, "F"), mk(3.0, "F"), mk(10.0, "N")];
        assert_eq!(group_mean_map(&maps, "F").unwrap().omega, Tensor::full(&[2, 2], 2.0));
        assert!(group_mean_map(&maps, "X").is_err());
    }

    #[test]
    fn influence_csv_layout() {
        let mut out = Vec::new();
        let v = InfluenceVector {
            series_id: "F0".into(),
            c: vec![0.5, 0.0],
        };
        write_influence_csv(&mut out, &[v]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "series_id,latent_index,value\nF0,0,5e-1\nF0,1,0e0\n"
        );
    }
}
