//! Subcommand implementations behind the `sparsedyn` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use sparsedyn_core::contribution::{
    contribution_maps, export_map, group_mean_map, influence_vector, write_influence_csv, ContributionMap,
};
use sparsedyn_core::format::load_tensor;
use sparsedyn_core::lars::{lasso_dense, SolverConfig};
use sparsedyn_core::stats::{bonferroni, influence_distance_test, swap_test, GroupSpec, Pairing};
use sparsedyn_core::synth::{generate, read_dataset, write_dataset, Dataset, SynthConfig, CONDITIONS};
use sparsedyn_core::training::{train, Checkpoint, Regime, TrainConfig};
use sparsedyn_core::var::{write_coefficients_csv, LatentSeries};
use sparsedyn_core::{Error, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.sdck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";
pub const ABLATION_LAMBDAS: [f64; 3] = [0.005, 0.01, 0.02];
pub const BONFERRONI_ALPHA: f64 = 0.05;

/// Exit code for an error surfaced by a subcommand.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::MissingKey(_) | Error::Argument(_)) => EXIT_USAGE,
        Some(Error::SingularGram { .. } | Error::Fit(_) | Error::Divergence { .. } | Error::Generation(_)) => {
            EXIT_NUMERIC
        }
        Some(_) => EXIT_DATA,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn create_dir(path: &Path) -> Result<()> {
    Ok(fs::create_dir_all(path).map_err(|e| Error::io(path, e))?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    Ok(fs::write(path, contents).map_err(|e| Error::io(path, e))?)
}

/// Generates a synthetic dataset into `out`.
pub fn cmd_gen(config: &Path, seed: Option<u64>, out: &Path) -> Result<Dataset> {
    let mut text = read_text(config)?;
    if let Some(s) = seed {
        // The flag wins over the file; `seed` stays a required key otherwise.
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != Some("seed"))
            .collect();
        text = format!("{}\nseed = {}\n", kept.join("\n"), s);
    }
    let cfg = SynthConfig::from_text(&text).with_context(|| format!("reading {}", config.display()))?;
    let ds = generate(&cfg)?;
    write_dataset(&ds, out)?;
    info!("wrote {} series to {}", ds.series.len(), out.display());
    Ok(ds)
}

/// Training config from a file, with command-line overrides applied.
pub fn load_train_config(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg =
        TrainConfig::from_text(&read_text(config)?).with_context(|| format!("reading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o.to_path_buf());
    }
    // Relative data and output paths resolve against the config's directory.
    let base = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| if p.is_relative() { base.join(p) } else { p.clone() })
    };
    cfg.data_dir = resolve(&cfg.data_dir);
    if out.is_none() {
        cfg.out_dir = resolve(&cfg.out_dir);
    }
    Ok(cfg)
}

pub fn metrics_csv(ck: &Checkpoint) -> String {
    let mut s = String::from("epoch,l_rec,r_var\n");
    for (i, m) in ck.metrics.iter().enumerate() {
        writeln!(s, "{},{:e},{:e}", i + 1, m.l_rec, m.r_var).unwrap();
    }
    s
}

/// Trains per config and writes the checkpoint, metrics and coefficients.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Checkpoint> {
    let cfg = load_train_config(config, seed, out)?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::MissingKey("data_dir".into()))?;
    let out_dir = cfg.out_dir.clone().ok_or_else(|| Error::MissingKey("out_dir".into()))?;
    let data = read_dataset(&data_dir)?;
    let ck = train(&cfg, &data)?;
    create_dir(&out_dir)?;
    ck.save(&out_dir.join(CHECKPOINT_FILE))?;
    write_file(&out_dir.join(METRICS_FILE), metrics_csv(&ck))?;
    let mut coef = Vec::new();
    let all: Vec<_> = ck.series.iter().map(|s| s.coeffs.clone()).collect();
    write_coefficients_csv(&mut coef, &all)?;
    write_file(&out_dir.join(COEFFICIENTS_FILE), coef)?;
    info!("checkpoint written to {}", out_dir.display());
    Ok(ck)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Swap,
    Influence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub method: Method,
    pub g_label: String,
    pub h_label: String,
    pub g: Vec<usize>,
    pub h: Vec<usize>,
}

impl Comparison {
    pub fn name(&self) -> String {
        let m = match self.method {
            Method::Swap => "swap",
            Method::Influence => "influence",
        };
        format!("{}:{}-{}", m, self.g_label, self.h_label)
    }
}

/// Between-condition and within-condition (first half vs second half)
/// comparisons, for both the swap and the influence test.
pub fn default_comparisons(ck: &Checkpoint) -> Result<Vec<Comparison>> {
    let by_cond = |c: &str| -> Vec<usize> { (0..ck.series.len()).filter(|&i| ck.series[i].condition == c).collect() };
    let (f, n) = (by_cond(CONDITIONS[0]), by_cond(CONDITIONS[1]));
    if f.len() < 4 || n.len() < 4 {
        bail!(Error::Argument(format!(
            "the default comparisons need at least 4 series per condition, got {} and {}",
            f.len(),
            n.len()
        )));
    }
    let half = |v: &[usize], c: &str| {
        let m = v.len() / 2;
        ((format!("{c}a"), v[..m].to_vec()), (format!("{c}b"), v[m..].to_vec()))
    };
    let ((fa, fa_i), (fb, fb_i)) = half(&f, CONDITIONS[0]);
    let ((na, na_i), (nb, nb_i)) = half(&n, CONDITIONS[1]);
    let sets = [
        (
            (CONDITIONS[0].to_string(), f.clone()),
            (CONDITIONS[1].to_string(), n.clone()),
        ),
        ((fa, fa_i), (fb, fb_i)),
        ((na, na_i), (nb, nb_i)),
    ];
    let mut out = Vec::new();
    for method in [Method::Swap, Method::Influence] {
        for ((gl, g), (hl, h)) in &sets {
            out.push(Comparison {
                method,
                g_label: gl.clone(),
                h_label: hl.clone(),
                g: g.clone(),
                h: h.clone(),
            });
        }
    }
    Ok(out)
}

/// Groups file: one comparison per line, `swap|influence G_IDS H_IDS` with
/// comma-separated series ids; `#` starts a comment.
pub fn parse_groups(text: &str, ck: &Checkpoint) -> Result<Vec<Comparison>> {
    let index = |id: &str, line: usize| -> Result<usize> {
        ck.series.iter().position(|s| s.id == id).ok_or_else(|| {
            Error::Config {
                line,
                msg: format!("unknown series `{}`", id),
            }
            .into()
        })
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Config { line: i + 1, msg };
        if parts.len() != 3 {
            bail!(bad(format!("expected `method G_IDS H_IDS`, got `{}`", line)));
        }
        let method = match parts[0] {
            "swap" => Method::Swap,
            "influence" => Method::Influence,
            m => bail!(bad(format!("unknown method `{}`", m))),
        };
        let ids = |s: &str| {
            s.split(',')
                .map(|id| index(id.trim(), i + 1))
                .collect::<Result<Vec<_>>>()
        };
        out.push(Comparison {
            method,
            g_label: parts[1].to_string(),
            h_label: parts[2].to_string(),
            g: ids(parts[1])?,
            h: ids(parts[2])?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestRow {
    pub comparison: String,
    pub group_g: String,
    pub group_h: String,
    pub u: f64,
    pub p: f64,
    pub reject: bool,
}

pub fn run_comparisons(ck: &Checkpoint, comparisons: &[Comparison]) -> Result<Vec<TestRow>> {
    let latents: Vec<LatentSeries> = ck
        .series
        .iter()
        .map(|s| LatentSeries::new(s.latents.clone(), s.id.clone()))
        .collect::<sparsedyn_core::Result<_>>()?;
    let coeffs: Vec<_> = ck.series.iter().map(|s| s.coeffs.clone()).collect();
    let influence: Vec<Vec<f64>> = coeffs.iter().map(|c| influence_vector(c).c).collect();
    let mut raw = Vec::new();
    for c in comparisons {
        let groups = GroupSpec::new(c.g.clone(), c.h.clone())?;
        let (u, p) = match c.method {
            Method::Swap => {
                let r = swap_test(&latents, &coeffs, &groups, Pairing::Ordered)?;
                (r.u, r.p)
            }
            Method::Influence => {
                let r = influence_distance_test(&influence, &groups)?;
                (r.u, r.p)
            }
        };
        raw.push((c, u, p));
    }
    let decisions = bonferroni(&raw.iter().map(|r| r.2).collect::<Vec<_>>(), BONFERRONI_ALPHA)?;
    let ids = |v: &[usize]| {
        v.iter()
            .map(|&i| ck.series[i].id.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(raw
        .into_iter()
        .zip(decisions)
        .map(|((c, u, p), (_, reject))| TestRow {
            comparison: c.name(),
            group_g: ids(&c.g),
            group_h: ids(&c.h),
            u,
            p,
            reject,
        })
        .collect())
}

pub fn test_csv(rows: &[TestRow]) -> String {
    let mut s = String::from("comparison,group_g,group_h,u,p,reject_bonferroni\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:e},{}",
            r.comparison, r.group_g, r.group_h, r.u, r.p, r.reject
        )
        .unwrap();
    }
    s
}

/// Runs the group tests on a checkpoint; writes CSV to `out` or returns it.
pub fn cmd_test(checkpoint: &Path, groups: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let comparisons = match groups {
        Some(g) => parse_groups(&read_text(g)?, &ck)?,
        None => default_comparisons(&ck)?,
    };
    let csv = test_csv(&run_comparisons(&ck, &comparisons)?);
    if let Some(o) = out {
        write_file(o, &csv)?;
    }
    Ok(csv)
}

/// Writes per-series, per-condition and difference contribution maps.
pub fn cmd_map(checkpoint: &Path, out: &Path, gamma_viz: f64) -> Result<Vec<ContributionMap>> {
    let ck = Checkpoint::load(checkpoint)?;
    create_dir(out)?;
    let influence: Vec<_> = ck.series.iter().map(|s| influence_vector(&s.coeffs)).collect();
    let labels: Vec<String> = ck.series.iter().map(|s| s.condition.clone()).collect();
    let maps = contribution_maps(&influence, &labels, gamma_viz, &ck.params, &ck.mean)?;
    for (s, m) in ck.series.iter().zip(&maps) {
        export_map(&m.omega, &out.join(format!("omega_{}.pgm", s.id)))?;
    }
    let mut groups = Vec::new();
    for c in CONDITIONS {
        if labels.iter().any(|l| l == c) {
            let g = group_mean_map(&maps, c)?;
            export_map(&g.omega, &out.join(format!("omega_mean_{c}.pgm")))?;
            groups.push(g);
        }
    }
    if let [a, b] = groups.as_slice() {
        let diff: Vec<f64> = a.omega.data().iter().zip(b.omega.data()).map(|(x, y)| x - y).collect();
        let diff = Tensor::new(a.omega.shape().to_vec(), diff)?;
        export_map(&diff, &out.join(format!("omega_diff_{}_{}.pgm", a.label, b.label)))?;
    }
    let mut csv = Vec::new();
    write_influence_csv(&mut csv, &influence)?;
    write_file(&out.join("influence.csv"), csv)?;
    Ok(maps)
}

pub fn lasso_csv(knots: &[sparsedyn_core::lars::Knot]) -> String {
    let mut s = String::from("lambda,event,feature\n");
    for k in knots {
        writeln!(s, "{:e},{},{}", k.lambda, k.event, k.event.feature()).unwrap();
    }
    s
}

/// Solves one lasso problem on a stored design and response; returns the
/// knot CSV and the dense solution.
pub fn cmd_lasso(x: &Path, y: &Path, lambda: f64) -> Result<(String, Vec<f64>)> {
    let xm = load_tensor(x)?;
    let yv = load_tensor(y)?;
    if xm.ndim() != 2 || yv.len() != xm.shape()[0] {
        bail!(Error::Dimension {
            op: "lasso",
            detail: format!("design {:?} and response {:?}", xm.shape(), yv.shape()),
        });
    }
    let sol = lasso_dense(&xm, yv.data(), lambda, &SolverConfig::default())?;
    Ok((lasso_csv(&sol.knots), sol.dense()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    /// `r_var` then `l_rec`, each per regime in [`Regime::ALL`] order.
    pub r_var: [f64; 3],
    pub l_rec: [f64; 3],
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("lambda,metric,sequential,embedded,end_to_end\n");
    for r in rows {
        for (name, v) in [("r_var", r.r_var), ("l_rec", r.l_rec)] {
            writeln!(s, "{},{},{:e},{:e},{:e}", r.lambda, name, v[0], v[1], v[2]).unwrap();
        }
    }
    s
}

/// Trains every regime at every grid lambda on one dataset.
pub fn run_ablation(
    base: &TrainConfig,
    data: &[sparsedyn_core::synth::Series],
    lambdas: &[f64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut r_var = [0.0; 3];
        let mut l_rec = [0.0; 3];
        for (i, regime) in Regime::ALL.into_iter().enumerate() {
            let cfg = TrainConfig {
                regime,
                lambda,
                ..base.clone()
            };
            let ck = train(&cfg, data)?;
            let last = ck.metrics.last().expect("at least one epoch");
            info!(
                "ablation lambda {} {}: r_var {:.4} l_rec {:.4e}",
                lambda, regime, last.r_var, last.l_rec
            );
            r_var[i] = last.r_var;
            l_rec[i] = last.l_rec;
        }
        rows.push(AblationRow { lambda, r_var, l_rec });
    }
    Ok(rows)
}

pub fn cmd_ablate(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<String> {
    let cfg = load_train_config(config, seed, out)?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::MissingKey("data_dir".into()))?;
    let data = read_dataset(&data_dir)?;
    let csv = ablation_csv(&run_ablation(&cfg, &data, &ABLATION_LAMBDAS)?);
    if let Some(o) = &cfg.out_dir {
        create_dir(o)?;
        write_file(&o.join("ablation.csv"), &csv)?;
    }
    Ok(csv)
}

/// Sets the global rayon pool size; `None` keeps rayon's default.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!(Error::Argument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e));
        assert_eq!(code(Error::MissingKey("seed".into())), EXIT_USAGE);
        assert_eq!(code(Error::Format("x".into())), EXIT_DATA);
        assert_eq!(code(Error::io("/x", std::io::Error::other("gone"))), EXIT_DATA);
        assert_eq!(code(Error::SingularGram { active: vec![1] }), EXIT_NUMERIC);
        assert_eq!(
            code(Error::Divergence {
                step: 3,
                detail: "nan".into()
            }),
            EXIT_NUMERIC
        );
    }

    #[test]
    fn ablation_csv_shape() {
        let rows: Vec<AblationRow> = ABLATION_LAMBDAS
            .iter()
            .map(|&lambda| AblationRow {
                lambda,
                r_var: [0.5, 0.4, 0.3],
                l_rec: [1e-3, 2e-3, 3e-3],
            })
            .collect();
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "lambda,metric,sequential,embedded,end_to_end");
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[1].starts_with("0.005,r_var,"));
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5));
    }
}
