//! Group comparisons of fitted VAR models: the coefficient-swap test, the
//! influence-distance test, and the one-sided Mann-Whitney rank-sum test
//! they both reduce to.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::var::{swap_error, LatentSeries, VarCoefficients};

/// Largest combined sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct RankSum {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    /// One-sided p-value for "first sample stochastically greater".
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, plus the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Number of arrangements giving each value of U, for sample sizes `m` and `n`.
pub fn u_distribution(m: usize, n: usize) -> Vec<f64> {
    // counts[m][n][u] via c(u; m, n) = c(u - n; m - 1, n) + c(u; m, n - 1).
    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n + 1]; m + 1];
    for i in 0..=m {
        for j in 0..=n {
            table[i][j] = if i == 0 || j == 0 {
                vec![1.0]
            } else {
                let mut c = vec![0.0; i * j + 1];
                for (u, v) in table[i - 1][j].iter().enumerate() {
                    c[u + j] += v;
                }
                for (u, v) in table[i][j - 1].iter().enumerate() {
                    c[u] += v;
                }
                c
            };
        }
    }
    std::mem::take(&mut table[m][n])
}

/// One-sided rank-sum test of `a > b`.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSum> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("rank-sum test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Argument("rank-sum test on non-finite values".into()));
    }
    let (m, n) = (a.len(), b.len());
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&all);
    let u = ranks[..m].iter().sum::<f64>() - (m * (m + 1)) as f64 / 2.0;
    if ties.is_empty() && m + n <= EXACT_MAX_N {
        let dist = u_distribution(m, n);
        let total: f64 = dist.iter().sum();
        let tail: f64 = dist[u.round() as usize..].iter().sum();
        return Ok(RankSum {
            u,
            p: tail / total,
            exact: true,
        });
    }
    Ok(RankSum {
        u,
        p: normal_p(u, m, n, &ties),
        exact: false,
    })
}

/// Normal approximation with tie and continuity corrections.
pub fn normal_p(u: f64, m: usize, n: usize, ties: &[usize]) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let total = mf + nf;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = mf * nf / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if var <= 0.0 {
        // Every value tied: U sits at its mean with certainty.
        return 1.0;
    }
    let z = (u - mf * nf / 2.0 - 0.5) / var.sqrt();
    Normal::standard().sf(z)
}

/// Index pairs `(s, r)` into the series list.
type Pairs = Vec<(usize, usize)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub g: Vec<usize>,
    pub h: Vec<usize>,
}

impl GroupSpec {
    pub fn new(g: Vec<usize>, h: Vec<usize>) -> Result<Self> {
        if g.len() < 2 || h.len() < 2 {
            return Err(Error::Argument("each group needs at least two series".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in g.iter().chain(&h) {
            if !seen.insert(i) {
                return Err(Error::Argument(format!("series {} listed twice in the groups", i)));
            }
        }
        Ok(GroupSpec { g, h })
    }

    fn check_range(&self, n: usize) -> Result<()> {
        match self.g.iter().chain(&self.h).find(|&&i| i >= n) {
            Some(i) => Err(Error::Argument(format!(
                "group index {} out of range for {} series",
                i, n
            ))),
            None => Ok(()),
        }
    }

    /// Ordered pairs `(s, r)`, `s != r`, split into within- and across-group.
    fn ordered_pairs(&self) -> (Pairs, Pairs) {
        let within = |set: &[usize]| -> Vec<(usize, usize)> {
            set.iter()
                .flat_map(|&s| set.iter().filter(move |&&r| r != s).map(move |&r| (s, r)))
                .collect()
        };
        let mut intra = within(&self.g);
        intra.extend(within(&self.h));
        let mut inter: Vec<(usize, usize)> = self
            .g
            .iter()
            .flat_map(|&s| self.h.iter().map(move |&r| (s, r)))
            .collect();
        inter.extend(self.h.iter().flat_map(|&s| self.g.iter().map(move |&r| (s, r))));
        (intra, inter)
    }

    /// Unordered pairs, each once with the smaller position first.
    fn unordered_pairs(&self) -> (Pairs, Pairs) {
        let within = |set: &[usize]| -> Vec<(usize, usize)> {
            (0..set.len())
                .flat_map(|a| (a + 1..set.len()).map(move |b| (set[a], set[b])))
                .collect()
        };
        let mut intra = within(&self.g);
        intra.extend(within(&self.h));
        let inter = self
            .g
            .iter()
            .flat_map(|&s| self.h.iter().map(move |&r| (s, r)))
            .collect();
        (intra, inter)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pairing {
    /// Every `(s, r)` with `s != r`.
    #[default]
    Ordered,
    /// Each unordered pair once, with `(Δ_sr + Δ_rs) / 2`.
    Unordered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapTestResult {
    pub delta_intra: Vec<f64>,
    pub delta_inter: Vec<f64>,
    pub u: f64,
    pub p: f64,
}

fn check_models(latents: &[LatentSeries], coeffs: &[VarCoefficients]) -> Result<()> {
    if latents.len() != coeffs.len() {
        return Err(Error::dim(
            "swap_test",
            format!("{} latent series, {} coefficient sets", latents.len(), coeffs.len()),
        ));
    }
    let Some(first) = coeffs.first() else {
        return Ok(());
    };
    for (z, c) in latents.iter().zip(coeffs) {
        if c.k != first.k || c.p != first.p || z.k() != c.k {
            return Err(Error::dim(
                "swap_test",
                format!(
                    "series {}: K = {}, p = {} vs K = {}, p = {}",
                    c.series_id, c.k, c.p, first.k, first.p
                ),
            ));
        }
    }
    Ok(())
}

/// Tests whether swapping coefficients across groups hurts prediction more
/// than swapping within groups.
pub fn swap_test(
    latents: &[LatentSeries],
    coeffs: &[VarCoefficients],
    groups: &GroupSpec,
    pairing: Pairing,
) -> Result<SwapTestResult> {
    check_models(latents, coeffs)?;
    groups.check_range(latents.len())?;
    let own: Vec<f64> = latents
        .par_iter()
        .zip(coeffs)
        .map(|(z, c)| swap_error(z, c))
        .collect::<Result<_>>()?;
    let delta = |s: usize, r: usize| -> Result<f64> { Ok(swap_error(&latents[s], &coeffs[r])? - own[s]) };
    let eval = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        pairs
            .par_iter()
            .map(|&(s, r)| match pairing {
                Pairing::Ordered => delta(s, r),
                Pairing::Unordered => Ok((delta(s, r)? + delta(r, s)?) / 2.0),
            })
            .collect()
    };
    let (intra, inter) = match pairing {
        Pairing::Ordered => groups.ordered_pairs(),
        Pairing::Unordered => groups.unordered_pairs(),
    };
    let delta_intra = eval(&intra)?;
    let delta_inter = eval(&inter)?;
    let rs = rank_sum_test(&delta_inter, &delta_intra)?;
    Ok(SwapTestResult {
        delta_intra,
        delta_inter,
        u: rs.u,
        p: rs.p,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTestResult {
    pub d_intra: Vec<f64>,
    pub d_inter: Vec<f64>,
    pub u: f64,
    pub p: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Tests whether influence vectors are farther apart across groups than within.
pub fn influence_distance_test(influence: &[Vec<f64>], groups: &GroupSpec) -> Result<DistanceTestResult> {
    groups.check_range(influence.len())?;
    if let Some(first) = influence.first() {
        if let Some(bad) = influence.iter().find(|v| v.len() != first.len()) {
            return Err(Error::dim(
                "influence_distance_test",
                format!("lengths {} and {}", first.len(), bad.len()),
            ));
        }
    }
    let (intra, inter) = groups.unordered_pairs();
    let dist = |pairs: &[(usize, usize)]| -> Vec<f64> {
        pairs
            .iter()
            .map(|&(s, r)| squared_distance(&influence[s], &influence[r]))
            .collect()
    };
    let (d_intra, d_inter) = (dist(&intra), dist(&inter));
    let rs = rank_sum_test(&d_inter, &d_intra)?;
    Ok(DistanceTestResult {
        d_intra,
        d_inter,
        u: rs.u,
        p: rs.p,
    })
}

/// Rejection decisions at family-wise level `alpha`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<(f64, bool)>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {}", alpha)));
    }
    let m = p_values.len() as f64;
    Ok(p_values.iter().map(|&p| (p, p < alpha / m)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn binom(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn hand_computed_fixture() {
        let r = rank_sum_test(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.u, 4.0);
        assert!(r.exact);
        assert_eq!(r.p, 1.0 / 6.0);
        let r = rank_sum_test(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!((r.u, r.p), (0.0, 1.0));
    }

    #[test]
    fn u_distribution_counts_all_subsets() {
        for (m, n) in [(1, 1), (2, 3), (5, 7), (10, 10)] {
            let d = u_distribution(m, n);
            assert_eq!(d.len(), m * n + 1);
            assert_eq!(d.iter().sum::<f64>(), binom((m + n) as u64, m as u64));
            for u in 0..d.len() {
                assert_eq!(d[u], d[m * n - u], "symmetry at u = {u}");
            }
        }
    }

    /// Brute-force enumeration of every way to pick `a`'s ranks.
    #[test]
    fn exact_matches_enumeration() {
        let a = [0.3, 2.1, 1.4];
        let b = [0.9, -0.2, 1.1, 0.5];
        let r = rank_sum_test(&a, &b).unwrap();
        let n = 7usize;
        let (mut hits, mut total) = (0u32, 0u32);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() != 3 {
                continue;
            }
            let rank_sum: usize = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
            total += 1;
            if (rank_sum - 6) as f64 >= r.u {
                hits += 1;
            }
        }
        assert_eq!(r.p, hits as f64 / total as f64);
    }

    #[test]
    fn identical_samples_are_not_significant() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!(rank_sum_test(&a, &a).unwrap().p >= 0.5);
        assert_eq!(rank_sum_test(&[0.0; 5], &[0.0; 6]).unwrap().p, 1.0);
        assert!(rank_sum_test(&[], &a).is_err());
    }

    #[test]
    fn complementary_alternatives_sum_to_one_plus_tie_mass() {
        let a = [0.1, 0.7, 1.3, 2.0, 0.4];
        let b = [0.2, 0.5, 0.9, 1.8];
        let pa = rank_sum_test(&a, &b).unwrap().p;
        let pb = rank_sum_test(&b, &a).unwrap().p;
        let d = u_distribution(5, 4);
        let u = rank_sum_test(&a, &b).unwrap().u as usize;
        let mass = d[u] / d.iter().sum::<f64>();
        assert!((pa + pb - 1.0 - mass).abs() < 1e-12);
    }

    #[test]
    fn shifted_samples_are_detected() {
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..50).map(|_| rng.sample::<f64, _>(StandardNormal) + 2.0).collect();
            let b: Vec<f64> = (0..50).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if rank_sum_test(&a, &b).unwrap().p < 0.01 {
                hits += 1;
            }
        }
        assert!(hits >= 99, "{hits}");
    }

    #[test]
    fn tie_correction_uses_midranks() {
        let (ranks, ties) = midranks(&[2.0, 1.0, 2.0, 3.0]);
        assert_eq!(ranks, vec![2.5, 1.0, 2.5, 4.0]);
        assert_eq!(ties, vec![2]);
        assert!(!rank_sum_test(&[2.0, 3.0], &[1.0, 2.0]).unwrap().exact);
    }

    #[test]
    fn bonferroni_examples() {
        let r = bonferroni(&[0.0002, 0.1781, 0.01, 0.5, 0.9, 0.0021], 0.05).unwrap();
        assert!(r[0].1);
        assert!(!r[1].1);
        assert!(r[5].1);
        assert!(!r[2].1);
        assert_eq!(bonferroni(&[0.04], 0.05).unwrap(), vec![(0.04, true)]);
        assert!(bonferroni(&[0.1], 1.5).is_err());
    }

    #[test]
    fn group_pair_counts() {
        let g = GroupSpec::new(vec![0, 1, 2], vec![3, 4]).unwrap();
        let (intra, inter) = g.ordered_pairs();
        assert_eq!((intra.len(), inter.len()), (3 * 2 + 2, 2 * 3 * 2));
        let (intra, inter) = g.unordered_pairs();
        assert_eq!((intra.len(), inter.len()), (3 + 1, 6));
        assert!(GroupSpec::new(vec![0, 1], vec![1, 2]).is_err());
        assert!(GroupSpec::new(vec![0], vec![1, 2]).is_err());
    }

    #[test]
    fn distances_are_symmetric_and_separate_clusters() {
        let a = [1.0, -2.0, 0.5];
        let b = [0.0, 1.0, 4.0];
        assert_eq!(squared_distance(&a, &b), squared_distance(&b, &a));
        let vecs: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let base = if i < 5 { 0.0 } else { 10.0 };
                vec![base + 0.01 * i as f64, base - 0.02 * i as f64]
            })
            .collect();
        let g = GroupSpec::new((0..5).collect(), (5..10).collect()).unwrap();
        assert!(influence_distance_test(&vecs, &g).unwrap().p < 0.01);
        let same = vec![vec![1.0, 2.0]; 4];
        let g = GroupSpec::new(vec![0, 1], vec![2, 3]).unwrap();
        assert!(influence_distance_test(&same, &g).unwrap().p >= 0.5);
    }
}
