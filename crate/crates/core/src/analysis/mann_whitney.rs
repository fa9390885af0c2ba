//! Mann–Whitney U test with midranks for ties.
//!
//! `u` is the statistic of sample `a`: the number of pairs with `a_i > b_j`
//! plus half the tied pairs. `AGreater` asks whether `a` tends to exceed `b`
//! and so looks at the upper tail of `u`. The exact null distribution is
//! computed by counting arrangements; larger or tied samples use a normal
//! approximation with tie-corrected variance and a 0.5 continuity correction.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::AnalysisError;

/// Largest `|a| + |b|` for which `Method::Auto` uses the exact distribution.
pub const EXACT_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    TwoSided,
    AGreater,
    ALess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u: f64,
    pub p: f64,
    /// `Exact` or `Normal`, whichever produced `p`.
    pub method: Method,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<MannWhitney, AnalysisError> {
    mann_whitney_with(a, b, alternative, Method::Auto)
}

pub fn mann_whitney_with(a: &[f64], b: &[f64], alternative: Alternative, method: Method) -> Result<MannWhitney, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::Empty("Mann-Whitney sample"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(AnalysisError::InvalidInput("NaN in Mann-Whitney sample".into()));
    }
    let (ranks, tie_groups) = midranks(a.iter().chain(b).copied());
    let n = a.len() as f64;
    let m = b.len() as f64;
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    let u = rank_sum_a - n * (n + 1.0) / 2.0;
    let has_ties = tie_groups.iter().any(|&t| t > 1);

    let method = match method {
        Method::Auto if !has_ties && a.len() + b.len() <= EXACT_LIMIT => Method::Exact,
        Method::Auto => Method::Normal,
        Method::Exact if has_ties => {
            return Err(AnalysisError::InvalidInput("exact Mann-Whitney needs tie-free samples".into()))
        }
        other => other,
    };

    let p = match method {
        Method::Exact => {
            let u = u.round() as usize;
            let dist = u_distribution(a.len(), b.len());
            let total: f64 = dist.iter().sum();
            let lower = dist[..=u].iter().sum::<f64>() / total;
            let upper = dist[u..].iter().sum::<f64>() / total;
            tail(alternative, lower, upper)
        }
        _ => {
            let total = n + m;
            let ties: f64 = tie_groups.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
            let var = n * m / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)));
            if var <= 0.0 {
                1.0
            } else {
                let sd = var.sqrt();
                let mu = n * m / 2.0;
                // P(U <= u) and P(U >= u), each with its continuity correction.
                let lower = phi((u - mu + 0.5) / sd);
                let upper = phi(-(u - mu - 0.5) / sd);
                tail(alternative, lower.min(1.0), upper.min(1.0))
            }
        }
    };
    Ok(MannWhitney { u, p, method })
}

fn tail(alternative: Alternative, lower: f64, upper: f64) -> f64 {
    match alternative {
        Alternative::AGreater => upper,
        Alternative::ALess => lower,
        Alternative::TwoSided => (2.0 * lower.min(upper)).min(1.0),
    }
}

fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Average 1-based ranks in input order, plus the size of every tie group.
fn midranks(values: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<usize>) {
    let values: Vec<f64> = values.collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        groups.push(end - start);
        start = end;
    }
    (ranks, groups)
}

/// Number of arrangements of `n` a-values among `n + m` positions giving each
/// value of U, indexed by U in `0..=n*m`.
pub fn u_distribution(n: usize, m: usize) -> Vec<f64> {
    // counts[j][u]: arrangements of i a-values and j b-values with statistic u,
    // built up over i.
    let max_u = n * m;
    let mut prev: Vec<Vec<f64>> = (0..=m)
        .map(|_| {
            let mut v = vec![0.0; max_u + 1];
            v[0] = 1.0;
            v
        })
        .collect();
    for _ in 1..=n {
        let mut cur = vec![vec![0.0; max_u + 1]; m + 1];
        for j in 0..=m {
            for u in 0..=max_u {
                // Largest value is an a (it beats all j b-values) or a b.
                let from_a = if u >= j { prev[j][u - j] } else { 0.0 };
                let from_b = if j > 0 { cur[j - 1][u] } else { 0.0 };
                cur[j][u] = from_a + from_b;
            }
        }
        prev = cur;
    }
    prev.swap_remove(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts every way of choosing which ranks belong to `a`.
    fn enumerate(a: &[f64], b: &[f64], alternative: Alternative) -> f64 {
        let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
        all.sort_by(f64::total_cmp);
        let n = a.len();
        let total_n = all.len();
        let u_of = |mask: u32| -> f64 {
            let mut u = 0.0;
            for i in 0..total_n {
                if mask & (1 << i) != 0 {
                    u += (0..total_n).filter(|j| mask & (1 << j) == 0 && j < &i).count() as f64;
                }
            }
            u
        };
        let observed = a.iter().map(|x| b.iter().filter(|y| *y < x).count() as f64).sum::<f64>();
        let (mut le, mut ge, mut count) = (0.0, 0.0, 0.0);
        for mask in 0u32..(1 << total_n) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let u = u_of(mask);
            count += 1.0;
            if u <= observed {
                le += 1.0;
            }
            if u >= observed {
                ge += 1.0;
            }
        }
        tail(alternative, le / count, ge / count)
    }

    #[test]
    fn two_against_two() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::ALess).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.method, Method::Exact);
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::AGreater).unwrap();
        assert!((r.p - 1.0).abs() < 1e-15);
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::TwoSided).unwrap();
        assert!((r.p - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn distribution_sums_to_binomial() {
        let d = u_distribution(5, 3);
        assert_eq!(d.iter().sum::<f64>(), 56.0);
        assert_eq!(d.len(), 16);
        for u in 0..d.len() {
            assert_eq!(d[u], d[d.len() - 1 - u]);
        }
    }

    #[test]
    fn exact_matches_enumeration() {
        let a = [0.3, 1.7, 2.2, 5.0];
        let b = [0.1, 0.9, 3.3];
        for alt in [Alternative::TwoSided, Alternative::AGreater, Alternative::ALess] {
            let r = mann_whitney_u(&a, &b, alt).unwrap();
            assert!((r.p - enumerate(&a, &b, alt)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_samples_are_not_separated() {
        let a: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let r = mann_whitney_u(&a, &a, Alternative::TwoSided).unwrap();
        assert_eq!(r.method, Method::Normal);
        assert!(r.p >= 0.99, "{}", r.p);
    }

    #[test]
    fn midranks_average_ties() {
        let (r, g) = midranks([3.0, 1.0, 3.0, 2.0].into_iter());
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(g, vec![1, 1, 2]);
    }

    #[test]
    fn normal_path_tracks_exact_on_shifted_subsamples() {
        use rand::seq::IndexedRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..50).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + 1.0).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        for _ in 0..20 {
            let sa: Vec<f64> = a.choose_multiple(&mut rng, 8).copied().collect();
            let sb: Vec<f64> = b.choose_multiple(&mut rng, 8).copied().collect();
            // A two-sided p doubles the one-sided tail error, which at n = 8
            // reaches about 0.0055.
            for (alt, tol) in [(Alternative::AGreater, 0.01), (Alternative::ALess, 0.01), (Alternative::TwoSided, 0.011)] {
                let exact = mann_whitney_with(&sa, &sb, alt, Method::Exact).unwrap().p;
                let approx = mann_whitney_with(&sa, &sb, alt, Method::Normal).unwrap().p;
                assert!((exact - approx).abs() < tol, "{alt:?}: {exact} vs {approx}");
            }
        }
    }

    #[test]
    fn normal_path_reference_values() {
        let r = mann_whitney_with(&[1.0, 2.0, 3.5], &[0.5, 4.0, 5.0, 6.0], Alternative::TwoSided, Method::Normal).unwrap();
        assert_eq!(r.u, 3.0);
        assert!((r.p - 0.376759117811582).abs() < 1e-9, "{}", r.p);
        let r = mann_whitney_u(&[1.0, 1.0, 2.0, 3.0], &[2.0, 4.0, 4.0, 5.0, 9.0], Alternative::ALess).unwrap();
        assert_eq!(r.method, Method::Normal);
        assert_eq!(r.u, 1.5);
        assert!((r.p - 0.02359695963050757).abs() < 1e-9, "{}", r.p);
    }

    #[test]
    fn errors() {
        assert!(matches!(mann_whitney_u(&[], &[1.0], Alternative::TwoSided), Err(AnalysisError::Empty(_))));
        assert!(mann_whitney_with(&[1.0, 1.0], &[2.0], Alternative::TwoSided, Method::Exact).is_err());
        assert!(mann_whitney_u(&[f64::NAN], &[1.0], Alternative::TwoSided).is_err());
    }

    #[test]
    fn all_tied_gives_one() {
        let r = mann_whitney_u(&[2.0; 10], &[2.0; 10], Alternative::TwoSided).unwrap();
        assert_eq!(r.p, 1.0);
        assert_eq!(r.u, 50.0);
    }
}
