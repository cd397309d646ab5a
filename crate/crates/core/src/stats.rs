//! Goodness-of-fit tests, inverse-Gaussian law and MCMC diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Smallest expected count of a retained χ² cell.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Cells after pooling.
    pub cells: usize,
}

fn chi2_sf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).expect("positive dof").sf(x)
}

/// Groups cell indices so that each group's expected count is at least
/// [`MIN_EXPECTED`]: cells below the threshold are pooled together, and a
/// pool that is still too small joins the smallest retained cell.
fn pool(expected: &[f64]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut small = Vec::new();
    let mut small_mass = 0.0;
    for (k, &e) in expected.iter().enumerate() {
        if e >= MIN_EXPECTED {
            groups.push(vec![k]);
        } else {
            small.push(k);
            small_mass += e;
        }
    }
    if !small.is_empty() {
        if small_mass >= MIN_EXPECTED || groups.is_empty() {
            groups.push(small);
        } else {
            let target = (0..groups.len())
                .min_by(|&a, &b| {
                    let ea: f64 = groups[a].iter().map(|&k| expected[k]).sum();
                    let eb: f64 = groups[b].iter().map(|&k| expected[k]).sum();
                    ea.total_cmp(&eb)
                })
                .expect("nonempty");
            groups[target].extend(small);
        }
    }
    groups
}

/// Pearson χ² goodness of fit of `observed` counts against cell
/// probabilities `probs` (renormalised). Degrees of freedom: cells − 1.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> Result<ChiSquareResult> {
    if observed.len() != probs.len() || observed.is_empty() {
        return Err(Error::Statistics("observed and expected cell counts differ".into()));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Statistics("cell probabilities must be finite and ≥ 0".into()));
    }
    let n: u64 = observed.iter().sum();
    let total: f64 = probs.iter().sum();
    let expected: Vec<f64> = probs.iter().map(|p| p / total * n as f64).collect();
    // observations in zero-probability cells are an outright rejection
    if observed.iter().zip(&expected).any(|(&o, &e)| o > 0 && e == 0.0) {
        return Ok(ChiSquareResult {
            statistic: f64::INFINITY,
            dof: 0,
            p_value: 0.0,
            cells: 0,
        });
    }
    let groups = pool(&expected);
    if groups.len() < 2 {
        return Err(Error::Statistics("all cells pooled into one; increase the sample".into()));
    }
    let statistic = groups
        .iter()
        .map(|g| {
            let o: f64 = g.iter().map(|&k| observed[k] as f64).sum();
            let e: f64 = g.iter().map(|&k| expected[k]).sum();
            (o - e) * (o - e) / e
        })
        .sum();
    let dof = groups.len() - 1;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
        cells: groups.len(),
    })
}

/// χ² test of homogeneity for two count vectors over the same cells.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<ChiSquareResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Statistics("count vectors differ in length".into()));
    }
    let na: f64 = a.iter().sum::<u64>() as f64;
    let nb: f64 = b.iter().sum::<u64>() as f64;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Statistics("empty sample".into()));
    }
    let n = na + nb;
    let col: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| (x + y) as f64).collect();
    // pool on the smaller expected count of the two rows
    let min_expected: Vec<f64> = col.iter().map(|c| c * na.min(nb) / n).collect();
    let groups: Vec<Vec<usize>> = pool(&min_expected)
        .into_iter()
        .filter(|g| g.iter().map(|&k| col[k]).sum::<f64>() > 0.0)
        .collect();
    if groups.len() < 2 {
        return Err(Error::Statistics("all cells pooled into one; increase the sample".into()));
    }
    let mut statistic = 0.0;
    for g in &groups {
        let c: f64 = g.iter().map(|&k| col[k]).sum();
        let oa: f64 = g.iter().map(|&k| a[k] as f64).sum();
        let ob: f64 = g.iter().map(|&k| b[k] as f64).sum();
        let ea = c * na / n;
        let eb = c * nb / n;
        statistic += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    let dof = groups.len() - 1;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
        cells: groups.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov tail `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    if lambda < 1.0 {
        // small-λ form converges faster here
        let s: f64 = (1..=20)
            .map(|k| {
                let k = (2 * k - 1) as f64;
                (-(k * k) * std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp()
            })
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p(d: f64, ne: f64) -> f64 {
    let sq = ne.sqrt();
    kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d)
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Statistics("sample contains NaN".into()));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Two-sample Kolmogorov–Smirnov test (exact statistic, asymptotic p).
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> Result<KsResult> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Statistics("KS needs two nonempty samples".into()));
    }
    let a = sorted(xs)?;
    let b = sorted(ys)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p(d, n * m / (n + m)),
    })
}

/// One-sample KS test against a continuous CDF.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if xs.is_empty() {
        return Err(Error::Statistics("KS needs a nonempty sample".into()));
    }
    let a = sorted(xs)?;
    let n = a.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &x) in a.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - k as f64 / n).max((k + 1) as f64 / n - f);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p(d, n),
    })
}

/// `ln P(N(0,1) > z)`, accurate far into the tail.
fn ln_normal_sf(z: f64) -> f64 {
    let v = 0.5 * erfc(z / std::f64::consts::SQRT_2);
    if v > 1e-300 {
        v.ln()
    } else {
        // Mills-ratio asymptotics
        -0.5 * z * z - z.ln() - 0.5 * std::f64::consts::TAU.ln() + (1.0 - 1.0 / (z * z)).ln()
    }
}

/// Inverse-Gaussian law with mean `mu` and shape `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGaussian {
    pub mu: f64,
    pub lambda: f64,
}

impl InverseGaussian {
    pub fn new(mu: f64, lambda: f64) -> Result<Self> {
        if !(mu > 0.0 && lambda > 0.0 && mu.is_finite() && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("inverse Gaussian({mu}, {lambda})")));
        }
        Ok(Self { mu, lambda })
    }

    /// Method-of-moments fit: `μ = mean`, `λ = μ³ / variance`.
    pub fn fit_moments(xs: &[f64]) -> Result<Self> {
        let (mean, var) = mean_var(xs)?;
        Self::new(mean, mean.powi(3) / var)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        0.5 * (self.lambda / (std::f64::consts::TAU * x.powi(3))).ln()
            - self.lambda * (x - self.mu).powi(2) / (2.0 * self.mu * self.mu * x)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let r = (self.lambda / x).sqrt();
        let a = r * (x / self.mu - 1.0);
        let b = r * (x / self.mu + 1.0);
        let first = 0.5 * erfc(-a / std::f64::consts::SQRT_2);
        let second = (2.0 * self.lambda / self.mu + ln_normal_sf(b)).exp();
        (first + second).clamp(0.0, 1.0)
    }
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::Statistics("need at least two values".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

/// Mean and its naive standard error.
pub fn mean_se(xs: &[f64]) -> Result<(f64, f64)> {
    let (m, v) = mean_var(xs)?;
    Ok((m, (v / xs.len() as f64).sqrt()))
}

/// Autocorrelation at `lag` (biased normalisation).
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    if lag >= n {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let c0: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if c0 == 0.0 {
        return 0.0;
    }
    let c: f64 = (0..n - lag).map(|t| (xs[t] - mean) * (xs[t + lag] - mean)).sum();
    c / c0
}

/// Effective sample size via Geyer's initial positive sequence.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let c0: f64 = dev.iter().map(|d| d * d).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        (0..n - lag).map(|t| dev[t] * dev[t + lag]).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut k = 0;
    let mut prev_pair = f64::INFINITY;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        // enforce monotone pairs
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        k += 1;
    }
    (n as f64 / tau.max(1.0 / n as f64)).min(n as f64 * (n as f64).log10().max(1.0))
}

/// Split-chain potential scale reduction `R̂` over one or more chains.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        if h >= 2 {
            halves.push(&c[..h]);
            halves.push(&c[c.len() - h..]);
        }
    }
    let m = halves.len();
    if m < 2 {
        return f64::NAN;
    }
    let n = halves.iter().map(|h| h.len()).min().expect("nonempty") as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var = (n - 1.0) / n * w + b / n;
    (var / w).sqrt()
}

/// Least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{exp1, stream_rng};
    use crate::quadrature::integrate;
    use rand::Rng;

    #[test]
    fn chi_square_exact_fit() {
        let r = chi_square_gof(&[10, 20, 30, 40], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.dof, 3);
    }

    #[test]
    fn chi_square_pools_small_cells() {
        let r = chi_square_gof(&[50, 45, 2, 3], &[0.5, 0.46, 0.02, 0.02]).unwrap();
        assert_eq!(r.cells, 2);
        assert!(chi_square_gof(&[3, 1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn chi_square_reference_value() {
        // statistic 4 with 1 dof: p = erfc(√2)
        let r = chi_square_gof(&[60, 40], &[0.5, 0.5]).unwrap();
        assert!((r.statistic - 4.0).abs() < 1e-12);
        assert!((r.p_value - 0.045_500_263_9).abs() < 1e-9);
    }

    #[test]
    fn homogeneity_detects_difference() {
        let same = chi_square_homogeneity(&[100, 200, 300], &[100, 200, 300]).unwrap();
        assert_eq!(same.statistic, 0.0);
        let diff = chi_square_homogeneity(&[1000, 2000, 3000], &[3000, 2000, 1000]).unwrap();
        assert!(diff.p_value < 1e-10);
    }

    #[test]
    fn ks_identical_and_power() {
        let xs: Vec<f64> = (0..100).map(|k| k as f64).collect();
        assert_eq!(ks_two_sample(&xs, &xs).unwrap().statistic, 0.0);
        let mut rng = stream_rng(1, 0);
        let a: Vec<f64> = (0..10_000).map(|_| exp1(&mut rng)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| exp1(&mut rng) / 2.0).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value < 1e-6);
        let u: Vec<f64> = (0..5000).map(|_| rng.gen()).collect();
        assert!(ks_one_sample(&u, |x| x.clamp(0.0, 1.0)).unwrap().p_value > 1e-3);
    }

    #[test]
    fn kolmogorov_branches_agree() {
        for l in [0.9, 1.0, 1.1] {
            let small = {
                let s: f64 = (1..=20)
                    .map(|k| {
                        let k = (2 * k - 1) as f64;
                        (-(k * k) * std::f64::consts::PI.powi(2) / (8.0 * l * l)).exp()
                    })
                    .sum();
                1.0 - (2.0 * std::f64::consts::PI).sqrt() / l * s
            };
            let large: f64 = 2.0 * (1..=100).map(|k| {
                let t = (-2.0 * (k * k) as f64 * l * l).exp();
                if k % 2 == 1 { t } else { -t }
            }).sum::<f64>();
            assert!((small - large).abs() < 1e-12);
            assert!((kolmogorov_sf(l) - large).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_gaussian_cdf_matches_pdf_integral() {
        for (mu, lambda) in [(1.0, 1.0), (2.0, 0.5), (0.7, 30.0)] {
            let ig = InverseGaussian::new(mu, lambda).unwrap();
            for x in [0.2, 1.0, 3.0] {
                let q = integrate(|t: f64| ig.ln_pdf(t).exp(), 1e-12, x, 1e-13, 1e-12).unwrap();
                assert!((q.value - ig.cdf(x)).abs() < 1e-9, "{mu} {lambda} {x}");
            }
        }
        assert!(InverseGaussian::new(1.0, 1e4).unwrap().cdf(1.0).is_finite());
    }

    #[test]
    fn ess_and_rhat() {
        let mut rng = stream_rng(2, 0);
        let iid: Vec<f64> = (0..4000).map(|_| rng.gen()).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 3000.0 && ess < 5500.0, "{ess}");
        // AR(1) with φ = 0.9: ESS ≈ n (1−φ)/(1+φ)
        let mut x = 0.0;
        let ar: Vec<f64> = (0..40_000)
            .map(|_| {
                x = 0.9 * x + rng.gen::<f64>() - 0.5;
                x
            })
            .collect();
        let ess = effective_sample_size(&ar);
        assert!(ess > 1400.0 && ess < 2900.0, "{ess}");
        assert!((split_rhat(&[&iid]) - 1.0).abs() < 0.02);
        let drift: Vec<f64> = (0..1000).map(|k| k as f64).collect();
        assert!(split_rhat(&[&drift]) > 1.5);
    }
}
