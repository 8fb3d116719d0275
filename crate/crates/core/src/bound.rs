//! Spectral perturbation bound for subspace alignment and the eigen-gap
//! based choice of subspace dimension.
//!
//! For a sample covariance estimated from `n` vectors of norm at most `B`,
//! the deviation of the leading `d'` projector is controlled by
//! `E(δ) / (λ_d' - λ_d'+1)` with probability `1 - δ`. Summing the two
//! domains gives the error index `e(d')` and the alignment bound
//! `2√2 E(δ) e(d')`.

use rand::Rng;

use crate::data::rng_from_seed;
use crate::error::{Error, Result};
use crate::numerics::{covariance, sym_eig, Matrix};

/// Eigenvalues below this fraction of the largest one count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Eigenvalues of both domain covariances together with the constants of
/// the concentration bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPair {
    pub lambdas_s: Vec<f64>,
    pub lambdas_t: Vec<f64>,
    pub n: usize,
    pub b: f64,
    pub delta: f64,
}

fn check_spectrum(l: &[f64], name: &str) -> Result<Vec<f64>> {
    let top = l.first().copied().unwrap_or(0.0).max(0.0);
    let tol = 1e-10 * top.max(1.0);
    if l.iter().any(|v| !v.is_finite() || *v < -tol) {
        return Err(Error::Config(format!(
            "{name} eigenvalues must be finite and non-negative"
        )));
    }
    if l.windows(2).any(|w| w[1] > w[0] + tol) {
        return Err(Error::Config(format!("{name} eigenvalues must be descending")));
    }
    Ok(l.iter().map(|v| v.max(0.0)).collect())
}

impl SpectrumPair {
    pub fn new(lambdas_s: Vec<f64>, lambdas_t: Vec<f64>, n: usize, b: f64, delta: f64) -> Result<Self> {
        Ok(SpectrumPair {
            lambdas_s: check_spectrum(&lambdas_s, "source")?,
            lambdas_t: check_spectrum(&lambdas_t, "target")?,
            n,
            b,
            delta,
        })
    }

    pub fn from_covariances(c_s: &Matrix, c_t: &Matrix, n: usize, b: f64, delta: f64) -> Result<Self> {
        SpectrumPair::new(sym_eig(c_s)?.values, sym_eig(c_t)?.values, n, b, delta)
    }

    pub fn gap_s(&self, d_prime: usize) -> f64 {
        spectral_gap(&self.lambdas_s, d_prime)
    }

    pub fn gap_t(&self, d_prime: usize) -> f64 {
        spectral_gap(&self.lambdas_t, d_prime)
    }
}

/// `λ_d' - λ_d'+1` (1-based) with eigenvalues past the list or below the
/// rank tolerance read as zero.
pub fn spectral_gap(lambdas: &[f64], d_prime: usize) -> f64 {
    let top = lambdas.first().copied().unwrap_or(0.0);
    let at = |i: usize| match lambdas.get(i) {
        Some(&v) if v >= RANK_TOL * top => v,
        _ => 0.0,
    };
    if d_prime == 0 {
        return 0.0;
    }
    at(d_prime - 1) - at(d_prime)
}

/// `E(δ) = (4B/√n)(1 + √(ln(1/δ)/2))`.
pub fn e_delta(b: f64, n: usize, delta: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) || n == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!(
            "need B > 0, n >= 1 and 0 < delta < 1 (got B={b}, n={n}, delta={delta})"
        )));
    }
    Ok(4.0 * b / (n as f64).sqrt() * (1.0 + ((1.0 / delta).ln() / 2.0).sqrt()))
}

/// Smallest `n` for which the concentration bound applies at eigen-gap
/// `gap`: `(4B/gap (1 + √(ln(1/δ)/2)))²`.
pub fn sample_size_threshold(b: f64, delta: f64, gap: f64) -> Result<f64> {
    if !(gap > 0.0) {
        return Err(Error::DegenerateSpectrum {
            gap,
            d_prime: 0,
            tol: 0.0,
        });
    }
    let root = e_delta(b, 1, delta)? / gap;
    Ok(root * root)
}

/// `e(d') = √d'/gap_s + √d'/gap_t`; infinite when either gap vanishes.
pub fn error_index(pair: &SpectrumPair, d_prime: usize) -> f64 {
    let (gs, gt) = (pair.gap_s(d_prime), pair.gap_t(d_prime));
    if !(gs > 0.0 && gt > 0.0) {
        return f64::INFINITY;
    }
    let r = (d_prime as f64).sqrt();
    r / gs + r / gt
}

/// `2√2 E(δ) e(d')`, an upper bound on the change of the alignment distance
/// caused by estimating both covariances from `n` samples.
pub fn bound_value(pair: &SpectrumPair, d_prime: usize) -> Result<f64> {
    let e = error_index(pair, d_prime);
    if !e.is_finite() {
        return Err(Error::DegenerateSpectrum {
            gap: pair.gap_s(d_prime).min(pair.gap_t(d_prime)),
            d_prime,
            tol: 0.0,
        });
    }
    Ok(2.0 * 2f64.sqrt() * e_delta(pair.b, pair.n, pair.delta)? * e)
}

/// Largest column norm, the tightest admissible `B`.
pub fn max_column_norm(x: &Matrix) -> f64 {
    (0..x.cols())
        .map(|j| crate::numerics::norm(x.col(j)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub d_prime: usize,
    pub mean_error_index: f64,
    pub mean_gap_s: f64,
    pub mean_gap_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub d_prime: usize,
    pub curve: Vec<CurvePoint>,
}

impl Recommendation {
    pub fn point(&self, d_prime: usize) -> Option<&CurvePoint> {
        self.curve.iter().find(|p| p.d_prime == d_prime)
    }

    /// `d_prime,mean_error_index,mean_gap_s,mean_gap_t`, `inf` for a
    /// vanishing gap.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_prime,mean_error_index,mean_gap_s,mean_gap_t\n");
        for p in &self.curve {
            let e = if p.mean_error_index.is_finite() {
                crate::fmt_f64(p.mean_error_index)
            } else {
                "inf".into()
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.d_prime,
                e,
                crate::fmt_f64(p.mean_gap_s),
                crate::fmt_f64(p.mean_gap_t)
            ));
        }
        out
    }
}

/// Eigenvalues of the covariance of a random `batch_size` subset of columns.
pub fn batch_spectrum<R: Rng>(features: &Matrix, batch_size: usize, rng: &mut R) -> Result<Vec<f64>> {
    let idx = rand::seq::index::sample(rng, features.cols(), batch_size).into_vec();
    let values = sym_eig(&covariance(&features.select_columns(&idx)?)?)?.values;
    check_spectrum(&values, "batch")
}

/// Averages `e(d')` over `trials` random batch pairs for every
/// `d' in 1..batch_size` and returns the minimiser (ties go to the larger
/// `d'`). Trial `t` draws from a generator seeded with `seed + t`.
pub fn recommend_dprime(
    features_s: &Matrix,
    features_t: &Matrix,
    batch_size: usize,
    trials: usize,
    seed: u64,
) -> Result<Recommendation> {
    if batch_size < 3 {
        return Err(Error::Config(format!(
            "batch size must be at least 3, got {batch_size}"
        )));
    }
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    for (name, f) in [("source", features_s), ("target", features_t)] {
        if f.cols() < batch_size {
            return Err(Error::Data(format!(
                "{name} features have {} samples, fewer than the batch size {batch_size}",
                f.cols()
            )));
        }
    }
    let max_d = batch_size - 1;
    let mut sum_e = vec![0.0; max_d];
    let mut sum_gs = vec![0.0; max_d];
    let mut sum_gt = vec![0.0; max_d];
    for t in 0..trials {
        let mut rng = rng_from_seed(seed.wrapping_add(t as u64));
        let ls = batch_spectrum(features_s, batch_size, &mut rng)?;
        let lt = batch_spectrum(features_t, batch_size, &mut rng)?;
        let pair = SpectrumPair {
            lambdas_s: ls,
            lambdas_t: lt,
            n: batch_size,
            b: 1.0,
            delta: 0.5,
        };
        for d in 1..=max_d {
            sum_e[d - 1] += error_index(&pair, d);
            sum_gs[d - 1] += pair.gap_s(d);
            sum_gt[d - 1] += pair.gap_t(d);
        }
    }
    let k = trials as f64;
    let curve: Vec<CurvePoint> = (1..=max_d)
        .map(|d| CurvePoint {
            d_prime: d,
            mean_error_index: sum_e[d - 1] / k,
            mean_gap_s: sum_gs[d - 1] / k,
            mean_gap_t: sum_gt[d - 1] / k,
        })
        .collect();
    let best = pick_dprime(&curve)?;
    Ok(Recommendation { d_prime: best, curve })
}

/// Argmin of the finite part of the curve; ties go to the larger `d'`.
fn pick_dprime(curve: &[CurvePoint]) -> Result<usize> {
    curve
        .iter()
        .filter(|p| p.mean_error_index.is_finite())
        .fold(None::<&CurvePoint>, |best, p| match best {
            Some(b) if b.mean_error_index < p.mean_error_index => Some(b),
            _ => Some(p),
        })
        .map(|p| p.d_prime)
        .ok_or_else(|| Error::Data("every candidate d' has a vanishing eigen-gap".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn e_delta_examples() {
        let e = e_delta(1.0, 16, (-1f64).exp()).unwrap();
        assert!(close(e, 1.0 + 0.5f64.sqrt(), 1e-12), "{e}");
        assert!(close(e_delta(2.0, 9, 1.0 - 1e-15).unwrap(), 8.0 / 3.0, 1e-6));
        let a = e_delta(1.3, 25, 0.05).unwrap();
        let b = e_delta(1.3, 100, 0.05).unwrap();
        assert!(close(a / b, 2.0, 1e-12));
        for (b, n, d) in [(0.0, 1, 0.5), (1.0, 0, 0.5), (1.0, 1, 0.0), (1.0, 1, 1.0)] {
            assert!(matches!(e_delta(b, n, d), Err(Error::Config(_))));
        }
    }

    #[test]
    fn threshold_examples() {
        let t = sample_size_threshold(1.0, (-1f64).exp(), 1.0).unwrap();
        assert!(close(t, 46.627, 1e-4), "{t}");
        let t2 = sample_size_threshold(1.0, (-1f64).exp(), 2.0).unwrap();
        assert!(close(t / t2, 4.0, 1e-12));
        for gap in [0.1, 0.7, 3.0] {
            let v = sample_size_threshold(2.0, 0.1, gap).unwrap() * gap * gap;
            assert!(close(v, sample_size_threshold(2.0, 0.1, 1.0).unwrap(), 1e-12));
        }
        assert!(matches!(
            sample_size_threshold(1.0, 0.5, 0.0),
            Err(Error::DegenerateSpectrum { .. })
        ));
    }

    #[test]
    fn error_index_examples() {
        let pair = SpectrumPair::new(vec![4.0, 2.0, 1.0], vec![4.0, 2.0, 1.0], 10, 1.0, 0.5).unwrap();
        assert!(close(error_index(&pair, 1), 1.0, 1e-15));
        let single = 2f64.sqrt() / 1.0;
        assert!(close(error_index(&pair, 2), 2.0 * single, 1e-15));
        // The last eigenvalue is followed by an implicit zero.
        assert!(close(error_index(&pair, 3), 2.0 * 3f64.sqrt(), 1e-15));
        assert!(error_index(&pair, 4).is_infinite());
    }

    #[test]
    fn error_index_matches_definition_on_sampled_covariances() {
        let mut rng = rng_from_seed(4);
        let x = Matrix::from_fn(6, 40, |_, _| rng.random::<f64>() - 0.5);
        let y = Matrix::from_fn(6, 40, |i, _| (i as f64 + 1.0) * (rng.random::<f64>() - 0.5));
        let pair =
            SpectrumPair::from_covariances(&covariance(&x).unwrap(), &covariance(&y).unwrap(), 40, 1.0, 0.1).unwrap();
        for d in 1..6 {
            let ls = &pair.lambdas_s;
            let lt = &pair.lambdas_t;
            let oracle = (d as f64).sqrt() / (ls[d - 1] - ls[d]) + (d as f64).sqrt() / (lt[d - 1] - lt[d]);
            assert!(close(error_index(&pair, d), oracle, 1e-12));
        }
    }

    #[test]
    fn error_index_blows_up_as_gap_closes() {
        let mut last = 0.0;
        for k in 1..12 {
            let gap = 10f64.powi(-k);
            let pair = SpectrumPair::new(vec![3.0, 1.0 + gap, 1.0], vec![3.0, 2.0, 1.0], 5, 1.0, 0.5).unwrap();
            let e = error_index(&pair, 2);
            assert!(e > last);
            last = e;
        }
        let flat = SpectrumPair::new(vec![3.0, 1.0, 1.0], vec![3.0, 2.0, 1.0], 5, 1.0, 0.5).unwrap();
        assert!(error_index(&flat, 2).is_infinite());
        assert!(bound_value(&flat, 2).is_err());
    }

    #[test]
    fn rank_boundary_clamps_tiny_eigenvalues() {
        let l = [5.0, 2.0, 1e-12, 1e-13];
        assert_eq!(spectral_gap(&l, 2), 2.0);
        assert_eq!(spectral_gap(&l, 3), 0.0);
    }

    #[test]
    fn bound_value_examples() {
        // n = 16, B = 1/(1+√½) makes E(1/e) exactly 1; e(1) = 1 for [4,2,1].
        let b = 1.0 / (1.0 + 0.5f64.sqrt());
        let pair = SpectrumPair::new(vec![4.0, 2.0, 1.0], vec![4.0, 2.0, 1.0], 16, b, (-1f64).exp()).unwrap();
        assert!(close(bound_value(&pair, 1).unwrap(), 2.8284271247461903, 1e-12));
        let doubled = SpectrumPair {
            b: 2.0 * b,
            ..pair.clone()
        };
        assert!(close(
            bound_value(&doubled, 1).unwrap(),
            2.0 * bound_value(&pair, 1).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn spectrum_validation() {
        assert!(SpectrumPair::new(vec![1.0, 2.0], vec![1.0], 1, 1.0, 0.5).is_err());
        assert!(SpectrumPair::new(vec![1.0, -0.5], vec![1.0], 1, 1.0, 0.5).is_err());
        let p = SpectrumPair::new(vec![1.0, -1e-14], vec![1.0], 1, 1.0, 0.5).unwrap();
        assert_eq!(p.lambdas_s[1], 0.0);
    }

    fn gaussian(dim: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_fn(dim, n, |i, _| {
            let s: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            s * (1.0 + i as f64).sqrt()
        })
    }

    #[test]
    fn single_trial_is_reproducible() {
        let xs = gaussian(8, 50, 1);
        let xt = gaussian(8, 50, 2);
        let a = recommend_dprime(&xs, &xt, 6, 1, 11).unwrap();
        let b = recommend_dprime(&xs, &xt, 6, 1, 11).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.curve.len(), 5);
        assert!(a
            .to_csv()
            .starts_with("d_prime,mean_error_index,mean_gap_s,mean_gap_t\n1,"));
    }

    #[test]
    fn planted_gap_is_recovered() {
        // Whole-set batches make every trial see the planted spectrum.
        let spectrum = [10.0, 9.9, 9.8, 0.5, 0.45, 0.4, 0.35];
        let xs = crate::data::gen_planted_spectrum(10, &spectrum, 1).unwrap();
        let xt = crate::data::gen_planted_spectrum(10, &spectrum, 2).unwrap();
        let rec = recommend_dprime(&xs, &xt, 8, 5, 0).unwrap();
        assert_eq!(rec.d_prime, 3);
        let p = rec.point(3).unwrap();
        assert!(close(p.mean_gap_s, 9.3, 1e-9));
        assert!(close(p.mean_error_index, 2.0 * 3f64.sqrt() / 9.3, 1e-9));
    }

    #[test]
    fn ties_prefer_larger_dprime() {
        let point = |d, e| CurvePoint {
            d_prime: d,
            mean_error_index: e,
            mean_gap_s: 1.0,
            mean_gap_t: 1.0,
        };
        let curve = [point(1, 2.0), point(2, f64::INFINITY), point(3, 2.0), point(4, 5.0)];
        assert_eq!(pick_dprime(&curve).unwrap(), 3);
        assert!(pick_dprime(&[point(1, f64::INFINITY)]).is_err());
    }

    #[test]
    fn insufficient_samples() {
        let xs = gaussian(4, 5, 0);
        assert!(matches!(recommend_dprime(&xs, &xs, 6, 2, 0), Err(Error::Data(_))));
        assert!(matches!(recommend_dprime(&xs, &xs, 2, 2, 0), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn curve_is_symmetric_in_domains(seed in 0u64..1000) {
            let xs = gaussian(5, 12, seed);
            let xt = gaussian(5, 12, seed + 1);
            // With whole-set batches the draws do not depend on order.
            let a = recommend_dprime(&xs, &xt, 12, 1, seed).unwrap();
            let b = recommend_dprime(&xt, &xs, 12, 1, seed).unwrap();
            for (p, q) in a.curve.iter().zip(&b.curve) {
                prop_assert!(p.mean_error_index == q.mean_error_index
                    || (p.mean_error_index - q.mean_error_index).abs() < 1e-9 * p.mean_error_index.abs());
                prop_assert!((p.mean_gap_s - q.mean_gap_t).abs() < 1e-12);
            }
        }
    }
}
