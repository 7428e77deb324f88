//! Vector math, simplex geometry and numerical checking shared by every
//! other module. Everything here is a pure function of its inputs.

use std::ops::Deref;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σw − 1|` accepted by [`WeightVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Flat real-valued model parameter vector. Always non-empty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("parameter vector must have dim >= 1"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "parameter vector must have dim >= 1");
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        ParamVector::new(self.0.iter().map(|c| c * s).collect())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                index: 1,
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ParamVector::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Vec<f64> {
        p.0
    }
}

/// A point on the probability simplex: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weight vector"));
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0) {
            return Err(Error::invalid(format!("negative weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector(weights))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyCohort);
        }
        Ok(WeightVector(vec![1.0 / k as f64; k]))
    }

    /// Normalizes non-negative finite mass into a weight vector.
    pub(crate) fn from_mass(mut mass: Vec<f64>) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::NonFinite("weight normalization"));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        WeightVector::new(mass)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Vec<f64> {
        w.0
    }
}

/// Seeded generator used for every random draw in the crate.
///
/// The stream is ChaCha8 (`rand_chacha`), a counter-based generator whose
/// output is fixed by the seed alone on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Mixes a base seed with a path of stream identifiers (round, client, ...)
/// into an independent child seed. SplitMix64 finalizer per component.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// `w_k = exp(−α·v_k) / Σ_j exp(−α·v_j)`, evaluated relative to the
/// smallest value so that no exponent is positive.
pub fn softmax_neg(values: &[f64], alpha: f64) -> Result<WeightVector> {
    if values.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteErrorMetric);
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mass: Vec<f64> = values.iter().map(|v| (-alpha * (v - min)).exp()).collect();
    WeightVector::from_mass(mass)
}

/// Euclidean projection onto the probability simplex by sorting and
/// thresholding.
pub fn project_simplex(point: &[f64]) -> Result<WeightVector> {
    if point.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("simplex projection input"));
    }
    let mut sorted = point.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (j, u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            threshold = t;
        }
    }
    let projected: Vec<f64> = point.iter().map(|v| (v - threshold).max(0.0)).collect();
    // renormalize away the last ulps of the cumulative sum
    WeightVector::from_mass(projected)
}

/// Coordinate-wise `Σ_k w_k·θ_k`.
pub fn weighted_sum(vectors: &[ParamVector], w: &WeightVector) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if vectors.len() != w.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            expected: vectors.len(),
            found: w.len(),
        });
    }
    let dim = vectors[0].dim();
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            index,
            expected: dim,
            found: v.dim(),
        });
    }
    let mut out = vec![0.0; dim];
    for (v, &wk) in vectors.iter().zip(w.iter()) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += wk * x;
        }
    }
    ParamVector::new(out)
}

/// Central-difference gradient `(f(x+h·e_i) − f(x−h·e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

pub(crate) fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn assert_simplex(w: &WeightVector) {
        assert!(w.iter().all(|x| *x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
    }

    #[test]
    fn softmax_equal_values_uniform() {
        let w = softmax_neg(&[1.0, 1.0, 1.0], 2.0).unwrap();
        for x in w.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_zero_alpha_uniform() {
        let w = softmax_neg(&[0.1, 0.5], 0.0).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // 40-digit evaluation of exp(-0.1)/(exp(-0.1)+exp(-0.5))
        let w = softmax_neg(&[0.1, 0.5], 1.0).unwrap();
        assert_abs_diff_eq!(w[0], 0.598_687_660_112_452, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.401_312_339_887_548, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0], 0.598688, epsilon = 1e-6);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(softmax_neg(&[], 1.0), Err(Error::EmptyCohort));
        assert_eq!(
            softmax_neg(&[0.1, f64::NAN], 1.0),
            Err(Error::NonFiniteErrorMetric)
        );
        assert_eq!(Error::NonFiniteErrorMetric.to_string(), "non-finite error metric");
        assert_eq!(Error::EmptyCohort.to_string(), "empty cohort");
    }

    #[test]
    fn softmax_no_overflow_for_large_alpha() {
        let w = softmax_neg(&[1e3, 0.0, 2e3], 1e6).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sharpness_monotone_and_sharp_limit() {
        let v = [0.3, 0.1, 0.7, 0.2];
        let mut last = 0.0;
        for i in 0..=200 {
            let alpha = i as f64 * 5.0;
            let w = softmax_neg(&v, alpha).unwrap();
            assert!(w[1] + 1e-15 >= last);
            last = w[1];
        }
        assert!(softmax_neg(&v, 1e3).unwrap()[1] > 0.99);
    }

    /// Dense grid search over the 2-simplex for the Euclidean-nearest point.
    fn grid_project_2(p: [f64; 2]) -> [f64; 2] {
        let steps = 1_000_000;
        (0..=steps)
            .map(|i| {
                let a = i as f64 / steps as f64;
                [a, 1.0 - a]
            })
            .min_by(|x, y| {
                let dx = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                let dy = (y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2);
                dx.total_cmp(&dy)
            })
            .unwrap()
    }

    /// Grid search over the 3-simplex.
    fn grid_project_3(p: [f64; 3]) -> [f64; 3] {
        let steps = 2000;
        let mut best = [0.0; 3];
        let mut best_d = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let q = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                let d: f64 = q.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = q;
                }
            }
        }
        best
    }

    #[test]
    fn project_examples() {
        let w = project_simplex(&[0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(w[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.7, epsilon = 1e-15);
        assert_eq!(project_simplex(&[0.8, 0.8]).unwrap().as_slice(), &[0.5, 0.5]);

        let oracle = grid_project_2([1.2, -0.1]);
        assert_eq!(oracle, [1.0, 0.0]);
        let w = project_simplex(&[1.2, -0.1]).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn project_matches_grid_oracle_on_small_k() {
        let mut rng = Rng::new(11);
        use rand::Rng as _;
        for _ in 0..5 {
            let p = [
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..2.0),
            ];
            let o = grid_project_2(p);
            let w = project_simplex(&p).unwrap();
            for i in 0..2 {
                assert_abs_diff_eq!(w[i], o[i], epsilon = 1e-6);
            }
        }
        // grid of spacing 1/2000 bounds the 3-simplex oracle error at ~5e-4
        for _ in 0..3 {
            let p = [
                rng.random_range(-0.5..1.5),
                rng.random_range(-0.5..1.5),
                rng.random_range(-0.5..1.5),
            ];
            let o = grid_project_3(p);
            let w = project_simplex(&p).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(w[i], o[i], epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn project_rejects_non_finite() {
        assert!(project_simplex(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn weighted_sum_examples() {
        let p = |v: &[f64]| ParamVector::new(v.to_vec()).unwrap();
        let w1 = WeightVector::new(vec![1.0]).unwrap();
        assert_eq!(weighted_sum(&[p(&[2.0, -3.0])], &w1).unwrap(), p(&[2.0, -3.0]));

        let half = WeightVector::uniform(2).unwrap();
        assert_eq!(
            weighted_sum(&[p(&[1.0, 2.0]), p(&[-1.0, -2.0])], &half).unwrap(),
            p(&[0.0, 0.0])
        );

        let w = WeightVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(
            weighted_sum(&[p(&[4.0, 0.0]), p(&[0.0, 4.0])], &w).unwrap(),
            p(&[1.0, 3.0])
        );
    }

    #[test]
    fn weighted_sum_dimension_mismatch_names_index() {
        let w = WeightVector::uniform(3).unwrap();
        let vs = vec![
            ParamVector::zeros(2),
            ParamVector::zeros(2),
            ParamVector::zeros(3),
        ];
        match weighted_sum(&vs, &w) {
            Err(Error::DimensionMismatch { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-6);

        let g = finite_diff_grad(|_| 4.2, &[1.0, -7.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-9));

        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 5.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        assert!(finite_diff_grad(|x| 1.0 / x[0], &[0.0], 1e-3).is_ok());
        assert!(finite_diff_grad(|x| (x[0] - 1e-3).ln(), &[0.0], 1e-3).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<u64> = (0..8).map(|_| rand::RngCore::next_u64(&mut a)).collect();
        let ys: Vec<u64> = (0..8).map(|_| rand::RngCore::next_u64(&mut b)).collect();
        assert_eq!(xs, ys);
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
    }

    proptest! {
        #[test]
        fn softmax_is_on_simplex(
            v in prop::collection::vec(-50.0f64..50.0, 1..=64),
            alpha in 0.0f64..=100.0,
        ) {
            let w = softmax_neg(&v, alpha).unwrap();
            assert_simplex(&w);
        }

        #[test]
        fn softmax_shift_invariant(
            v in prop::collection::vec(-5.0f64..5.0, 1..=32),
            alpha in 0.0f64..=100.0,
            c in -10.0f64..10.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax_neg(&v, alpha).unwrap();
            let b = softmax_neg(&shifted, alpha).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn projection_idempotent(p in prop::collection::vec(-3.0f64..3.0, 1..=20)) {
            let w = project_simplex(&p).unwrap();
            assert_simplex(&w);
            let again = project_simplex(&w).unwrap();
            for (x, y) in w.iter().zip(again.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn weighted_sum_is_linear(
            raw in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..=6),
            s in -4.0f64..4.0,
        ) {
            let vs: Vec<ParamVector> = raw.iter().map(|v| ParamVector::new(v.clone()).unwrap()).collect();
            let w = softmax_neg(&(0..vs.len()).map(|i| i as f64 * 0.3).collect::<Vec<_>>(), 1.0).unwrap();
            let lhs = weighted_sum(&vs, &w).unwrap().scaled(s).unwrap();
            let scaled: Vec<ParamVector> = vs.iter().map(|v| v.scaled(s).unwrap()).collect();
            let rhs = weighted_sum(&scaled, &w).unwrap();
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
