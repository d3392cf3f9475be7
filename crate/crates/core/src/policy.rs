//! Gibbs policies `π(Z)(da|x) ∝ e^{Z(x,a)} μ(da)` on interior nodes and their KL divergences.

use ndarray::{Array2, Axis};

use crate::domain::ActionSpace;
use crate::error::{Error, Result};

/// Feature field `Z`: rows are interior nodes, columns action nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub values: Array2<f64>,
}

impl FeatureField {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n_nodes: usize, n_actions: usize) -> Self {
        Self { values: Array2::zeros((n_nodes, n_actions)) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Policy weights already include the μ quadrature weights, so every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub weights: Array2<f64>,
    /// `ln dπ/dμ`; `-inf` where the policy has no mass.
    pub log_density: Array2<f64>,
}

impl Policy {
    pub fn n_nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.weights.ncols()
    }

    /// The reference measure μ itself on every node.
    pub fn uniform(n_nodes: usize, actions: &ActionSpace) -> Self {
        gibbs_policy(&FeatureField::zeros(n_nodes, actions.len()), actions)
            .expect("zero feature is finite")
    }

    /// Deterministic policy putting unit mass on `selection[i]` at node `i`.
    pub fn one_hot(selection: &[usize], actions: &ActionSpace) -> Self {
        let n = selection.len();
        let m = actions.len();
        let mut weights = Array2::zeros((n, m));
        let mut log_density = Array2::from_elem((n, m), f64::NEG_INFINITY);
        for (i, &k) in selection.iter().enumerate() {
            weights[[i, k]] = 1.0;
            log_density[[i, k]] = -actions.mu_weights[k].ln();
        }
        Self { weights, log_density }
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row sums of the weights (each should be one).
    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.sum_axis(Axis(1)).to_vec()
    }
}

/// Gibbs mirror map, stabilized row-wise by the maximum feature.
pub fn gibbs_policy(z: &FeatureField, actions: &ActionSpace) -> Result<Policy> {
    let (n, m) = z.shape();
    if m != actions.len() {
        return Err(Error::ShapeMismatch(format!("feature has {m} columns, action space {}", actions.len())));
    }
    let mut weights = Array2::zeros((n, m));
    let mut log_density = Array2::zeros((n, m));
    for i in 0..n {
        let row = z.values.row(i);
        let mut zmax = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature { row: i, col: k });
            }
            zmax = zmax.max(v);
        }
        let mut total = 0.0;
        for k in 0..m {
            let e = actions.mu_weights[k] * (row[k] - zmax).exp();
            weights[[i, k]] = e;
            total += e;
        }
        let ln_total = total.ln();
        for k in 0..m {
            weights[[i, k]] /= total;
            log_density[[i, k]] = row[k] - zmax - ln_total;
        }
    }
    Ok(Policy { weights, log_density })
}

/// `KL(π|μ)` per interior node.
pub fn kl_to_reference(p: &Policy) -> Vec<f64> {
    p.weights
        .outer_iter()
        .zip(p.log_density.outer_iter())
        .map(|(w, l)| w.iter().zip(l).filter(|(w, _)| **w > 0.0).map(|(w, l)| w * l).sum())
        .collect()
}

/// `KL(p|q)` per interior node, from log-densities.
pub fn kl_between(p: &Policy, q: &Policy) -> Result<Vec<f64>> {
    if p.weights.dim() != q.weights.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.weights.dim(), q.weights.dim())));
    }
    let (n, m) = p.weights.dim();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..m {
            let pw = p.weights[[i, k]];
            if pw <= 0.0 {
                continue;
            }
            let qw = q.weights[[i, k]];
            if qw < 1e-300 {
                return Err(Error::DegeneratePolicy { row: i, col: k, weight: qw });
            }
            acc += pw * (p.log_density[[i, k]] - q.log_density[[i, k]]);
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn two() -> ActionSpace {
        ActionSpace::discrete(&[0.0, 1.0]).unwrap()
    }

    fn policy_from_weights(w: &[f64], actions: &ActionSpace) -> Policy {
        let z: Vec<f64> = w.iter().zip(&actions.mu_weights).map(|(p, mu)| (p / mu).ln()).collect();
        gibbs_policy(&FeatureField::new(Array2::from_shape_vec((1, w.len()), z).unwrap()), actions).unwrap()
    }

    #[test]
    fn constant_feature_gives_reference_measure() {
        let a = ActionSpace::discrete(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = gibbs_policy(&FeatureField::new(Array2::from_elem((2, 4), 3.7)), &a).unwrap();
        for w in p.weights.iter() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_example() {
        let z = FeatureField::new(array![[0.0, 3f64.ln()]]);
        let p = gibbs_policy(&z, &two()).unwrap();
        assert!((p.weights[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((p.weights[[0, 1]] - 0.75).abs() < 1e-15);
        let shifted = FeatureField::new(array![[10.0, 10.0 + 3f64.ln()]]);
        let q = gibbs_policy(&shifted, &two()).unwrap();
        assert!((&p.weights - &q.weights).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn rejects_non_finite() {
        let z = FeatureField::new(array![[0.0, f64::NAN]]);
        assert_eq!(gibbs_policy(&z, &two()), Err(Error::NonFiniteFeature { row: 0, col: 1 }));
    }

    #[test]
    fn kl_examples() {
        let a = two();
        assert!(kl_to_reference(&Policy::uniform(3, &a)).iter().all(|v| v.abs() < 1e-16));
        let p = policy_from_weights(&[0.8, 0.2], &a);
        assert!((kl_to_reference(&p)[0] - 0.192_744_757_021_757_5).abs() < 1e-12);
        let eps = 1e-12;
        let p = policy_from_weights(&[1.0 - eps, eps], &a);
        assert!((kl_to_reference(&p)[0] - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_between_examples() {
        let a = two();
        let p = policy_from_weights(&[0.25, 0.75], &a);
        let q = policy_from_weights(&[0.5, 0.5], &a);
        assert!(kl_between(&p, &p).unwrap()[0].abs() < 1e-16);
        assert!((kl_between(&p, &q).unwrap()[0] - 0.130_812_035_941_137_0).abs() < 1e-12);
        assert!((kl_between(&q, &p).unwrap()[0] - 0.143_841_036_225_890_5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_reference_is_reported() {
        let a = two();
        let p = Policy::uniform(1, &a);
        let q = Policy::one_hot(&[0], &a);
        assert!(matches!(kl_between(&p, &q), Err(Error::DegeneratePolicy { col: 1, .. })));
        // the reverse direction is finite: ln 2
        assert!((kl_between(&q, &p).unwrap()[0] - 2f64.ln()).abs() < 1e-15);
    }

    fn feature_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (1usize..6).prop_flat_map(|m| (prop::collection::vec(-30.0f64..30.0, 3 * m), Just(m)))
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_shift_invariant((z, m) in feature_strategy(), c in -100.0f64..100.0) {
            let a = ActionSpace::discrete(&(0..m).map(|k| k as f64).collect::<Vec<_>>()).unwrap();
            let zf = FeatureField::new(Array2::from_shape_vec((3, m), z).unwrap());
            let p = gibbs_policy(&zf, &a).unwrap();
            for s in p.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
            for (w, l) in p.weights.outer_iter().zip(p.log_density.outer_iter()) {
                let _ = w;
                let s: f64 = l.iter().zip(&a.mu_weights).map(|(l, mu)| mu * l.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-8);
            }
            let shifted = FeatureField::new(&zf.values + c);
            let q = gibbs_policy(&shifted, &a).unwrap();
            for (x, y) in p.weights.iter().zip(q.weights.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_and_consistent((z1, m) in feature_strategy(), seed in prop::collection::vec(-30.0f64..30.0, 15)) {
            let a = ActionSpace::interval(-1.0, 2.0, m.max(2)).unwrap();
            let m = a.len();
            let z1: Vec<f64> = z1.into_iter().chain(std::iter::repeat(0.5)).take(3 * m).collect();
            let z2: Vec<f64> = seed.into_iter().chain(std::iter::repeat(-0.25)).take(3 * m).collect();
            let p = gibbs_policy(&FeatureField::new(Array2::from_shape_vec((3, m), z1).unwrap()), &a).unwrap();
            let q = gibbs_policy(&FeatureField::new(Array2::from_shape_vec((3, m), z2).unwrap()), &a).unwrap();
            for v in kl_to_reference(&p) { prop_assert!(v >= -1e-12); }
            for v in kl_between(&p, &q).unwrap() { prop_assert!(v >= -1e-12); }
            let mu = gibbs_policy(&FeatureField::zeros(3, m), &a).unwrap();
            let lhs = kl_between(&p, &mu).unwrap();
            let rhs = kl_to_reference(&p);
            for (x, y) in lhs.iter().zip(&rhs) { prop_assert!((x - y).abs() < 1e-12); }
        }
    }
}
