//! Per-client meta-features and the composite error that drives weighting.

use serde::{Deserialize, Serialize};

use crate::datagen::{label_distribution, ClientDataset};
use crate::error::{Error, Result};
use crate::models::{local_loss, train_local, ModelSpec, TrainConfig};
use crate::numerics::{entropy, ParamVector};

/// Number of fields in [`MetaFeatures`], and so of composite-error coefficients.
pub const NUM_META_FEATURES: usize = 5;

/// Relative learning-rate perturbation used by the sensitivity probe.
pub const LR_PERTURBATION: f64 = 0.5;

/// `X_k`: descriptors of one client's data and update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatures {
    pub dataset_size: usize,
    /// Entropy of the training label distribution, nats.
    pub label_entropy: f64,
    /// `‖θ_k − θ_prev‖₂`.
    pub update_norm: f64,
    /// Validation loss of a one-epoch linear probe trained from zero.
    pub data_complexity: f64,
    /// Validation-loss change per relative learning-rate change.
    pub lr_sensitivity: f64,
}

impl MetaFeatures {
    /// Field values in declaration order.
    pub fn to_array(&self) -> [f64; NUM_META_FEATURES] {
        [
            self.dataset_size as f64,
            self.label_entropy,
            self.update_norm,
            self.data_complexity,
            self.lr_sensitivity,
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("meta-features"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeErrorConfig {
    /// One coefficient per [`MetaFeatures`] field, in declaration order.
    #[serde(default = "zero_coefficients")]
    pub coefficients: Vec<f64>,
    #[serde(default = "default_normalize")]
    pub normalize: bool,
}

fn zero_coefficients() -> Vec<f64> {
    vec![0.0; NUM_META_FEATURES]
}

fn default_normalize() -> bool {
    true
}

impl Default for CompositeErrorConfig {
    fn default() -> Self {
        CompositeErrorConfig {
            coefficients: zero_coefficients(),
            normalize: true,
        }
    }
}

impl CompositeErrorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != NUM_META_FEATURES {
            return Err(Error::invalid(format!(
                "meta.c.coefficients needs {NUM_META_FEATURES} entries, got {}",
                self.coefficients.len()
            )));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("meta.c.coefficients"));
        }
        Ok(())
    }
}

pub fn extract(
    spec: &ModelSpec,
    theta_prev: &ParamVector,
    theta_k: &ParamVector,
    train: &ClientDataset,
    val: &ClientDataset,
    cfg: &TrainConfig,
) -> Result<MetaFeatures> {
    if val.is_empty() || train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let update_norm = theta_k.distance(theta_prev)?;

    let probe_spec = ModelSpec::linear(spec.input_dim, spec.num_classes);
    let one_epoch = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    let probe = train_local(
        &probe_spec,
        &ParamVector::zeros(probe_spec.num_params()),
        train,
        &one_epoch,
    )?;
    let data_complexity = local_loss(&probe_spec, &probe, val)?;

    let base = train_local(spec, theta_k, train, &one_epoch)?;
    let perturbed_cfg = TrainConfig {
        learning_rate: cfg.learning_rate * (1.0 + LR_PERTURBATION),
        ..one_epoch
    };
    let perturbed = train_local(spec, theta_k, train, &perturbed_cfg)?;
    let lr_sensitivity =
        (local_loss(spec, &perturbed, val)? - local_loss(spec, &base, val)?).abs() / LR_PERTURBATION;

    let features = MetaFeatures {
        dataset_size: train.len(),
        label_entropy: entropy(&label_distribution(train, train.num_classes())),
        update_norm,
        data_complexity,
        lr_sensitivity,
    };
    features.validate()?;
    Ok(features)
}

/// Feature rows of the cohort, min-max scaled per column when `normalize`
/// is set. A constant column scales to 0.
pub fn scaled_features(
    cohort: &[MetaFeatures],
    normalize: bool,
) -> Vec<[f64; NUM_META_FEATURES]> {
    let rows: Vec<[f64; NUM_META_FEATURES]> = cohort.iter().map(MetaFeatures::to_array).collect();
    if !normalize {
        return rows;
    }
    let mut lo = [f64::INFINITY; NUM_META_FEATURES];
    let mut hi = [f64::NEG_INFINITY; NUM_META_FEATURES];
    for row in &rows {
        for j in 0..NUM_META_FEATURES {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    rows.iter()
        .map(|row| {
            let mut out = [0.0; NUM_META_FEATURES];
            for j in 0..NUM_META_FEATURES {
                let range = hi[j] - lo[j];
                out[j] = if range > 0.0 { (row[j] - lo[j]) / range } else { 0.0 };
            }
            out
        })
        .collect()
}

/// `E_k = L_k + Σ_j c_j·x̃_{k,j}` for one member `x` of `cohort`.
pub fn composite_error(
    loss_k: f64,
    x: &MetaFeatures,
    cohort: &[MetaFeatures],
    cfg: &CompositeErrorConfig,
) -> Result<f64> {
    let position = cohort
        .iter()
        .position(|m| m == x)
        .ok_or_else(|| Error::invalid("meta-features not part of the cohort"))?;
    let losses: Vec<f64> = cohort
        .iter()
        .enumerate()
        .map(|(i, _)| if i == position { loss_k } else { 0.0 })
        .collect();
    Ok(composite_errors(&losses, cohort, cfg)?[position])
}

/// Composite errors for a whole cohort, `losses[k]` pairing with `cohort[k]`.
pub fn composite_errors(
    losses: &[f64],
    cohort: &[MetaFeatures],
    cfg: &CompositeErrorConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if losses.len() != cohort.len() {
        return Err(Error::LengthMismatch {
            what: "losses",
            expected: cohort.len(),
            found: losses.len(),
        });
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteErrorMetric);
    }
    for m in cohort {
        m.validate()?;
    }
    let scaled = scaled_features(cohort, cfg.normalize);
    let errors: Vec<f64> = losses
        .iter()
        .zip(&scaled)
        .map(|(loss, row)| {
            loss + cfg
                .coefficients
                .iter()
                .zip(row)
                .map(|(c, x)| c * x)
                .sum::<f64>()
        })
        .collect();
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteErrorMetric);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_blobs;
    use crate::models::init_params;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn mf(size: usize, entropy: f64, norm: f64) -> MetaFeatures {
        MetaFeatures {
            dataset_size: size,
            label_entropy: entropy,
            update_norm: norm,
            data_complexity: 0.5,
            lr_sensitivity: 0.1,
        }
    }

    fn with_labels(labels: Vec<usize>) -> ClientDataset {
        let n = labels.len();
        let features = (0..n).map(|i| i as f64 * 0.1).collect();
        ClientDataset::new(features, labels, 1, 2).unwrap()
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 4,
            l2: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn extract_basic_fields() {
        let spec = ModelSpec::linear(1, 2);
        let theta = init_params(&spec, 3);
        let train = with_labels((0..40).map(|i| i % 2).collect());
        let val = with_labels(vec![0, 1, 1, 0]);
        let m = extract(&spec, &theta, &theta, &train, &val, &train_cfg()).unwrap();
        assert_eq!(m.update_norm, 0.0);
        assert_eq!(m.dataset_size, 40);
        assert_abs_diff_eq!(m.label_entropy, LN_2, epsilon = 1e-12);
        assert!(m.data_complexity > 0.0 && m.lr_sensitivity >= 0.0);
    }

    #[test]
    fn extract_entropy_for_skewed_counts() {
        let spec = ModelSpec::linear(1, 2);
        let theta = init_params(&spec, 3);
        let train = with_labels((0..40).map(|i| usize::from(i >= 30)).collect());
        let val = with_labels(vec![0, 1]);
        let m = extract(&spec, &theta, &theta, &train, &val, &train_cfg()).unwrap();
        // −(0.75 ln 0.75 + 0.25 ln 0.25), 40-digit evaluation
        assert_abs_diff_eq!(m.label_entropy, 0.562_335_144_618_808_3, epsilon = 1e-12);
        assert_abs_diff_eq!(m.label_entropy, 0.562335, epsilon = 1e-6);
    }

    #[test]
    fn extract_is_deterministic() {
        let spec = ModelSpec::linear(3, 3);
        let data = make_blobs(3, 3, 60, 1.0, 2).unwrap();
        let train = data.subset(&(0..45).collect::<Vec<_>>()).unwrap();
        let val = data.subset(&(45..60).collect::<Vec<_>>()).unwrap();
        let prev = init_params(&spec, 0);
        let next = train_local(&spec, &prev, &train, &train_cfg()).unwrap();
        let a = extract(&spec, &prev, &next, &train, &val, &train_cfg()).unwrap();
        let b = extract(&spec, &prev, &next, &train, &val, &train_cfg()).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a.update_norm, next.distance(&prev).unwrap(), epsilon = 0.0);
    }

    #[test]
    fn zero_coefficients_return_loss() {
        let cohort = [mf(10, 0.3, 1.0), mf(20, 0.6, 2.0)];
        let cfg = CompositeErrorConfig::default();
        assert_eq!(composite_error(0.37, &cohort[1], &cohort, &cfg).unwrap(), 0.37);
    }

    #[test]
    fn identical_cohort_normalizes_to_loss() {
        let cohort = [mf(10, 0.3, 1.0); 3];
        let cfg = CompositeErrorConfig {
            coefficients: vec![1.0, -2.0, 3.0, 0.5, 9.0],
            normalize: true,
        };
        assert_eq!(composite_error(0.42, &cohort[0], &cohort, &cfg).unwrap(), 0.42);
    }

    #[test]
    fn single_entropy_coefficient() {
        // entropies 0.1, 0.9, 0.74 → normalized 0, 1, 0.8
        let cohort = [mf(10, 0.1, 1.0), mf(10, 0.9, 1.0), mf(10, 0.74, 1.0)];
        let cfg = CompositeErrorConfig {
            coefficients: vec![0.0, 0.5, 0.0, 0.0, 0.0],
            normalize: true,
        };
        let e = composite_error(0.4, &cohort[2], &cohort, &cfg).unwrap();
        assert_abs_diff_eq!(e, 0.8 * 0.5 + 0.4, epsilon = 1e-12);
    }

    #[test]
    fn composite_errors_reject_bad_input() {
        let cohort = [mf(10, 0.1, 1.0)];
        let cfg = CompositeErrorConfig::default();
        assert_eq!(
            composite_errors(&[f64::NAN], &cohort, &cfg),
            Err(Error::NonFiniteErrorMetric)
        );
        let short = CompositeErrorConfig {
            coefficients: vec![1.0],
            normalize: false,
        };
        assert!(composite_errors(&[0.1], &cohort, &short).is_err());
        assert!(composite_error(0.1, &mf(1, 0.0, 0.0), &cohort, &cfg).is_err());
    }

    fn arb_features() -> impl Strategy<Value = MetaFeatures> {
        (1usize..500, 0.0f64..2.0, 0.0f64..5.0, 0.0f64..3.0, 0.0f64..1.0).prop_map(
            |(dataset_size, label_entropy, update_norm, data_complexity, lr_sensitivity)| {
                MetaFeatures {
                    dataset_size,
                    label_entropy,
                    update_norm,
                    data_complexity,
                    lr_sensitivity,
                }
            },
        )
    }

    proptest! {
        #[test]
        fn normalization_lands_in_unit_interval(cohort in prop::collection::vec(arb_features(), 1..12)) {
            for row in scaled_features(&cohort, true) {
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn monotone_in_loss(
            cohort in prop::collection::vec(arb_features(), 1..8),
            coefficients in prop::collection::vec(0.0f64..3.0, NUM_META_FEATURES),
            loss in 0.0f64..5.0,
            bump in 0.0f64..5.0,
            normalize: bool,
        ) {
            let cfg = CompositeErrorConfig { coefficients, normalize };
            let lo = composite_error(loss, &cohort[0], &cohort, &cfg).unwrap();
            let hi = composite_error(loss + bump, &cohort[0], &cohort, &cfg).unwrap();
            prop_assert!(hi >= lo);
        }
    }
}
