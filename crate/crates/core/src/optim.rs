//! AdamW with decoupled weight decay, and cross-entropy losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters. The decay coefficient is decoupled: it shrinks
/// parameters directly in the update and never enters the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamWHyper {
    /// Reference betas/epsilon with the given learning rate and decay.
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<AdamWHyper> {
        let hyper = AdamWHyper {
            learning_rate,
            weight_decay,
            ..AdamWHyper::default()
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter. One state per
/// client per round; states are never shared.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> AdamWState {
        AdamWState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One AdamW update:
///
/// ```text
/// t <- t+1
/// m <- b1*m + (1-b1)*g        mhat = m / (1 - b1^t)
/// v <- b2*v + (1-b2)*g^2      vhat = v / (1 - b2^t)
/// theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
/// ```
pub fn adamw_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adamw_step length mismatch: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {} at coordinate {idx}",
            grad[idx]
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grad[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.learning_rate
            * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * params[i]);
    }
    Ok(())
}

/// A mini-batch: inputs with a leading batch axis and one class id per
/// example.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Batch> {
        let b = *inputs
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("batch inputs must have a leading axis".into()))?;
        if b == 0 || b != labels.len() {
            return Err(Error::Shape(format!(
                "batch holds {b} inputs but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy of `[b,n]` logits against integer labels, with the
/// exact logit gradient `(softmax - onehot) / b`. Computed through
/// log-softmax so large logits stay stable.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, n] = logits.dims2("cross_entropy logits")?;
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Label(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    let log_probs = logits.log_softmax()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * n];
    for i in 0..b {
        loss -= log_probs.data()[i * n + labels[i]];
        for j in 0..n {
            let softmax = log_probs.data()[i * n + j].exp();
            grad[i * n + j] = (softmax - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, n], grad)?))
}

/// General cross-entropy `H(Y,P)` between row distributions, averaged over
/// the batch. Reduces to [`cross_entropy`] when `Y` is one-hot and `P` is
/// the softmax of the logits.
pub fn cross_entropy_from_distributions(y: &Tensor, p: &Tensor) -> Result<f64> {
    let [b, n] = y.dims2("cross_entropy Y")?;
    if p.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "Y {:?} and P {:?} must share a shape",
            y.shape(),
            p.shape()
        )));
    }
    for (name, t) in [("Y", y), ("P", p)] {
        for i in 0..b {
            let sum: f64 = t.data()[i * n..(i + 1) * n].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "{name} row {i} sums to {sum}, not 1"
                )));
            }
        }
    }
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..n {
            let yv = y.data()[i * n + j];
            if yv == 0.0 {
                continue;
            }
            let pv = p.data()[i * n + j];
            if pv <= 0.0 {
                return Err(Error::Numeric(format!(
                    "P is zero at row {i} class {j} where Y is positive"
                )));
            }
            total -= yv * pv.ln();
        }
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamWState::new(3);
        let hyper = AdamWHyper::new(0.1, 0.0).unwrap();
        adamw_step(&mut params, &[0.0; 3], &mut state, &hyper).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.steps_taken(), 1);
    }

    #[test]
    fn single_step_golden_value_without_decay() {
        // theta=1, g=1, lr=0.1, fresh state: mhat=vhat=1,
        // theta' = 1 - 0.1 / (1 + 1e-8).
        let mut params = vec![1.0];
        let mut state = AdamWState::new(1);
        let hyper = AdamWHyper::new(0.1, 0.0).unwrap();
        adamw_step(&mut params, &[1.0], &mut state, &hyper).unwrap();
        assert!((params[0] - 0.9000000010).abs() < 1e-9);
    }

    #[test]
    fn single_step_golden_value_with_decay() {
        let mut params = vec![1.0];
        let mut state = AdamWState::new(1);
        let hyper = AdamWHyper::new(0.1, 0.01).unwrap();
        adamw_step(&mut params, &[1.0], &mut state, &hyper).unwrap();
        assert!((params[0] - 0.8990000010).abs() < 1e-9);
    }

    #[test]
    fn rejects_shape_and_nonfinite_gradients() {
        let mut params = vec![1.0, 2.0];
        let mut state = AdamWState::new(2);
        let hyper = AdamWHyper::default();
        assert!(matches!(
            adamw_step(&mut params, &[1.0], &mut state, &hyper),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            adamw_step(&mut params, &[1.0, f64::NAN], &mut state, &hyper),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn hyper_bounds_are_enforced() {
        assert!(AdamWHyper::new(0.0, 0.0).is_err());
        assert!(AdamWHyper::new(1e-3, -0.1).is_err());
        let bad_beta = AdamWHyper {
            beta1: 1.0,
            ..AdamWHyper::default()
        };
        assert!(bad_beta.validate().is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_n() {
        let logits = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        // softmax is uniform 0.25; gradient is (0.25 - onehot) / 1.
        assert!((grad.data()[2] + 0.75).abs() < 1e-12);
        assert!((grad.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_prediction_is_nearly_free() {
        let logits = Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-8);
    }

    // Hand-rolled scalar arithmetic over each row, no shared code with the
    // implementation path.
    fn ce_oracle(rows: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
        let b = rows.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::new();
        for (row, &label) in rows.iter().zip(labels) {
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += -(exps[label] / z).ln();
            grads.push(
                exps.iter()
                    .enumerate()
                    .map(|(j, e)| (e / z - if j == label { 1.0 } else { 0.0 }) / b)
                    .collect(),
            );
        }
        (loss / b, grads)
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0]];
        let labels = [2usize, 0];
        let logits = Tensor::new(vec![2, 3], rows.concat()).unwrap();
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        let (eloss, egrad) = ce_oracle(&rows, &labels);
        assert!((loss - eloss).abs() < 1e-10);
        for i in 0..2 {
            for j in 0..3 {
                assert!((grad.data()[i * 3 + j] - egrad[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn distribution_entropy_of_uniform_is_ln_n() {
        let u = Tensor::new(vec![1, 5], vec![0.2; 5]).unwrap();
        let h = cross_entropy_from_distributions(&u, &u).unwrap();
        assert!((h - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_distribution_reduces_to_label_form() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let labels = [2usize, 1];
        let (expect, _) = cross_entropy(&logits, &labels).unwrap();
        let probs = Tensor::new(
            vec![2, 3],
            logits.log_softmax().unwrap().data().iter().map(|v| v.exp()).collect(),
        )
        .unwrap();
        let mut onehot = vec![0.0; 6];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * 3 + l] = 1.0;
        }
        let y = Tensor::new(vec![2, 3], onehot).unwrap();
        let h = cross_entropy_from_distributions(&y, &probs).unwrap();
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn distribution_entropy_matches_scalar_loop_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 4;
            let b = 3;
            let draw_rows = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
                let mut rows = Vec::new();
                for _ in 0..b {
                    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    rows.extend(raw.iter().map(|v| v / z));
                }
                rows
            };
            let y_data = draw_rows(&mut rng);
            let p_data = draw_rows(&mut rng);
            let mut expect = 0.0;
            for i in 0..b {
                for j in 0..n {
                    expect -= y_data[i * n + j] * p_data[i * n + j].ln();
                }
            }
            expect /= b as f64;
            let y = Tensor::new(vec![b, n], y_data).unwrap();
            let p = Tensor::new(vec![b, n], p_data).unwrap();
            let h = cross_entropy_from_distributions(&y, &p).unwrap();
            assert!((h - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_entropy_rejects_zero_support() {
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            cross_entropy_from_distributions(&y, &p),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn batch_validates_labels_and_size() {
        let inputs = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(Batch::new(inputs.clone(), vec![0, 1], 2).is_ok());
        assert!(matches!(
            Batch::new(inputs.clone(), vec![0], 2),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Batch::new(inputs, vec![0, 2], 2),
            Err(Error::Label(_))
        ));
    }
}
