//! Adam with bias correction, one moment slot per parameter tensor.

use super::TensorError;

/// First/second moment buffers and step count for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        AdamSlot {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Standard Adam update with bias correction:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    slot: &mut AdamSlot,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TensorError> {
    if grads.len() != params.len() || slot.m.len() != params.len() {
        return Err(TensorError::AdamStateMismatch {
            params: params.len(),
            state: slot.m.len().min(grads.len()),
        });
    }
    slot.step += 1;
    let t = slot.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.5, -2.0, 0.25];
        let mut slot = AdamSlot::new(3);
        adam_step(&mut p, &[0.0; 3], &mut slot, 0.1, B1, B2, EPS).unwrap();
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After bias correction, step 1 gives m̂ = g and v̂ = g², so the
        // update is exactly -lr·g/(|g| + eps).
        let g = [0.3, -1.7, 0.0002];
        let mut p = vec![0.0; 3];
        let mut slot = AdamSlot::new(3);
        adam_step(&mut p, &g, &mut slot, 0.01, B1, B2, EPS).unwrap();
        for i in 0..3 {
            let want = -0.01 * g[i] / (g[i].abs() + EPS);
            assert!((p[i] - want).abs() < 1e-12, "elem {i}: {} vs {want}", p[i]);
        }
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        // Hand-rolled scalar Adam on a constant gradient.
        let g = 0.5;
        let lr = 0.1;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut theta = 1.0;
        for t in 1..=2u32 {
            m = B1 * m + (1.0 - B1) * g;
            v = B2 * v + (1.0 - B2) * g * g;
            let m_hat = m / (1.0 - B1.powi(t as i32));
            let v_hat = v / (1.0 - B2.powi(t as i32));
            theta -= lr * m_hat / (v_hat.sqrt() + EPS);
        }

        let mut p = vec![1.0];
        let mut slot = AdamSlot::new(1);
        adam_step(&mut p, &[g], &mut slot, lr, B1, B2, EPS).unwrap();
        adam_step(&mut p, &[g], &mut slot, lr, B1, B2, EPS).unwrap();
        assert!((p[0] - theta).abs() < 1e-15);
        assert_eq!(slot.step, 2);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0; 3];
        let mut slot = AdamSlot::new(2);
        assert!(adam_step(&mut p, &[1.0; 3], &mut slot, 0.1, B1, B2, EPS).is_err());
    }
}
