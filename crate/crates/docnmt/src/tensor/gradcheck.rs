//! Central finite-difference gradient checking.

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_elem: usize,
    pub elements_checked: usize,
}

/// Compares analytic gradients of `f`'s scalar output against central
/// finite differences at step `h`, perturbing every element of every input.
///
/// The error is `|fd - analytic| / max(|fd|, |analytic|, 0.01)`; the floor
/// keeps finite-difference roundoff from dominating near-zero gradients
/// (it turns into an absolute tolerance there).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).expect("leaf gradient populated").to_vec())
        .collect();

    let eval = |f: &mut F, perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_elem: 0,
        elements_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let up = eval(&mut f, &work)?;
            work[i].data[j] = orig - h;
            let down = eval(&mut f, &work)?;
            work[i].data[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[i][j];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(0.01);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = i;
                report.worst_elem = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![4, 2]);
        let r = randn(&mut rng, vec![3, 2]);
        let report = check_gradients(&[a, b], 1e-3, |tape, vars| {
            let prod = tape.matmul(vars[0], vars[1])?;
            let weight = tape.constant(r.clone());
            let weighted = tape.mul(prod, weight)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_layernorm_chain_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, vec![4, 6]);
        let gain = randn(&mut rng, vec![6]);
        let bias = randn(&mut rng, vec![6]);
        let targets = vec![2, 0, 5, 1];
        let pad = vec![false, false, true, false];
        let report = check_gradients(&[x, gain, bias], 1e-3, |tape, vars| {
            let normed = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
            tape.cross_entropy(normed, &targets, &pad)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn every_elementwise_op_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = randn(&mut rng, vec![3, 5]);
        let b = randn(&mut rng, vec![3, 5]);
        let bias = randn(&mut rng, vec![5]);
        let r = randn(&mut rng, vec![5, 3]);
        let keep: Vec<bool> = (0..15).map(|i| i % 4 != 0).collect();
        let report = check_gradients(&[a, b, bias], 1e-3, |tape, vars| {
            let summed = tape.add(vars[0], vars[1])?;
            let biased = tape.add_row(summed, vars[2])?;
            let gated = tape.relu(biased);
            let masked = tape.mask_fill(gated, &keep, -1e30)?;
            let soft = tape.softmax(masked, 1)?;
            let scaled = tape.scale(soft, 1.7);
            let prod = tape.mul(scaled, vars[0])?;
            let flipped = tape.transpose(prod)?;
            let weight = tape.constant(r.clone());
            let weighted = tape.mul(flipped, weight)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn concat_slice_embedding_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let table = randn(&mut rng, vec![7, 4]);
        let extra = randn(&mut rng, vec![3, 4]);
        let ids = vec![1, 6, 0];
        let report = check_gradients(&[table, extra], 1e-3, |tape, vars| {
            let rows = tape.embedding(vars[0], &ids)?;
            let stacked = tape.concat_rows(rows, vars[1])?;
            let wide = tape.concat_cols(&[stacked, stacked])?;
            let narrow = tape.slice_cols(wide, 2, 5)?;
            Ok(tape.sum(narrow))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
