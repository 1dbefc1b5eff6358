//! Central finite-difference verification of every tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::nn::tape::{lstm_step, Tape};
use crate::nn::tensor::Tensor;

pub const GRADCHECK_H: f64 = 1e-5;

/// Maximum relative error between analytic and central-difference gradients,
/// over every component of every input.
///
/// The closure must be deterministic and return the scalar loss along with
/// the analytic gradient for each input, in input order.
pub fn grad_check<F, E>(f: &F, inputs: &[Tensor], h: f64) -> Result<f64, E>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), E>,
{
    let (_, analytic) = f(inputs)?;
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let (plus, _) = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (minus, _) = f(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let ga = analytic[i].data()[j];
            let rel = (ga - numeric).abs() / (1e-8f64).max(ga.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// One row of the op verification table.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).expect("shape consistent")
}

/// Random values bounded away from zero, for kinked ops like relu.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape consistent")
}

type LossAndGrads = (f64, Vec<Tensor>);

/// Builds the tape for `op`, projects its output to a scalar against fixed
/// weights and returns loss plus input gradients.
fn check_op<B>(inputs: &[Tensor], proj: &Tensor, op: B) -> Result<LossAndGrads, NnError>
where
    B: Fn(&mut Tape, &[usize]) -> Result<usize, NnError>,
{
    let mut tape = Tape::new();
    let ids: Vec<usize> = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<_, _>>()?;
    let out = op(&mut tape, &ids)?;
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        let p = tape.input(proj.clone())?;
        tape.dot(out, p)?
    };
    let grads = tape.backward(loss)?;
    let gs = ids
        .iter()
        .map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(id))))
        .collect();
    Ok((tape.value(loss).scalar_value(), gs))
}

macro_rules! suite_entry {
    ($out:ident, $rng:ident, $name:expr, $inputs:expr, $proj_shape:expr, $op:expr) => {{
        let inputs = $inputs;
        let proj = rand_tensor(&mut $rng, $proj_shape);
        let err = grad_check(&|xs: &[Tensor]| check_op(xs, &proj, $op), &inputs, GRADCHECK_H)?;
        $out.push(OpCheck {
            name: $name.to_string(),
            max_rel_err: err,
        });
    }};
}

/// Runs the finite-difference check for every registered op on small random
/// instances. Deterministic: seeded internally.
#[allow(clippy::too_many_lines)]
pub fn op_suite() -> Result<Vec<OpCheck>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();

    suite_entry!(
        out,
        rng,
        "dense(vector)",
        vec![
            rand_tensor(&mut rng, vec![5]),
            rand_tensor(&mut rng, vec![4, 5]),
            rand_tensor(&mut rng, vec![4]),
        ],
        vec![4],
        |t, ids| t.dense(ids[0], ids[1], ids[2])
    );
    suite_entry!(
        out,
        rng,
        "dense(batch)",
        vec![
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![2, 4]),
            rand_tensor(&mut rng, vec![2]),
        ],
        vec![3, 2],
        |t, ids| t.dense(ids[0], ids[1], ids[2])
    );
    suite_entry!(
        out,
        rng,
        "relu",
        vec![rand_tensor_off_kink(&mut rng, vec![6])],
        vec![6],
        |t, ids| t.relu(ids[0])
    );
    suite_entry!(
        out,
        rng,
        "sigmoid",
        vec![rand_tensor(&mut rng, vec![6])],
        vec![6],
        |t, ids| t.sigmoid(ids[0])
    );
    suite_entry!(
        out,
        rng,
        "tanh",
        vec![rand_tensor(&mut rng, vec![6])],
        vec![6],
        |t, ids| t.tanh(ids[0])
    );
    suite_entry!(
        out,
        rng,
        "embedding_lookup",
        vec![rand_tensor(&mut rng, vec![5, 3])],
        vec![3],
        |t, ids| t.embedding(ids[0], 2)
    );
    suite_entry!(
        out,
        rng,
        "concat",
        vec![rand_tensor(&mut rng, vec![3]), rand_tensor(&mut rng, vec![4])],
        vec![7],
        |t, ids| t.concat(&[ids[0], ids[1]])
    );
    suite_entry!(
        out,
        rng,
        "stack_rows",
        vec![rand_tensor(&mut rng, vec![3]), rand_tensor(&mut rng, vec![3])],
        vec![2, 3],
        |t, ids| t.stack_rows(&[ids[0], ids[1]])
    );
    suite_entry!(
        out,
        rng,
        "mean_over_axis(0)",
        vec![rand_tensor(&mut rng, vec![4, 3])],
        vec![3],
        |t, ids| t.mean_over_axis(ids[0], 0)
    );
    suite_entry!(
        out,
        rng,
        "mean_over_axis(1)",
        vec![rand_tensor(&mut rng, vec![4, 3])],
        vec![4],
        |t, ids| t.mean_over_axis(ids[0], 1)
    );
    suite_entry!(
        out,
        rng,
        "slice",
        vec![rand_tensor(&mut rng, vec![6])],
        vec![3],
        |t, ids| t.slice(ids[0], 2, 3)
    );
    suite_entry!(
        out,
        rng,
        "crop_rows",
        vec![rand_tensor(&mut rng, vec![5, 2])],
        vec![3, 2],
        |t, ids| t.crop_rows(ids[0], 1, 3)
    );
    suite_entry!(
        out,
        rng,
        "add/mul/scale",
        vec![rand_tensor(&mut rng, vec![4]), rand_tensor(&mut rng, vec![4])],
        vec![4],
        |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let m = t.mul(s, ids[1])?;
            t.scale(m, 0.75)
        }
    );
    suite_entry!(
        out,
        rng,
        "scale_by",
        vec![rand_tensor(&mut rng, vec![4]), rand_tensor(&mut rng, vec![1])],
        vec![4],
        |t, ids| t.scale_by(ids[0], ids[1])
    );
    suite_entry!(
        out,
        rng,
        "dot",
        vec![rand_tensor(&mut rng, vec![5]), rand_tensor(&mut rng, vec![5])],
        vec![1],
        |t, ids| t.dot(ids[0], ids[1])
    );
    suite_entry!(
        out,
        rng,
        "softmax",
        vec![rand_tensor(&mut rng, vec![5])],
        vec![5],
        |t, ids| t.softmax(ids[0])
    );
    suite_entry!(
        out,
        rng,
        "dilated_conv1d(d=1)",
        vec![rand_tensor(&mut rng, vec![9, 2]), rand_tensor(&mut rng, vec![3, 3, 2])],
        vec![7, 3],
        |t, ids| t.dilated_conv1d(ids[0], ids[1], 1)
    );
    suite_entry!(
        out,
        rng,
        "dilated_conv1d(d=2)",
        vec![rand_tensor(&mut rng, vec![11, 2]), rand_tensor(&mut rng, vec![2, 3, 2])],
        vec![7, 2],
        |t, ids| t.dilated_conv1d(ids[0], ids[1], 2)
    );
    suite_entry!(
        out,
        rng,
        "batchnorm1d(train)",
        vec![
            rand_tensor(&mut rng, vec![4, 3]),
            rand_tensor(&mut rng, vec![3]),
            rand_tensor(&mut rng, vec![3]),
        ],
        vec![4, 3],
        |t, ids| t.batchnorm_train(ids[0], ids[1], ids[2]).map(|(id, _, _)| id)
    );
    {
        let mean = rand_tensor(&mut rng, vec![3]);
        let var = Tensor::vector(vec![0.9, 1.4, 0.6]);
        suite_entry!(
            out,
            rng,
            "batchnorm1d(eval)",
            vec![
                rand_tensor(&mut rng, vec![4, 3]),
                rand_tensor(&mut rng, vec![3]),
                rand_tensor(&mut rng, vec![3]),
            ],
            vec![4, 3],
            |t, ids| t.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var)
        );
    }
    suite_entry!(
        out,
        rng,
        "softmax_xent",
        vec![rand_tensor(&mut rng, vec![7])],
        vec![1],
        |t, ids| t.softmax_xent(ids[0], 3)
    );
    {
        let targets = Tensor::vector(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        suite_entry!(
            out,
            rng,
            "sigmoid_bce",
            vec![rand_tensor(&mut rng, vec![6])],
            vec![1],
            |t, ids| t.sigmoid_bce(ids[0], targets.clone())
        );
    }
    {
        let hidden = 4;
        let ph = rand_tensor(&mut rng, vec![hidden]);
        let pc = rand_tensor(&mut rng, vec![hidden]);
        suite_entry!(
            out,
            rng,
            "lstm_step",
            vec![
                rand_tensor(&mut rng, vec![3]),
                rand_tensor(&mut rng, vec![hidden]),
                rand_tensor(&mut rng, vec![hidden]),
                rand_tensor(&mut rng, vec![4 * hidden, 3 + hidden]),
                rand_tensor(&mut rng, vec![4 * hidden]),
            ],
            vec![1],
            |t, ids| {
                let (h2, c2) = lstm_step(t, ids[0], ids[1], ids[2], ids[3], ids[4], hidden)?;
                let ph = t.input(ph.clone())?;
                let pc = t.input(pc.clone())?;
                let a = t.dot(h2, ph)?;
                let b = t.dot(c2, pc)?;
                t.add(a, b)
            }
        );
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        let checks = op_suite().unwrap();
        assert!(checks.len() >= 20);
        for c in checks {
            assert!(c.max_rel_err < 1e-6, "{} rel err {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn grad_check_flags_a_wrong_gradient() {
        // analytic gradient deliberately off by 10%
        let f = |xs: &[Tensor]| -> Result<(f64, Vec<Tensor>), NnError> {
            let x = xs[0].data()[0];
            Ok((x * x, vec![Tensor::vector(vec![2.0 * x * 1.1])]))
        };
        let err = grad_check(&f, &[Tensor::vector(vec![1.3])], GRADCHECK_H).unwrap();
        assert!(err > 1e-3, "should flag the broken gradient, got {err}");
    }
}
