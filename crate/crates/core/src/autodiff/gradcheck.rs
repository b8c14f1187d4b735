use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest step tried when a perturbation crosses a relu/|.| kink.
const MIN_STEP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over all checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where every tried step crossed a non-differentiable point.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `h`.
///
/// When a perturbation moves the graph across a relu or absolute-value kink
/// the difference quotient is meaningless, so the step is shrunk by 10x until
/// both sides stay on the same smooth piece.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::NotScalar(tape.shape(out).to_vec()));
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs, true)?;
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect();
    drop(tape);

    let flat: Vec<f64> = analytic.iter().flat_map(|g| g.data().iter().copied()).collect();
    let offsets: Vec<usize> = analytic
        .iter()
        .scan(0, |acc, g| {
            let start = *acc;
            *acc += g.numel();
            Some(start)
        })
        .collect();
    let mut point = inputs.to_vec();
    compare_with_central_differences(&flat, &base_sig, h, |flat_j, delta| {
        let i = offsets.iter().rposition(|&o| o <= flat_j).expect("offset");
        let j = flat_j - offsets[i];
        let orig = point[i].data()[j];
        point[i].data_mut()[j] = orig + delta;
        let result = eval(&point, false);
        point[i].data_mut()[j] = orig;
        let (tape, _, out) = result?;
        Ok((tape.value(out).item(), tape.kink_signature()))
    })
}

/// Core of every gradient check: `evaluate(j, delta)` must return the loss
/// with coordinate `j` shifted by `delta` together with the tape's kink
/// signature, leaving the point itself unchanged afterwards.
pub fn compare_with_central_differences(
    analytic: &[f64],
    base_signature: &[bool],
    h: f64,
    mut evaluate: impl FnMut(usize, f64) -> Result<(f64, Vec<bool>)>,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (j, &a) in analytic.iter().enumerate() {
        let mut step = h;
        let numeric = loop {
            let (fp, sig_p) = evaluate(j, step)?;
            let (fm, sig_m) = evaluate(j, -step)?;
            if sig_p == base_signature && sig_m == base_signature {
                break Some((fp - fm) / (2.0 * step));
            }
            step /= 10.0;
            if step < MIN_STEP {
                break None;
            }
        };
        match numeric {
            Some(n) => {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                report.max_rel_err = report.max_rel_err.max(rel);
                report.checked += 1;
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x * x) checked correctly...
        let x = Tensor::from_f64([3], &[0.3, -1.2, 2.0]).unwrap();
        let ok = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x.clone()],
            1e-3,
        )
        .unwrap();
        assert!(ok.max_rel_err < 1e-8, "{ok:?}");
        assert_eq!(ok.checked, 3);

        // ...while a detached factor makes the analytic gradient half the truth.
        let bad = gradcheck(
            |t, v| {
                let frozen = t.constant(t.value(v[0]).clone());
                let sq = t.mul(v[0], frozen)?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(bad.max_rel_err > 0.4, "{bad:?}");
    }

    #[test]
    fn relu_kink_is_handled_by_step_refinement() {
        // 5e-4 sits inside the first step but outside the refined one.
        let x = Tensor::from_f64([2], &[5e-4, -0.7]).unwrap();
        let r = gradcheck(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.skipped, 0);
    }
}
