use super::{NumError, Tape, Tensor, Var};

/// One element whose analytic and central-difference gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Elements above the magnitude floor that were compared.
    pub checked: usize,
    /// Elements whose ±h evaluations crossed a ReLU/abs kink.
    pub skipped_kinks: usize,
    pub worst_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Compares reverse-mode gradients with central differences of step `h`.
///
/// `build(inputs, track)` must place `inputs` on a fresh tape (in order,
/// tracking gradients where `track` is set and the input is trainable) and
/// return the tape, the input handles and the scalar loss. Inputs without a
/// gradient after backward are treated as frozen and not perturbed.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, rel_tol: f64, min_magnitude: f64, build: F) -> Result<GradReport, NumError>
where
    F: Fn(&[Tensor<f64>], bool) -> Result<(Tape<f64>, Vec<Var>, Var), NumError>,
{
    let (mut tape, vars, loss) = build(inputs, true)?;
    let base_sig = tape.kink_signature();
    tape.backward(loss)?;
    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let Some(analytic) = tape.grad(vars[i]).map(<[f64]>::to_vec) else {
            continue;
        };
        for j in 0..input.len() {
            let orig = input.values()[j];
            work[i].values_mut()[j] = orig + h;
            let (tp, _, lp) = build(&work, false)?;
            work[i].values_mut()[j] = orig - h;
            let (tm, _, lm) = build(&work, false)?;
            work[i].values_mut()[j] = orig;
            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let a = analytic[j];
            let scale = a.abs().max(numeric.abs());
            if scale <= min_magnitude {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            report.worst_rel_error = report.worst_rel_error.max(rel);
            if rel >= rel_tol {
                report.mismatches.push(GradMismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
