use super::graph::{Feeds, Graph, NodeId};
use crate::array::Array;
use crate::error::{Error, Result};

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over parameter entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of parameter entries compared.
    pub checked: usize,
}

/// Compares the analytic gradient of a scalar `output` against central
/// finite differences for every parameter leaf of `graph`.
///
/// Trace nodes keep their unperturbed values during the perturbed passes,
/// matching their exclusion from the analytic gradient.
pub fn finite_difference_check(
    graph: &mut Graph,
    output: NodeId,
    feeds: &Feeds<'_>,
    step: f64,
) -> Result<GradCheck> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    graph.forward(feeds)?;
    if graph.value(output).dims2() != (1, 1) {
        return Err(Error::shape(
            "finite_difference_check",
            format!("output must be scalar, got {:?}", graph.value(output).shape()),
        ));
    }
    let analytic = graph.backward(output, &Array::scalar(1.0))?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, grad) in &analytic {
        let base = feeds
            .get(name)
            .ok_or_else(|| Error::MissingInput(name.clone()))?;
        let mut perturbed = base.clone();
        for idx in 0..base.len() {
            let original = base.data()[idx];
            let mut eval_at = |value: f64, perturbed: &mut Array| -> Result<f64> {
                perturbed.data_mut()[idx] = value;
                let mut shifted = feeds.clone();
                shifted.insert(name, perturbed);
                graph.forward_frozen(&shifted)?;
                Ok(graph.value(output).data()[0])
            };
            let plus = eval_at(original + step, &mut perturbed)?;
            let minus = eval_at(original - step, &mut perturbed)?;
            perturbed.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    // leave the graph holding the unperturbed forward values
    graph.forward(feeds)?;
    Ok(report)
}
