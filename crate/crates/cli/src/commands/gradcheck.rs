//! `gradcheck`: central finite differences over every op and the pipeline
//! cases, printed as a pass/fail table.

use matres_core::gradcheck::{op_cases, pipeline_cases, run_suite, CheckOutcome, DEFAULT_TOLERANCE};
use matres_core::Result;

pub fn run(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut cases = op_cases();
    cases.extend(pipeline_cases()?);
    Ok(run_suite(&cases, seed))
}

pub fn table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.op.len()).max().unwrap_or(2).max(2);
    let mut out = format!("{:<width$}  {:>20}  {:>10}  result\n", "op", "seed", "rel_error");
    for o in outcomes {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:<width$}  {:>20}  {:>10.2e}  {verdict}\n", o.op, o.seed, o.rel_error));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    out.push_str(&format!("{} cases, {failed} failed (tolerance {DEFAULT_TOLERANCE:e})\n", outcomes.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use matres_core::gradcheck::GradCase;
    use matres_core::{Graph, NodeId, Tensor};

    /// `sum(x^2)` with a deliberately wrong gradient of `x`.
    struct Planted;

    impl GradCase for Planted {
        fn name(&self) -> String {
            "planted_square".into()
        }

        fn inputs(&self, _seed: u64) -> Vec<Tensor<f64>> {
            vec![Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()]
        }

        fn forward(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
            let sq = g.mul(inputs[0], inputs[0])?;
            Ok(g.sum(sq))
        }

        fn analytic(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![inputs[0].clone()])
        }
    }

    #[test]
    fn planted_wrong_gradient_is_reported_by_name() {
        let cases: Vec<Box<dyn GradCase>> = vec![Box::new(Planted)];
        let outcomes = run_suite(&cases, 3);
        assert!(!outcomes[0].passed);
        let t = table(&outcomes);
        assert!(t.contains("planted_square") && t.contains("FAIL") && t.contains("1 failed"), "{t}");
    }
}
