use serde::Serialize;

use super::AttentionTrace;

/// Row-sum tolerance: strict for synthetic `f64`-exact traces, lenient for
/// reduced-precision exports from real models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMode {
    Strict,
    Lenient,
}

impl ValidationMode {
    pub fn tolerance(self) -> f64 {
        match self {
            ValidationMode::Strict => 1e-9,
            ValidationMode::Lenient => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FindingKind {
    /// Worst row of the block whose sum misses 1 by more than the tolerance.
    RowSum {
        row: usize,
        deviation: f64,
    },
    NegativeEntry {
        row: usize,
        col: usize,
        value: f64,
    },
    NonFinite {
        row: usize,
        col: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub layer: usize,
    pub head: usize,
    #[serde(flatten)]
    pub kind: FindingKind,
}

impl Finding {
    /// Negative and non-finite entries fail in every mode.
    pub fn is_hard(&self) -> bool {
        !matches!(self.kind, FindingKind::RowSum { .. })
    }
}

/// At most one row-sum finding per block (its worst row) plus one finding
/// per bad entry. Sums are accumulated in `f64`.
pub fn validate_trace(trace: &AttentionTrace, mode: ValidationMode) -> Vec<Finding> {
    let mut findings = Vec::new();
    let tol = mode.tolerance();
    for layer in 0..trace.num_layers() {
        for head in 0..trace.num_heads() {
            let block = trace.block(layer, head);
            let mut worst = (0, 0.0f64);
            for (row, values) in block.iter_rows().enumerate() {
                let mut total = 0.0f64;
                for (col, &x) in values.iter().enumerate() {
                    let push = |kind| Finding { layer, head, kind };
                    if !x.is_finite() {
                        findings.push(push(FindingKind::NonFinite { row, col }));
                        continue;
                    }
                    if x < 0.0 {
                        findings.push(push(FindingKind::NegativeEntry {
                            row,
                            col,
                            value: f64::from(x),
                        }));
                    }
                    total += f64::from(x);
                }
                let deviation = (total - 1.0).abs();
                if deviation > worst.1 {
                    worst = (row, deviation);
                }
            }
            if worst.1 > tol {
                findings.push(Finding {
                    layer,
                    head,
                    kind: FindingKind::RowSum {
                        row: worst.0,
                        deviation: worst.1,
                    },
                });
            }
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::trace::{synth_generate, Pattern, SyntheticSpec, TraceHeader};

    fn single(rows: &[Vec<f32>]) -> AttentionTrace {
        let m = Matrix::from_rows(rows).unwrap();
        let header = TraceHeader::new(1, 1, m.cols(), m.rows(), "test").unwrap();
        AttentionTrace::new(header, vec![m]).unwrap()
    }

    #[test]
    fn synthetic_trace_is_strictly_clean() {
        let t = synth_generate(&SyntheticSpec {
            pattern: Pattern::Mixed,
            layers: 4,
            heads: 2,
            seq_len: 64,
            window: 16,
            seed: 3,
            sharpness: 2.0,
        })
        .unwrap();
        assert!(validate_trace(&t, ValidationMode::Strict).is_empty());
    }

    #[test]
    fn threshold_straddle() {
        let t = single(&[vec![0.5, 0.5005]]);
        assert!(validate_trace(&t, ValidationMode::Lenient).is_empty());
        let strict = validate_trace(&t, ValidationMode::Strict);
        assert_eq!(strict.len(), 1);
        match strict[0].kind {
            FindingKind::RowSum { row, deviation } => {
                assert_eq!(row, 0);
                assert!((deviation - 5e-4).abs() < 1e-6);
            }
            ref k => panic!("unexpected {k:?}"),
        }
        assert!(!strict[0].is_hard());
    }

    #[test]
    fn negative_entry_is_hard_in_both_modes() {
        let t = single(&[vec![1.25, -0.25]]);
        for mode in [ValidationMode::Strict, ValidationMode::Lenient] {
            let f = validate_trace(&t, mode);
            assert_eq!(f.len(), 1);
            assert!(f[0].is_hard());
        }
    }
}
