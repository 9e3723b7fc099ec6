use serde::{Deserialize, Serialize};

/// Right-continuous step function that is zero before its first knot.
///
/// Used for cumulative quantities such as the Breslow baseline and the
/// outcome baseline increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StepFunction {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    /// Build from sorted knots and the jump at each knot.
    pub fn from_increments(knots: Vec<f64>, increments: &[f64]) -> Self {
        debug_assert_eq!(knots.len(), increments.len());
        let mut acc = 0.0;
        let values = increments
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        Self { knots, values }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k <= t);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    pub fn increments(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.values
            .iter()
            .map(|&v| {
                let d = v - prev;
                prev = v;
                d
            })
            .collect()
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.first().is_none_or(|&v| v >= 0.0)
            && self.values.windows(2).all(|w| w[1] >= w[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_continuous_evaluation() {
        let s = StepFunction::from_increments(vec![2.0, 5.0], &[1.0, 1.0]);
        assert_eq!(s.eval(0.0), 0.0);
        assert_eq!(s.eval(1.999), 0.0);
        assert_eq!(s.eval(2.0), 1.0);
        assert_eq!(s.eval(4.9), 1.0);
        assert_eq!(s.eval(5.0), 2.0);
        assert_eq!(s.eval(10.0), 2.0);
        assert_eq!(s.increments(), vec![1.0, 1.0]);
        assert!(s.is_nondecreasing());
    }
}
