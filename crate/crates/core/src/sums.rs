//! Exactly-rounded floating-point summation (Shewchuk's expansion method).
//!
//! Used where cancellation must behave like real arithmetic: weighted
//! centroids of symmetric mixtures must come out exactly zero, and dataset
//! statistics must be invariant under duplicating the dataset.

/// Error-free transform: returns (fl(a+b), rounding error).
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let err = (a - (s - bv)) + (b - bv);
    (s, err)
}

/// Running exact sum as a non-overlapping expansion of partials.
#[derive(Debug, Default, Clone)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let mut x = value;
        let mut kept = 0;
        for i in 0..self.partials.len() {
            let (s, err) = two_sum(x, self.partials[i]);
            if err != 0.0 {
                self.partials[kept] = err;
                kept += 1;
            }
            x = s;
        }
        self.partials.truncate(kept);
        if x != 0.0 {
            self.partials.push(x);
        }
    }

    /// The correctly-rounded value of everything added so far.
    pub fn value(&self) -> f64 {
        self.partials.iter().sum()
    }
}

/// Exactly-rounded sum of a sequence.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cancels_symmetric_terms_exactly() {
        // Mirrored pairs in scrambled order must cancel to exactly zero.
        let vals = [2.0, 1.4142135623730951, 6.123233995736766e-17, -1.4142135623730951];
        let all: Vec<f64> = vals.iter().chain(vals.iter()).map(|&v| v * 0.125).enumerate()
            .map(|(i, v)| if i < 4 { v } else { -v })
            .collect();
        assert_eq!(exact_sum(all), 0.0);
    }

    #[test]
    fn beats_naive_summation() {
        // 1 + 2^-60 repeated 2^20 times - 1 = 2^-40 exactly; naive summation
        // absorbs every small term into the leading 1.
        let tiny = 2.0_f64.powi(-60);
        let mut vals = vec![1.0];
        vals.extend(std::iter::repeat_n(tiny, 1 << 20));
        vals.push(-1.0);
        assert_eq!(exact_sum(vals.iter().copied()), 2.0_f64.powi(-40));
        assert_eq!(vals.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn matches_plain_sum_on_benign_data() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        assert_eq!(exact_sum(vals.iter().copied()), vals.iter().sum::<f64>());
    }
}
