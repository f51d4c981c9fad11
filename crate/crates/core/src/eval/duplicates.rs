use std::collections::HashSet;

use super::bleu::MAX_ORDER;

/// Mean duplicate proportion per n-gram order 1..=4.
#[derive(Clone, Debug, PartialEq)]
pub struct DuplicateReport {
    pub rates: [f64; MAX_ORDER],
}

/// Mean over sentences of `(g - u) / g`, where a sentence has `g` n-grams of
/// which `u` are distinct; sentences with no n-gram count as 0.
pub fn duplicate_rate<S: AsRef<str>>(sentences: &[Vec<S>], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    if sentences.is_empty() {
        return 0.0;
    }
    let total: f64 = sentences
        .iter()
        .map(|s| {
            let g = s.len().saturating_sub(n - 1);
            if g == 0 {
                return 0.0;
            }
            let u = s
                .windows(n)
                .map(|w| w.iter().map(AsRef::as_ref).collect::<Vec<&str>>())
                .collect::<HashSet<_>>()
                .len();
            (g - u) as f64 / g as f64
        })
        .sum();
    total / sentences.len() as f64
}

pub fn duplicate_report<S: AsRef<str>>(sentences: &[Vec<S>]) -> DuplicateReport {
    let mut rates = [0.0; MAX_ORDER];
    for (n, r) in rates.iter_mut().enumerate() {
        *r = duplicate_rate(sentences, n + 1);
    }
    DuplicateReport { rates }
}
