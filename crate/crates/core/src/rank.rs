//! Deterministic top-k selection shared by the sparse and dense indexes.

use std::cmp::Ordering;

/// Descending score, then ascending id.
pub fn by_score_then_id(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Keeps the `k` best `(id, score)` entries, sorted by [`by_score_then_id`].
pub fn top_k<T, F>(mut items: Vec<T>, k: usize, key: F) -> Vec<T>
where
    F: Fn(&T) -> (&str, f64),
{
    let cmp = |a: &T, b: &T| by_score_then_id(key(a), key(b));
    if items.len() > k && k > 0 {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    } else if k == 0 {
        items.clear();
    }
    items.sort_by(cmp);
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_id() {
        let items = vec![("c", 1.0), ("a", 1.0), ("b", 2.0), ("d", 0.5)];
        let got = top_k(items, 3, |&(id, s)| (id, s));
        assert_eq!(got, vec![("b", 2.0), ("a", 1.0), ("c", 1.0)]);
    }

    #[test]
    fn k_larger_than_input() {
        let got = top_k(vec![("x", 0.1), ("y", 0.2)], 10, |&(id, s)| (id, s));
        assert_eq!(got, vec![("y", 0.2), ("x", 0.1)]);
    }
}
