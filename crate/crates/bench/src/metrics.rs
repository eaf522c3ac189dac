//! Set- and text-overlap quality metrics.
//!
//! Span/keyphrase outputs are scored as string sets (exact match and
//! longest-common-substring partial match, plus fixed-cutoff keyphrase F1);
//! free-form text is scored with n-gram and longest-common-subsequence
//! overlap F1.

/// Precision / recall / F1 triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn zero() -> Self {
        Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        }
    }

    pub fn perfect() -> Self {
        Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        }
    }

    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Lowercase and collapse interior whitespace.
pub fn normalize(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn normalized_set(items: &[String]) -> Vec<String> {
    let mut out: Vec<String> = items.iter().map(|s| normalize(s)).collect();
    out.sort();
    out.dedup();
    out
}

/// Exact-match set F1. Empty vs empty scores 1, empty vs nonempty 0.
pub fn em_f1(predicted: &[String], gold: &[String]) -> Prf {
    let p = normalized_set(predicted);
    let g = normalized_set(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return Prf::perfect(),
        (true, false) | (false, true) => return Prf::zero(),
        _ => {}
    }
    let inter = p.iter().filter(|x| g.binary_search(x).is_ok()).count() as f64;
    Prf::from_pr(inter / p.len() as f64, inter / g.len() as f64)
}

/// Length of the longest common substring (character level).
pub fn longest_common_substring(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut best = 0usize;
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ca in &a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            if cur[j + 1] > best {
                best = cur[j + 1];
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Partial-match set F1: each prediction earns its best
/// longest-common-substring share against any gold string, and vice versa.
pub fn pm_f1(predicted: &[String], gold: &[String]) -> Prf {
    let p = normalized_set(predicted);
    let g = normalized_set(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return Prf::perfect(),
        (true, false) | (false, true) => return Prf::zero(),
        _ => {}
    }
    let credit = |s: &str, others: &[String]| -> f64 {
        if s.is_empty() {
            return 0.0;
        }
        let chars = s.chars().count() as f64;
        others
            .iter()
            .map(|o| longest_common_substring(s, o) as f64 / chars)
            .fold(0.0, f64::max)
    };
    let precision = p.iter().map(|x| credit(x, &g)).sum::<f64>() / p.len() as f64;
    let recall = g.iter().map(|x| credit(x, &p)).sum::<f64>() / g.len() as f64;
    Prf::from_pr(precision, recall)
}

fn dedup_preserving_order(items: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items
        .iter()
        .map(|s| normalize(s))
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

/// Keyphrase F1 at cutoff `k`: the prediction list is truncated to `k` and
/// conceptually padded with guaranteed-incorrect entries, so precision
/// divides by `k`.
pub fn f1_at_k(predicted: &[String], gold: &[String], k: usize) -> Prf {
    assert!(k >= 1, "cutoff must be >= 1");
    let preds = dedup_preserving_order(predicted);
    let preds: Vec<&String> = preds.iter().take(k).collect();
    let g = normalized_set(gold);
    if g.is_empty() {
        return if predicted.is_empty() {
            Prf::perfect()
        } else {
            Prf::zero()
        };
    }
    let matched = preds.iter().filter(|p| g.binary_search(p).is_ok()).count() as f64;
    Prf::from_pr(matched / k as f64, matched / g.len() as f64)
}

/// Keyphrase F1 at the model's own prediction count.
pub fn f1_at_m(predicted: &[String], gold: &[String]) -> Prf {
    let preds = dedup_preserving_order(predicted);
    let g = normalized_set(gold);
    match (preds.is_empty(), g.is_empty()) {
        (true, true) => return Prf::perfect(),
        (true, false) | (false, true) => return Prf::zero(),
        _ => {}
    }
    let matched = preds.iter().filter(|p| g.binary_search(p).is_ok()).count() as f64;
    Prf::from_pr(matched / preds.len() as f64, matched / g.len() as f64)
}

fn words(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(String::from).collect()
}

/// N-gram overlap F1 with clipped counts.
pub fn rouge_n(pred: &str, gold: &str, n: usize) -> Prf {
    assert!(n >= 1);
    let pw = words(pred);
    let gw = words(gold);
    let grams = |w: &[String]| -> std::collections::HashMap<Vec<String>, usize> {
        let mut m = std::collections::HashMap::new();
        if w.len() >= n {
            for win in w.windows(n) {
                *m.entry(win.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let pg = grams(&pw);
    let gg = grams(&gw);
    let p_total: usize = pg.values().sum();
    let g_total: usize = gg.values().sum();
    match (p_total, g_total) {
        (0, 0) => return Prf::perfect(),
        (0, _) | (_, 0) => return Prf::zero(),
        _ => {}
    }
    let overlap: usize = pg
        .iter()
        .map(|(gram, &c)| c.min(gg.get(gram).copied().unwrap_or(0)))
        .sum();
    Prf::from_pr(overlap as f64 / p_total as f64, overlap as f64 / g_total as f64)
}

/// Length of the longest common subsequence over word lists.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.fill(0);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1 over words.
pub fn rouge_l(pred: &str, gold: &str) -> Prf {
    let pw = words(pred);
    let gw = words(gold);
    match (pw.is_empty(), gw.is_empty()) {
        (true, true) => return Prf::perfect(),
        (true, false) | (false, true) => return Prf::zero(),
        _ => {}
    }
    let l = lcs_len(&pw, &gw) as f64;
    Prf::from_pr(l / pw.len() as f64, l / gw.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn em_exact_and_disjoint() {
        assert_eq!(em_f1(&s(&["a", "b"]), &s(&["a", "b"])).f1, 1.0);
        assert_eq!(em_f1(&s(&["a"]), &s(&["b"])).f1, 0.0);
        let r = em_f1(&s(&["a", "b"]), &s(&["b", "c"]));
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f1, 0.5);
    }

    #[test]
    fn em_empty_conventions() {
        assert_eq!(em_f1(&[], &[]).f1, 1.0);
        assert_eq!(em_f1(&[], &s(&["a"])).f1, 0.0);
        assert_eq!(em_f1(&s(&["a"]), &[]).f1, 0.0);
    }

    #[test]
    fn pm_identical_and_disjoint() {
        assert_eq!(pm_f1(&s(&["go home"]), &s(&["go home"])).f1, 1.0);
        assert_eq!(pm_f1(&s(&["aaa"]), &s(&["zzz"])).f1, 0.0);
    }

    #[test]
    fn pm_substring_share() {
        // "go to start" is an 11-character substring of the 16-character
        // gold string, so recall is 11/16 and precision is 1.
        let r = pm_f1(&s(&["go to start"]), &s(&["go to start menu"]));
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!((r.recall - 11.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_f1_with_padding() {
        let preds = s(&["a", "b", "c", "d", "e"]);
        assert_eq!(f1_at_k(&preds, &preds, 5).f1, 1.0);

        let r = f1_at_k(&s(&["a", "b"]), &s(&["a", "b"]), 5);
        assert!((r.precision - 0.4).abs() < 1e-12);
        assert!((r.recall - 1.0).abs() < 1e-12);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(f1_at_m(&s(&["a", "b"]), &s(&["a", "b"])).f1, 1.0);

        assert_eq!(f1_at_k(&[], &s(&["a"]), 5).f1, 0.0);
        assert_eq!(f1_at_m(&[], &s(&["a"])).f1, 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_n("x y z", "x y z", 1).f1, 1.0);
        assert_eq!(rouge_n("x y z", "x y z", 2).f1, 1.0);
        assert_eq!(rouge_l("x y z", "x y z").f1, 1.0);

        let r1 = rouge_n("a b c", "a c d", 1);
        assert!((r1.f1 - 2.0 / 3.0).abs() < 1e-12);
        let rl = rouge_l("a b c", "a c d");
        assert!((rl.f1 - 2.0 / 3.0).abs() < 1e-12);

        assert_eq!(rouge_n("a b", "c d", 1).f1, 0.0);
        assert_eq!(rouge_l("a b", "c d").f1, 0.0);
    }

    #[test]
    fn normalization_applies_before_matching() {
        assert_eq!(em_f1(&s(&["Go  Home"]), &s(&["go home"])).f1, 1.0);
    }
}
