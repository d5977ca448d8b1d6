use std::collections::HashMap;

/// Smoothing value substituted for a zero n-gram match count.
pub const BLEU_EPS: f64 = 1e-9;

/// ROUGE-L recall weight β.
pub const ROUGE_BETA: f64 = 1.2;

/// Lowercases, splits on whitespace, and emits each punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram count.
pub fn clipped_counts<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let matches = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU-4: geometric mean of clipped 1–4-gram precisions times
/// the brevity penalty. Zero match counts are replaced by `1e-9`.
pub fn bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total) = clipped_counts(candidate, reference, n);
        let num = if m == 0 { BLEU_EPS } else { m as f64 };
        log_sum += (num / total.max(1) as f64).ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure `(1+β²)·R·P / (R + β²·P)` with β = 1.2.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("No acute  Disease, seen."), vec!["no", "acute", "disease", ",", "seen", "."]);
    }

    #[test]
    fn bleu_and_rouge_limits() {
        let a = tokenize("the heart size is normal");
        assert!((bleu4(&a, &a) - 1.0).abs() < 1e-12);
        assert!((rouge_l(&a, &a) - 1.0).abs() < 1e-12);
        let b = tokenize("lungs clear bilaterally today");
        assert!(bleu4(&a, &b) < 1e-8);
        assert_eq!(rouge_l(&a, &b), 0.0);
        let empty: Vec<String> = Vec::new();
        assert_eq!(bleu4(&empty, &a), 0.0);
        assert_eq!(rouge_l(&empty, &empty), 0.0);
    }
}
