//! Brute-force reference implementations, deliberately naive.

pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap() } else { ' ' })
        .collect();
    cleaned.split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

/// Multiset intersection size by sorting both sides and merging.
pub fn overlap(a: &[Vec<String>], b: &[Vec<String>]) -> usize {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort();
    b.sort();
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn f1(hit: usize, hyp: usize, reference: usize) -> f64 {
    if hit == 0 || hyp == 0 || reference == 0 {
        return 0.0;
    }
    let p = hit as f64 / hyp as f64;
    let r = hit as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_n(hyp: &str, reference: &str, n: usize) -> f64 {
    let h = ngrams(&words(hyp), n);
    let r = ngrams(&words(reference), n);
    f1(overlap(&h, &r), h.len(), r.len())
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|w| it.any(|h| h == *w))
}

/// Longest common subsequence by trying every subset of the shorter side.
pub fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let pick: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if pick.len() > best && is_subsequence(&pick, long) {
            best = pick.len();
        }
    }
    best
}

/// Textbook quadratic table.
pub fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let h = words(hyp);
    let r = words(reference);
    let l = if h.len() <= 8 || r.len() <= 8 {
        lcs_exhaustive(&h, &r)
    } else {
        lcs_table(&h, &r)
    };
    f1(l, h.len(), r.len())
}

pub fn mean_rouge(hyp: &str, reference: &str) -> f64 {
    (rouge_n(hyp, reference, 1) + rouge_n(hyp, reference, 2) + rouge_l(hyp, reference)) / 3.0
}
