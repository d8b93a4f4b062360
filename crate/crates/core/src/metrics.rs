//! Reference-based caption metrics: BLEU@1-4, ROUGE-L, CIDEr and distinct-n.
//!
//! Captions are compared as already-tokenized sequences. The functions are
//! generic over the token type so the same code scores word strings during
//! evaluation and token ids during MBR selection.
//!
//! CIDEr here is the plain tf-idf cosine variant (no CIDEr-D length penalty or
//! count clipping), averaged over n = 1..4 and scaled by 10.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one order.
fn clipped_matches<T: Eq + Hash>(candidate: &[T], references: &[&[T]], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Length of the reference closest to `cand_len`; ties go to the shorter one.
fn closest_ref_len<T>(cand_len: usize, references: &[&[T]]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - cand_len as i64).abs(), l))
        .unwrap_or(0)
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len > ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn check_order(max_n: usize) -> Result<()> {
    if !(1..=4).contains(&max_n) {
        return Err(invalid(format!("BLEU order {max_n} outside 1..=4")));
    }
    Ok(())
}

/// Sentence BLEU with clipped precisions and brevity penalty.
///
/// With `smoothing`, orders >= 2 use `(matches + 1) / (total + 1)`. Orders for
/// which the candidate is too short to contain any n-gram are left out of the
/// geometric mean.
pub fn bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]], max_n: usize, smoothing: bool) -> Result<f64> {
    check_order(max_n)?;
    if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(invalid("BLEU needs a non-empty candidate and non-empty references"));
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (m, total) = clipped_matches(candidate, references, n);
        if total == 0 {
            continue;
        }
        let p = if smoothing && n >= 2 { (m + 1) as f64 / (total + 1) as f64 } else { m as f64 / total as f64 };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
        orders += 1;
    }
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references));
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Corpus BLEU: matches and totals are pooled over the corpus before the
/// precisions are formed; the brevity penalty uses total lengths.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[&[T]], references: &[Vec<&[T]>], max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(invalid("corpus BLEU needs one reference set per candidate"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (c, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(invalid("empty reference set"));
        }
        for n in 1..=max_n {
            let (m, t) = clipped_matches(c, refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        cand_len += c.len();
        ref_len += closest_ref_len(c.len(), refs);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if totals[n] == 0 || matches[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    Ok(brevity_penalty(cand_len, ref_len) * (log_sum / max_n as f64).exp())
}

pub(crate) fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 against the best-matching reference.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[&[T]]) -> Result<f64> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(invalid("ROUGE-L needs a non-empty candidate and non-empty references"));
    }
    Ok(references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max))
}

/// Result of [`cider`]; `degenerate` is set when the reference corpus has a
/// single document, which makes every idf weight zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderScore {
    pub score: f64,
    pub per_example_mean: f64,
    pub degenerate: bool,
}

/// Corpus CIDEr. Returns the corpus score and the per-example scores.
pub fn cider<T: Eq + Hash>(candidates: &[&[T]], references: &[Vec<&[T]>]) -> Result<(CiderScore, Vec<f64>)> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(invalid("CIDEr needs one reference set per candidate"));
    }
    let docs = references.len() as f64;
    let mut per_example = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let mut df: HashMap<&[T], usize> = HashMap::new();
        for refs in references {
            let mut seen: HashSet<&[T]> = HashSet::new();
            for r in refs {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (c, refs)) in candidates.iter().zip(references).enumerate() {
            let vc = tfidf(c, n, &df, docs);
            let mut sim = 0.0;
            for r in refs {
                sim += cosine(&vc, &tfidf(r, n, &df, docs));
            }
            per_example[i] += 10.0 * sim / refs.len() as f64 / 4.0;
        }
    }
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    let degenerate = references.len() < 2;
    if degenerate {
        log::warn!("CIDEr over a single-document corpus: every idf weight is zero");
    }
    Ok((CiderScore { score: mean, per_example_mean: mean, degenerate }, per_example))
}

fn tfidf<'a, T: Eq + Hash>(tokens: &'a [T], n: usize, df: &HashMap<&[T], usize>, docs: f64) -> HashMap<&'a [T], f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let idf = (docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            (g, c as f64 / total as f64 * idf)
        })
        .collect()
}

fn cosine<K: Eq + Hash>(a: &HashMap<K, f64>, b: &HashMap<K, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(k, v)| v * b.get(k).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Unique n-grams over total n-grams across all candidates.
pub fn distinct_n<T: Eq + Hash>(candidates: &[&[T]], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("distinct-n needs n >= 1"));
    }
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total = 0;
    for c in candidates {
        if c.len() >= n {
            for w in c.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(invalid("distinct-n over candidates with no n-grams"));
    }
    Ok(unique.len() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub candidate: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub exact_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub exact_match: f64,
    pub examples: Vec<ExampleScores>,
}

impl MetricsReport {
    /// Scores whitespace-tokenized captions. `ids`, `candidates` and
    /// `references` are parallel.
    pub fn compute(ids: &[String], candidates: &[String], references: &[Vec<String>]) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != references.len() || ids.len() != candidates.len() {
            return Err(invalid("metrics need parallel, non-empty id/candidate/reference lists"));
        }
        let cand_tok: Vec<Vec<&str>> = candidates.iter().map(|c| c.split_whitespace().collect()).collect();
        let ref_tok: Vec<Vec<Vec<&str>>> = references
            .iter()
            .map(|rs| rs.iter().map(|r| r.split_whitespace().collect()).collect())
            .collect();
        let cands: Vec<&[&str]> = cand_tok.iter().map(Vec::as_slice).collect();
        let refs: Vec<Vec<&[&str]>> = ref_tok.iter().map(|rs| rs.iter().map(Vec::as_slice).collect()).collect();

        let mut b = [0.0; 4];
        for (n, slot) in b.iter_mut().enumerate() {
            *slot = corpus_bleu(&cands, &refs, n + 1)?;
        }
        let (cider_score, cider_each) = cider(&cands, &refs)?;
        let mut examples = Vec::with_capacity(cands.len());
        for i in 0..cands.len() {
            let (bleu4, rl) = if cands[i].is_empty() {
                (0.0, 0.0)
            } else {
                (bleu(cands[i], &refs[i], 4, false)?, rouge_l(cands[i], &refs[i])?)
            };
            examples.push(ExampleScores {
                id: ids[i].clone(),
                candidate: candidates[i].clone(),
                bleu4,
                rouge_l: rl,
                cider: cider_each[i],
                exact_match: refs[i].iter().any(|r| *r == cands[i]),
            });
        }
        let count = examples.len() as f64;
        Ok(Self {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            rouge_l: examples.iter().map(|e| e.rouge_l).sum::<f64>() / count,
            cider: cider_score.score,
            distinct1: distinct_n(&cands, 1).unwrap_or(0.0),
            distinct2: distinct_n(&cands, 2).unwrap_or(0.0),
            exact_match: examples.iter().filter(|e| e.exact_match).count() as f64 / count,
            examples,
        })
    }

    pub fn examples_csv(&self) -> String {
        let mut out = String::from("id,bleu4,rouge_l,cider,exact_match,candidate\n");
        for e in &self.examples {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},\"{}\"\n",
                e.id,
                e.bleu4,
                e.rouge_l,
                e.cider,
                e.exact_match,
                e.candidate.replace('"', "\"\"")
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_and_hand_values() {
        let r = toks("a red wooden chair with black legs");
        for n in 1..=4 {
            assert!((bleu(&r, &[&r], n, false).unwrap() - 1.0).abs() < 1e-12);
            assert!((bleu(&r, &[&r], n, true).unwrap() - 1.0).abs() < 1e-12);
        }
        let c = toks("a a a");
        let r = toks("a b");
        assert!((bleu(&c, &[&r], 1, false).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let d = toks("x y z w");
        assert_eq!(bleu(&d, &[&r], 4, false).unwrap(), 0.0);
        assert!(bleu::<&str>(&[], &[&r], 4, false).is_err());
        assert!(bleu(&c, &[], 4, false).is_err());
        assert!(bleu(&c, &[&r], 5, false).is_err());
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let c = toks("a b");
        let r = toks("a b c d");
        let s = bleu(&c, &[&r], 1, false).unwrap();
        assert!((s - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_hand_values() {
        assert!((rouge_l(&toks("a b c"), &[&toks("a c")[..]]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b"), &[&toks("c d")[..]]).unwrap(), 0.0);
        assert_eq!(rouge_l(&toks("a b"), &[&toks("a b")[..]]).unwrap(), 1.0);
    }

    #[test]
    fn cider_three_document_corpus() {
        // Unigram-only check: with one-word captions only n = 1 contributes.
        // Corpus references: {x}, {y}, {x}. df(x) = 2, df(y) = 1.
        // Candidate 0 "x" vs ref "x": vectors are parallel, cosine 1.
        // Candidate 1 "x" vs ref "y": disjoint, cosine 0.
        // Candidate 2 "y" vs ref "x": cosine 0.
        // Per-example = 10 * cos / 4 -> [2.5, 0, 0], corpus mean 2.5 / 3.
        let c = [vec!["x"], vec!["x"], vec!["y"]];
        let r = [vec!["x"], vec!["y"], vec!["x"]];
        let cands: Vec<&[&str]> = c.iter().map(Vec::as_slice).collect();
        let refs: Vec<Vec<&[&str]>> = r.iter().map(|x| vec![x.as_slice()]).collect();
        let (score, each) = cider(&cands, &refs).unwrap();
        assert!((each[0] - 2.5).abs() < 1e-12);
        assert_eq!(each[1], 0.0);
        assert!((score.score - 2.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cider_two_word_hand_computation() {
        // refs: d0 "a b", d1 "a c", d2 "d e". Candidate 0 = "a b" vs "a b".
        // idf(a) = ln(3/2), idf(b) = ln 3. Candidate vector equals reference
        // vector, so each order contributes cosine 1 where it has n-grams:
        // n = 1 and n = 2 (bigram "a b" df 1). n = 3, 4: no n-grams -> 0.
        // per-example[0] = 10 * (1 + 1) / 4 = 5.
        // Candidate 1 = "a b" vs "a c": unigram vectors (a: .5 ln1.5, b: .5 ln3)
        // and (a: .5 ln1.5, c: .5 ln3): cos = ln1.5^2 / (ln1.5^2 + ln3^2).
        let c = [vec!["a", "b"], vec!["a", "b"], vec!["d", "e"]];
        let r = [vec!["a", "b"], vec!["a", "c"], vec!["d", "e"]];
        let cands: Vec<&[&str]> = c.iter().map(Vec::as_slice).collect();
        let refs: Vec<Vec<&[&str]>> = r.iter().map(|x| vec![x.as_slice()]).collect();
        let (_, each) = cider(&cands, &refs).unwrap();
        assert!((each[0] - 5.0).abs() < 1e-12);
        let l15 = 1.5f64.ln();
        let l3 = 3f64.ln();
        let cos = l15 * l15 / (l15 * l15 + l3 * l3);
        assert!((each[1] - 10.0 * cos / 4.0).abs() < 1e-12);
        assert!((each[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cider_single_document_is_degenerate() {
        let c = [vec!["a", "b"]];
        let cands: Vec<&[&str]> = c.iter().map(Vec::as_slice).collect();
        let refs = vec![vec![c[0].as_slice()]];
        let (score, _) = cider(&cands, &refs).unwrap();
        assert!(score.degenerate);
        assert_eq!(score.score, 0.0);
    }

    #[test]
    fn distinct_n_values() {
        let a = toks("a b c");
        let b = toks("d e f");
        assert_eq!(distinct_n(&[&a[..], &b[..]], 1).unwrap(), 1.0);
        let dup = distinct_n(&[&a[..], &a[..]], 1).unwrap();
        assert_eq!(dup, 0.5);
        let rep = toks("x x x x");
        assert_eq!(distinct_n(&[&rep[..]], 1).unwrap(), 0.25);
        assert!(distinct_n::<&str>(&[], 1).is_err());
    }

    #[test]
    fn report_covers_all_metrics() {
        let ids = vec!["s0".to_string(), "s1".to_string()];
        let cands = vec!["a red chair with legs".to_string(), "a blue lamp".to_string()];
        let refs = vec![vec!["a red chair with legs".to_string()], vec!["a blue lamp with base".to_string()]];
        let rep = MetricsReport::compute(&ids, &cands, &refs).unwrap();
        assert_eq!(rep.examples.len(), 2);
        assert!(rep.examples[0].exact_match && !rep.examples[1].exact_match);
        assert_eq!(rep.exact_match, 0.5);
        for v in [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rouge_l, rep.distinct1, rep.distinct2] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((0.0..=10.0).contains(&rep.cider));
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "distinct1", "distinct2", "exact_match"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(rep.examples_csv().lines().count(), 3);
    }
}
