//! Corpus BLEU, document BLEU, gendered-pronoun F1 and contrastive accuracy.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::d2d::encode_sentences;
use crate::error::{Error, Result};
use crate::model::{token_log_probs, Batch, ModelParams};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, SEN};

/// The gendered pronoun inventory.
pub const PRONOUNS: [&str; 8] = ["he", "his", "him", "himself", "she", "her", "hers", "herself"];

/// Sufficient statistics of corpus BLEU-4.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    /// Geometric mean of the four precisions times the brevity penalty; 0 if
    /// any precision is 0 or the hypotheses are empty.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln()).sum::<f64>() / 4.0;
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp().min(1.0);
        bp * log_p.exp()
    }

    fn add_segment(&mut self, hyp: &[&str], reference: &[&str]) {
        self.hyp_len += hyp.len() as u64;
        self.ref_len += reference.len() as u64;
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            let mut hyp_counts = ngram_counts(hyp, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
            for (gram, c) in hyp_counts.drain() {
                self.matches[n - 1] += c.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
        }
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

pub fn bleu_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_segment(&tokens(h.as_ref()), &tokens(r.as_ref()));
    }
    Ok(stats)
}

/// BLEU-4 over whitespace tokens, in `[0, 1]`.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

/// Joins each document's sentences with single spaces.
pub fn document_segments(docs: &[Document]) -> Vec<String> {
    docs.iter().map(|d| d.join(" ")).collect()
}

/// BLEU with n-grams counted over whole documents, across sentence boundaries.
pub fn doc_bleu(hyps: &[Document], refs: &[Document]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::DocumentCount { src: hyps.len(), tgt: refs.len() });
    }
    corpus_bleu(&document_segments(hyps), &document_segments(refs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PronounF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: u64,
    pub hyp_total: u64,
    pub ref_total: u64,
}

/// Lowercased whitespace tokens with non-alphanumeric characters stripped from both ends.
pub fn pronoun_tokens(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
}

fn pronoun_counts(sentence: &str) -> [u64; 8] {
    let mut c = [0u64; 8];
    for t in pronoun_tokens(sentence) {
        if let Some(i) = PRONOUNS.iter().position(|&g| g == t) {
            c[i] += 1;
        }
    }
    c
}

pub fn pronoun_f1<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<PronounF1> {
    if hyps.len() != refs.len() {
        return Err(Error::Alignment(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let (mut matched, mut hyp_total, mut ref_total) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (ch, cr) = (pronoun_counts(h.as_ref()), pronoun_counts(r.as_ref()));
        for g in 0..PRONOUNS.len() {
            matched += ch[g].min(cr[g]);
            hyp_total += ch[g];
            ref_total += cr[g];
        }
    }
    if hyp_total == 0 && ref_total == 0 {
        return Ok(PronounF1 { precision: 1.0, recall: 1.0, f1: 1.0, matched, hyp_total, ref_total });
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(matched, hyp_total);
    let recall = ratio(matched, ref_total);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PronounF1 { precision, recall, f1, matched, hyp_total, ref_total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveItem {
    pub source: String,
    /// Preceding source sentences, oldest first.
    pub context: Vec<String>,
    /// Reference translations of `context`, same order.
    pub context_translations: Vec<String>,
    pub candidates: Vec<String>,
    pub correct: usize,
}

impl ContrastiveItem {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::InvalidCorpus("contrastive item needs at least two candidates".into()));
        }
        if self.correct >= self.candidates.len() {
            return Err(Error::InvalidCorpus(format!(
                "correct index {} out of range for {} candidates",
                self.correct,
                self.candidates.len()
            )));
        }
        Ok(())
    }
}

pub fn write_contrastive(items: &[ContrastiveItem], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_contrastive(path: impl AsRef<Path>) -> Result<Vec<ContrastiveItem>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ContrastiveItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        item.validate().map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        items.push(item);
    }
    Ok(items)
}

/// Source ids, target ids (`BOS ... EOS`) and the index in `tgt_out` where the
/// candidate span starts, for candidate `c` with `d_context` context sentences.
pub fn contrastive_sequences(
    vocab: &Vocabulary,
    item: &ContrastiveItem,
    c: usize,
    d_context: usize,
) -> Result<(Vec<TokenId>, Vec<TokenId>, usize)> {
    if d_context > item.context.len() {
        return Err(Error::Config(format!(
            "{d_context} context sentences requested, item has {}",
            item.context.len()
        )));
    }
    if item.context_translations.len() < item.context.len() {
        return Err(Error::Missing(format!(
            "reference context translations ({} of {})",
            item.context_translations.len(),
            item.context.len()
        )));
    }
    let src_ctx = &item.context[item.context.len() - d_context..];
    let tgt_ctx = &item.context_translations[item.context_translations.len() - d_context..];
    let mut src_sents: Vec<&str> = src_ctx.iter().map(String::as_str).collect();
    src_sents.push(&item.source);
    let src = encode_sentences(vocab, &src_sents);
    let mut tgt = vec![BOS];
    tgt.extend(encode_sentences(vocab, tgt_ctx));
    if d_context > 0 {
        tgt.push(SEN);
    }
    // tgt_out[i] predicts tgt[i + 1]; the candidate starts right after the prefix
    let start = tgt.len() - 1;
    tgt.extend(vocab.encode(&item.candidates[c]));
    tgt.push(EOS);
    Ok((src, tgt, start))
}

/// Sum of the log-probabilities of the candidate's tokens and the final `EOS`,
/// with the reference context force-decoded before it. `lang` is the
/// language-embedding index of the target language.
pub fn score_candidates(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    item: &ContrastiveItem,
    d_context: usize,
    lang: usize,
) -> Result<Vec<f64>> {
    let seqs = (0..item.candidates.len())
        .map(|c| contrastive_sequences(vocab, item, c, d_context))
        .collect::<Result<Vec<_>>>()?;
    let src: Vec<&[TokenId]> = seqs.iter().map(|s| s.0.as_slice()).collect();
    let tgt: Vec<&[TokenId]> = seqs.iter().map(|s| s.1.as_slice()).collect();
    let batch = Batch::from_sequences(&src, &tgt, &vec![lang; seqs.len()])?;
    let lps = token_log_probs(params, &batch)?;
    Ok(lps
        .iter()
        .zip(&seqs)
        .map(|(lp, s)| lp[s.2..].iter().map(|&x| x as f64).sum())
        .collect())
}

pub fn score_candidate(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    item: &ContrastiveItem,
    candidate: usize,
    d_context: usize,
    lang: usize,
) -> Result<f64> {
    Ok(score_candidates(params, vocab, item, d_context, lang)?[candidate])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Normal-approximation 95% confidence radius of the accuracy.
    pub ci_radius: f64,
    pub per_item: Vec<bool>,
}

/// `1.96 * sqrt(acc * (1 - acc) / n)`.
pub fn ci_radius(accuracy: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * (accuracy * (1.0 - accuracy) / n as f64).sqrt()
}

/// An item counts as correct only if its correct candidate has the strictly
/// highest score.
pub fn contrastive_accuracy_with<F>(items: &[ContrastiveItem], mut scores: F) -> Result<ContrastiveReport>
where
    F: FnMut(&ContrastiveItem) -> Result<Vec<f64>>,
{
    if items.is_empty() {
        return Err(Error::InvalidCorpus("no contrastive items".into()));
    }
    let mut per_item = Vec::with_capacity(items.len());
    for item in items {
        item.validate()?;
        let s = scores(item)?;
        let best = s[item.correct];
        per_item.push(s.iter().enumerate().all(|(i, &x)| i == item.correct || x < best));
    }
    let correct = per_item.iter().filter(|&&b| b).count();
    let accuracy = correct as f64 / items.len() as f64;
    Ok(ContrastiveReport { accuracy, correct, total: items.len(), ci_radius: ci_radius(accuracy, items.len()), per_item })
}

pub fn contrastive_accuracy(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    items: &[ContrastiveItem],
    d_context: usize,
    lang: usize,
) -> Result<ContrastiveReport> {
    contrastive_accuracy_with(items, |item| score_candidates(params, vocab, item, d_context, lang))
}

/// A metric value with the counts it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub counts: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn bleu(metric: &str, stats: &BleuStats) -> Self {
        let mut counts = Vec::new();
        for n in 0..4 {
            counts.push((format!("match_{}", n + 1), stats.matches[n] as f64));
            counts.push((format!("total_{}", n + 1), stats.totals[n] as f64));
        }
        counts.push(("hyp_len".into(), stats.hyp_len as f64));
        counts.push(("ref_len".into(), stats.ref_len as f64));
        Self { metric: metric.into(), value: stats.score(), counts }
    }

    pub fn pronoun(f: &PronounF1) -> Self {
        Self {
            metric: "pronoun_f1".into(),
            value: f.f1,
            counts: vec![
                ("precision".into(), f.precision),
                ("recall".into(), f.recall),
                ("matched".into(), f.matched as f64),
                ("hyp_total".into(), f.hyp_total as f64),
                ("ref_total".into(), f.ref_total as f64),
            ],
        }
    }

    pub fn contrastive(r: &ContrastiveReport) -> Self {
        Self {
            metric: "contrastive_accuracy".into(),
            value: r.accuracy,
            counts: vec![
                ("correct".into(), r.correct as f64),
                ("total".into(), r.total as f64),
                ("ci_radius".into(), r.ci_radius),
            ],
        }
    }
}

/// `metric  value  key=value ...` rows.
pub fn reports_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric\tvalue\tcounts\n");
    for r in reports {
        let counts: Vec<String> = r.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.push_str(&format!("{}\t{:.6}\t{}\n", r.metric, r.value, counts.join(" ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_hand_example() {
        let b = corpus_bleu(&["a b c d e f g h x"], &["a b c d e f g h i"]).unwrap();
        assert!((b - (5.0f64 / 9.0).powf(0.25)).abs() < 1e-12);
        let s = bleu_stats(&["a b c d e f g h x"], &["a b c d e f g h i"]).unwrap();
        assert_eq!(s.matches, [8, 7, 6, 5]);
        assert_eq!(s.totals, [9, 8, 7, 6]);
    }

    #[test]
    fn bleu_edge_cases() {
        assert_eq!(corpus_bleu(&["a b c d", "x y z w v"], &["a b c d", "x y z w v"]).unwrap(), 1.0);
        let short = corpus_bleu(&["a b c d"], &["a b c d e f"]).unwrap();
        assert!((short - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
        assert_eq!(corpus_bleu(&["a b c"], &["a b c"]).unwrap(), 0.0, "no 4-grams");
        assert_eq!(corpus_bleu::<&str, &str>(&[], &[]).unwrap(), 0.0);
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn doc_bleu_counts_boundary_ngrams() {
        let hyp = vec![vec!["a b c".to_string(), "d e x".to_string()]];
        let reference = vec![vec!["a b c".to_string(), "d e f".to_string()]];
        let b = doc_bleu(&hyp, &reference).unwrap();
        assert!((b - (1.0f64 / 3.0).powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn pronoun_hand_example() {
        let f = pronoun_f1(&["he gave him his book"], &["she gave him her book"]).unwrap();
        assert_eq!((f.matched, f.hyp_total, f.ref_total), (1, 3, 3));
        assert!((f.precision - 1.0 / 3.0).abs() < 1e-15 && (f.f1 - 1.0 / 3.0).abs() < 1e-15);
        let none = pronoun_f1(&["a b"], &["c d"]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (1.0, 1.0, 1.0));
        let one_sided = pronoun_f1(&["He, said"], &["it said"]).unwrap();
        assert_eq!((one_sided.precision, one_sided.recall, one_sided.f1), (0.0, 0.0, 0.0));
        let same = pronoun_f1(&["\"Her\" book. himself!"], &["her book himself"]).unwrap();
        assert_eq!(same.f1, 1.0);
    }

    fn item(correct: usize) -> ContrastiveItem {
        ContrastiveItem {
            source: "it sleeps .".into(),
            context: vec!["the cat eats .".into()],
            context_translations: vec!["la chat mange .".into()],
            candidates: vec!["elle dort .".into(), "il dort .".into()],
            correct,
        }
    }

    #[test]
    fn accuracy_rules() {
        let items = vec![item(0), item(1), item(0)];
        let oracle = contrastive_accuracy_with(&items, |it| {
            Ok((0..2).map(|c| if c == it.correct { 0.0 } else { -1.0 }).collect())
        })
        .unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        let ties = contrastive_accuracy_with(&items, |_| Ok(vec![-1.0, -1.0])).unwrap();
        assert_eq!(ties.accuracy, 0.0);
        assert!(contrastive_accuracy_with(&[], |_| Ok(vec![])).is_err());
        assert!((ci_radius(0.5, 200) - 0.0693).abs() < 1e-3);
    }

    #[test]
    fn contrastive_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let items = vec![item(0), item(1)];
        write_contrastive(&items, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"context_translations\""));
        assert_eq!(read_contrastive(&path).unwrap(), items);
        std::fs::write(&path, "{\"source\":1}\n").unwrap();
        assert!(matches!(read_contrastive(&path), Err(Error::Parse { line: 1, .. })));
    }
}
