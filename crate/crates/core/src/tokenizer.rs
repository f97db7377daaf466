//! Byte-pair-encoding subword vocabulary.
//!
//! Words are prefixed with the word-boundary marker `▁` before segmentation,
//! so word-initial pieces carry the marker and continuation pieces do not.
//! Decoding concatenates pieces and turns markers back into spaces. Text is
//! normalized by collapsing whitespace runs to a single space.
//!
//! Reserved ids: `PAD=0, UNK=1, BOS=2, EOS=3, SEN=4`, then one language token
//! per configured language in configuration order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::DocumentCorpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEN: TokenId = 4;
pub const NUM_FIXED_SPECIALS: usize = 5;

pub const WORD_MARK: char = '\u{2581}';
const FIXED_SURFACES: [&str; NUM_FIXED_SPECIALS] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEN]"];
const HEADER: &str = "#docnmt-vocab v1";

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn language_surface(lang: &str) -> String {
    format!("[2{lang}]")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> (rank, merged id)
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    languages: Vec<String>,
}

impl Vocabulary {
    fn from_parts(
        languages: Vec<String>,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let expected = Self::special_surfaces(&languages);
        if tokens.len() < expected.len() || tokens[..expected.len()] != expected[..] {
            return Err(Error::Config(
                "vocabulary does not start with the reserved specials".into(),
            ));
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("merge refers to unknown piece `{s}`")))
            };
            let merged = lookup(&format!("{l}{r}"))?;
            merge_ranks.insert((lookup(l)?, lookup(r)?), (rank, merged));
        }
        Ok(Self {
            tokens,
            index,
            merges,
            merge_ranks,
            languages,
        })
    }

    fn special_surfaces(languages: &[String]) -> Vec<String> {
        FIXED_SURFACES
            .iter()
            .map(|s| s.to_string())
            .chain(languages.iter().map(|l| language_surface(l)))
            .collect()
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_specials(&self) -> usize {
        NUM_FIXED_SPECIALS + self.languages.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.num_specials()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn language_id(&self, lang: &str) -> Result<TokenId> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .map(|i| (NUM_FIXED_SPECIALS + i) as TokenId)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    fn initial_symbols(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut buf = [0u8; 4];
        out.push(self.index.get(WORD_MARK.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK));
        for ch in word.chars() {
            let id = if ch == WORD_MARK {
                UNK
            } else {
                self.index.get(ch.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK)
            };
            out.push(id);
        }
    }

    fn apply_merges(&self, symbols: &mut Vec<TokenId>) {
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, i, m)))
                .min();
            let Some((rank, _, merged)) = best else { break };
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i], symbols[i + 1])).map(|p| p.0) == Some(rank)
                {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = out;
        }
    }

    /// Greedy application of the learned merges; unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        let mut word_syms = Vec::new();
        for word in text.split_whitespace() {
            word_syms.clear();
            self.initial_symbols(word, &mut word_syms);
            self.apply_merges(&mut word_syms);
            ids.extend_from_slice(&word_syms);
        }
        ids
    }

    /// Specials render as their bracketed surface forms, separated by spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut raw = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.size(),
            })?;
            if self.is_special(id) {
                raw.push(' ');
                raw.push_str(tok);
                raw.push(' ');
            } else {
                raw.push_str(tok);
            }
        }
        Ok(normalize_whitespace(&raw.replace(WORD_MARK, " ")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nlanguages");
        for l in &self.languages {
            out.push('\t');
            out.push_str(l);
        }
        out.push_str(&format!("\nmerges\t{}\n", self.merges.len()));
        for (l, r) in &self.merges {
            out.push_str(&format!("{l}\t{r}\n"));
        }
        out.push_str(&format!("tokens\t{}\n", self.tokens.len()));
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, message: &str| Error::Parse {
            path: "<vocab>".into(),
            line: line + 1,
            message: message.to_string(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(usize::MAX - 1, what));
        let (n, header) = next("missing header")?;
        if header != HEADER {
            return Err(err(n, "unsupported vocabulary header"));
        }
        let (n, langs) = next("missing languages line")?;
        let mut fields = langs.split('\t');
        if fields.next() != Some("languages") {
            return Err(err(n, "expected languages line"));
        }
        let languages: Vec<String> = fields.map(str::to_string).collect();
        let count = |line: (usize, &str), key: &str| -> Result<usize> {
            line.1
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('\t'))
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| err(line.0, &format!("expected `{key}<TAB>count`")))
        };
        let n_merges = count(next("missing merges section")?, "merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (n, line) = next("truncated merges section")?;
            let (l, r) = line.split_once('\t').ok_or_else(|| err(n, "malformed merge"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let n_tokens = count(next("missing tokens section")?, "tokens")?;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(next("truncated tokens section")?.1.to_string());
        }
        Self::from_parts(languages, tokens, merges)
    }
}

/// Learns a vocabulary of (at most) `vocab_size` entries.
///
/// Pair frequency ties are broken by the lexicographic order of the pair.
/// Training stops early when no mergeable pair remains.
pub fn train_bpe(
    corpora: &[&DocumentCorpus],
    vocab_size: usize,
    languages: &[String],
) -> Result<Vocabulary> {
    let mut word_counts: HashMap<&str, u64> = HashMap::new();
    for corpus in corpora {
        for sent in corpus.sentences() {
            for word in sent.split_whitespace() {
                *word_counts.entry(word).or_default() += 1;
            }
        }
    }
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    alphabet.insert(WORD_MARK);
    for word in word_counts.keys() {
        alphabet.extend(word.chars().filter(|&c| c != WORD_MARK));
    }

    let specials = Vocabulary::special_surfaces(languages);
    let minimum = specials.len() + alphabet.len() + 1;
    if vocab_size < minimum {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} too small: need at least {minimum} \
             ({} specials + {} base characters + 1)",
            specials.len(),
            alphabet.len()
        )));
    }

    let mut tokens = specials.clone();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();

    // Deterministic word order so that counts never depend on hash iteration.
    let mut words: Vec<(&str, u64)> = word_counts.into_iter().collect();
    words.sort_unstable();
    let mut segs: Vec<(Vec<TokenId>, u64)> = words
        .iter()
        .map(|&(w, c)| {
            let mut syms = vec![index[&WORD_MARK.to_string()]];
            syms.extend(w.chars().map(|ch| {
                if ch == WORD_MARK {
                    UNK
                } else {
                    index[&ch.to_string()]
                }
            }));
            (syms, c)
        })
        .collect();

    let target_merges = vocab_size - tokens.len();
    let mut merges = Vec::with_capacity(target_merges);
    while merges.len() < target_merges {
        let mut freq: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (syms, c) in &segs {
            for w in syms.windows(2) {
                if w[0] != UNK && w[1] != UNK {
                    *freq.entry((w[0], w[1])).or_default() += c;
                }
            }
        }
        let best = freq
            .into_iter()
            .filter(|&((l, r), _)| {
                let merged = format!("{}{}", tokens[l as usize], tokens[r as usize]);
                !specials.contains(&merged)
            })
            .max_by(|(pa, fa), (pb, fb)| {
                fa.cmp(fb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some(((l, r), _)) = best else { break };
        let merged_str = format!("{}{}", tokens[l as usize], tokens[r as usize]);
        let merged = *index.entry(merged_str.clone()).or_insert_with(|| {
            tokens.push(merged_str.clone());
            (tokens.len() - 1) as TokenId
        });
        merges.push((tokens[l as usize].clone(), tokens[r as usize].clone()));
        for (syms, _) in &mut segs {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == l && syms[i + 1] == r {
                    syms[i] = merged;
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Vocabulary::from_parts(languages.to_vec(), tokens, merges)
}

/// Pair frequencies of the initial segmentation, for inspection and tests.
pub fn initial_pair_counts(corpora: &[&DocumentCorpus]) -> HashMap<(String, String), u64> {
    let mut counts = HashMap::new();
    for corpus in corpora {
        for word in corpus.sentences().flat_map(str::split_whitespace) {
            let syms: Vec<String> = std::iter::once(WORD_MARK)
                .chain(word.chars())
                .map(|c| c.to_string())
                .collect();
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += 1;
            }
        }
    }
    counts
}
