//! Synthetic multilingual corpora in which some target tokens can only be
//! resolved from the previous sentence.
//!
//! The base language (`en`) uses real English words and an ambiguous pronoun
//! `it`. Every other language is a word-level cipher of it with gendered
//! articles and gendered pronouns. Noun gender is fixed per noun and shared by
//! all cipher languages. Documents are sequences of episodes:
//!
//! - introduction `the ADJ NOUN VERB .`, followed by one or two pronoun
//!   sentences `it VERB ADV .` whose pronoun refers to that noun;
//! - a self-contained sentence `the NOUN VERB and it VERB .`.
//!
//! A pronoun sentence translated on its own has a coin-flip pronoun; with the
//! previous sentence the gender is determined. In the many-to-one direction
//! the cipher languages are the sources (with a single ungendered pronoun
//! form) and English targets use `he`/`she`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DocumentCorpus, LanguagePair, ParallelDocCorpus};
use crate::error::{Error, Result};
use crate::metrics::ContrastiveItem;
use crate::rng::derived_rng;

pub const BASE: &str = "en";

const NOUNS: [&str; 24] = [
    "cat", "dog", "bird", "horse", "tree", "house", "car", "boat", "book", "lamp", "chair", "table", "river", "cloud",
    "stone", "flower", "train", "garden", "bridge", "window", "apple", "letter", "mirror", "candle",
];
const ADJECTIVES: [&str; 10] = ["old", "small", "red", "quiet", "bright", "heavy", "young", "green", "strange", "warm"];
const VERBS: [&str; 16] = [
    "sleeps", "waits", "falls", "shines", "moves", "stays", "rests", "turns", "breaks", "grows", "sings", "burns",
    "shakes", "returns", "vanishes", "glows",
];
const ADVERBS: [&str; 10] = ["slowly", "again", "today", "quietly", "there", "often", "softly", "alone", "now", "outside"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `en` → cipher languages.
    OneToMany,
    /// cipher languages → `en`.
    ManyToOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Cipher language codes.
    pub languages: Vec<String>,
    /// Training documents per cipher language (resource size).
    pub train_docs: Vec<usize>,
    pub test_docs: usize,
    /// Target-side monolingual documents per language (for back-translation).
    pub mono_docs: usize,
    pub contrastive_items: usize,
    /// Context sentences preceding each contrastive source.
    pub context: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub direction: Direction,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Three equally sized cipher languages, one-to-many.
    pub fn three_languages(seed: u64) -> Self {
        Self {
            languages: vec!["xa".into(), "xb".into(), "xc".into()],
            train_docs: vec![400, 400, 400],
            test_docs: 60,
            mono_docs: 100,
            contrastive_items: 300,
            context: 2,
            min_sentences: 4,
            max_sentences: 8,
            direction: Direction::OneToMany,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() || self.languages.len() != self.train_docs.len() {
            return Err(Error::Config("one training size per synthetic language is required".into()));
        }
        if self.languages.iter().any(|l| l == BASE) {
            return Err(Error::Config(format!("`{BASE}` is the base language")));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::Config("need 1 <= min_sentences <= max_sentences".into()));
        }
        if self.context == 0 {
            return Err(Error::Config("contrastive items need at least one context sentence".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    Masculine,
    Feminine,
}

impl Gender {
    fn other(self) -> Self {
        match self {
            Gender::Masculine => Gender::Feminine,
            Gender::Feminine => Gender::Masculine,
        }
    }
}

/// Abstract sentence; rendered per language.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sentence {
    Intro { adj: usize, noun: usize, verb: usize },
    /// `gender` is that of the antecedent in the previous sentence.
    Pronoun { verb: usize, adv: usize, gender: Gender },
    Clause { noun: usize, verb: usize, verb2: usize },
}

#[derive(Clone, Debug)]
pub struct Cipher {
    pub code: String,
    nouns: Vec<String>,
    adjectives: Vec<String>,
    verbs: Vec<String>,
    adverbs: Vec<String>,
    articles: [String; 2],
    pronouns: [String; 2],
    neutral_pronoun: String,
    conj: String,
    adj_after_noun: bool,
}

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut std::collections::HashSet<String>) -> String {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if rng.gen_bool(0.3) {
            w.push_str(ONSETS.choose(rng).unwrap());
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: SyntheticConfig,
    pub genders: Vec<Gender>,
    pub ciphers: Vec<Cipher>,
}

impl World {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, &[0x5E17]);
        let mut genders: Vec<Gender> = (0..NOUNS.len())
            .map(|i| if i < NOUNS.len() / 2 { Gender::Masculine } else { Gender::Feminine })
            .collect();
        genders.shuffle(&mut rng);
        let mut taken: std::collections::HashSet<String> = NOUNS
            .iter()
            .chain(&ADJECTIVES)
            .chain(&VERBS)
            .chain(&ADVERBS)
            .chain(&["the", "it", "and", "he", "she"])
            .map(|s| s.to_string())
            .collect();
        let ciphers = config
            .languages
            .iter()
            .enumerate()
            .map(|(i, code)| {
                let mut words = |n: usize| (0..n).map(|_| pseudo_word(&mut rng, &mut taken)).collect::<Vec<_>>();
                let nouns = words(NOUNS.len());
                let adjectives = words(ADJECTIVES.len());
                let verbs = words(VERBS.len());
                let adverbs = words(ADVERBS.len());
                let mut fixed = words(6);
                let conj = fixed.pop().unwrap();
                let neutral_pronoun = fixed.pop().unwrap();
                Cipher {
                    code: code.clone(),
                    nouns,
                    adjectives,
                    verbs,
                    adverbs,
                    articles: [fixed[0].clone(), fixed[1].clone()],
                    pronouns: [fixed[2].clone(), fixed[3].clone()],
                    neutral_pronoun,
                    conj,
                    adj_after_noun: i % 2 == 1,
                }
            })
            .collect();
        Ok(Self { config, genders, ciphers })
    }

    fn cipher(&self, lang: &str) -> Result<&Cipher> {
        self.ciphers
            .iter()
            .find(|c| c.code == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Translation pairs in the configured direction, one per cipher language.
    pub fn pairs(&self) -> Vec<LanguagePair> {
        self.ciphers
            .iter()
            .map(|c| match self.config.direction {
                Direction::OneToMany => LanguagePair::new(BASE, c.code.clone()),
                Direction::ManyToOne => LanguagePair::new(c.code.clone(), BASE),
            })
            .collect()
    }

    fn render_base(&self, s: &Sentence, gendered: bool) -> String {
        let pron = |g: Gender| match (gendered, g) {
            (false, _) => "it",
            (true, Gender::Masculine) => "he",
            (true, Gender::Feminine) => "she",
        };
        match *s {
            Sentence::Intro { adj, noun, verb } => format!("the {} {} {} .", ADJECTIVES[adj], NOUNS[noun], VERBS[verb]),
            Sentence::Pronoun { verb, adv, gender } => format!("{} {} {} .", pron(gender), VERBS[verb], ADVERBS[adv]),
            Sentence::Clause { noun, verb, verb2 } => {
                format!("the {} {} and {} {} .", NOUNS[noun], VERBS[verb], pron(self.genders[noun]), VERBS[verb2])
            }
        }
    }

    fn render_cipher(&self, c: &Cipher, s: &Sentence, gendered: bool) -> String {
        let g = |g: Gender| usize::from(g == Gender::Feminine);
        let pron = |gender: Gender| if gendered { &c.pronouns[g(gender)] } else { &c.neutral_pronoun };
        match *s {
            Sentence::Intro { adj, noun, verb } => {
                let art = &c.articles[g(self.genders[noun])];
                if c.adj_after_noun {
                    format!("{art} {} {} {} .", c.nouns[noun], c.adjectives[adj], c.verbs[verb])
                } else {
                    format!("{art} {} {} {} .", c.adjectives[adj], c.nouns[noun], c.verbs[verb])
                }
            }
            Sentence::Pronoun { verb, adv, gender } => format!("{} {} {} .", pron(gender), c.verbs[verb], c.adverbs[adv]),
            Sentence::Clause { noun, verb, verb2 } => {
                let gender = self.genders[noun];
                format!(
                    "{} {} {} {} {} {} .",
                    c.articles[g(gender)],
                    c.nouns[noun],
                    c.verbs[verb],
                    c.conj,
                    pron(gender),
                    c.verbs[verb2]
                )
            }
        }
    }

    /// Source and target rendering of `s` for the pair of cipher language `lang`.
    pub fn render(&self, lang: &str, s: &Sentence) -> Result<(String, String)> {
        let c = self.cipher(lang)?;
        Ok(match self.config.direction {
            Direction::OneToMany => (self.render_base(s, false), self.render_cipher(c, s, true)),
            Direction::ManyToOne => (self.render_cipher(c, s, false), self.render_base(s, true)),
        })
    }

    /// Target rendering with the pronoun gender flipped (identity for sentences without a pronoun).
    pub fn render_flipped_target(&self, lang: &str, s: &Sentence) -> Result<String> {
        let flipped = match *s {
            Sentence::Pronoun { verb, adv, gender } => Sentence::Pronoun { verb, adv, gender: gender.other() },
            other => other,
        };
        Ok(self.render(lang, &flipped)?.1)
    }

    pub fn sample_document(&self, rng: &mut ChaCha8Rng) -> Vec<Sentence> {
        let len = rng.gen_range(self.config.min_sentences..=self.config.max_sentences);
        let mut doc = Vec::with_capacity(len);
        while doc.len() < len {
            if rng.gen_bool(0.75) {
                let noun = rng.gen_range(0..NOUNS.len());
                doc.push(Sentence::Intro {
                    adj: rng.gen_range(0..ADJECTIVES.len()),
                    noun,
                    verb: rng.gen_range(0..VERBS.len()),
                });
                for _ in 0..rng.gen_range(1..=2) {
                    doc.push(Sentence::Pronoun {
                        verb: rng.gen_range(0..VERBS.len()),
                        adv: rng.gen_range(0..ADVERBS.len()),
                        gender: self.genders[noun],
                    });
                }
            } else {
                doc.push(Sentence::Clause {
                    noun: rng.gen_range(0..NOUNS.len()),
                    verb: rng.gen_range(0..VERBS.len()),
                    verb2: rng.gen_range(0..VERBS.len()),
                });
            }
        }
        doc.truncate(len);
        doc
    }

    fn sample_documents(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Sentence>> {
        (0..n).map(|_| self.sample_document(rng)).collect()
    }

    fn parallel(&self, lang: &str, pair: &LanguagePair, docs: &[Vec<Sentence>]) -> Result<ParallelDocCorpus> {
        let mut src: Vec<Document> = Vec::with_capacity(docs.len());
        let mut tgt: Vec<Document> = Vec::with_capacity(docs.len());
        for d in docs {
            let rendered = d.iter().map(|s| self.render(lang, s)).collect::<Result<Vec<_>>>()?;
            let (s, t): (Vec<String>, Vec<String>) = rendered.into_iter().unzip();
            src.push(s);
            tgt.push(t);
        }
        ParallelDocCorpus::new(
            pair.clone(),
            DocumentCorpus::new(pair.src.clone(), src)?,
            DocumentCorpus::new(pair.tgt.clone(), tgt)?,
        )
    }

    /// Contrastive items over pronoun sentences with `config.context` preceding sentences.
    pub fn contrastive_items(&self, lang: &str, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ContrastiveItem>> {
        let ctx = self.config.context;
        let mut items = Vec::with_capacity(n);
        while items.len() < n {
            let doc = self.sample_document(rng);
            let positions: Vec<usize> = (ctx..doc.len())
                .filter(|&i| matches!(doc[i], Sentence::Pronoun { .. }))
                .collect();
            let Some(&i) = positions.choose(rng) else { continue };
            let rendered = doc[i - ctx..=i].iter().map(|s| self.render(lang, s)).collect::<Result<Vec<_>>>()?;
            let (src, tgt): (Vec<String>, Vec<String>) = rendered.into_iter().unzip();
            let wrong = self.render_flipped_target(lang, &doc[i])?;
            let correct = rng.gen_range(0..2);
            let mut candidates = vec![wrong.clone(), wrong];
            candidates[correct] = tgt[ctx].clone();
            items.push(ContrastiveItem {
                source: src[ctx].clone(),
                context: src[..ctx].to_vec(),
                context_translations: tgt[..ctx].to_vec(),
                candidates,
                correct,
            });
        }
        Ok(items)
    }

    /// Generates every split for every pair. Each language draws from its own stream.
    pub fn generate(&self) -> Result<Vec<SyntheticPair>> {
        let pairs = self.pairs();
        let mut out = Vec::with_capacity(pairs.len());
        for (li, (cipher, pair)) in self.ciphers.iter().zip(pairs).enumerate() {
            let lang = cipher.code.as_str();
            let stream = |part: u64| derived_rng(self.config.seed, &[li as u64, part]);
            let train = self.parallel(lang, &pair, &self.sample_documents(self.config.train_docs[li], &mut stream(1)))?;
            let test = self.parallel(lang, &pair, &self.sample_documents(self.config.test_docs, &mut stream(2)))?;
            let mono_docs = self.sample_documents(self.config.mono_docs, &mut stream(3));
            let mono = self.parallel(lang, &pair, &mono_docs)?.tgt;
            let contrastive = self.contrastive_items(lang, self.config.contrastive_items, &mut stream(4))?;
            out.push(SyntheticPair { pair, train, test, mono, contrastive });
        }
        Ok(out)
    }

    /// Picks the candidate whose pronoun agrees with the most recent gendered
    /// word of the reference context, or `None` if the context has none.
    /// Used to verify that items are decidable from context alone.
    pub fn resolve_from_context(&self, lang: &str, item: &ContrastiveItem) -> Option<usize> {
        let forms = self.gender_markers(lang)?;
        let mut gender = None;
        for w in item.context_translations.iter().flat_map(|s| s.split_whitespace()) {
            if let Some(&(_, g)) = forms.iter().find(|(f, _)| f == w) {
                gender = Some(g);
            }
        }
        let gender = gender?;
        let pron = self.pronoun_form(lang, gender)?;
        item.candidates.iter().position(|c| c.split_whitespace().any(|w| w == pron))
    }

    /// Surface forms that carry gender in the target language of `lang`'s pair.
    fn gender_markers(&self, lang: &str) -> Option<Vec<(String, Gender)>> {
        let c = self.cipher(lang).ok()?;
        let g = [Gender::Masculine, Gender::Feminine];
        Some(match self.config.direction {
            Direction::OneToMany => c
                .articles
                .iter()
                .chain(&c.pronouns)
                .enumerate()
                .map(|(i, w)| (w.clone(), g[i % 2]))
                .collect(),
            Direction::ManyToOne => {
                let mut v: Vec<(String, Gender)> =
                    NOUNS.iter().enumerate().map(|(i, n)| (n.to_string(), self.genders[i])).collect();
                v.push(("he".into(), Gender::Masculine));
                v.push(("she".into(), Gender::Feminine));
                v
            }
        })
    }

    fn pronoun_form(&self, lang: &str, gender: Gender) -> Option<String> {
        let c = self.cipher(lang).ok()?;
        Some(match (self.config.direction, gender) {
            (Direction::OneToMany, g) => c.pronouns[usize::from(g == Gender::Feminine)].clone(),
            (Direction::ManyToOne, Gender::Masculine) => "he".into(),
            (Direction::ManyToOne, Gender::Feminine) => "she".into(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub pair: LanguagePair,
    pub train: ParallelDocCorpus,
    pub test: ParallelDocCorpus,
    /// Genuine target-language documents without sources.
    pub mono: DocumentCorpus,
    pub contrastive: Vec<ContrastiveItem>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(direction: Direction) -> World {
        World::new(SyntheticConfig {
            train_docs: vec![30, 20, 10],
            contrastive_items: 200,
            direction,
            ..SyntheticConfig::three_languages(4)
        })
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_aligned() {
        let w = small(Direction::OneToMany);
        let a = w.generate().unwrap();
        let b = small(Direction::OneToMany).generate().unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train.src, y.train.src);
            assert_eq!(x.train.tgt, y.train.tgt);
            assert_eq!(x.contrastive, y.contrastive);
            assert!(x.train.src.docs.iter().all(|d| (4..=8).contains(&d.len())));
        }
        assert_eq!(a[0].train.src.docs.len(), 30);
        assert_eq!(a[2].train.src.docs.len(), 10);
        assert_eq!(a[1].pair.to_string(), "en-xb");
    }

    #[test]
    fn items_are_decidable_with_context_only() {
        for dir in [Direction::OneToMany, Direction::ManyToOne] {
            let w = small(dir);
            for p in w.generate().unwrap() {
                let lang = if dir == Direction::OneToMany { p.pair.tgt.clone() } else { p.pair.src.clone() };
                for item in &p.contrastive {
                    item.validate().unwrap();
                    assert_eq!(w.resolve_from_context(&lang, item), Some(item.correct), "{item:?}");
                    // candidates differ in exactly one token and share the source
                    let a: Vec<&str> = item.candidates[0].split_whitespace().collect();
                    let b: Vec<&str> = item.candidates[1].split_whitespace().collect();
                    assert_eq!(a.len(), b.len());
                    assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
                    assert_eq!(item.context.len(), 2);
                }
                // without context the source is identical for both genders
                let ambiguous = p.contrastive.iter().filter(|i| i.correct == 0).count() as f64 / p.contrastive.len() as f64;
                assert!((ambiguous - 0.5).abs() < 0.1);
            }
        }
    }

    #[test]
    fn pronoun_source_carries_no_gender() {
        let w = small(Direction::OneToMany);
        let m = Sentence::Pronoun { verb: 0, adv: 0, gender: Gender::Masculine };
        let f = Sentence::Pronoun { verb: 0, adv: 0, gender: Gender::Feminine };
        let (sm, tm) = w.render("xa", &m).unwrap();
        let (sf, tf) = w.render("xa", &f).unwrap();
        assert_eq!(sm, sf);
        assert_ne!(tm, tf);
        assert_eq!(sm, "it sleeps slowly .");
        let w = small(Direction::ManyToOne);
        let (sm, tm) = w.render("xb", &m).unwrap();
        let (sf, tf) = w.render("xb", &f).unwrap();
        assert_eq!(sm, sf);
        assert_eq!((tm.as_str(), tf.as_str()), ("he sleeps slowly .", "she sleeps slowly ."));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SyntheticConfig::three_languages(1);
        c.train_docs.pop();
        assert!(World::new(c).is_err());
        let mut c = SyntheticConfig::three_languages(1);
        c.languages[0] = "en".into();
        assert!(World::new(c).is_err());
    }
}
