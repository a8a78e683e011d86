//! Sparse feature extraction from ads under the three feature sets: ad URL,
//! URL+title pair, and word stems.
//!
//! The vocabulary is built from training ads only and fixed afterwards; ids
//! follow first-occurrence order. Feature keys unseen at vectorization time
//! are dropped, never hashed, so the train/test vocabulary contract stays
//! explicit. Everything here sees ads only, not group labels.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::experiment::AdRecord;

/// Which of the three feature sets an analysis uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSetKind {
    Url,
    UrlTitle,
    WordStem,
}

impl fmt::Display for FeatureSetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSetKind::Url => write!(f, "url"),
            FeatureSetKind::UrlTitle => write!(f, "urltitle"),
            FeatureSetKind::WordStem => write!(f, "wordstem"),
        }
    }
}

/// One vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKey {
    Url(String),
    UrlTitle { title: String, url: String },
    Stem(String),
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKey::Url(url) => write!(f, "{url}"),
            FeatureKey::UrlTitle { title, url } => write!(f, "{title} | {url}"),
            FeatureKey::Stem(stem) => write!(f, "{stem}"),
        }
    }
}

/// A fixed, ordered feature key set with dense 0-based ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    kind: FeatureSetKind,
    entries: Vec<FeatureKey>,
    index: HashMap<FeatureKey, u32>,
}

impl Vocabulary {
    pub fn kind(&self) -> FeatureSetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, id: u32) -> &FeatureKey {
        &self.entries[id as usize]
    }

    pub fn id_of(&self, key: &FeatureKey) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn entries(&self) -> &[FeatureKey] {
        &self.entries
    }

    /// Stable FNV-1a fingerprint of the kind and ordered entries.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.kind.to_string().as_bytes());
        for key in &self.entries {
            eat(&[0x1e]);
            eat(key.to_string().as_bytes());
        }
        format!("fnv1a:{h:016x}")
    }
}

/// Sparse feature-id -> count map; ids are valid in one vocabulary and
/// counts of present keys are always >= 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureVector {
    counts: std::collections::BTreeMap<u32, u32>,
}

impl FeatureVector {
    pub fn get(&self, id: u32) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.counts.iter().map(|(&id, &c)| (id, c))
    }

    pub fn nonzero_len(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    fn bump(&mut self, id: u32) {
        *self.counts.entry(id).or_insert(0) += 1;
    }

    /// Test helper for hand-built vectors.
    pub fn from_pairs(pairs: &[(u32, u32)]) -> FeatureVector {
        let mut counts = std::collections::BTreeMap::new();
        for &(id, c) in pairs {
            assert!(c >= 1, "feature counts must be positive");
            counts.insert(id, c);
        }
        FeatureVector { counts }
    }
}

fn each_key<F: FnMut(FeatureKey)>(kind: FeatureSetKind, ad: &AdRecord, mut f: F) {
    match kind {
        FeatureSetKind::Url => f(FeatureKey::Url(ad.url.clone())),
        FeatureSetKind::UrlTitle => f(FeatureKey::UrlTitle {
            title: ad.title.clone(),
            url: ad.url.clone(),
        }),
        FeatureSetKind::WordStem => {
            // Word stems come from the title and body text; the URL string
            // is excluded.
            for token in tokenize(&ad.title).chain(tokenize(&ad.text)) {
                f(FeatureKey::Stem(stem(&token)));
            }
        }
    }
}

/// Build the vocabulary from training agents' ads, one slice of ads per
/// agent. Contains every feature key occurring in any training ad, in
/// first-occurrence order.
pub fn build_vocabulary<'a, I>(kind: FeatureSetKind, training_ads: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a [AdRecord]>,
{
    let mut entries = Vec::new();
    let mut index = HashMap::new();
    for ads in training_ads {
        for ad in ads {
            each_key(kind, ad, |key| {
                if !index.contains_key(&key) {
                    index.insert(key.clone(), entries.len() as u32);
                    entries.push(key);
                }
            });
        }
    }
    Vocabulary { kind, entries, index }
}

/// Count the vocabulary's keys in one agent's ads. Keys absent from the
/// vocabulary are silently dropped.
pub fn vectorize(vocab: &Vocabulary, ads: &[AdRecord]) -> FeatureVector {
    let mut v = FeatureVector::default();
    for ad in ads {
        each_key(vocab.kind, ad, |key| {
            if let Some(id) = vocab.id_of(&key) {
                v.bump(id);
            }
        });
    }
    v
}

/// Lowercase and split on any non-alphanumeric character, dropping pure
/// number tokens and tokens shorter than 2 characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2 && !t.chars().all(|c| c.is_numeric()))
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .into_iter()
}

/// Porter suffix stripping, iterated to a fixed point so stemming is
/// idempotent. Tokens that are not pure lowercase ASCII words pass through
/// unchanged.
pub fn stem(word: &str) -> String {
    let mut current = word.to_string();
    for _ in 0..8 {
        let next = porter_pass(&current);
        if next == current {
            return next;
        }
        current = next;
    }
    current
}

fn porter_pass(word: &str) -> String {
    if word.len() <= 2 || !word.bytes().all(|b| b.is_ascii_lowercase()) {
        return word.to_string();
    }
    let mut s = Porter {
        b: word.as_bytes().to_vec(),
        k: word.len(),
    };
    s.step1a();
    s.step1b();
    s.step1c();
    s.step2();
    s.step3();
    s.step4();
    s.step5();
    String::from_utf8(s.b[..s.k].to_vec()).expect("ascii stem")
}

/// Classic Porter machinery over a lowercase ASCII buffer; `k` is the
/// current stem length.
struct Porter {
    b: Vec<u8>,
    k: usize,
}

impl Porter {
    fn is_consonant(&self, i: usize) -> bool {
        match self.b[i] {
            b'a' | b'e' | b'i' | b'o' | b'u' => false,
            b'y' => i == 0 || !self.is_consonant(i - 1),
            _ => true,
        }
    }

    /// Number of vowel-consonant sequences in b[0..end].
    fn measure(&self, end: usize) -> usize {
        let mut m = 0;
        let mut i = 0;
        // Skip the optional leading consonant run.
        while i < end && self.is_consonant(i) {
            i += 1;
        }
        loop {
            // Vowel run.
            while i < end && !self.is_consonant(i) {
                i += 1;
            }
            if i >= end {
                return m;
            }
            // Consonant run closes one VC.
            while i < end && self.is_consonant(i) {
                i += 1;
            }
            m += 1;
        }
    }

    fn has_vowel(&self, end: usize) -> bool {
        (0..end).any(|i| !self.is_consonant(i))
    }

    fn double_consonant(&self, end: usize) -> bool {
        end >= 2 && self.b[end - 1] == self.b[end - 2] && self.is_consonant(end - 1)
    }

    /// consonant-vowel-consonant ending where the final consonant is not
    /// w, x, or y; restricts when a trailing `e` is restored.
    fn cvc(&self, end: usize) -> bool {
        if end < 3
            || !self.is_consonant(end - 1)
            || self.is_consonant(end - 2)
            || !self.is_consonant(end - 3)
        {
            return false;
        }
        !matches!(self.b[end - 1], b'w' | b'x' | b'y')
    }

    fn ends(&self, suffix: &[u8]) -> bool {
        self.k >= suffix.len() && &self.b[self.k - suffix.len()..self.k] == suffix
    }

    /// Replace the suffix of length `take` with `rep`.
    fn set_suffix(&mut self, take: usize, rep: &[u8]) {
        let j = self.k - take;
        self.b.truncate(j);
        self.b.extend_from_slice(rep);
        self.k = j + rep.len();
    }

    fn step1a(&mut self) {
        if self.ends(b"sses") {
            self.k -= 2;
        } else if self.ends(b"ies") {
            self.set_suffix(3, b"i");
        } else if self.ends(b"s") && !self.ends(b"ss") {
            self.k -= 1;
        }
    }

    fn step1b(&mut self) {
        if self.ends(b"eed") {
            if self.measure(self.k - 3) > 0 {
                self.k -= 1;
            }
            return;
        }
        let take = if self.ends(b"ed") && self.has_vowel(self.k - 2) {
            2
        } else if self.ends(b"ing") && self.has_vowel(self.k - 3) {
            3
        } else {
            return;
        };
        self.k -= take;
        self.b.truncate(self.k);
        if self.ends(b"at") {
            self.set_suffix(2, b"ate");
        } else if self.ends(b"bl") {
            self.set_suffix(2, b"ble");
        } else if self.ends(b"iz") {
            self.set_suffix(2, b"ize");
        } else if self.double_consonant(self.k) {
            if !matches!(self.b[self.k - 1], b'l' | b's' | b'z') {
                self.k -= 1;
                self.b.truncate(self.k);
            }
        } else if self.measure(self.k) == 1 && self.cvc(self.k) {
            self.set_suffix(0, b"e");
        }
    }

    fn step1c(&mut self) {
        if self.ends(b"y") && self.has_vowel(self.k - 1) {
            self.b[self.k - 1] = b'i';
        }
    }

    fn replace_first(&mut self, rules: &[(&[u8], &[u8])]) {
        for &(suffix, rep) in rules {
            if self.ends(suffix) {
                if self.measure(self.k - suffix.len()) > 0 {
                    self.set_suffix(suffix.len(), rep);
                }
                return;
            }
        }
    }

    fn step2(&mut self) {
        self.replace_first(&[
            (b"ational", b"ate"),
            (b"tional", b"tion"),
            (b"enci", b"ence"),
            (b"anci", b"ance"),
            (b"izer", b"ize"),
            (b"abli", b"able"),
            (b"alli", b"al"),
            (b"entli", b"ent"),
            (b"eli", b"e"),
            (b"ousli", b"ous"),
            (b"ization", b"ize"),
            (b"ation", b"ate"),
            (b"ator", b"ate"),
            (b"alism", b"al"),
            (b"iveness", b"ive"),
            (b"fulness", b"ful"),
            (b"ousness", b"ous"),
            (b"aliti", b"al"),
            (b"iviti", b"ive"),
            (b"biliti", b"ble"),
        ]);
    }

    fn step3(&mut self) {
        self.replace_first(&[
            (b"icate", b"ic"),
            (b"ative", b""),
            (b"alize", b"al"),
            (b"iciti", b"ic"),
            (b"ical", b"ic"),
            (b"ful", b""),
            (b"ness", b""),
        ]);
    }

    fn step4(&mut self) {
        const SUFFIXES: &[&[u8]] = &[
            b"al", b"ance", b"ence", b"er", b"ic", b"able", b"ible", b"ant", b"ement", b"ment",
            b"ent", b"ion", b"ou", b"ism", b"ate", b"iti", b"ous", b"ive", b"ize",
        ];
        for &suffix in SUFFIXES {
            if !self.ends(suffix) {
                continue;
            }
            let j = self.k - suffix.len();
            if suffix == b"ion" && !(j >= 1 && matches!(self.b[j - 1], b's' | b't')) {
                continue;
            }
            if self.measure(j) > 1 {
                self.k = j;
                self.b.truncate(self.k);
            }
            return;
        }
    }

    fn step5(&mut self) {
        if self.b[self.k - 1] == b'e' {
            let m = self.measure(self.k - 1);
            if m > 1 || (m == 1 && !self.cvc(self.k - 1)) {
                self.k -= 1;
                self.b.truncate(self.k);
            }
        }
        if self.k >= 2
            && self.b[self.k - 1] == b'l'
            && self.double_consonant(self.k)
            && self.measure(self.k) > 1
        {
            self.k -= 1;
            self.b.truncate(self.k);
        }
    }
}
