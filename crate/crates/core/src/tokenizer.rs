//! Vocabulary construction and tokenization.
//!
//! Two tokenizer kinds share one [`Vocabulary`] type:
//!
//! - **word level**: splits on Unicode whitespace and emits every
//!   non-alphanumeric symbol as its own token. The vocabulary is built from a
//!   training corpus in descending frequency order, ties by first occurrence.
//! - **external**: ids are taken verbatim from a vocab file (one token per
//!   line, line 0 is id 2). Text is segmented by greedy longest match inside
//!   each whitespace-delimited chunk.
//!
//! Ids 0 and 1 are always the begin-of-text and unknown tokens.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOT_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOT_TOKEN: &str = "<bot>";
pub const UNK_TOKEN: &str = "<unk>";
/// Number of reserved ids preceding the first corpus or file token.
pub const NUM_SPECIALS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    ReferenceWordLevel,
    ExternalVocabFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    Lowercase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    pub normalization: Normalization,
}

impl TokenizerSpec {
    pub fn word_level() -> Self {
        Self::default()
    }

    pub fn lowercase(mut self) -> Self {
        self.normalization = Normalization::Lowercase;
        self
    }

    fn normalize<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        match self.normalization {
            Normalization::None => text.into(),
            Normalization::Lowercase => text.to_lowercase().into(),
        }
    }
}

/// 8-byte identity of a vocabulary: the first 8 bytes of SHA-256 over every
/// token string (ids 0..V in order), each followed by `\n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint(pub [u8; 8]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::InvalidInput(format!("fingerprint {s:?}: {e}")))?;
        let arr: [u8; 8] =
            bytes.try_into().map_err(|_| Error::InvalidInput(format!("fingerprint {s:?} is not 8 bytes")))?;
        Ok(Self(arr))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Dense id <-> token bijection over `0..V`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    spec: TokenizerSpec,
    fingerprint: Fingerprint,
    max_token_bytes: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.spec == other.spec
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens, prepending the two
    /// reserved ids. `line_base` is used for duplicate-token errors.
    fn from_tokens(body: Vec<String>, spec: TokenizerSpec) -> Result<Self> {
        let mut tokens = Vec::with_capacity(body.len() + NUM_SPECIALS);
        tokens.push(BOT_TOKEN.to_string());
        tokens.push(UNK_TOKEN.to_string());
        tokens.extend(body);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                let line = id.saturating_sub(NUM_SPECIALS);
                return Err(Error::DuplicateToken { token: tok.clone(), line });
            }
        }
        if tokens.len() > TokenId::MAX as usize {
            return Err(Error::InvalidVocabulary("too many tokens".into()));
        }
        let fingerprint = fingerprint_of(&tokens);
        let max_token_bytes = tokens.iter().map(String::len).max().unwrap_or(1);
        Ok(Self { tokens, index, spec, fingerprint, max_token_bytes })
    }

    /// Vocabulary size V (specials included).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spec(&self) -> TokenizerSpec {
        self.spec
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps `text` to ids; out-of-vocabulary material becomes [`UNK_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let text = self.spec.normalize(text);
        match self.spec.kind {
            TokenizerKind::ReferenceWordLevel => pre_tokenize(&text).map(|t| self.id(t).unwrap_or(UNK_ID)).collect(),
            TokenizerKind::ExternalVocabFile => {
                let mut out = Vec::new();
                for chunk in text.split_whitespace() {
                    self.longest_match(chunk, &mut out);
                }
                out
            }
        }
    }

    pub fn tokenize_corpus(&self, name: impl Into<String>, text: &str) -> TokenizedCorpus {
        TokenizedCorpus::new(name.into(), self.tokenize(text))
    }

    /// Space-joined surface forms. Ids outside the vocabulary render as the
    /// unknown token.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK_TOKEN));
        }
        out
    }

    fn longest_match(&self, chunk: &str, out: &mut Vec<TokenId>) {
        if let Some(id) = special_id(chunk) {
            out.push(id);
            return;
        }
        let mut rest = chunk;
        while !rest.is_empty() {
            let mut end = rest.len().min(self.max_token_bytes);
            while !rest.is_char_boundary(end) {
                end -= 1;
            }
            let mut matched = None;
            while end > 0 {
                if let Some(id) = self.id(&rest[..end]).filter(|&id| id as usize >= NUM_SPECIALS) {
                    matched = Some((id, end));
                    break;
                }
                end -= 1;
                while end > 0 && !rest.is_char_boundary(end) {
                    end -= 1;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    rest = &rest[len..];
                }
                None => {
                    out.push(UNK_ID);
                    let skip = rest.chars().next().map(char::len_utf8).unwrap_or(1);
                    rest = &rest[skip..];
                }
            }
        }
    }

    /// Writes the non-special tokens in vocab file format.
    pub fn write_vocab_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens[NUM_SPECIALS..] {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }
}

fn fingerprint_of(tokens: &[String]) -> Fingerprint {
    let mut hasher = Sha256::new();
    for tok in tokens {
        hasher.update(tok.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut fp = [0u8; 8];
    fp.copy_from_slice(&digest[..8]);
    Fingerprint(fp)
}

fn special_id(chunk: &str) -> Option<TokenId> {
    match chunk {
        BOT_TOKEN => Some(BOT_ID),
        UNK_TOKEN => Some(UNK_ID),
        _ => None,
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Splits text into word-level surface tokens: runs of alphanumerics, with
/// every other non-whitespace char standing alone. Whitespace-delimited
/// chunks spelling a special token are kept whole.
pub fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|chunk| {
        let mut pieces = Vec::new();
        if special_id(chunk).is_some() {
            pieces.push(chunk);
            return pieces.into_iter();
        }
        let mut start = None;
        for (i, c) in chunk.char_indices() {
            if is_word_char(c) {
                start.get_or_insert(i);
            } else {
                if let Some(s) = start.take() {
                    pieces.push(&chunk[s..i]);
                }
                pieces.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            pieces.push(&chunk[s..]);
        }
        pieces.into_iter()
    })
}

/// Builds a word-level vocabulary from a training corpus.
///
/// Keeps the `max_vocab - 2` most frequent surface tokens (ties by first
/// occurrence) after the two specials.
pub fn build_vocabulary(corpus_text: &str, spec: TokenizerSpec, max_vocab: usize) -> Result<Vocabulary> {
    if max_vocab < NUM_SPECIALS {
        return Err(Error::InvalidConfig(format!("max_vocab must be at least {NUM_SPECIALS}, got {max_vocab}")));
    }
    let text = spec.normalize(corpus_text);
    // token -> (count, first position)
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    for (pos, tok) in pre_tokenize(&text).enumerate() {
        if special_id(tok).is_some() {
            continue;
        }
        counts.entry(tok).or_insert((0, pos)).0 += 1;
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64, usize)> = counts.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_vocab - NUM_SPECIALS);
    let body = ranked.into_iter().map(|(t, _, _)| t.to_string()).collect();
    Vocabulary::from_tokens(body, TokenizerSpec { kind: TokenizerKind::ReferenceWordLevel, ..spec })
}

/// Parses vocab file contents: one token per line, line 0 is id 2.
pub fn parse_external_vocab(contents: &str) -> Result<Vocabulary> {
    let mut body = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut lines: Vec<&str> = contents.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    for (line_no, raw) in lines.into_iter().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            return Err(Error::VocabParse { line: line_no, message: "empty token".into() });
        }
        if line.chars().any(char::is_whitespace) {
            return Err(Error::VocabParse { line: line_no, message: format!("token {line:?} contains whitespace") });
        }
        if special_id(line).is_some() {
            return Err(Error::VocabParse { line: line_no, message: format!("token {line:?} is reserved") });
        }
        if seen.insert(line, line_no).is_some() {
            return Err(Error::DuplicateToken { token: line.to_string(), line: line_no });
        }
        body.push(line.to_string());
    }
    Vocabulary::from_tokens(
        body,
        TokenizerSpec { kind: TokenizerKind::ExternalVocabFile, normalization: Normalization::None },
    )
}

/// Loads a vocabulary whose ids are exactly those listed in the file.
pub fn load_external_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let bytes = std::fs::read(path)?;
    let contents =
        String::from_utf8(bytes).map_err(|e| Error::VocabParse { line: 0, message: format!("not UTF-8: {e}") })?;
    parse_external_vocab(&contents)
}

/// Loads a vocab file and tags it with `spec`, e.g. a word-level spec for
/// files written by [`Vocabulary::write_vocab_file`] from a built vocabulary.
pub fn load_vocab_with_spec(path: impl AsRef<Path>, spec: TokenizerSpec) -> Result<Vocabulary> {
    let mut vocab = load_external_vocab(path)?;
    vocab.spec = spec;
    Ok(vocab)
}

/// A corpus mapped to ids of one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub name: String,
    pub ids: Vec<TokenId>,
}

impl TokenizedCorpus {
    pub fn new(name: String, ids: Vec<TokenId>) -> Self {
        Self { name, ids }
    }

    pub fn token_count(&self) -> usize {
        self.ids.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> TokenizerSpec {
        TokenizerSpec::word_level()
    }

    #[test]
    fn three_token_corpus_gives_four_entries() {
        let v = build_vocabulary("a b a", spec(), 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.tokens(), &["<bot>", "<unk>", "a", "b"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = build_vocabulary("", spec(), 10).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
        assert!(matches!(build_vocabulary(" \n\t ", spec(), 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn single_type_corpus() {
        let text = vec!["x"; 100].join(" ");
        let v = build_vocabulary(&text, spec(), 10).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("x"), Some(2));
    }

    #[test]
    fn frequency_order_with_first_occurrence_ties() {
        let v = build_vocabulary("c b a b c d", spec(), 100).unwrap();
        // c and b twice (c first), then a, d once
        assert_eq!(&v.tokens()[2..], &["c", "b", "a", "d"]);
    }

    #[test]
    fn max_vocab_truncates_and_maps_rest_to_unk() {
        let v = build_vocabulary("a a a b b c", spec(), 4).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.tokenize("a b c"), vec![2, 3, UNK_ID]);
    }

    #[test]
    fn punctuation_splits_into_tokens() {
        let toks: Vec<_> = pre_tokenize("Hello, world! It's 3pm.").collect();
        assert_eq!(toks, vec!["Hello", ",", "world", "!", "It", "'", "s", "3pm", "."]);
    }

    #[test]
    fn tokenize_lookup_and_oov() {
        let v = build_vocabulary("a b a", spec(), 10).unwrap();
        assert_eq!(v.tokenize("a b"), vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        assert_eq!(v.tokenize("a z"), vec![v.id("a").unwrap(), UNK_ID]);
    }

    #[test]
    fn lowercase_normalization() {
        let v = build_vocabulary("The the THE cat", spec().lowercase(), 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.tokenize("tHe CAT"), vec![2, 3]);
    }

    #[test]
    fn specials_survive_detokenize_round_trip() {
        let v = build_vocabulary("a b", spec(), 10).unwrap();
        let ids = vec![2, UNK_ID, 3, BOT_ID];
        assert_eq!(v.tokenize(&v.detokenize(&ids)), ids);
    }

    #[test]
    fn external_vocab_ids_follow_lines() {
        let v = parse_external_vocab("a\nb\n").unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.spec().kind, TokenizerKind::ExternalVocabFile);
    }

    #[test]
    fn external_vocab_duplicate_is_rejected() {
        match parse_external_vocab("a\nb\na\n") {
            Err(Error::DuplicateToken { token, line }) => {
                assert_eq!(token, "a");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn external_vocab_malformed_line_reports_number() {
        match parse_external_vocab("a\n\nb\n") {
            Err(Error::VocabParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_external_vocab("a\nb c\n") {
            Err(Error::VocabParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn external_vocab_longest_match() {
        let v = parse_external_vocab("un\nhappy\nunhap\np\ny\nh\na\n").unwrap();
        let ids = v.tokenize("unhappy q");
        let toks: Vec<_> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["unhap", "p", "y", "<unk>"]);
    }

    #[test]
    fn fingerprint_depends_on_order() {
        let a = parse_external_vocab("x\ny\n").unwrap();
        let b = parse_external_vocab("y\nx\n").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        let hex = a.fingerprint().to_hex();
        assert_eq!(hex.len(), 16);
        assert_eq!(Fingerprint::from_hex(&hex).unwrap(), a.fingerprint());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = build_vocabulary("the cat sat on the mat .", spec(), 100).unwrap();
        v.write_vocab_file(&path).unwrap();
        let back = load_vocab_with_spec(&path, v.spec()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_eq!(load_external_vocab(&path).unwrap().len(), v.len());
    }

    fn word() -> impl Strategy<Value = String> {
        prop_oneof!["[a-e]{1,3}".prop_map(|s| s), Just(",".to_string()), Just(".".to_string()),]
    }

    proptest! {
        #[test]
        fn bijection_determinism_and_closure(words in prop::collection::vec(word(), 1..60), probe in prop::collection::vec(word(), 0..20)) {
            let text = words.join(" ");
            let v1 = build_vocabulary(&text, spec(), 12).unwrap();
            let v2 = build_vocabulary(&text, spec(), 12).unwrap();
            prop_assert_eq!(&v1, &v2);
            for id in 0..v1.len() as TokenId {
                prop_assert_eq!(v1.id(v1.token(id).unwrap()), Some(id));
            }
            let ids = v1.tokenize(&probe.join(" "));
            prop_assert!(ids.iter().all(|&i| (i as usize) < v1.len()));
        }

        #[test]
        fn round_trip_of_unk_free_ids(words in prop::collection::vec(word(), 1..60), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..30)) {
            let v = build_vocabulary(&words.join(" "), spec(), 1000).unwrap();
            let ids: Vec<TokenId> = picks
                .iter()
                .map(|ix| (NUM_SPECIALS + ix.index(v.len() - NUM_SPECIALS)) as TokenId)
                .collect();
            prop_assert_eq!(v.tokenize(&v.detokenize(&ids)), ids);
        }
    }
}
