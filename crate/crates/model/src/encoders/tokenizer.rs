use std::collections::HashMap;
use std::path::Path;

use ser_core::metrics::normalize_text;
use tokenizers::models::wordpiece::WordPiece;
use tokenizers::normalizers::bert::BertNormalizer;
use tokenizers::pre_tokenizers::bert::BertPreTokenizer;
use tokenizers::processors::bert::BertProcessing;
use tokenizers::Model;

use crate::error::{Error, Result};

/// Token used for words outside the vocabulary.
pub const UNK_TOKEN: &str = "[UNK]";

/// Lower-cased, punctuation-stripped whitespace tokenizer over a fixed word
/// list. Id 0 is the unknown token; no special tokens are added.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitespaceTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WhitespaceTokenizer {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![UNK_TOKEN.to_owned()];
        let mut index = HashMap::new();
        index.insert(UNK_TOKEN.to_owned(), 0);
        for word in words {
            if !index.contains_key(&word) {
                index.insert(word.clone(), all.len() as u32);
                all.push(word);
            }
        }
        Self { words: all, index }
    }

    /// Vocabulary of the synthetic corpus generator.
    pub fn synthetic_lexicon() -> Self {
        Self::new(ser_core::corpus::synthetic::lexicon())
    }

    /// One word per line; blank lines are skipped.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned),
        ))
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_text(text)
            .iter()
            .map(|w| self.index.get(w.as_str()).copied().unwrap_or(0))
            .collect()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

/// Text-to-id conversion for a text encoder.
#[derive(Clone)]
pub enum Tokenizer {
    Whitespace(WhitespaceTokenizer),
    /// Checkpoint tokenizer (WordPiece for BERT-family models).
    Pretrained(Box<tokenizers::Tokenizer>),
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tokenizer::Whitespace(t) => write!(f, "Whitespace({} words)", t.vocab_size()),
            Tokenizer::Pretrained(t) => write!(f, "Pretrained({} tokens)", t.get_vocab_size(true)),
        }
    }
}

impl Tokenizer {
    /// Reads `tokenizer.json`, or builds a BERT WordPiece pipeline from
    /// `vocab.txt`, in `dir`.
    pub fn from_checkpoint_dir(dir: &Path) -> Result<Self> {
        let json = dir.join("tokenizer.json");
        if json.is_file() {
            return Self::from_tokenizer_json(&json);
        }
        let vocab = dir.join("vocab.txt");
        if vocab.is_file() {
            return bert_wordpiece(&vocab);
        }
        Err(Error::checkpoint(format!(
            "no tokenizer.json or vocab.txt in {}",
            dir.display()
        )))
    }

    pub fn from_tokenizer_json(path: &Path) -> Result<Self> {
        let t = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
        Ok(Tokenizer::Pretrained(Box::new(t)))
    }

    /// `tokenizer.json` by extension, otherwise a plain word list.
    pub fn from_file(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_tokenizer_json(path)
        } else {
            Ok(Tokenizer::Whitespace(WhitespaceTokenizer::from_vocab_file(path)?))
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Whitespace(t) => t.vocab_size(),
            Tokenizer::Pretrained(t) => t.get_vocab_size(true),
        }
    }

    /// Token ids, at most `max_len` of them.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = match self {
            Tokenizer::Whitespace(t) => t.encode(text),
            Tokenizer::Pretrained(t) => t
                .encode(text, true)
                .map_err(|e| Error::invalid(format!("tokenization failed: {e}")))?
                .get_ids()
                .to_vec(),
        };
        ids.truncate(max_len);
        Ok(ids)
    }
}

fn bert_wordpiece(vocab: &Path) -> Result<Tokenizer> {
    let path = vocab.to_string_lossy().into_owned();
    let model = WordPiece::from_file(&path)
        .unk_token(UNK_TOKEN.to_owned())
        .build()
        .map_err(|e| Error::checkpoint(format!("{path}: {e}")))?;
    let id = |tok: &str| {
        model
            .get_vocab()
            .get(tok)
            .copied()
            .ok_or_else(|| Error::checkpoint(format!("{path}: missing special token {tok}")))
    };
    let (cls, sep) = (id("[CLS]")?, id("[SEP]")?);
    let mut t = tokenizers::Tokenizer::new(model);
    t.with_normalizer(Some(BertNormalizer::new(true, true, None, true)))
        .map_err(|e| Error::checkpoint(format!("{path}: {e}")))?;
    t.with_pre_tokenizer(Some(BertPreTokenizer));
    t.with_post_processor(Some(BertProcessing::new(("[SEP]".into(), sep), ("[CLS]".into(), cls))));
    Ok(Tokenizer::Pretrained(Box::new(t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_words_map_to_zero() {
        let t = WhitespaceTokenizer::new(["good".to_owned(), "day".to_owned()]);
        assert_eq!(t.encode("Good, DAY! zebra"), vec![1, 2, 0]);
        assert_eq!(t.vocab_size(), 3);
        assert_eq!(t.word(1), Some("good"));
    }

    #[test]
    fn synthetic_lexicon_covers_generator() {
        let t = WhitespaceTokenizer::synthetic_lexicon();
        for r in ser_core::corpus::generate_synthetic_corpus(60, 0, 8_000).unwrap() {
            assert!(t.encode(&r.transcript).iter().all(|&id| id != 0), "{}", r.transcript);
        }
    }

    #[test]
    fn wordpiece_from_vocab_txt() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "the", "show", "good", "##s"];
        std::fs::write(dir.path().join("vocab.txt"), vocab.join("\n")).unwrap();
        let t = Tokenizer::from_checkpoint_dir(dir.path()).unwrap();
        assert_eq!(t.encode("The shows good", 16).unwrap(), vec![2, 4, 5, 7, 6, 3]);
        assert_eq!(t.encode("The shows good", 3).unwrap(), vec![2, 4, 5]);
    }
}
