//! Character-granularity content vocabulary.

use std::collections::BTreeSet;

use super::vocab::{Task, TokenSeq, Vocab};
use crate::error::{Error, Result};

/// One token per distinct character seen in `corpus`, after the specials.
pub fn build_content_vocab<'a, I>(corpus: I) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut chars = BTreeSet::new();
    let mut any = false;
    for s in corpus {
        any = true;
        chars.extend(s.chars());
    }
    if !any {
        return Err(Error::InvalidArgument("content corpus is empty".into()));
    }
    Ok(Vocab::with_specials(chars.into_iter().map(String::from)))
}

/// Vocabulary over the renderer's full alphabet.
pub fn default_content_vocab() -> Vocab {
    Vocab::with_specials(
        crate::synthgen::font::alphabet()
            .into_iter()
            .map(String::from),
    )
}

pub fn encode_content(vocab: &Vocab, text: &str) -> Result<TokenSeq> {
    let mut buf = [0u8; 4];
    let payload: Vec<u32> = text
        .chars()
        .map(|c| vocab.encode_token(c.encode_utf8(&mut buf)))
        .collect();
    TokenSeq::framed(Task::Content, &payload)
}

/// Concatenate payload characters; UNK decodes to U+FFFD.
pub fn decode_content(vocab: &Vocab, ids: &[u32]) -> String {
    let seq = TokenSeq {
        ids: ids.to_vec(),
        task: Task::Content,
    };
    seq.payload()
        .iter()
        .filter_map(|&id| match id {
            Vocab::UNK => Some("\u{FFFD}"),
            _ if Vocab::is_special(id) => None,
            _ => vocab.token(id),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventy_chars_give_seventy_four() {
        let alphabet: String = ('!'..='f').take(70).collect();
        let v = build_content_vocab([alphabet.as_str()]).unwrap();
        assert_eq!(v.len(), 74);
    }

    #[test]
    fn character_granularity() {
        let v = default_content_vocab();
        let s = encode_content(&v, "3.2").unwrap();
        assert_eq!(s.payload().len(), 3);
        assert_eq!(decode_content(&v, &s.ids), "3.2");
    }

    #[test]
    fn unseen_char_is_unk() {
        let v = build_content_vocab(["ab"]).unwrap();
        let s = encode_content(&v, "az").unwrap();
        assert_eq!(s.payload()[1], Vocab::UNK);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(build_content_vocab(std::iter::empty()).is_err());
    }

    #[test]
    fn committed_vocab_matches_alphabet() {
        let committed = Vocab::from_json(include_str!("../../vocab/content.json")).unwrap();
        assert_eq!(committed, default_content_vocab());
    }
}
