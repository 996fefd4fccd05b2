use std::collections::HashMap;

use super::scene::{Background, Color, Position, SceneSpec, Shape, Size};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOT_ID: usize = 1;
pub const PAD: &str = "<pad>";
pub const EOT: &str = "<eot>";

const TEMPLATE_WORDS: &[&str] = &[
    "a", "photo", "of", "at", "the", "on", "background", "there", "is", "and", "it", "picture", "in",
];

/// Number of caption templates.
pub const TEMPLATES: usize = 4;

/// Closed word list for captions and prompts. Ids are dense; pad is 0 and
/// end-of-text is 1.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words = vec![PAD, EOT];
        words.extend_from_slice(TEMPLATE_WORDS);
        words.extend(Shape::ALL.iter().map(|s| s.word()));
        words.extend(Color::ALL.iter().map(|s| s.word()));
        words.extend(Size::ALL.iter().map(|s| s.word()));
        words.extend(Position::ALL.iter().map(|s| s.word()));
        words.extend(Background::ALL.iter().map(|s| s.word()));
        let ids = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Word ids, then end-of-text, right-padded to `max_len`.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<Vec<usize>> {
        if words.len() + 1 > max_len {
            return Err(Error::Contract(format!(
                "{} words plus end-of-text exceed max_len {max_len}",
                words.len()
            )));
        }
        let mut ids = words
            .iter()
            .map(|w| self.id(w.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        ids.push(EOT_ID);
        ids.resize(max_len, PAD_ID);
        Ok(ids)
    }

    /// Words up to (excluding) the first end-of-text marker.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<&'static str> {
        ids.iter()
            .take_while(|&&id| id != EOT_ID)
            .filter_map(|&id| self.word(id))
            .collect()
    }
}

/// Templated description of a scene; `template_seed` picks one of
/// [`TEMPLATES`] fixed templates.
pub fn caption(spec: &SceneSpec, template_seed: usize) -> Vec<&'static str> {
    let (size, color, shape) = (spec.size.word(), spec.color.word(), spec.shape.word());
    let (position, background) = (spec.position.word(), spec.background.word());
    match template_seed % TEMPLATES {
        0 => vec!["a", "photo", "of", "a", size, color, shape, "at", "the", position],
        1 => vec![
            "a", size, color, shape, "at", "the", position, "on", "a", background, "background",
        ],
        2 => vec![
            "there", "is", "a", color, shape, "at", "the", position, "and", "it", "is", size,
        ],
        _ => vec![
            "a", background, "picture", "of", "a", size, color, shape, "in", "the", position,
        ],
    }
}

/// Zero-shot prompt for a shape × color class.
pub fn class_prompt(shape: Shape, color: Color) -> Vec<&'static str> {
    vec!["a", "photo", "of", "a", color.word(), shape.word()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_with_pad_zero() {
        let v = Vocab::new();
        assert_eq!(v.id(PAD).unwrap(), 0);
        assert_eq!(v.id(EOT).unwrap(), 1);
        for i in 0..v.len() {
            assert_eq!(v.id(v.word(i).unwrap()).unwrap(), i);
        }
        assert!(v.len() <= 64);
    }

    #[test]
    fn empty_caption_tokenizes_to_eot_then_pads() {
        let v = Vocab::new();
        let empty: [&str; 0] = [];
        let ids = v.tokenize(&empty, 16).unwrap();
        assert_eq!(ids[0], EOT_ID);
        assert!(ids[1..].iter().all(|&i| i == PAD_ID));
        assert_eq!(ids.len(), 16);
    }

    #[test]
    fn unknown_word_is_rejected() {
        let v = Vocab::new();
        assert!(matches!(v.tokenize(&["a", "zebra"], 16), Err(Error::UnknownWord(w)) if w == "zebra"));
    }

    #[test]
    fn captions_fit_and_roundtrip() {
        let v = Vocab::new();
        for spec in SceneSpec::all() {
            for t in 0..TEMPLATES {
                let words = caption(&spec, t);
                assert_eq!(words, caption(&spec, t));
                let ids = v.tokenize(&words, 16).unwrap();
                assert_eq!(v.detokenize(&ids), words);
            }
        }
    }

    #[test]
    fn captions_equal_iff_token_rows_equal() {
        let v = Vocab::new();
        let a = caption(&SceneSpec::from_index(5), 0);
        let b = caption(&SceneSpec::from_index(6), 0);
        let c = caption(&SceneSpec::from_index(5), 4);
        assert_eq!(a == b, v.tokenize(&a, 16).unwrap() == v.tokenize(&b, 16).unwrap());
        assert_eq!(v.tokenize(&a, 16).unwrap(), v.tokenize(&c, 16).unwrap());
        assert_ne!(v.tokenize(&a, 16).unwrap(), v.tokenize(&b, 16).unwrap());
    }
}
