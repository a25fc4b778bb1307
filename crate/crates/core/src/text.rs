//! Word-level vocabulary, caption tokenisation, and prompt token sets.
//!
//! Class names are hyphenated attribute phrases ("red-solid-circle"); the
//! vocabulary stores the attribute words, and a class embedding is the
//! mean of its attribute rows. Sharing attribute words across classes
//! gives the embedding space compositional structure, so classes never
//! seen by a prompt learner still lie in the span of familiar directions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Words of the hand-crafted prompt template, in order.
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "a"];

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TextError {
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("class '{0}' is not in the vocabulary")]
    UnknownClass(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

fn words_of(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|w| w.split('-')).filter(|w| !w.is_empty())
}

impl Vocab {
    /// Template words first, then the attribute words of the given class
    /// names in first-appearance order.
    pub fn build(class_names: &[String]) -> Result<Self, TextError> {
        let mut vocab = Vocab { tokens: Vec::new(), index: BTreeMap::new() };
        for w in TEMPLATE_WORDS.iter() {
            vocab.insert(w);
        }
        for name in class_names {
            for w in words_of(name) {
                vocab.insert(w);
            }
        }
        Ok(vocab)
    }

    fn insert(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.tokens.len());
            self.tokens.push(word.to_string());
        }
    }

    /// Rebuild the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize, TextError> {
        self.index.get(word).copied().ok_or_else(|| TextError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Token ids for a text; hyphens split like whitespace.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, TextError> {
        words_of(text).map(|w| self.id(w)).collect()
    }

    /// Attribute ids of one class name.
    pub fn class_attr_ids(&self, class_name: &str) -> Result<Vec<usize>, TextError> {
        let ids = self.tokenize(class_name).map_err(|_| TextError::UnknownClass(class_name.to_string()))?;
        if ids.is_empty() {
            return Err(TextError::UnknownClass(class_name.to_string()));
        }
        Ok(ids)
    }
}

/// Context token ids realising the template at length `n`: the template is
/// cycled and its final `n` words are used, so the context always ends just
/// before the class slot.
pub fn hand_crafted_context(vocab: &Vocab, n: usize) -> Result<Vec<usize>, TextError> {
    let t = TEMPLATE_WORDS.len() as isize;
    (0..n as isize)
        .map(|i| {
            let offset = (t - n as isize + i).rem_euclid(t) as usize;
            vocab.id(TEMPLATE_WORDS[offset])
        })
        .collect()
}

/// A fixed zero-shot prompt: template context plus one class slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandCraftedPrompt {
    pub context_tokens: Vec<usize>,
    /// Attribute ids whose mean embedding fills the class slot.
    pub class_tokens: Vec<usize>,
}

impl HandCraftedPrompt {
    pub fn new(vocab: &Vocab, n: usize, class_name: &str) -> Result<Self, TextError> {
        Ok(HandCraftedPrompt {
            context_tokens: hand_crafted_context(vocab, n)?,
            class_tokens: vocab.class_attr_ids(class_name)?,
        })
    }

    /// Context tokens plus the single class slot.
    pub fn len(&self) -> usize {
        self.context_tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One candidate class in a classification/retrieval label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassToken {
    /// Corpus-level class index (stable across protocols).
    pub label: usize,
    pub name: String,
    /// Rows of the embedding table averaged into the class embedding.
    pub attr_ids: Vec<usize>,
}

/// Ordered label space handed to the posterior: slot `i` of a posterior
/// vector corresponds to `entries[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTokenSet {
    pub entries: Vec<ClassToken>,
}

impl ClassTokenSet {
    pub fn for_classes(
        vocab: &Vocab,
        class_names: &[String],
        labels: &[usize],
    ) -> Result<Self, TextError> {
        let mut entries = Vec::with_capacity(labels.len());
        for &label in labels {
            let name = class_names
                .get(label)
                .ok_or_else(|| TextError::UnknownClass(format!("#{label}")))?;
            entries.push(ClassToken {
                label,
                name: name.clone(),
                attr_ids: vocab.class_attr_ids(name)?,
            });
        }
        Ok(ClassTokenSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn attr_ids(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|e| e.attr_ids.clone()).collect()
    }

    pub fn slot_of_label(&self, label: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["red-solid-circle".into(), "blue-dotted-square".into()]).unwrap()
    }

    #[test]
    fn template_context_at_default_length() {
        let v = vocab();
        let ctx = hand_crafted_context(&v, 4).unwrap();
        let words: Vec<&str> = ctx.iter().map(|&id| v.word(id)).collect();
        assert_eq!(words, vec!["a", "photo", "of", "a"]);
    }

    #[test]
    fn template_context_other_lengths() {
        let v = vocab();
        let short: Vec<&str> = hand_crafted_context(&v, 2).unwrap().iter().map(|&id| v.word(id)).collect();
        assert_eq!(short, vec!["of", "a"]);
        let long = hand_crafted_context(&v, 8).unwrap();
        assert_eq!(long.len(), 8);
        let words: Vec<&str> = long.iter().map(|&id| v.word(id)).collect();
        assert_eq!(&words[4..], &["a", "photo", "of", "a"]);
    }

    #[test]
    fn attribute_words_are_shared_across_classes() {
        let v = Vocab::build(&[
            "red-solid-circle".into(),
            "red-solid-square".into(),
            "blue-solid-circle".into(),
        ])
        .unwrap();
        // 3 template words + red, solid, circle, square, blue.
        assert_eq!(v.len(), 8);
        let a = v.class_attr_ids("red-solid-circle").unwrap();
        let b = v.class_attr_ids("blue-solid-circle").unwrap();
        assert_eq!(a[1], b[1], "shared texture word");
        assert_eq!(a[2], b[2], "shared shape word");
        assert_ne!(a[0], b[0], "different colour word");
    }

    #[test]
    fn prompt_has_length_n_plus_one() {
        let v = vocab();
        let p = HandCraftedPrompt::new(&v, 4, "red-solid-circle").unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.class_tokens.len(), 3);
    }

    #[test]
    fn caption_tokenises_through_vocab() {
        let v = vocab();
        let ids = v.tokenize("a photo of a blue-dotted-square").unwrap();
        assert_eq!(ids.len(), 7);
        assert_eq!(v.word(ids[4]), "blue");
        assert!(v.tokenize("a photo of a dog").is_err());
    }

    #[test]
    fn token_set_tracks_labels_and_slots() {
        let v = vocab();
        let names = vec!["red-solid-circle".to_string(), "blue-dotted-square".to_string()];
        let set = ClassTokenSet::for_classes(&v, &names, &[1, 0]).unwrap();
        assert_eq!(set.slot_of_label(0), Some(1));
        assert_eq!(set.slot_of_label(1), Some(0));
        assert_eq!(set.entries[0].name, "blue-dotted-square");
        assert!(ClassTokenSet::for_classes(&v, &names, &[5]).is_err());
    }
}
