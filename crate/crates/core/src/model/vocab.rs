use std::collections::BTreeMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const FIRST_WORD_ID: usize = 4;

const SPECIALS: [&str; FIRST_WORD_ID] = ["<pad>", "<bos>", "<end>", "<unk>"];

/// Word ↔ id table. Ids `0..4` are PAD, BOS, END and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a table from distinct non-special words, in first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for w in words {
            v.push(w.into());
        }
        v
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == FIRST_WORD_ID
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> CaptionTokens {
        CaptionTokens(tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    pub fn decode(&self, tokens: &CaptionTokens) -> Vec<String> {
        tokens.0.iter().map(|&i| self.word(i).to_owned()).collect()
    }
}

/// Caption word ids, without BOS or END.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct CaptionTokens(pub Vec<usize>);

impl CaptionTokens {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// The ids followed by END.
    pub fn with_end(&self) -> Vec<usize> {
        let mut v = self.0.clone();
        v.push(END);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_unknowns_map_to_unk() {
        let v = Vocab::from_words(["cat", "dog", "cat"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("cat"), 4);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.word(END), "<end>");
        let toks = v.encode(&["dog", "cat"]);
        assert_eq!(toks.with_end(), vec![5, 4, END]);
        assert_eq!(v.decode(&toks), vec!["dog", "cat"]);
    }
}
