use std::collections::{BTreeSet, HashMap};

use super::ModelError;

/// Character vocabulary: one character per line, index = line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self, ModelError> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(ModelError::Vocab(format!("character {c:?} listed twice")));
            }
        }
        if chars.is_empty() {
            return Err(ModelError::Vocab("empty vocabulary".into()));
        }
        Ok(Vocab { chars, index })
    }

    /// Sorted set of the lower-cased characters of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self, ModelError> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.to_lowercase().chars().collect::<Vec<_>>()).collect();
        Vocab::new(set.into_iter().collect())
    }

    pub fn parse(source: &str) -> Result<Self, ModelError> {
        let body = source.strip_suffix('\n').unwrap_or(source);
        if body.is_empty() {
            return Err(ModelError::Vocab("empty vocabulary".into()));
        }
        let chars = body
            .split('\n')
            .enumerate()
            .map(|(i, line)| {
                let mut it = line.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(ModelError::Vocab(format!("line {}: expected exactly one character, got {line:?}", i + 1))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Vocab::new(chars)
    }

    pub fn render(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Indices of the lower-cased text.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let lower = text.to_lowercase();
        let mut unknown = BTreeSet::new();
        let ids: Vec<usize> = lower
            .chars()
            .filter_map(|c| {
                let id = self.index.get(&c).copied();
                if id.is_none() {
                    unknown.insert(c);
                }
                id
            })
            .collect();
        if !unknown.is_empty() {
            return Err(ModelError::UnknownChars(unknown.into_iter().collect()));
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_keeps_line_indices() {
        let v = Vocab::parse(" \na\nb\n.\n").unwrap();
        assert_eq!(v.chars(), &[' ', 'a', 'b', '.']);
        assert_eq!(Vocab::parse(&v.render()).unwrap(), v);
        assert_eq!(v.encode("Ab.").unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn unknown_and_empty_text_are_errors() {
        let v = Vocab::from_texts(["abc"]).unwrap();
        assert_eq!(v.encode("").unwrap_err().to_string(), "empty text");
        let e = v.encode("abzx!").unwrap_err();
        assert!(matches!(&e, ModelError::UnknownChars(c) if c == "!xz"));
        assert!(e.to_string().contains("!xz"));
    }

    #[test]
    fn rejects_multi_char_lines_and_duplicates() {
        assert!(Vocab::parse("ab\n").is_err());
        assert!(Vocab::parse("a\na\n").is_err());
    }
}
