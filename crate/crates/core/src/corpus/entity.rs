use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Hierarchical identity of a retrieval unit: `writer-page[-line[-word]]`.
///
/// Writer and page labels are free-form but may not contain `-` or
/// whitespace, so the string form parses back unambiguously.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId {
    writer: String,
    page: String,
    line: Option<u32>,
    word: Option<u32>,
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c == '-' || c.is_whitespace())
}

impl EntityId {
    pub fn page(writer: impl Into<String>, page: impl Into<String>) -> Result<Self, Error> {
        let writer = writer.into();
        let page = page.into();
        if !valid_label(&writer) || !valid_label(&page) {
            return Err(Error::BadEntityId(format!("{writer}-{page}")));
        }
        Ok(Self {
            writer,
            page,
            line: None,
            word: None,
        })
    }

    pub fn with_line(&self, line: u32) -> Self {
        Self {
            writer: self.writer.clone(),
            page: self.page.clone(),
            line: Some(line),
            word: None,
        }
    }

    /// Word below this line. Panics if `self` is not a line id.
    pub fn with_word(&self, word: u32) -> Self {
        assert!(self.line.is_some(), "word ids need a line");
        Self {
            word: Some(word),
            ..self.clone()
        }
    }

    pub fn writer(&self) -> &str {
        &self.writer
    }

    pub fn page_label(&self) -> &str {
        &self.page
    }

    pub fn line(&self) -> Option<u32> {
        self.line
    }

    pub fn word(&self) -> Option<u32> {
        self.word
    }

    pub fn level(&self) -> Level {
        match (self.line, self.word) {
            (None, _) => Level::Page,
            (Some(_), None) => Level::Line,
            (Some(_), Some(_)) => Level::Word,
        }
    }

    /// The page this entity belongs to (itself for pages).
    pub fn page_id(&self) -> EntityId {
        Self {
            writer: self.writer.clone(),
            page: self.page.clone(),
            line: None,
            word: None,
        }
    }

    pub fn line_id(&self) -> Option<EntityId> {
        self.line.map(|l| self.page_id().with_line(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Page,
    Line,
    Word,
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.writer, self.page)?;
        if let Some(l) = self.line {
            write!(f, "-{l}")?;
            if let Some(w) = self.word {
                write!(f, "-{w}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for EntityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::BadEntityId(s.to_string());
        let parts: Vec<&str> = s.split('-').collect();
        if !(2..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let mut id = EntityId::page(parts[0], parts[1]).map_err(|_| bad())?;
        let num = |p: &str| -> Result<u32, Error> {
            // reject "+1", "01" style forms so formatting round-trips
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) || (p.len() > 1 && p.starts_with('0')) {
                return Err(bad());
            }
            p.parse().map_err(|_| bad())
        };
        if parts.len() >= 3 {
            id.line = Some(num(parts[2])?);
        }
        if parts.len() == 4 {
            id.word = Some(num(parts[3])?);
        }
        Ok(id)
    }
}
