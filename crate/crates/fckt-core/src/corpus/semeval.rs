//! Importer for the SemEval ABSA aspect-term XML format.
//!
//! Reads `<sentence>` elements carrying a `<text>` node and `<aspectTerm>`
//! children with character offsets, tokenizes the text, and maps the
//! character spans onto token spans. The parser below handles exactly the
//! subset of XML these files use (elements, attributes, character data,
//! standard entities); no external XML dependency is available here.

use super::{AnnotatedSentence, AspectAnnotation, LoadOutcome, Polarity, RecordError};
use crate::error::{Error, Result};
use std::path::Path;

pub fn load(path: &Path) -> Result<LoadOutcome> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text)
}

pub fn parse_document(xml: &str) -> Result<LoadOutcome> {
    let mut outcome = LoadOutcome::default();
    let mut parser = Lexer::new(xml);
    let mut current: Option<PendingSentence> = None;
    let mut in_text = false;

    while let Some(event) = parser.next_event()? {
        match event {
            Event::Open { name, attrs, empty } => match name.as_str() {
                "sentence" => {
                    current = Some(PendingSentence {
                        id: attr(&attrs, "id").unwrap_or_default(),
                        line: parser.line,
                        text: String::new(),
                        terms: Vec::new(),
                    });
                }
                "text" if !empty => in_text = true,
                "aspectTerm" => {
                    if let Some(sentence) = current.as_mut() {
                        sentence.terms.push(RawTerm {
                            polarity: attr(&attrs, "polarity").unwrap_or_default(),
                            from: attr(&attrs, "from").unwrap_or_default(),
                            to: attr(&attrs, "to").unwrap_or_default(),
                            line: parser.line,
                        });
                    }
                }
                _ => {}
            },
            Event::Close(name) => match name.as_str() {
                "text" => in_text = false,
                "sentence" => {
                    if let Some(pending) = current.take() {
                        match pending.finish() {
                            Ok(sentence) => match sentence.validate() {
                                Ok(()) => outcome.sentences.push(sentence),
                                Err(reason) => outcome.rejected.push(RecordError {
                                    line: pending.line,
                                    reason,
                                }),
                            },
                            Err(record) => outcome.rejected.push(record),
                        }
                    }
                }
                _ => {}
            },
            Event::Text(t) => {
                if in_text {
                    if let Some(sentence) = current.as_mut() {
                        sentence.text.push_str(&t);
                    }
                }
            }
        }
    }
    Ok(outcome)
}

fn attr(attrs: &[(String, String)], name: &str) -> Option<String> {
    attrs
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.clone())
}

struct RawTerm {
    polarity: String,
    from: String,
    to: String,
    line: usize,
}

struct PendingSentence {
    id: String,
    line: usize,
    text: String,
    terms: Vec<RawTerm>,
}

impl PendingSentence {
    fn finish(&self) -> std::result::Result<AnnotatedSentence, RecordError> {
        let tokens = tokenize(&self.text);
        if tokens.is_empty() {
            return Err(RecordError {
                line: self.line,
                reason: "sentence has no tokens".to_string(),
            });
        }
        let mut aspects = Vec::new();
        for term in &self.terms {
            let polarity = Polarity::parse(&term.polarity).ok_or_else(|| RecordError {
                line: term.line,
                reason: format!("unknown polarity label {:?}", term.polarity),
            })?;
            let from: usize = term.from.parse().map_err(|_| RecordError {
                line: term.line,
                reason: format!("bad from offset {:?}", term.from),
            })?;
            let to: usize = term.to.parse().map_err(|_| RecordError {
                line: term.line,
                reason: format!("bad to offset {:?}", term.to),
            })?;
            let span = char_span_to_tokens(&tokens, from, to).ok_or_else(|| RecordError {
                line: term.line,
                reason: format!("offsets ({from}, {to}) match no tokens"),
            })?;
            aspects.push(AspectAnnotation {
                start: span.0,
                end: span.1,
                polarity,
            });
        }
        Ok(AnnotatedSentence {
            tokens: tokens.into_iter().map(|t| t.text).collect(),
            aspects,
            source_id: self.id.clone(),
        })
    }
}

struct Token {
    text: String,
    /// Character (not byte) offsets, end exclusive.
    start: usize,
    end: usize,
}

/// Splits into alphanumeric runs and single punctuation marks, tracking
/// character offsets so SemEval `from`/`to` attributes can be mapped.
fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphanumeric() || c == '\'' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '\'') {
                i += 1;
            }
            tokens.push(Token {
                text: chars[start..i].iter().collect(),
                start,
                end: i,
            });
        } else {
            tokens.push(Token {
                text: c.to_string(),
                start: i,
                end: i + 1,
            });
            i += 1;
        }
    }
    tokens
}

/// Inclusive token span covered by the character range [from, to).
fn char_span_to_tokens(tokens: &[Token], from: usize, to: usize) -> Option<(usize, usize)> {
    if to <= from {
        return None;
    }
    let mut first = None;
    let mut last = None;
    for (i, token) in tokens.iter().enumerate() {
        if token.start < to && token.end > from {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(f), Some(l)) => Some((f, l)),
        _ => None,
    }
}

enum Event {
    Open {
        name: String,
        attrs: Vec<(String, String)>,
        empty: bool,
    },
    Close(String),
    Text(String),
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            chars: text.chars().peekable(),
            line: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next();
        if c == Some('\n') {
            self.line += 1;
        }
        c
    }

    fn next_event(&mut self) -> Result<Option<Event>> {
        loop {
            match self.chars.peek() {
                None => return Ok(None),
                Some('<') => {
                    self.bump();
                    match self.chars.peek() {
                        Some('?') | Some('!') => {
                            // declaration, comment, or doctype: skip to '>'
                            let mut prev = ' ';
                            let comment = {
                                let mut probe = self.chars.clone();
                                probe.next() == Some('!')
                                    && probe.next() == Some('-')
                                    && probe.next() == Some('-')
                            };
                            if comment {
                                // skip until -->
                                let mut tail = String::new();
                                while let Some(c) = self.bump() {
                                    tail.push(c);
                                    if tail.ends_with("-->") {
                                        break;
                                    }
                                }
                            } else {
                                while let Some(c) = self.bump() {
                                    if c == '>' && prev != '?' || c == '>' {
                                        break;
                                    }
                                    prev = c;
                                }
                            }
                        }
                        Some('/') => {
                            self.bump();
                            let name = self.read_name();
                            while let Some(c) = self.bump() {
                                if c == '>' {
                                    break;
                                }
                            }
                            return Ok(Some(Event::Close(name)));
                        }
                        _ => return self.read_open_tag().map(Some),
                    }
                }
                Some(_) => {
                    let mut text = String::new();
                    while let Some(&c) = self.chars.peek() {
                        if c == '<' {
                            break;
                        }
                        text.push(self.bump().unwrap());
                    }
                    if !text.trim().is_empty() {
                        return Ok(Some(Event::Text(decode_entities(&text))));
                    }
                }
            }
        }
    }

    fn read_name(&mut self) -> String {
        let mut name = String::new();
        while let Some(&c) = self.chars.peek() {
            if c.is_alphanumeric() || c == '_' || c == '-' || c == ':' {
                name.push(self.bump().unwrap());
            } else {
                break;
            }
        }
        name
    }

    fn read_open_tag(&mut self) -> Result<Event> {
        let name = self.read_name();
        let mut attrs = Vec::new();
        let mut empty = false;
        loop {
            match self.chars.peek() {
                None => {
                    return Err(Error::Dataset(format!(
                        "unterminated tag <{name}> at line {}",
                        self.line
                    )))
                }
                Some('>') => {
                    self.bump();
                    break;
                }
                Some('/') => {
                    self.bump();
                    empty = true;
                }
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                _ => {
                    let key = self.read_name();
                    // skip = and whitespace
                    while matches!(self.chars.peek(), Some(&c) if c.is_whitespace() || c == '=') {
                        self.bump();
                    }
                    let quote = self.bump().ok_or_else(|| {
                        Error::Dataset(format!("unterminated attribute at line {}", self.line))
                    })?;
                    if quote != '"' && quote != '\'' {
                        return Err(Error::Dataset(format!(
                            "expected quoted attribute value at line {}",
                            self.line
                        )));
                    }
                    let mut value = String::new();
                    loop {
                        match self.bump() {
                            None => {
                                return Err(Error::Dataset(format!(
                                    "unterminated attribute value at line {}",
                                    self.line
                                )))
                            }
                            Some(c) if c == quote => break,
                            Some(c) => value.push(c),
                        }
                    }
                    attrs.push((key, decode_entities(&value)));
                }
            }
        }
        Ok(Event::Open { name, attrs, empty })
    }
}

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '&' {
            out.push(c);
            continue;
        }
        let mut entity = String::new();
        let mut closed = false;
        for e in chars.by_ref() {
            if e == ';' {
                closed = true;
                break;
            }
            entity.push(e);
            if entity.len() > 8 {
                break;
            }
        }
        if !closed {
            out.push('&');
            out.push_str(&entity);
            continue;
        }
        match entity.as_str() {
            "amp" => out.push('&'),
            "lt" => out.push('<'),
            "gt" => out.push('>'),
            "quot" => out.push('"'),
            "apos" => out.push('\''),
            other => {
                let decoded = other
                    .strip_prefix("#x")
                    .and_then(|h| u32::from_str_radix(h, 16).ok())
                    .or_else(|| other.strip_prefix('#').and_then(|d| d.parse().ok()))
                    .and_then(char::from_u32);
                match decoded {
                    Some(ch) => out.push(ch),
                    None => {
                        out.push('&');
                        out.push_str(other);
                        out.push(';');
                    }
                }
            }
        }
    }
    out
}
