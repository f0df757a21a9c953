//! Shared helpers for the line-oriented text formats (scenes, checkpoints,
//! task outputs). Errors carry the byte offset of the offending token.

use std::str::FromStr;

use crate::error::{Error, Result};

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Reader<'a> {
    text: &'a str,
    pos: usize,
}

pub struct Fields<'a> {
    tokens: Vec<(usize, &'a str)>,
    next: usize,
    line_offset: usize,
}

impl<'a> Reader<'a> {
    pub fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn at_eof(&self) -> bool {
        self.pos >= self.text.len()
    }

    /// Next line without its terminator, with the line's byte offset.
    pub fn line(&mut self) -> Result<(usize, &'a str)> {
        if self.at_eof() {
            return Err(Error::Parse {
                offset: self.pos,
                message: "unexpected end of file".into(),
            });
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => {
                return Err(Error::Parse {
                    offset: self.text.len(),
                    message: "unterminated last line".into(),
                })
            }
        };
        self.pos += advance;
        Ok((start, line.trim_end_matches('\r')))
    }

    pub fn expect_line(&mut self, expected: &str) -> Result<()> {
        let (offset, line) = self.line()?;
        if line != expected {
            return Err(Error::Parse {
                offset,
                message: format!("expected {expected:?}, found {line:?}"),
            });
        }
        Ok(())
    }

    pub fn expect_eof(&self) -> Result<()> {
        if !self.at_eof() {
            return Err(Error::Parse {
                offset: self.pos,
                message: "trailing content".into(),
            });
        }
        Ok(())
    }

    /// Parses a `key value` line.
    pub fn keyed<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let mut f = self.fields(2)?;
        f.expect_token(key)?;
        f.next_parse()
    }

    /// Splits the next line into exactly `n` whitespace-separated tokens.
    pub fn fields(&mut self, n: usize) -> Result<Fields<'a>> {
        let f = self.any_fields()?;
        if f.tokens.len() != n {
            return Err(Error::Parse {
                offset: f.line_offset,
                message: format!("expected {n} fields, found {}", f.tokens.len()),
            });
        }
        Ok(f)
    }

    pub fn any_fields(&mut self) -> Result<Fields<'a>> {
        let (offset, line) = self.line()?;
        let mut tokens = Vec::new();
        let mut i = 0;
        for tok in line.split(' ') {
            if !tok.is_empty() {
                tokens.push((offset + i, tok));
            }
            i += tok.len() + 1;
        }
        Ok(Fields {
            tokens,
            next: 0,
            line_offset: offset,
        })
    }
}

impl<'a> Fields<'a> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn peek_token(&self) -> Option<&'a str> {
        self.tokens.get(self.next).map(|t| t.1)
    }

    pub fn next_token(&mut self) -> Result<(usize, &'a str)> {
        let t = self
            .tokens
            .get(self.next)
            .copied()
            .ok_or_else(|| Error::Parse {
                offset: self.line_offset,
                message: "missing field".into(),
            })?;
        self.next += 1;
        Ok(t)
    }

    pub fn expect_token(&mut self, expected: &str) -> Result<()> {
        let (offset, tok) = self.next_token()?;
        if tok != expected {
            return Err(Error::Parse {
                offset,
                message: format!("expected {expected:?}, found {tok:?}"),
            });
        }
        Ok(())
    }

    pub fn next_parse<T: FromStr>(&mut self) -> Result<T> {
        let (offset, tok) = self.next_token()?;
        tok.parse().map_err(|_| Error::Parse {
            offset,
            message: format!("cannot parse {tok:?}"),
        })
    }

    pub fn next_f64(&mut self) -> Result<f64> {
        let (offset, tok) = self.next_token()?;
        let v: f64 = tok.parse().map_err(|_| Error::Parse {
            offset,
            message: format!("cannot parse {tok:?} as a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                offset,
                message: "non-finite number".into(),
            });
        }
        Ok(v)
    }

    /// Remaining tokens joined by single spaces.
    pub fn rest(&mut self) -> String {
        let rest: Vec<&str> = self.tokens[self.next..].iter().map(|t| t.1).collect();
        self.next = self.tokens.len();
        rest.join(" ")
    }
}
