//! Plain-text PGM (`P2`) reading and writing.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Upper bound on `width·height` accepted by the parser.
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each `<= maxval`.
    pub pixels: Vec<u16>,
}

impl Pgm {
    /// Quantizes `[0, 1]` values to `maxval` levels.
    pub fn from_unit(width: usize, height: usize, maxval: u16, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim("pgm", &[height, width], &[values.len()]));
        }
        let pixels = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * maxval as f64).round() as u16)
            .collect();
        Ok(Pgm {
            width,
            height,
            maxval,
            pixels,
        })
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.pixels.iter().map(|&p| p as f64 / m).collect()
    }

    pub fn encode(&self) -> String {
        let mut out = String::with_capacity(self.pixels.len() * 6 + 32);
        let _ = write!(out, "P2\n{} {}\n{}\n", self.width, self.height, self.maxval);
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut tokens = Tokens::new(text);
        let (magic, _) = tokens.next().ok_or_else(|| fmt("missing magic number"))?;
        if magic != "P2" {
            return Err(fmt(format!("expected P2 magic, got {magic:?}")));
        }
        let width = tokens.number("width")?;
        let height = tokens.number("height")?;
        let maxval = tokens.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(fmt("zero image dimension"));
        }
        let count = width
            .checked_mul(height)
            .filter(|&n| n <= MAX_PIXELS)
            .ok_or_else(|| fmt(format!("image {width}x{height} too large")))?;
        if maxval == 0 || maxval > u16::MAX as usize {
            return Err(fmt(format!("maxval {maxval} out of range")));
        }
        let mut pixels = Vec::with_capacity(count.min(text.len()));
        for _ in 0..count {
            let v = tokens.number("pixel")?;
            if v > maxval {
                return Err(Error::parse(
                    tokens.line,
                    format!("sample {v} exceeds maxval {maxval}"),
                ));
            }
            pixels.push(v as u16);
        }
        if let Some((extra, line)) = tokens.next() {
            return Err(Error::parse(line, format!("trailing data {extra:?}")));
        }
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "PGM",
        msg: msg.into(),
    }
}

/// Whitespace tokenizer that skips `#` comments and tracks line numbers.
struct Tokens<'a> {
    rest: &'a str,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Tokens { rest: text, line: 1 }
    }

    fn next(&mut self) -> Option<(&'a str, usize)> {
        loop {
            let trimmed = self.rest.trim_start_matches(|c: char| {
                if c == '\n' {
                    self.line += 1;
                }
                c.is_ascii_whitespace()
            });
            self.rest = trimmed;
            if let Some(after) = trimmed.strip_prefix('#') {
                self.rest = after.find('\n').map_or("", |i| &after[i..]);
                continue;
            }
            if trimmed.is_empty() {
                return None;
            }
            let end = trimmed
                .find(|c: char| c.is_ascii_whitespace() || c == '#')
                .unwrap_or(trimmed.len());
            let (tok, rest) = trimmed.split_at(end);
            self.rest = rest;
            return Some((tok, self.line));
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (tok, line) = self
            .next()
            .ok_or_else(|| Error::parse(self.line, format!("unexpected end of data, expected {what}")))?;
        if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::parse(line, format!("invalid {what} {tok:?}")));
        }
        tok.parse()
            .map_err(|_| Error::parse(line, format!("{what} {tok:?} out of range")))
    }
}
