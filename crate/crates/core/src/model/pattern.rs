//! Layer-pattern DSL.
//!
//! ```text
//! pattern := group+
//! group   := '[' sym+ ']' count
//! sym     := 'T' | 'M'
//! count   := positive integer
//! ```
//!
//! Whitespace between tokens is ignored. `T` is a frozen transformer layer.
//! Inside a group that contains `T`, each `M` attaches a Divide+Modulate
//! adapter to the nearest preceding `T`, so such a group must start with `T`.
//! A group made only of `M` expands to standalone SSM layers on the residual
//! stream and must come after at least one `T`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    T,
    M,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub symbols: Vec<Symbol>,
    pub count: usize,
}

/// One entry of the expanded layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSlot {
    /// Transformer layer carrying `modulations` stacked adapters (0 = plain).
    Transformer { modulations: usize },
    /// Standalone SSM layer with a residual connection.
    Standalone,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPattern {
    groups: Vec<Group>,
    slots: Vec<LayerSlot>,
}

impl LayerPattern {
    /// Parses `src` and checks that it expands to exactly `depth` transformer layers.
    pub fn parse(src: &str, depth: usize) -> Result<Self> {
        let pattern: LayerPattern = src.parse()?;
        let found = pattern.transformer_count();
        if found != depth {
            return Err(Error::Parse {
                position: src.len(),
                message: format!("pattern expands to {found} transformer layers, expected {depth}"),
            });
        }
        Ok(pattern)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn slots(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn transformer_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, LayerSlot::Transformer { .. })).count()
    }

    /// Number of adapters plus standalone layers, i.e. SSM blocks in the model.
    pub fn ssm_count(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                LayerSlot::Transformer { modulations } => *modulations,
                LayerSlot::Standalone => 1,
            })
            .sum()
    }

    /// Canonical source form, without whitespace.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            f.write_str("[")?;
            for s in &g.symbols {
                f.write_str(match s {
                    Symbol::T => "T",
                    Symbol::M => "M",
                })?;
            }
            write!(f, "]{}", g.count)?;
        }
        Ok(())
    }
}

impl FromStr for LayerPattern {
    type Err = Error;

    fn from_str(src: &str) -> Result<Self> {
        let err = |position: usize, message: &str| Error::Parse { position, message: message.to_string() };
        let bytes = src.as_bytes();
        let mut pos = 0;
        let skip_ws = |pos: &mut usize| {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
        };

        let mut groups = Vec::new();
        let mut slots: Vec<LayerSlot> = Vec::new();
        skip_ws(&mut pos);
        if pos == bytes.len() {
            return Err(err(pos, "empty pattern"));
        }
        while pos < bytes.len() {
            if bytes[pos] != b'[' {
                return Err(err(pos, "expected '['"));
            }
            pos += 1;
            let mut symbols = Vec::new();
            let mut first_m = None;
            loop {
                skip_ws(&mut pos);
                match bytes.get(pos) {
                    Some(b'T') => symbols.push(Symbol::T),
                    Some(b'M') => {
                        first_m.get_or_insert(pos);
                        symbols.push(Symbol::M);
                    }
                    Some(b']') => break,
                    Some(_) => return Err(err(pos, "expected 'T', 'M' or ']'")),
                    None => return Err(err(pos, "unterminated group")),
                }
                pos += 1;
            }
            if symbols.is_empty() {
                return Err(err(pos, "empty group"));
            }
            let group_start = pos;
            pos += 1;
            skip_ws(&mut pos);
            let digits_start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            let count: usize = src[digits_start..pos]
                .parse()
                .map_err(|_| err(digits_start, "expected a repeat count"))?;
            if count == 0 {
                return Err(err(digits_start, "repeat count must be positive"));
            }

            let has_t = symbols.contains(&Symbol::T);
            if has_t && symbols[0] == Symbol::M {
                return Err(err(first_m.unwrap(), "modulation without a host transformer layer in its group"));
            }
            if !has_t && !slots.iter().any(|s| matches!(s, LayerSlot::Transformer { .. })) {
                return Err(err(first_m.unwrap_or(group_start), "modulation without a host layer"));
            }
            for _ in 0..count {
                for &s in &symbols {
                    match (s, has_t) {
                        (Symbol::T, _) => slots.push(LayerSlot::Transformer { modulations: 0 }),
                        (Symbol::M, true) => match slots.last_mut() {
                            Some(LayerSlot::Transformer { modulations }) => *modulations += 1,
                            _ => unreachable!("group starts with T"),
                        },
                        (Symbol::M, false) => slots.push(LayerSlot::Standalone),
                    }
                }
            }
            groups.push(Group { symbols, count });
            skip_ws(&mut pos);
        }
        Ok(Self { groups, slots })
    }
}
