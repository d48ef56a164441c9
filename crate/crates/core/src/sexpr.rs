//! S-expression payloads of the SimSpark agent protocol.
//!
//! The dialect is deliberately small: lists delimited by parentheses and bare
//! atoms separated by ASCII whitespace. There are no strings, comments or
//! escapes. Numbers stay as text at this layer.

use std::fmt;

use thiserror::Error;

/// Default maximum list nesting accepted by the parser.
pub const DEFAULT_MAX_DEPTH: usize = 64;
/// Default maximum atom length in bytes.
pub const DEFAULT_MAX_ATOM_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SexprError {
    #[error("unbalanced parentheses at byte {pos}")]
    UnbalancedParens { pos: usize },
    #[error("nesting depth exceeds {max} at byte {pos}")]
    DepthExceeded { pos: usize, max: usize },
    #[error("unexpected byte outside any expression at {pos}")]
    TrailingGarbage { pos: usize },
    #[error("invalid byte 0x{byte:02x} at {pos}")]
    InvalidByte { pos: usize, byte: u8 },
    #[error("atom longer than {max} bytes at byte {pos}")]
    AtomTooLong { pos: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid atom text {0:?}")]
pub struct InvalidAtom(pub Vec<u8>);

fn is_space(b: u8) -> bool {
    b.is_ascii_whitespace()
}

fn is_atom_byte(b: u8) -> bool {
    !(b == b'(' || b == b')' || b == 0 || is_space(b))
}

/// Non-empty byte string with no parentheses, whitespace or NUL.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom(Vec<u8>);

impl Atom {
    pub fn new(text: impl Into<Vec<u8>>) -> Result<Self, InvalidAtom> {
        let text = text.into();
        if text.is_empty() || !text.iter().all(|&b| is_atom_byte(b)) {
            return Err(InvalidAtom(text));
        }
        Ok(Atom(text))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// The atom as UTF-8 text, if it is valid UTF-8.
    pub fn as_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.0).ok()
    }
}

impl fmt::Debug for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", String::from_utf8_lossy(&self.0))
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub enum SExpr {
    Atom(Atom),
    List(Vec<SExpr>),
}

impl SExpr {
    /// Builds an atom, panicking on invalid text. Meant for literals.
    pub fn atom(text: &str) -> SExpr {
        SExpr::Atom(Atom::new(text).expect("invalid atom literal"))
    }

    pub fn list(children: impl IntoIterator<Item = SExpr>) -> SExpr {
        SExpr::List(children.into_iter().collect())
    }

    pub fn as_atom(&self) -> Option<&Atom> {
        match self {
            SExpr::Atom(a) => Some(a),
            SExpr::List(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        self.as_atom().and_then(Atom::as_str)
    }

    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(items) => Some(items),
            SExpr::Atom(_) => None,
        }
    }

    /// Head atom of a list, e.g. `HJ` for `(HJ (n laj1) (ax 2.5))`.
    pub fn head(&self) -> Option<&str> {
        self.as_list()?.first()?.as_str()
    }

    /// Finds the first child list whose head matches `name` and returns its
    /// remaining elements.
    pub fn field(&self, name: &str) -> Option<&[SExpr]> {
        self.as_list()?
            .iter()
            .find(|child| child.head() == Some(name))
            .and_then(|child| child.as_list())
            .map(|items| &items[1..])
    }

    pub fn depth(&self) -> usize {
        match self {
            SExpr::Atom(_) => 0,
            SExpr::List(items) => 1 + items.iter().map(SExpr::depth).max().unwrap_or(0),
        }
    }
}

impl fmt::Debug for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Atom(a) => write!(f, "{a:?}"),
            SExpr::List(items) => f.debug_list().entries(items).finish(),
        }
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&serialize(self)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    pub max_depth: usize,
    pub max_atom_len: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_depth: DEFAULT_MAX_DEPTH,
            max_atom_len: DEFAULT_MAX_ATOM_LEN,
        }
    }
}

/// Parses every top-level expression in `input` with default limits.
pub fn parse(input: &[u8]) -> Result<Vec<SExpr>, SexprError> {
    parse_with(input, ParseOptions::default())
}

pub fn parse_with(input: &[u8], opts: ParseOptions) -> Result<Vec<SExpr>, SexprError> {
    let mut top = Vec::new();
    // open lists, innermost last
    let mut stack: Vec<Vec<SExpr>> = Vec::new();
    let mut pos = 0;

    while pos < input.len() {
        let b = input[pos];
        match b {
            b'(' => {
                if stack.len() >= opts.max_depth {
                    return Err(SexprError::DepthExceeded {
                        pos,
                        max: opts.max_depth,
                    });
                }
                stack.push(Vec::new());
                pos += 1;
            }
            b')' => {
                let done = stack.pop().ok_or(SexprError::UnbalancedParens { pos })?;
                push_node(&mut stack, &mut top, SExpr::List(done));
                pos += 1;
            }
            _ if is_space(b) => pos += 1,
            0 => {
                return Err(if stack.is_empty() {
                    SexprError::TrailingGarbage { pos }
                } else {
                    SexprError::InvalidByte { pos, byte: b }
                })
            }
            _ => {
                let start = pos;
                while pos < input.len() && is_atom_byte(input[pos]) {
                    pos += 1;
                }
                if pos - start > opts.max_atom_len {
                    return Err(SexprError::AtomTooLong {
                        pos: start,
                        max: opts.max_atom_len,
                    });
                }
                let atom = Atom(input[start..pos].to_vec());
                push_node(&mut stack, &mut top, SExpr::Atom(atom));
            }
        }
    }

    if !stack.is_empty() {
        return Err(SexprError::UnbalancedParens { pos: input.len() });
    }
    Ok(top)
}

fn push_node(stack: &mut [Vec<SExpr>], top: &mut Vec<SExpr>, node: SExpr) {
    match stack.last_mut() {
        Some(open) => open.push(node),
        None => top.push(node),
    }
}

/// Canonical form: one space between siblings, none next to parentheses.
pub fn serialize(expr: &SExpr) -> Vec<u8> {
    let mut out = Vec::new();
    serialize_into(expr, &mut out);
    out
}

pub fn serialize_into(expr: &SExpr, out: &mut Vec<u8>) {
    match expr {
        SExpr::Atom(a) => out.extend_from_slice(a.as_bytes()),
        SExpr::List(items) => {
            out.push(b'(');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b' ');
                }
                serialize_into(item, out);
            }
            out.push(b')');
        }
    }
}
