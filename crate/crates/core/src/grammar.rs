//! Kernel expressions: a product over input dimensions of sums of base symbols.
//!
//! The textual form is
//!
//! ```text
//! expr    := dimterm ('*' dimterm)*
//! dimterm := '(' sum ')' | base
//! sum     := base ('+' base)*
//! base    := SYMBOL '_' INDEX
//! ```
//!
//! with `SYMBOL` one of `SE`, `LIN`, `PER`, `SExLIN`, `SExPER`, `LINxPER` and
//! `INDEX` a 1-based input dimension. All bases in one dimterm share an index
//! and every dimension `1..=d` appears in exactly one dimterm.
//!
//! ```
//! use amorgp::grammar::{BaseSymbol, KernelExpression};
//!
//! let e: KernelExpression = "(SExLIN_1 + SE_1) * (SE_2 + PER_2)".parse().unwrap();
//! assert_eq!(e.dims()[0], vec![BaseSymbol::SeLin, BaseSymbol::Se]);
//! assert_eq!(e.param_dim(), 11);
//! assert_eq!(e.to_string(), "(SExLIN_1 + SE_1) * (SE_2 + PER_2)");
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Number of base symbols, and the length of a one-hot symbol encoding.
pub const NUM_SYMBOLS: usize = 6;

/// Elementary one-dimensional kernels and their pairwise products.
///
/// The declaration order is the one-hot slot order and must not change:
/// saved model weights depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaseSymbol {
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "LIN")]
    Lin,
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "SE_LIN")]
    SeLin,
    #[serde(rename = "SE_PER")]
    SePer,
    #[serde(rename = "LIN_PER")]
    LinPer,
}

impl BaseSymbol {
    pub const ALL: [BaseSymbol; NUM_SYMBOLS] =
        [BaseSymbol::Se, BaseSymbol::Lin, BaseSymbol::Per, BaseSymbol::SeLin, BaseSymbol::SePer, BaseSymbol::LinPer];

    /// One-hot slot.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Number of hyperparameters. Products keep the variance of both factors.
    pub fn arity(self) -> usize {
        match self {
            BaseSymbol::Se | BaseSymbol::Lin => 2,
            BaseSymbol::Per => 3,
            BaseSymbol::SeLin => 4,
            BaseSymbol::SePer | BaseSymbol::LinPer => 5,
        }
    }

    /// Names of the hyperparameters, in storage order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            BaseSymbol::Se => &["variance", "lengthscale"],
            BaseSymbol::Lin => &["variance", "offset"],
            BaseSymbol::Per => &["variance", "period", "lengthscale"],
            BaseSymbol::SeLin => &["se_variance", "se_lengthscale", "lin_variance", "lin_offset"],
            BaseSymbol::SePer => &["se_variance", "se_lengthscale", "per_variance", "per_period", "per_lengthscale"],
            BaseSymbol::LinPer => &["lin_variance", "lin_offset", "per_variance", "per_period", "per_lengthscale"],
        }
    }

    /// Which prior family each hyperparameter belongs to.
    pub fn param_kinds(self) -> &'static [ParamKind] {
        use ParamKind::*;
        match self {
            BaseSymbol::Se => &[Variance, Lengthscale],
            BaseSymbol::Lin => &[Variance, Offset],
            BaseSymbol::Per => &[Variance, Period, Lengthscale],
            BaseSymbol::SeLin => &[Variance, Lengthscale, Variance, Offset],
            BaseSymbol::SePer => &[Variance, Lengthscale, Variance, Period, Lengthscale],
            BaseSymbol::LinPer => &[Variance, Offset, Variance, Period, Lengthscale],
        }
    }

    /// Token used in the text syntax.
    pub fn token(self) -> &'static str {
        match self {
            BaseSymbol::Se => "SE",
            BaseSymbol::Lin => "LIN",
            BaseSymbol::Per => "PER",
            BaseSymbol::SeLin => "SExLIN",
            BaseSymbol::SePer => "SExPER",
            BaseSymbol::LinPer => "LINxPER",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|b| b.token() == s)
    }

    /// Tag used in the structured (JSON) form.
    pub fn tag(self) -> &'static str {
        match self {
            BaseSymbol::Se => "SE",
            BaseSymbol::Lin => "LIN",
            BaseSymbol::Per => "PER",
            BaseSymbol::SeLin => "SE_LIN",
            BaseSymbol::SePer => "SE_PER",
            BaseSymbol::LinPer => "LIN_PER",
        }
    }

    pub fn one_hot(self) -> [f64; NUM_SYMBOLS] {
        let mut v = [0.0; NUM_SYMBOLS];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for BaseSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Prior family of a single hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Variance,
    Offset,
    Period,
    Lengthscale,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown symbol `{symbol}` at byte {position}")]
    UnknownSymbol { position: usize, symbol: String },
    #[error("mixed dimension indices in one factor at byte {position} (expected {expected}, found {found})")]
    MixedIndex { position: usize, expected: usize, found: usize },
    #[error("dimension index {index} appears more than once")]
    DuplicateIndex { index: usize },
    #[error("dimension index {index} is missing")]
    MissingIndex { index: usize },
}

/// `k(x, x') = prod_i sum_j k_{S_ij}(x_i, x'_i)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawExpression", into = "RawExpression")]
pub struct KernelExpression {
    dims: Vec<Vec<BaseSymbol>>,
}

#[derive(Serialize, Deserialize)]
struct RawExpression {
    dims: Vec<Vec<BaseSymbol>>,
}

impl TryFrom<RawExpression> for KernelExpression {
    type Error = Error;
    fn try_from(raw: RawExpression) -> Result<Self> {
        KernelExpression::new(raw.dims)
    }
}

impl From<KernelExpression> for RawExpression {
    fn from(e: KernelExpression) -> Self {
        RawExpression { dims: e.dims }
    }
}

impl KernelExpression {
    pub fn new(dims: Vec<Vec<BaseSymbol>>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParams("kernel expression needs at least one dimension".into()));
        }
        if let Some(i) = dims.iter().position(Vec::is_empty) {
            return Err(Error::InvalidParams(format!("dimension {} has no addends", i + 1)));
        }
        Ok(Self { dims })
    }

    /// The same sub-expression on each of `d` dimensions.
    pub fn replicated(sub: &[BaseSymbol], d: usize) -> Result<Self> {
        Self::new(vec![sub.to_vec(); d])
    }

    pub fn input_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[Vec<BaseSymbol>] {
        &self.dims
    }

    /// Addend counts `[N_1, ..., N_d]`.
    pub fn addend_counts(&self) -> Vec<usize> {
        self.dims.iter().map(Vec::len).collect()
    }

    /// Longest sum over dimensions.
    pub fn max_addends(&self) -> usize {
        self.dims.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn num_symbols(&self) -> usize {
        self.dims.iter().map(Vec::len).sum()
    }

    /// Iterates `(dimension, position, symbol)`.
    pub fn symbols(&self) -> impl Iterator<Item = (usize, usize, BaseSymbol)> + '_ {
        self.dims.iter().enumerate().flat_map(|(i, s)| s.iter().enumerate().map(move |(j, &b)| (i, j, b)))
    }

    /// Dimension of the kernel hyperparameter space (noise excluded).
    pub fn param_dim(&self) -> usize {
        self.symbols().map(|(_, _, b)| b.arity()).sum()
    }

    /// One length-6 one-hot vector per addend, grouped by dimension.
    pub fn one_hot(&self) -> Vec<Vec<[f64; NUM_SYMBOLS]>> {
        self.dims.iter().map(|s| s.iter().map(|b| b.one_hot()).collect()).collect()
    }

    /// Dimensions reordered so that output dimension `i` is input dimension `perm[i]`.
    pub fn permute_dims(&self, perm: &[usize]) -> Self {
        Self { dims: perm.iter().map(|&p| self.dims[p].clone()).collect() }
    }

    /// Addends of dimension `dim` reordered so that position `j` holds old position `perm[j]`.
    pub fn permute_addends(&self, dim: usize, perm: &[usize]) -> Self {
        let mut dims = self.dims.clone();
        dims[dim] = perm.iter().map(|&p| self.dims[dim][p]).collect();
        Self { dims }
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Parser::new(text).parse()
    }
}

impl FromStr for KernelExpression {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, ParseError> {
        Self::parse(s)
    }
}

impl fmt::Display for KernelExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, sub) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(" * ")?;
            }
            let idx = i + 1;
            if sub.len() > 1 {
                f.write_str("(")?;
            }
            for (j, b) in sub.iter().enumerate() {
                if j > 0 {
                    f.write_str(" + ")?;
                }
                write!(f, "{}_{}", b.token(), idx)?;
            }
            if sub.len() > 1 {
                f.write_str(")")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Star,
    Plus,
    Base { symbol: BaseSymbol, index: usize },
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn syntax(&self, position: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax { position, message: message.into() }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    /// Returns the next token and its starting byte offset without consuming it.
    fn peek(&mut self) -> Result<(Tok, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let save = self.pos;
        let t = self.lex()?;
        self.pos = save;
        Ok((t, start))
    }

    fn next(&mut self) -> Result<(Tok, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let t = self.lex()?;
        Ok((t, start))
    }

    fn lex(&mut self) -> Result<Tok, ParseError> {
        let bytes = self.src.as_bytes();
        let Some(&c) = bytes.get(self.pos) else {
            return Ok(Tok::End);
        };
        let single = match c {
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b'*' => Some(Tok::Star),
            b'+' => Some(Tok::Plus),
            _ => None,
        };
        if let Some(t) = single {
            self.pos += 1;
            return Ok(t);
        }
        if !c.is_ascii_alphabetic() {
            return Err(self.syntax(self.pos, format!("unexpected character `{}`", c as char)));
        }
        let start = self.pos;
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if bytes.get(self.pos) != Some(&b'_') {
            return Err(self.syntax(self.pos, format!("expected `_<index>` after `{name}`")));
        }
        self.pos += 1;
        let dstart = self.pos;
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if dstart == self.pos {
            return Err(self.syntax(dstart, "expected a dimension index"));
        }
        let index: usize =
            self.src[dstart..self.pos].parse().map_err(|_| self.syntax(dstart, "dimension index out of range"))?;
        if index == 0 {
            return Err(self.syntax(dstart, "dimension indices start at 1"));
        }
        let symbol = BaseSymbol::from_token(name)
            .ok_or_else(|| ParseError::UnknownSymbol { position: start, symbol: name.to_string() })?;
        Ok(Tok::Base { symbol, index })
    }

    fn base(&mut self) -> Result<(BaseSymbol, usize, usize), ParseError> {
        match self.next()? {
            (Tok::Base { symbol, index }, pos) => Ok((symbol, index, pos)),
            (t, pos) => Err(self.syntax(pos, format!("expected a base symbol, found {}", describe(&t)))),
        }
    }

    fn dimterm(&mut self) -> Result<(usize, Vec<BaseSymbol>), ParseError> {
        let (t, pos) = self.peek()?;
        match t {
            Tok::LParen => {
                self.next()?;
                let (first, index, _) = self.base()?;
                let mut sum = vec![first];
                loop {
                    match self.next()? {
                        (Tok::Plus, _) => {
                            let (b, i, p) = self.base()?;
                            if i != index {
                                return Err(ParseError::MixedIndex { position: p, expected: index, found: i });
                            }
                            sum.push(b);
                        }
                        (Tok::RParen, _) => break,
                        (t, p) => return Err(self.syntax(p, format!("expected `+` or `)`, found {}", describe(&t)))),
                    }
                }
                Ok((index, sum))
            }
            Tok::Base { .. } => {
                let (b, index, _) = self.base()?;
                Ok((index, vec![b]))
            }
            t => Err(self.syntax(pos, format!("expected `(` or a base symbol, found {}", describe(&t)))),
        }
    }

    fn parse(mut self) -> Result<KernelExpression, ParseError> {
        let mut terms = vec![self.dimterm()?];
        loop {
            match self.next()? {
                (Tok::Star, _) => terms.push(self.dimterm()?),
                (Tok::End, _) => break,
                (t, p) => return Err(self.syntax(p, format!("expected `*` or end of input, found {}", describe(&t)))),
            }
        }
        let d = terms.len();
        let mut seen = std::collections::BTreeSet::new();
        for (index, _) in &terms {
            if !seen.insert(*index) {
                return Err(ParseError::DuplicateIndex { index: *index });
            }
        }
        if let Some(missing) = (1..=d).find(|i| !seen.contains(i)) {
            return Err(ParseError::MissingIndex { index: missing });
        }
        terms.sort_by_key(|(index, _)| *index);
        Ok(KernelExpression { dims: terms.into_iter().map(|(_, s)| s).collect() })
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Star => "`*`".into(),
        Tok::Plus => "`+`".into(),
        Tok::Base { symbol, index } => format!("`{}_{}`", symbol.token(), index),
        Tok::End => "end of input".into(),
    }
}

/// Hyperparameters for every symbol of an expression plus the likelihood noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAssignment {
    /// `symbols[i][j]` holds the parameters of addend `j` in dimension `i`.
    pub symbols: Vec<Vec<Vec<f64>>>,
    pub noise_variance: f64,
}

impl ParamAssignment {
    /// Builds and validates against `expr`.
    pub fn new(expr: &KernelExpression, symbols: Vec<Vec<Vec<f64>>>, noise_variance: f64) -> Result<Self> {
        let p = Self { symbols, noise_variance };
        p.validate(expr)?;
        Ok(p)
    }

    /// All kernel parameters equal to `value`.
    pub fn constant(expr: &KernelExpression, value: f64, noise_variance: f64) -> Self {
        let symbols = expr.dims().iter().map(|s| s.iter().map(|b| vec![value; b.arity()]).collect()).collect();
        Self { symbols, noise_variance }
    }

    /// Checks shape against `expr` and strict positivity of every entry.
    pub fn validate(&self, expr: &KernelExpression) -> Result<()> {
        if self.symbols.len() != expr.input_dim() {
            return Err(Error::InvalidParams(format!(
                "{} dimensions of parameters for a {}-dimensional expression",
                self.symbols.len(),
                expr.input_dim()
            )));
        }
        for (i, (ps, ss)) in self.symbols.iter().zip(expr.dims()).enumerate() {
            if ps.len() != ss.len() {
                return Err(Error::InvalidParams(format!(
                    "dimension {}: {} parameter vectors for {} addends",
                    i + 1,
                    ps.len(),
                    ss.len()
                )));
            }
            for (j, (p, b)) in ps.iter().zip(ss).enumerate() {
                if p.len() != b.arity() {
                    return Err(Error::InvalidParams(format!(
                        "dimension {} addend {} ({}): expected {} parameters, got {}",
                        i + 1,
                        j + 1,
                        b,
                        b.arity(),
                        p.len()
                    )));
                }
                if let Some(v) = p.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidParams(format!(
                        "dimension {} addend {} ({}): non-positive parameter {v}",
                        i + 1,
                        j + 1,
                        b
                    )));
                }
            }
        }
        if !(self.noise_variance > 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::InvalidParams(format!("noise variance {} is not positive", self.noise_variance)));
        }
        Ok(())
    }

    /// Kernel parameters in expression order, followed by the noise variance.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.symbols.iter().flatten().flatten().copied().collect();
        v.push(self.noise_variance);
        v
    }

    /// Inverse of [`ParamAssignment::to_flat`].
    pub fn from_flat(expr: &KernelExpression, flat: &[f64]) -> Result<Self> {
        if flat.len() != expr.param_dim() + 1 {
            return Err(Error::InvalidParams(format!("expected {} values, got {}", expr.param_dim() + 1, flat.len())));
        }
        let mut k = 0;
        let mut symbols = Vec::with_capacity(expr.input_dim());
        for sub in expr.dims() {
            let mut row = Vec::with_capacity(sub.len());
            for b in sub {
                row.push(flat[k..k + b.arity()].to_vec());
                k += b.arity();
            }
            symbols.push(row);
        }
        Self::new(expr, symbols, flat[k])
    }

    /// Same reindexing as [`KernelExpression::permute_dims`].
    pub fn permute_dims(&self, perm: &[usize]) -> Self {
        Self { symbols: perm.iter().map(|&p| self.symbols[p].clone()).collect(), noise_variance: self.noise_variance }
    }

    /// Same reindexing as [`KernelExpression::permute_addends`].
    pub fn permute_addends(&self, dim: usize, perm: &[usize]) -> Self {
        let mut symbols = self.symbols.clone();
        symbols[dim] = perm.iter().map(|&p| self.symbols[dim][p].clone()).collect();
        Self { symbols, noise_variance: self.noise_variance }
    }

    /// Largest absolute difference over all entries. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = self.to_flat();
        let b = other.to_flat();
        assert_eq!(a.len(), b.len());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

/// Human-readable JSON form of a parameter assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParams {
    pub kernel: String,
    pub noise_variance: f64,
    pub dims: Vec<Vec<NamedSymbolParams>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedSymbolParams {
    pub symbol: BaseSymbol,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl NamedParams {
    pub fn new(expr: &KernelExpression, params: &ParamAssignment) -> Self {
        let dims = expr
            .dims()
            .iter()
            .zip(&params.symbols)
            .map(|(ss, ps)| {
                ss.iter()
                    .zip(ps)
                    .map(|(b, p)| NamedSymbolParams {
                        symbol: *b,
                        names: b.param_names().iter().map(|s| s.to_string()).collect(),
                        values: p.clone(),
                    })
                    .collect()
            })
            .collect();
        Self { kernel: expr.to_string(), noise_variance: params.noise_variance, dims }
    }

    /// Parses the kernel back and validates the values against it.
    pub fn into_assignment(self) -> Result<(KernelExpression, ParamAssignment)> {
        let expr = KernelExpression::parse(&self.kernel)?;
        if self.dims.len() != expr.input_dim() {
            return Err(Error::InvalidParams("dimension count does not match kernel".into()));
        }
        for (ss, ps) in expr.dims().iter().zip(&self.dims) {
            if ss.len() != ps.len() || ss.iter().zip(ps).any(|(b, p)| *b != p.symbol) {
                return Err(Error::InvalidParams("symbols do not match kernel".into()));
            }
        }
        let symbols = self.dims.into_iter().map(|ps| ps.into_iter().map(|p| p.values).collect()).collect();
        let params = ParamAssignment::new(&expr, symbols, self.noise_variance)?;
        Ok((expr, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BaseSymbol::*;

    fn expr(dims: Vec<Vec<BaseSymbol>>) -> KernelExpression {
        KernelExpression::new(dims).unwrap()
    }

    #[test]
    fn parses_two_dimensional_example() {
        let e = KernelExpression::parse("(SExLIN_1 + SE_1) * (SE_2 + PER_2)").unwrap();
        assert_eq!(e.dims(), &[vec![SeLin, Se], vec![Se, Per]]);
    }

    #[test]
    fn parses_minimal_and_ard() {
        assert_eq!(KernelExpression::parse("SE_1").unwrap().dims(), &[vec![Se]]);
        let ard = KernelExpression::parse("SE_1 * SE_2 * SE_3").unwrap();
        assert_eq!(ard.dims(), &[vec![Se], vec![Se], vec![Se]]);
    }

    #[test]
    fn factors_may_come_in_any_order() {
        let e = KernelExpression::parse("PER_2*(LINxPER_1+SExPER_1)").unwrap();
        assert_eq!(e.dims(), &[vec![LinPer, SePer], vec![Per]]);
        assert_eq!(e.to_string(), "(LINxPER_1 + SExPER_1) * PER_2");
    }

    #[test]
    fn formats_canonically() {
        assert_eq!(expr(vec![vec![Se]]).to_string(), "SE_1");
        assert_eq!(expr(vec![vec![SeLin, Se], vec![Se, Per]]).to_string(), "(SExLIN_1 + SE_1) * (SE_2 + PER_2)");
        assert_eq!(expr(vec![vec![Per], vec![Per]]).to_string(), "PER_1 * PER_2");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(KernelExpression::parse("(SE_1 + PER_2)"), Err(ParseError::MixedIndex { .. })));
        assert!(matches!(KernelExpression::parse("SE_1 * SE_1"), Err(ParseError::DuplicateIndex { index: 1 })));
        assert!(matches!(KernelExpression::parse("SE_1 * SE_3"), Err(ParseError::MissingIndex { index: 2 })));
        assert!(matches!(KernelExpression::parse("SE_2"), Err(ParseError::MissingIndex { index: 1 })));
        assert!(matches!(KernelExpression::parse("RQ_1"), Err(ParseError::UnknownSymbol { position: 0, .. })));
        assert!(matches!(KernelExpression::parse("SE_1 +"), Err(ParseError::Syntax { position: 5, .. })));
        assert!(matches!(KernelExpression::parse("(SE_1"), Err(ParseError::Syntax { .. })));
        assert!(matches!(KernelExpression::parse("SE_0"), Err(ParseError::Syntax { .. })));
        assert!(matches!(KernelExpression::parse(""), Err(ParseError::Syntax { position: 0, .. })));
        assert!(matches!(KernelExpression::parse("SE1"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn param_dims() {
        let ard4 = KernelExpression::replicated(&[Se], 4).unwrap();
        assert_eq!(ard4.param_dim(), 8);
        let per3 = KernelExpression::replicated(&[Per], 3).unwrap();
        assert_eq!(per3.param_dim(), 9);
        let e = expr(vec![vec![SeLin, Se], vec![Se, Per]]);
        assert_eq!(e.param_dim(), 11);
        // Count the names of a brute-force instantiation.
        let names: usize = e.symbols().map(|(_, _, b)| b.param_names().len()).sum();
        assert_eq!(names, 11);
        for b in BaseSymbol::ALL {
            assert_eq!(expr(vec![vec![b]]).param_dim(), b.arity());
            assert_eq!(b.param_kinds().len(), b.arity());
        }
    }

    #[test]
    fn one_hot_layout() {
        assert_eq!(expr(vec![vec![Se]]).one_hot(), vec![vec![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]]);
        assert_eq!(
            expr(vec![vec![Se, Per]]).one_hot(),
            vec![vec![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]]
        );
        let oh = expr(vec![vec![SeLin, Se], vec![Se, Per]]).one_hot();
        assert_eq!(oh.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(oh[0][0][3], 1.0);
        assert_eq!(oh[0][1][0], 1.0);
        assert_eq!(oh[1][0][0], 1.0);
        assert_eq!(oh[1][1][2], 1.0);
    }

    #[test]
    fn json_form() {
        let e = expr(vec![vec![SeLin, Se], vec![Per]]);
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, r#"{"dims":[["SE_LIN","SE"],["PER"]]}"#);
        let back: KernelExpression = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
        assert!(serde_json::from_str::<KernelExpression>(r#"{"dims":[[]]}"#).is_err());
        assert!(serde_json::from_str::<KernelExpression>(r#"{"dims":[]}"#).is_err());
    }

    #[test]
    fn params_validate_and_flatten() {
        let e = expr(vec![vec![Se], vec![Lin, Per]]);
        let p = ParamAssignment::new(&e, vec![vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0], vec![5.0, 6.0, 7.0]]], 0.1)
            .unwrap();
        let flat = p.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 0.1]);
        assert_eq!(ParamAssignment::from_flat(&e, &flat).unwrap(), p);
        assert!(
            ParamAssignment::new(&e, vec![vec![vec![1.0]], vec![vec![3.0, 4.0], vec![5.0, 6.0, 7.0]]], 0.1).is_err()
        );
        assert!(ParamAssignment::new(&e, vec![vec![vec![1.0, -2.0]], vec![vec![3.0, 4.0], vec![5.0, 6.0, 7.0]]], 0.1)
            .is_err());
        assert!(ParamAssignment::new(&e, p.symbols.clone(), 0.0).is_err());
    }

    #[test]
    fn named_params_round_trip() {
        let e = expr(vec![vec![SePer], vec![Lin]]);
        let p = ParamAssignment::constant(&e, 0.5, 0.02);
        let named = NamedParams::new(&e, &p);
        let json = serde_json::to_string(&named).unwrap();
        let back: NamedParams = serde_json::from_str(&json).unwrap();
        let (e2, p2) = back.into_assignment().unwrap();
        assert_eq!(e2, e);
        assert_eq!(p2, p);
    }
}
