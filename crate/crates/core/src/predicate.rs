// SPDX-License-Identifier: Apache-2.0

//! Branch and loop conditions.
//!
//! A condition is written as an infix format string whose placeholders are
//! type tags, e.g. `"d>d"` or `"(d<3)&&!b"`. Placeholders bind, in order, to
//! the predicate's operand descriptors. The format is compiled once into a
//! postfix token sequence which the worker evaluates on a value stack.
//!
//! Operators, loosest first: `||`, `&&`, `== !=`, `< > <= >=`, `!`.
//! Integer tags (`d`, `u`, literals) compare with each other after widening;
//! floats compare only with floats; booleans and handles support only
//! `==`/`!=`.

use std::fmt;

use thiserror::Error;

use crate::value::{ParamDesc, TypeTag, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
    And,
    Or,
    Not,
}

impl Op {
    fn precedence(self) -> u8 {
        match self {
            Op::Not => 5,
            Op::Lt | Op::Gt | Op::Le | Op::Ge => 4,
            Op::Eq | Op::Ne => 3,
            Op::And => 2,
            Op::Or => 1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Lt => "<",
            Op::Gt => ">",
            Op::Le => "<=",
            Op::Ge => ">=",
            Op::Eq => "==",
            Op::Ne => "!=",
            Op::And => "&&",
            Op::Or => "||",
            Op::Not => "!",
        }
    }
}

/// One postfix token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    /// Index into the operand list.
    Operand(usize),
    Literal(u64),
    Op(Op),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Operand(i) => write!(f, "${i}"),
            Token::Literal(v) => write!(f, "{v}"),
            Token::Op(op) => f.write_str(op.symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredicateError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: &'static str },
    #[error("format has {expected} placeholder(s) but {found} operand(s) were bound")]
    OperandCount { expected: usize, found: usize },
    #[error("operand {index} has tag '{found}' but the format expects '{expected}'")]
    TagMismatch { index: usize, expected: TypeTag, found: TypeTag },
    #[error("operator {op} cannot be applied to {lhs}{}", rhs.map(|r| format!(" and {r}")).unwrap_or_default())]
    Type { op: &'static str, lhs: &'static str, rhs: Option<&'static str> },
    #[error("expression does not reduce to a single boolean")]
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Operand {
    Int(i128),
    Float(f64),
    Bool(bool),
    Handle(u64),
}

impl Operand {
    fn kind(&self) -> &'static str {
        match self {
            Operand::Int(_) => "integer",
            Operand::Float(_) => "float",
            Operand::Bool(_) => "bool",
            Operand::Handle(_) => "handle",
        }
    }

    fn from_value(v: Value) -> Self {
        match v {
            Value::Int(x) => Operand::Int(x as i128),
            Value::UInt(x) => Operand::Int(x as i128),
            Value::Float(x) => Operand::Float(x),
            Value::Bool(x) => Operand::Bool(x),
            Value::Handle(x) => Operand::Handle(x),
        }
    }

    fn sample(tag: TypeTag) -> Self {
        Self::from_value(tag.zero())
    }
}

fn apply(op: Op, lhs: Operand, rhs: Option<Operand>) -> Result<Operand, PredicateError> {
    use Operand::*;
    let type_err = || PredicateError::Type { op: op.symbol(), lhs: lhs.kind(), rhs: rhs.map(|r| r.kind()) };
    let out = match (op, lhs, rhs) {
        (Op::Not, Bool(a), None) => !a,
        (Op::And, Bool(a), Some(Bool(b))) => a && b,
        (Op::Or, Bool(a), Some(Bool(b))) => a || b,
        (Op::Eq, a, Some(b)) => match (a, b) {
            (Int(x), Int(y)) => x == y,
            (Float(x), Float(y)) => x == y,
            (Bool(x), Bool(y)) => x == y,
            (Handle(x), Handle(y)) => x == y,
            _ => return Err(type_err()),
        },
        (Op::Ne, a, Some(b)) => match apply(Op::Eq, a, Some(b)) {
            Ok(Bool(eq)) => !eq,
            _ => return Err(type_err()),
        },
        (Op::Lt | Op::Gt | Op::Le | Op::Ge, a, Some(b)) => {
            let ord = match (a, b) {
                (Int(x), Int(y)) => x.partial_cmp(&y),
                (Float(x), Float(y)) => x.partial_cmp(&y),
                _ => return Err(type_err()),
            };
            match (op, ord) {
                (_, None) => false,
                (Op::Lt, Some(o)) => o.is_lt(),
                (Op::Gt, Some(o)) => o.is_gt(),
                (Op::Le, Some(o)) => o.is_le(),
                (_, Some(o)) => o.is_ge(),
            }
        }
        _ => return Err(type_err()),
    };
    Ok(Bool(out))
}

fn run_postfix<F>(tokens: &[Token], mut operand: F) -> Result<bool, PredicateError>
where
    F: FnMut(usize) -> Result<Operand, PredicateError>,
{
    let mut stack: Vec<Operand> = Vec::with_capacity(8);
    for tok in tokens {
        match *tok {
            Token::Operand(i) => stack.push(operand(i)?),
            Token::Literal(v) => stack.push(Operand::Int(v as i128)),
            Token::Op(Op::Not) => {
                let a = stack.pop().ok_or(PredicateError::Shape)?;
                stack.push(apply(Op::Not, a, None)?);
            }
            Token::Op(op) => {
                let b = stack.pop().ok_or(PredicateError::Shape)?;
                let a = stack.pop().ok_or(PredicateError::Shape)?;
                stack.push(apply(op, a, Some(b))?);
            }
        }
    }
    match stack.as_slice() {
        [Operand::Bool(b)] => Ok(*b),
        _ => Err(PredicateError::Shape),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Lexeme {
    Placeholder(TypeTag),
    Literal(u64),
    Op(Op),
    Open,
    Close,
}

fn lex(fmt: &str) -> Result<Vec<(usize, Lexeme)>, PredicateError> {
    let bytes = fmt.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let next = bytes.get(i + 1).map(|&b| b as char);
        let (lex, width) = match (c, next) {
            (w, _) if w.is_ascii_whitespace() => {
                i += 1;
                continue;
            }
            ('&', Some('&')) => (Lexeme::Op(Op::And), 2),
            ('|', Some('|')) => (Lexeme::Op(Op::Or), 2),
            ('<', Some('=')) => (Lexeme::Op(Op::Le), 2),
            ('>', Some('=')) => (Lexeme::Op(Op::Ge), 2),
            ('=', Some('=')) => (Lexeme::Op(Op::Eq), 2),
            ('!', Some('=')) => (Lexeme::Op(Op::Ne), 2),
            ('<', _) => (Lexeme::Op(Op::Lt), 1),
            ('>', _) => (Lexeme::Op(Op::Gt), 1),
            ('!', _) => (Lexeme::Op(Op::Not), 1),
            ('(', _) => (Lexeme::Open, 1),
            (')', _) => (Lexeme::Close, 1),
            (d, _) if d.is_ascii_digit() => {
                let end = bytes[i..].iter().position(|b| !b.is_ascii_digit()).map_or(bytes.len(), |p| i + p);
                let v = fmt[i..end]
                    .parse::<u64>()
                    .map_err(|_| PredicateError::Syntax { pos: i, msg: "integer literal out of range" })?;
                out.push((i, Lexeme::Literal(v)));
                i = end;
                continue;
            }
            (t, _) => match TypeTag::from_char(t) {
                Some(tag) => (Lexeme::Placeholder(tag), 1),
                None => return Err(PredicateError::Syntax { pos: i, msg: "unexpected character" }),
            },
        };
        out.push((i, lex));
        i += width;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    Op(Op),
    Open(usize),
}

/// Shunting-yard translation of the infix format into postfix tokens.
/// Returns the tokens and the tag of each placeholder, in order.
fn compile(fmt: &str) -> Result<(Vec<Token>, Vec<TypeTag>), PredicateError> {
    let mut output = Vec::new();
    let mut ops: Vec<Pending> = Vec::new();
    let mut tags = Vec::new();
    let mut expect_operand = true;

    for (pos, lex) in lex(fmt)? {
        match lex {
            Lexeme::Placeholder(_) | Lexeme::Literal(_) if !expect_operand => {
                return Err(PredicateError::Syntax { pos, msg: "missing operator" });
            }
            Lexeme::Placeholder(tag) => {
                output.push(Token::Operand(tags.len()));
                tags.push(tag);
                expect_operand = false;
            }
            Lexeme::Literal(v) => {
                output.push(Token::Literal(v));
                expect_operand = false;
            }
            Lexeme::Op(Op::Not) => {
                if !expect_operand {
                    return Err(PredicateError::Syntax { pos, msg: "'!' after operand" });
                }
                ops.push(Pending::Op(Op::Not));
            }
            Lexeme::Op(op) => {
                if expect_operand {
                    return Err(PredicateError::Syntax { pos, msg: "missing left operand" });
                }
                while let Some(&Pending::Op(top)) = ops.last() {
                    if top.precedence() >= op.precedence() {
                        output.push(Token::Op(top));
                        ops.pop();
                    } else {
                        break;
                    }
                }
                ops.push(Pending::Op(op));
                expect_operand = true;
            }
            Lexeme::Open => {
                if !expect_operand {
                    return Err(PredicateError::Syntax { pos, msg: "missing operator before '('" });
                }
                ops.push(Pending::Open(pos));
            }
            Lexeme::Close => {
                if expect_operand {
                    return Err(PredicateError::Syntax { pos, msg: "empty or incomplete group" });
                }
                loop {
                    match ops.pop() {
                        Some(Pending::Op(op)) => output.push(Token::Op(op)),
                        Some(Pending::Open(_)) => break,
                        None => return Err(PredicateError::Syntax { pos, msg: "unmatched ')'" }),
                    }
                }
            }
        }
    }
    if expect_operand {
        return Err(PredicateError::Syntax { pos: fmt.len(), msg: "expression ends early" });
    }
    while let Some(p) = ops.pop() {
        match p {
            Pending::Op(op) => output.push(Token::Op(op)),
            Pending::Open(pos) => return Err(PredicateError::Syntax { pos, msg: "unmatched '('" }),
        }
    }
    Ok((output, tags))
}

/// A compiled condition over tagged operands.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    fmt: String,
    operands: Vec<ParamDesc>,
    tokens: Vec<Token>,
    tags: Vec<TypeTag>,
}

impl Predicate {
    pub fn new(fmt: &str, operands: Vec<ParamDesc>) -> Result<Self, PredicateError> {
        let fmt: String = fmt.chars().filter(|c| !c.is_whitespace()).collect();
        let (tokens, tags) = compile(&fmt)?;
        if tags.len() != operands.len() {
            return Err(PredicateError::OperandCount { expected: tags.len(), found: operands.len() });
        }
        for (index, (want, p)) in tags.iter().zip(&operands).enumerate() {
            if *want != p.tag {
                return Err(PredicateError::TagMismatch { index, expected: *want, found: p.tag });
            }
        }
        // Type-check once with placeholder sample values.
        run_postfix(&tokens, |i| Ok(Operand::sample(tags[i])))?;
        Ok(Self { fmt, operands, tokens, tags })
    }

    /// The whitespace-free format string.
    pub fn fmt(&self) -> &str {
        &self.fmt
    }

    pub fn operands(&self) -> &[ParamDesc] {
        &self.operands
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Evaluates against bound operand values, given in operand order.
    pub fn eval(&self, values: &[Value]) -> Result<bool, PredicateError> {
        if values.len() != self.tags.len() {
            return Err(PredicateError::OperandCount { expected: self.tags.len(), found: values.len() });
        }
        self.eval_with(|i| Ok(values[i]))
    }

    /// Evaluates, fetching operand `i` through `fetch` on demand.
    pub fn eval_with<F, E>(&self, mut fetch: F) -> Result<bool, E>
    where
        F: FnMut(usize) -> Result<Value, E>,
        E: From<PredicateError>,
    {
        let mut fetch_err = None;
        let res = run_postfix(&self.tokens, |i| {
            let v = match fetch(i) {
                Ok(v) => v,
                Err(e) => {
                    fetch_err = Some(e);
                    return Err(PredicateError::Shape);
                }
            };
            if v.tag() != self.tags[i] {
                return Err(PredicateError::TagMismatch { index: i, expected: self.tags[i], found: v.tag() });
            }
            Ok(Operand::from_value(v))
        });
        match (res, fetch_err) {
            (_, Some(e)) => Err(e),
            (r, None) => r.map_err(E::from),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::SlotId;

    fn ints(n: usize) -> Vec<ParamDesc> {
        (0..n).map(|i| ParamDesc::var(SlotId(i as u32), TypeTag::Int)).collect()
    }

    #[test]
    fn greater_than_keeps_operand_order() {
        let p = Predicate::new("d>d", ints(2)).unwrap();
        assert!(p.eval(&[Value::Int(7), Value::Int(5)]).unwrap());
        assert!(!p.eval(&[Value::Int(5), Value::Int(5)]).unwrap());
        assert!(!p.eval(&[Value::Int(5), Value::Int(7)]).unwrap());
    }

    #[test]
    fn postfix_form() {
        let p = Predicate::new("d < d || !(d == d) && d >= 3", ints(5)).unwrap();
        let text: Vec<String> = p.tokens().iter().map(ToString::to_string).collect();
        assert_eq!(text.join(" "), "$0 $1 < $2 $3 == ! $4 3 >= && ||");
        assert_eq!(p.fmt(), "d<d||!(d==d)&&d>=3");
    }

    #[test]
    fn relational_binds_tighter_than_equality() {
        let ops = vec![
            ParamDesc::var(SlotId(0), TypeTag::Bool),
            ParamDesc::var(SlotId(1), TypeTag::Int),
            ParamDesc::var(SlotId(2), TypeTag::Int),
        ];
        let p = Predicate::new("b==d<d", ops).unwrap();
        assert!(p.eval(&[Value::Bool(true), Value::Int(1), Value::Int(2)]).unwrap());
    }

    #[test]
    fn integer_widening() {
        let ops = vec![ParamDesc::var(SlotId(0), TypeTag::Int), ParamDesc::var(SlotId(1), TypeTag::UInt)];
        let p = Predicate::new("d<u", ops).unwrap();
        assert!(p.eval(&[Value::Int(-1), Value::UInt(u64::MAX)]).unwrap());
    }

    #[test]
    fn type_errors_are_caught_at_construction() {
        let ops = vec![ParamDesc::var(SlotId(0), TypeTag::Float), ParamDesc::var(SlotId(1), TypeTag::Int)];
        assert!(matches!(Predicate::new("f<d", ops), Err(PredicateError::Type { .. })));
        assert!(matches!(Predicate::new("d&&d", ints(2)), Err(PredicateError::Type { .. })));
        assert!(matches!(Predicate::new("d", ints(1)), Err(PredicateError::Shape)));
    }

    #[test]
    fn malformed_formats() {
        for bad in ["", "d>", ">d", "dd", "(d>d", "d>d)", "d>>d", "d!d", "()", "x>d"] {
            assert!(
                matches!(Predicate::new(bad, ints(bad.matches('d').count())), Err(PredicateError::Syntax { .. })),
                "{bad:?} should not compile"
            );
        }
    }

    #[test]
    fn operand_count_and_tags_checked() {
        assert!(matches!(Predicate::new("d>d", ints(1)), Err(PredicateError::OperandCount { .. })));
        let ops = vec![ParamDesc::var(SlotId(0), TypeTag::UInt), ParamDesc::var(SlotId(1), TypeTag::Int)];
        assert!(matches!(Predicate::new("d>d", ops), Err(PredicateError::TagMismatch { index: 0, .. })));
    }

    #[test]
    fn bound_value_tag_mismatch() {
        let p = Predicate::new("d>d", ints(2)).unwrap();
        assert!(matches!(
            p.eval(&[Value::Int(1), Value::Float(0.5)]),
            Err(PredicateError::TagMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn floats_and_nan() {
        let ops = vec![ParamDesc::var(SlotId(0), TypeTag::Float), ParamDesc::var(SlotId(1), TypeTag::Float)];
        let p = Predicate::new("f<=f", ops).unwrap();
        assert!(p.eval(&[Value::Float(1.0), Value::Float(1.0)]).unwrap());
        assert!(!p.eval(&[Value::Float(f64::NAN), Value::Float(1.0)]).unwrap());
    }
}
