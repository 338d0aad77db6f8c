// SPDX-License-Identifier: Apache-2.0

//! Random structured programs and predicate expressions, with their
//! lowering to execution graphs.

use bundler_core::registry::Signatures;
use bundler_core::{FunctionId, GraphBuilder, Memory, ParamDesc, Predicate, SlotId, TypeTag, Value};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::demo::{ADD, INC, MIX};

/// Comparison and logic operators of predicate expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    pub const CMP: [BinOp; 6] = [BinOp::Lt, BinOp::Gt, BinOp::Le, BinOp::Ge, BinOp::Eq, BinOp::Ne];

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Lt => "<",
            BinOp::Gt => ">",
            BinOp::Le => "<=",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    fn prec(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne => 3,
            _ => 4,
        }
    }
}

/// Expression tree. `Var(i)` is a placeholder bound to variable `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Var(usize),
    Lit(u64),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Bin(op, Box::new(l), Box::new(r))
    }

    pub fn negate(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Var(_) | Expr::Lit(_) => 6,
            Expr::Not(_) => 5,
            Expr::Bin(op, ..) => op.prec(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Lit(_) => 1,
            Expr::Not(e) => 1 + e.depth(),
            Expr::Bin(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Infix text with as few parentheses as precedence allows, and the
    /// variables in placeholder order.
    pub fn render(&self, tags: &[TypeTag]) -> (String, Vec<usize>) {
        let mut text = String::new();
        let mut vars = Vec::new();
        self.write(tags, &mut text, &mut vars);
        (text, vars)
    }

    fn write(&self, tags: &[TypeTag], out: &mut String, vars: &mut Vec<usize>) {
        let wrapped = |e: &Expr, paren: bool, out: &mut String, vars: &mut Vec<usize>| {
            if paren {
                out.push('(');
            }
            e.write(tags, out, vars);
            if paren {
                out.push(')');
            }
        };
        match self {
            Expr::Var(i) => {
                out.push(tags[*i].as_char());
                vars.push(*i);
            }
            Expr::Lit(v) => out.push_str(&v.to_string()),
            Expr::Not(e) => {
                out.push('!');
                wrapped(e, e.prec() < 5, out, vars);
            }
            Expr::Bin(op, l, r) => {
                wrapped(l, l.prec() < op.prec(), out, vars);
                out.push_str(op.symbol());
                wrapped(r, r.prec() <= op.prec(), out, vars);
            }
        }
    }
}

/// Random integer-valued leaf.
fn int_leaf(rng: &mut impl Rng, vars: usize) -> Expr {
    if rng.gen_ratio(1, 5) {
        Expr::Lit(rng.gen_range(0..4))
    } else {
        Expr::Var(rng.gen_range(0..vars))
    }
}

/// Random well-typed boolean expression of at most `depth` levels.
pub fn random_bool_expr(rng: &mut impl Rng, depth: usize, vars: usize) -> Expr {
    let cmp = |rng: &mut _| {
        let op = *BinOp::CMP.choose(rng).expect("non-empty");
        Expr::bin(op, int_leaf(rng, vars), int_leaf(rng, vars))
    };
    if depth <= 2 || rng.gen_ratio(1, 4) {
        return cmp(rng);
    }
    match rng.gen_range(0..4) {
        0 => Expr::negate(random_bool_expr(rng, depth - 1, vars)),
        1 => Expr::bin(BinOp::And, random_bool_expr(rng, depth - 1, vars), random_bool_expr(rng, depth - 1, vars)),
        2 => Expr::bin(BinOp::Or, random_bool_expr(rng, depth - 1, vars), random_bool_expr(rng, depth - 1, vars)),
        _ => {
            let op = if rng.gen() { BinOp::Eq } else { BinOp::Ne };
            Expr::bin(op, random_bool_expr(rng, depth - 1, vars), random_bool_expr(rng, depth - 1, vars))
        }
    }
}

/// Every boolean expression shape of depth at most 3 whose leaves are
/// distinct variables: one comparison, a negated comparison, or two
/// comparisons joined by `&&`, `||`, `==` or `!=`.
pub fn all_shallow_exprs() -> Vec<Expr> {
    let cmp = |op, a, b| Expr::bin(op, Expr::Var(a), Expr::Var(b));
    let mut out = Vec::new();
    for op in BinOp::CMP {
        out.push(cmp(op, 0, 1));
        out.push(Expr::negate(cmp(op, 0, 1)));
    }
    for join in [BinOp::And, BinOp::Or, BinOp::Eq, BinOp::Ne] {
        for l in BinOp::CMP {
            for r in BinOp::CMP {
                out.push(Expr::bin(join, cmp(l, 0, 1), cmp(r, 2, 3)));
            }
        }
    }
    out
}

/// Data-processing function of a random program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Inc,
    Add,
    Mix,
}

impl Func {
    pub fn id(self) -> FunctionId {
        match self {
            Func::Inc => INC,
            Func::Add => ADD,
            Func::Mix => MIX,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Inc => 1,
            Func::Add => 3,
            Func::Mix => 2,
        }
    }
}

/// Argument of a call: a data scalar or a data vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arg {
    Scalar(usize),
    Vector(usize),
}

/// A predicate over data scalars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cond {
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Call {
        f: Func,
        args: Vec<Arg>,
    },
    /// Iterator node; at least one argument is a vector.
    Iter {
        f: Func,
        count: usize,
        args: Vec<Arg>,
    },
    /// Map node; the output is always a vector.
    Map {
        f: Func,
        count: usize,
        inputs: Vec<Arg>,
        output: usize,
    },
    If {
        cond: Cond,
        then: Vec<Stmt>,
        otherwise: Option<Vec<Stmt>>,
    },
    For {
        count: usize,
        body: Vec<Stmt>,
    },
    /// `while counter < limit { body; counter += 1 }`
    While {
        counter: usize,
        limit: u64,
        body: Vec<Stmt>,
    },
}

/// Initial memory of a random program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub scalars: Vec<i64>,
    pub vectors: Vec<Vec<i64>>,
    pub counts: Vec<u64>,
    /// Number of while-loop counters, all starting at zero.
    pub counters: usize,
}

pub const VECTOR_LEN: usize = 64;
const MAX_COUNT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub layout: Layout,
    pub body: Vec<Stmt>,
}

/// Slots of a program's layout inside a [`Memory`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub scalars: Vec<SlotId>,
    pub vectors: Vec<SlotId>,
    pub counts: Vec<SlotId>,
    pub counters: Vec<SlotId>,
}

impl Bound {
    pub fn param(&self, a: Arg) -> ParamDesc {
        match a {
            Arg::Scalar(i) => ParamDesc::var(self.scalars[i], TypeTag::Int),
            Arg::Vector(i) => ParamDesc::vector(self.vectors[i], TypeTag::Int),
        }
    }

    /// Scalars and vectors as plain integers.
    pub fn snapshot(&self, mem: &Memory) -> (Vec<i64>, Vec<Vec<i64>>) {
        let scalars = self.scalars.iter().map(|s| mem.i64_at(*s, 0).expect("scalar slot")).collect();
        let vectors = self.vectors.iter().map(|s| mem.i64s(*s).expect("vector slot")).collect();
        (scalars, vectors)
    }
}

struct Gen<'r, R> {
    rng: &'r mut R,
    layout: Layout,
    nodes: usize,
    max_nodes: usize,
}

impl<R: Rng> Gen<'_, R> {
    fn arg(&mut self) -> Arg {
        if self.rng.gen() {
            Arg::Scalar(self.rng.gen_range(0..self.layout.scalars.len()))
        } else {
            Arg::Vector(self.rng.gen_range(0..self.layout.vectors.len()))
        }
    }

    fn func(&mut self) -> Func {
        *[Func::Inc, Func::Add, Func::Mix].choose(self.rng).expect("non-empty")
    }

    fn stmt(&mut self, depth: usize) -> Stmt {
        let control = depth < 3 && self.nodes + 3 <= self.max_nodes;
        let pick = self.rng.gen_range(0..if control { 7 } else { 3 });
        match pick {
            0 => {
                self.nodes += 1;
                let f = self.func();
                let args = (0..f.arity()).map(|_| self.arg()).collect();
                Stmt::Call { f, args }
            }
            1 => {
                self.nodes += 1;
                let f = self.func();
                let mut args: Vec<Arg> = (0..f.arity()).map(|_| self.arg()).collect();
                if !args.iter().any(|a| matches!(a, Arg::Vector(_))) {
                    let i = self.rng.gen_range(0..args.len());
                    args[i] = Arg::Vector(self.rng.gen_range(0..self.layout.vectors.len()));
                }
                Stmt::Iter { f, count: self.rng.gen_range(0..self.layout.counts.len()), args }
            }
            2 => {
                self.nodes += 1;
                let f = self.func();
                let inputs = (0..f.arity() - 1).map(|_| self.arg()).collect();
                Stmt::Map {
                    f,
                    count: self.rng.gen_range(0..self.layout.counts.len()),
                    inputs,
                    output: self.rng.gen_range(0..self.layout.vectors.len()),
                }
            }
            3 | 4 => {
                let has_else: bool = self.rng.gen();
                self.nodes += 2 + has_else as usize;
                let vars = self.layout.scalars.len();
                let cond = Cond { expr: random_bool_expr(self.rng, 3, vars) };
                let then = self.block(depth + 1);
                let otherwise = has_else.then(|| self.block(depth + 1));
                Stmt::If { cond, then, otherwise }
            }
            5 => {
                self.nodes += 2;
                let count = self.rng.gen_range(0..self.layout.counts.len());
                Stmt::For { count, body: self.block(depth + 1) }
            }
            _ => {
                self.nodes += 3;
                let counter = self.layout.counters;
                self.layout.counters += 1;
                let limit = self.rng.gen_range(0..=MAX_COUNT);
                Stmt::While { counter, limit, body: self.block(depth + 1) }
            }
        }
    }

    fn block(&mut self, depth: usize) -> Vec<Stmt> {
        let n = self.rng.gen_range(0..=3);
        let mut out = Vec::new();
        for _ in 0..n {
            if self.nodes >= self.max_nodes {
                break;
            }
            out.push(self.stmt(depth));
        }
        out
    }
}

/// Random program with control depth at most 3 and at most `max_nodes`
/// graph nodes. Loop counts are at most 3, so every vector index stays
/// within [`VECTOR_LEN`].
pub fn random_program(rng: &mut impl Rng, max_nodes: usize) -> Program {
    let layout = Layout {
        scalars: (0..4).map(|_| rng.gen_range(-3..=3)).collect(),
        vectors: (0..3).map(|_| (0..VECTOR_LEN).map(|_| rng.gen_range(-3..=3)).collect()).collect(),
        counts: (0..3).map(|_| rng.gen_range(0..=MAX_COUNT)).collect(),
        counters: 0,
    };
    let mut g = Gen { rng, layout, nodes: 0, max_nodes };
    let mut body = Vec::new();
    while g.nodes < max_nodes && body.len() < 12 {
        body.push(g.stmt(0));
        if g.rng.gen_ratio(1, 6) {
            break;
        }
    }
    Program { layout: g.layout, body }
}

impl Program {
    /// Allocates the layout in `mem`.
    pub fn bind(&self, mem: &mut Memory) -> Bound {
        Bound {
            scalars: self.layout.scalars.iter().map(|v| mem.var_i64(*v)).collect(),
            vectors: self.layout.vectors.iter().map(|v| mem.vector_i64(v)).collect(),
            counts: self.layout.counts.iter().map(|v| mem.var_u64(*v)).collect(),
            counters: (0..self.layout.counters).map(|_| mem.var_i64(0)).collect(),
        }
    }

    /// Appends the program to a builder.
    pub fn lower(&self, b: &mut GraphBuilder, slots: &Bound) -> Result<(), String> {
        lower_block(&self.body, b, slots)
    }

    /// Builds and validates the execution graph of the program.
    pub fn graph(&self, sigs: Signatures, slots: &Bound) -> Result<bundler_core::ExecutionGraph, String> {
        let mut b = GraphBuilder::new(sigs);
        self.lower(&mut b, slots)?;
        b.build().map_err(|r| r.to_string())
    }

    /// Graph nodes the program lowers to.
    pub fn node_count(&self) -> usize {
        fn count(body: &[Stmt]) -> usize {
            body.iter()
                .map(|s| match s {
                    Stmt::Call { .. } | Stmt::Iter { .. } | Stmt::Map { .. } => 1,
                    Stmt::If { then, otherwise, .. } => {
                        2 + count(then) + otherwise.as_ref().map_or(0, |o| 1 + count(o))
                    }
                    Stmt::For { body, .. } => 2 + count(body),
                    Stmt::While { body, .. } => 3 + count(body),
                })
                .sum()
        }
        count(&self.body)
    }
}

fn lower_block(body: &[Stmt], b: &mut GraphBuilder, s: &Bound) -> Result<(), String> {
    let err = |e: bundler_core::graph::BuildError| e.to_string();
    for stmt in body {
        match stmt {
            Stmt::Call { f, args } => {
                b.call(f.id(), args.iter().map(|a| s.param(*a)).collect()).map_err(err)?;
            }
            Stmt::Iter { f, count, args } => {
                b.for_each(f.id(), s.counts[*count], args.iter().map(|a| s.param(*a)).collect()).map_err(err)?;
            }
            Stmt::Map { f, count, inputs, output } => {
                let inputs = inputs.iter().map(|a| s.param(*a)).collect();
                b.map(f.id(), s.counts[*count], inputs, s.param(Arg::Vector(*output))).map_err(err)?;
            }
            Stmt::If { cond, then, otherwise } => {
                let tags = vec![TypeTag::Int; s.scalars.len()];
                let (text, vars) = cond.expr.render(&tags);
                let ops = vars.iter().map(|v| s.param(Arg::Scalar(*v))).collect();
                b.if_begin(Predicate::new(&text, ops).map_err(|e| e.to_string())?);
                lower_block(then, b, s)?;
                if let Some(o) = otherwise {
                    b.else_begin();
                    lower_block(o, b, s)?;
                }
                b.if_end();
            }
            Stmt::For { count, body } => {
                b.begin_for(s.counts[*count]);
                lower_block(body, b, s)?;
                b.end_for();
            }
            Stmt::While { counter, limit, body } => {
                let c = ParamDesc::var(s.counters[*counter], TypeTag::Int);
                b.while_begin(Predicate::new(&format!("d<{limit}"), vec![c]).map_err(|e| e.to_string())?);
                lower_block(body, b, s)?;
                b.call(INC, vec![c]).map_err(err)?;
                b.while_end();
            }
        }
    }
    Ok(())
}

/// Values bound to an expression's placeholders.
pub fn operand_values(vars: &[usize], values: &[Value]) -> Vec<Value> {
    vars.iter().map(|v| values[*v]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn render_uses_precedence() {
        let t = [TypeTag::Int; 4];
        let lt = Expr::bin(BinOp::Lt, Expr::Var(0), Expr::Var(1));
        let eq = Expr::bin(BinOp::Eq, Expr::Var(2), Expr::Lit(3));
        assert_eq!(Expr::bin(BinOp::And, lt.clone(), eq.clone()).render(&t).0, "d<d&&d==3");
        assert_eq!(Expr::bin(BinOp::Eq, lt.clone(), eq.clone()).render(&t).0, "d<d==(d==3)");
        assert_eq!(Expr::negate(lt.clone()).render(&t).0, "!(d<d)");
        let or = Expr::bin(BinOp::Or, lt.clone(), lt.clone());
        let (text, vars) = Expr::bin(BinOp::And, or, eq).render(&t);
        assert_eq!(text, "(d<d||d<d)&&d==3");
        assert_eq!(vars, vec![0, 1, 0, 1, 2]);
    }

    #[test]
    fn shallow_set_size() {
        let all = all_shallow_exprs();
        assert_eq!(all.len(), 12 + 4 * 36);
        assert!(all.iter().all(|e| e.depth() <= 3));
    }

    #[test]
    fn programs_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = random_program(&mut rng, 64);
            assert!(p.node_count() <= 64);
            let mut mem = Memory::new();
            let slots = p.bind(&mut mem);
            let g = p.graph(crate::demo::registry().signatures(), &slots).unwrap();
            assert_eq!(g.len(), p.node_count());
        }
    }
}
