// SPDX-License-Identifier: Apache-2.0

//! Execution graphs: a flat array of call and control-flow nodes that the
//! worker runs inside one boundary transition.
//!
//! Graphs are assembled in untrusted code with [`GraphBuilder`], then
//! [`ExecutionGraph::validate`] matches the begin/end markers and resolves
//! every jump offset to an absolute node index.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::predicate::{Predicate, PredicateError};
use crate::registry::{FunctionId, Signatures};
use crate::value::{ParamDesc, SlotId};

/// Deepest permitted nesting of if/for/while blocks.
pub const MAX_NESTING: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum GraphNode {
    Call {
        function: FunctionId,
        params: Vec<ParamDesc>,
    },
    /// One translation-function invocation covering `n_iters` iterations.
    Iterator {
        function: FunctionId,
        n_iters: SlotId,
        params: Vec<ParamDesc>,
    },
    /// Like `Iterator`, but results go to a separate output list.
    Map {
        function: FunctionId,
        n_iters: SlotId,
        inputs: Vec<ParamDesc>,
        output: ParamDesc,
    },
    IfBegin {
        predicate: Predicate,
        else_offset: Option<usize>,
        end_offset: usize,
    },
    Else {
        end_offset: usize,
    },
    IfEnd,
    ForBegin {
        n_iters: SlotId,
        end_offset: usize,
    },
    ForEnd {
        begin_offset: usize,
    },
    WhileBegin {
        predicate: Predicate,
        end_offset: usize,
    },
    WhileEnd {
        begin_offset: usize,
    },
}

impl GraphNode {
    pub fn kind(&self) -> &'static str {
        match self {
            GraphNode::Call { .. } => "call",
            GraphNode::Iterator { .. } => "iter",
            GraphNode::Map { .. } => "map",
            GraphNode::IfBegin { .. } => "if",
            GraphNode::Else { .. } => "else",
            GraphNode::IfEnd => "endif",
            GraphNode::ForBegin { .. } => "for",
            GraphNode::ForEnd { .. } => "endfor",
            GraphNode::WhileBegin { .. } => "while",
            GraphNode::WhileEnd { .. } => "endwhile",
        }
    }

    pub fn function(&self) -> Option<FunctionId> {
        match self {
            GraphNode::Call { function, .. }
            | GraphNode::Iterator { function, .. }
            | GraphNode::Map { function, .. } => Some(*function),
            _ => None,
        }
    }

    pub fn is_control(&self) -> bool {
        self.function().is_none()
    }
}

/// A defect found by validation or at append time.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Defect {
    #[error("{0} without a matching begin")]
    UnmatchedEnd(&'static str),
    #[error("{0} is never closed")]
    Unclosed(&'static str),
    #[error("else outside of an if block")]
    ElseWithoutIf,
    #[error("second else in one if block")]
    DuplicateElse,
    #[error("function {0} is not registered")]
    UnknownFunction(FunctionId),
    #[error("function {function} takes {expected} parameter(s), got {found}")]
    Arity { function: FunctionId, expected: usize, found: usize },
    #[error("nesting depth exceeds {MAX_NESTING}")]
    TooDeep,
    #[error("iterator needs at least one list parameter")]
    IteratorWithoutList,
    #[error("map output must be a list")]
    ScalarMapOutput,
    #[error("predicate: {0}")]
    Predicate(PredicateError),
}

/// Every defect found in a graph, with the node index it was found at.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub defects: Vec<(usize, Defect)>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (node, defect)) in self.defects.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "node {node}: {defect}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecutionGraph {
    nodes: Vec<GraphNode>,
    validated: bool,
}

impl ExecutionGraph {
    pub fn from_nodes(nodes: Vec<GraphNode>) -> Self {
        Self { nodes, validated: false }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }

    /// Checks markers, function ids and arities, resolving offsets.
    pub fn validate(mut self, sigs: &Signatures) -> Result<ExecutionGraph, ValidationReport> {
        let mut report = ValidationReport::default();
        // (begin index, else index) for every open block
        let mut open: Vec<(usize, Option<usize>)> = Vec::new();
        let mut deepest_reported = false;

        for idx in 0..self.nodes.len() {
            if let Some(defect) = check_node(&self.nodes[idx], sigs) {
                report.defects.push((idx, defect));
            }
            match &self.nodes[idx] {
                GraphNode::IfBegin { .. } | GraphNode::ForBegin { .. } | GraphNode::WhileBegin { .. } => {
                    open.push((idx, None));
                    if open.len() > MAX_NESTING && !deepest_reported {
                        report.defects.push((idx, Defect::TooDeep));
                        deepest_reported = true;
                    }
                }
                GraphNode::Else { .. } => match open.last_mut() {
                    Some((b, else_at)) if matches!(self.nodes[*b], GraphNode::IfBegin { .. }) => {
                        if else_at.is_some() {
                            report.defects.push((idx, Defect::DuplicateElse));
                        } else {
                            *else_at = Some(idx);
                        }
                    }
                    _ => report.defects.push((idx, Defect::ElseWithoutIf)),
                },
                GraphNode::IfEnd | GraphNode::ForEnd { .. } | GraphNode::WhileEnd { .. } => {
                    let kind = self.nodes[idx].kind();
                    let matches = |n: &GraphNode| {
                        matches!(
                            (kind, n),
                            ("endif", GraphNode::IfBegin { .. })
                                | ("endfor", GraphNode::ForBegin { .. })
                                | ("endwhile", GraphNode::WhileBegin { .. })
                        )
                    };
                    match open.last() {
                        Some(&(b, else_at)) if matches(&self.nodes[b]) => {
                            open.pop();
                            self.link(b, else_at, idx);
                        }
                        _ => report.defects.push((idx, Defect::UnmatchedEnd(kind))),
                    }
                }
                _ => {}
            }
        }
        for (b, _) in open {
            report.defects.push((b, Defect::Unclosed(self.nodes[b].kind())));
        }

        if report.defects.is_empty() {
            self.validated = true;
            Ok(self)
        } else {
            report.defects.sort_by_key(|(i, _)| *i);
            Err(report)
        }
    }

    fn link(&mut self, begin: usize, else_at: Option<usize>, end: usize) {
        match &mut self.nodes[begin] {
            GraphNode::IfBegin { else_offset, end_offset, .. } => {
                *else_offset = else_at;
                *end_offset = end;
            }
            GraphNode::ForBegin { end_offset, .. } | GraphNode::WhileBegin { end_offset, .. } => *end_offset = end,
            _ => unreachable!("link called on a non-begin node"),
        }
        if let Some(e) = else_at {
            if let GraphNode::Else { end_offset } = &mut self.nodes[e] {
                *end_offset = end;
            }
        }
        match &mut self.nodes[end] {
            GraphNode::ForEnd { begin_offset } | GraphNode::WhileEnd { begin_offset } => *begin_offset = begin,
            _ => {}
        }
    }

    /// Parses the text produced by `Display`. The result is not validated.
    pub fn parse_dump(text: &str) -> Result<ExecutionGraph, DumpError> {
        let mut nodes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| DumpError { line: lineno + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [idx, kind, fid, offsets, params] = fields[..] else {
                return Err(err("expected 5 fields"));
            };
            if idx.parse::<usize>().ok() != Some(nodes.len()) {
                return Err(err("node index out of sequence"));
            }
            nodes.push(parse_node(kind, fid, offsets, params).map_err(|m| err(&m))?);
        }
        Ok(ExecutionGraph::from_nodes(nodes))
    }
}

fn check_node(node: &GraphNode, sigs: &Signatures) -> Option<Defect> {
    let arity = |function: FunctionId, found: usize| match sigs.arity(function) {
        None => Some(Defect::UnknownFunction(function)),
        Some(expected) if expected != found => Some(Defect::Arity { function, expected, found }),
        Some(_) => None,
    };
    match node {
        GraphNode::Call { function, params } => arity(*function, params.len()),
        GraphNode::Iterator { function, params, .. } => arity(*function, params.len())
            .or_else(|| (!params.iter().any(ParamDesc::is_vector)).then_some(Defect::IteratorWithoutList)),
        GraphNode::Map { function, inputs, output, .. } => {
            arity(*function, inputs.len() + 1).or_else(|| (!output.is_vector()).then_some(Defect::ScalarMapOutput))
        }
        GraphNode::IfBegin { predicate, .. } | GraphNode::WhileBegin { predicate, .. } => {
            Predicate::new(predicate.fmt(), predicate.operands().to_vec()).err().map(Defect::Predicate)
        }
        _ => None,
    }
}

/// Builder for execution graphs, the untrusted-side construction API.
///
/// Calls are checked against the registry's arity table as they are
/// appended. Marker matching is left to [`ExecutionGraph::validate`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    sigs: Signatures,
    nodes: Vec<GraphNode>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot append node {index}: {defect}")]
pub struct BuildError {
    pub index: usize,
    pub defect: Defect,
}

impl GraphBuilder {
    pub fn new(sigs: Signatures) -> Self {
        Self { sigs, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_checked(&mut self, node: GraphNode) -> Result<&mut Self, BuildError> {
        if let Some(defect) = check_node(&node, &self.sigs) {
            return Err(BuildError { index: self.nodes.len(), defect });
        }
        self.nodes.push(node);
        Ok(self)
    }

    fn push(&mut self, node: GraphNode) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn call(&mut self, function: FunctionId, params: Vec<ParamDesc>) -> Result<&mut Self, BuildError> {
        self.push_checked(GraphNode::Call { function, params })
    }

    pub fn for_each(
        &mut self,
        function: FunctionId,
        n_iters: SlotId,
        params: Vec<ParamDesc>,
    ) -> Result<&mut Self, BuildError> {
        self.push_checked(GraphNode::Iterator { function, n_iters, params })
    }

    pub fn map(
        &mut self,
        function: FunctionId,
        n_iters: SlotId,
        inputs: Vec<ParamDesc>,
        output: ParamDesc,
    ) -> Result<&mut Self, BuildError> {
        self.push_checked(GraphNode::Map { function, n_iters, inputs, output })
    }

    pub fn if_begin(&mut self, predicate: Predicate) -> &mut Self {
        self.push(GraphNode::IfBegin { predicate, else_offset: None, end_offset: 0 })
    }

    pub fn else_begin(&mut self) -> &mut Self {
        self.push(GraphNode::Else { end_offset: 0 })
    }

    pub fn if_end(&mut self) -> &mut Self {
        self.push(GraphNode::IfEnd)
    }

    pub fn begin_for(&mut self, n_iters: SlotId) -> &mut Self {
        self.push(GraphNode::ForBegin { n_iters, end_offset: 0 })
    }

    pub fn end_for(&mut self) -> &mut Self {
        self.push(GraphNode::ForEnd { begin_offset: 0 })
    }

    pub fn while_begin(&mut self, predicate: Predicate) -> &mut Self {
        self.push(GraphNode::WhileBegin { predicate, end_offset: 0 })
    }

    pub fn while_end(&mut self) -> &mut Self {
        self.push(GraphNode::WhileEnd { begin_offset: 0 })
    }

    pub fn finish(self) -> ExecutionGraph {
        ExecutionGraph::from_nodes(self.nodes)
    }

    pub fn build(self) -> Result<ExecutionGraph, ValidationReport> {
        let sigs = self.sigs.clone();
        self.finish().validate(&sigs)
    }
}

fn join_params(params: &[ParamDesc]) -> String {
    params.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl fmt::Display for GraphNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fid = self.function().map_or("-".to_string(), |id| id.to_string());
        let (offsets, params) = match self {
            GraphNode::Call { params, .. } => {
                ("-".to_string(), if params.is_empty() { "-".to_string() } else { join_params(params) })
            }
            GraphNode::Iterator { n_iters, params, .. } => {
                ("-".to_string(), format!("n=s{n_iters};{}", join_params(params)))
            }
            GraphNode::Map { n_iters, inputs, output, .. } => {
                ("-".to_string(), format!("n=s{n_iters};{}->{output}", join_params(inputs)))
            }
            GraphNode::IfBegin { predicate, else_offset, end_offset } => (
                match else_offset {
                    Some(e) => format!("else={e},end={end_offset}"),
                    None => format!("end={end_offset}"),
                },
                format!("pred={};{}", predicate.fmt(), join_params(predicate.operands())),
            ),
            GraphNode::Else { end_offset } => (format!("end={end_offset}"), "-".to_string()),
            GraphNode::IfEnd => ("-".to_string(), "-".to_string()),
            GraphNode::ForBegin { n_iters, end_offset } => (format!("end={end_offset}"), format!("n=s{n_iters}")),
            GraphNode::ForEnd { begin_offset } | GraphNode::WhileEnd { begin_offset } => {
                (format!("begin={begin_offset}"), "-".to_string())
            }
            GraphNode::WhileBegin { predicate, end_offset } => {
                (format!("end={end_offset}"), format!("pred={};{}", predicate.fmt(), join_params(predicate.operands())))
            }
        };
        write!(f, "{} {fid} {offsets} {params}", self.kind())
    }
}

/// One node per line: `idx kind fid offsets params`.
impl fmt::Display for ExecutionGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, node) in self.nodes.iter().enumerate() {
            writeln!(f, "{i} {node}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dump line {line}: {msg}")]
pub struct DumpError {
    pub line: usize,
    pub msg: String,
}

fn parse_params(s: &str) -> Result<Vec<ParamDesc>, String> {
    if s.is_empty() || s == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(ParamDesc::from_str).collect()
}

fn parse_count_ref(s: &str) -> Result<SlotId, String> {
    s.strip_prefix("n=s").and_then(|v| v.parse().ok()).map(SlotId).ok_or_else(|| format!("bad count reference {s:?}"))
}

/// `begin`, `else` and `end` offsets of a dump line.
type Offsets = (Option<usize>, Option<usize>, Option<usize>);

fn parse_offsets(s: &str) -> Result<Offsets, String> {
    let (mut begin, mut els, mut end) = (None, None, None);
    if s == "-" {
        return Ok((begin, els, end));
    }
    for part in s.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("bad offset {part:?}"))?;
        let v: usize = v.parse().map_err(|_| format!("bad offset {part:?}"))?;
        match k {
            "begin" => begin = Some(v),
            "else" => els = Some(v),
            "end" => end = Some(v),
            _ => return Err(format!("unknown offset {k:?}")),
        }
    }
    Ok((begin, els, end))
}

fn parse_predicate(s: &str) -> Result<Predicate, String> {
    let body = s.strip_prefix("pred=").ok_or_else(|| format!("bad predicate {s:?}"))?;
    let (fmt, ops) = body.split_once(';').ok_or_else(|| format!("bad predicate {s:?}"))?;
    Predicate::new(fmt, parse_params(ops)?).map_err(|e| e.to_string())
}

fn parse_node(kind: &str, fid: &str, offsets: &str, params: &str) -> Result<GraphNode, String> {
    let function = || fid.parse::<u16>().map(FunctionId).map_err(|_| format!("bad function id {fid:?}"));
    let (begin, els, end) = parse_offsets(offsets)?;
    let need = |o: Option<usize>, what: &str| o.ok_or_else(|| format!("{kind} needs {what} offset"));
    let split_n = || params.split_once(';').ok_or_else(|| format!("bad parameters {params:?}"));
    Ok(match kind {
        "call" => GraphNode::Call { function: function()?, params: parse_params(params)? },
        "iter" => {
            let (n, rest) = split_n()?;
            GraphNode::Iterator { function: function()?, n_iters: parse_count_ref(n)?, params: parse_params(rest)? }
        }
        "map" => {
            let (n, rest) = split_n()?;
            let (inputs, output) = rest.split_once("->").ok_or_else(|| format!("bad map parameters {rest:?}"))?;
            GraphNode::Map {
                function: function()?,
                n_iters: parse_count_ref(n)?,
                inputs: parse_params(inputs)?,
                output: output.parse()?,
            }
        }
        "if" => {
            GraphNode::IfBegin { predicate: parse_predicate(params)?, else_offset: els, end_offset: need(end, "end")? }
        }
        "else" => GraphNode::Else { end_offset: need(end, "end")? },
        "endif" => GraphNode::IfEnd,
        "for" => GraphNode::ForBegin { n_iters: parse_count_ref(params)?, end_offset: need(end, "end")? },
        "endfor" => GraphNode::ForEnd { begin_offset: need(begin, "begin")? },
        "while" => GraphNode::WhileBegin { predicate: parse_predicate(params)?, end_offset: need(end, "end")? },
        "endwhile" => GraphNode::WhileEnd { begin_offset: need(begin, "begin")? },
        other => return Err(format!("unknown node kind {other:?}")),
    })
}
