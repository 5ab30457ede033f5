//! Modal formulas over announcement trees: propositional connectives,
//! `[]`/`<>` over the successor relation, `[p]`/`<p>` over the
//! announcement relation, height constants `D<n>`, and the parent
//! operator `Y`, with a parser, printer, and model checker.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::announce::EntitySpan;
use crate::btpk::{BtpkModel, BtpkState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: expected {}, found {found}", expected.join(" or "))]
pub struct SyntaxError {
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: String,
}

#[derive(Debug, Error)]
pub enum LogicError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("entity span {start}..={end} out of range for a tree over {n} tokens")]
    EntityOutOfRange { start: usize, end: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Atom(String),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    /// `[]` — true at every r1 successor.
    BoxR1(Box<Formula>),
    /// `<>` — true at some r1 successor.
    DiamondR1(Box<Formula>),
    /// `[p]` — true at every ρ successor.
    BoxRho(Box<Formula>),
    /// `<p>` — true at some ρ successor.
    DiamondRho(Box<Formula>),
    /// `D<n>` — the state sits at height n.
    Dist(usize),
    /// `Y` — the r1 parent exists and satisfies the operand.
    Yesterday(Box<Formula>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Atom(String),
    Dist(usize),
    Not,
    And,
    Or,
    Implies,
    BoxR1,
    DiamondR1,
    BoxRho,
    DiamondRho,
    Yesterday,
    LParen,
    RParen,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Atom(name) => format!("`{name}`"),
            Tok::Dist(n) => format!("`D{n}`"),
            Tok::Not => "`!`".into(),
            Tok::And => "`&`".into(),
            Tok::Or => "`|`".into(),
            Tok::Implies => "`->`".into(),
            Tok::BoxR1 => "`[]`".into(),
            Tok::DiamondR1 => "`<>`".into(),
            Tok::BoxRho => "`[p]`".into(),
            Tok::DiamondRho => "`<p>`".into(),
            Tok::Yesterday => "`Y`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
        }
    }
}

struct Lexed {
    tok: Tok,
    offset: usize,
}

fn err(offset: usize, expected: &[&str], found: String) -> SyntaxError {
    SyntaxError {
        offset,
        expected: expected.iter().map(|s| s.to_string()).collect(),
        found,
    }
}

fn found_at(input: &str, i: usize) -> String {
    match input[i..].chars().next() {
        Some(c) => format!("`{c}`"),
        None => "end of input".into(),
    }
}

fn is_ident_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn lex(input: &str) -> Result<Vec<Lexed>, SyntaxError> {
    let bytes = input.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = input[i..].chars().next().unwrap();
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let start = i;
        let tok = match c {
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '!' => {
                i += 1;
                Tok::Not
            }
            '&' => {
                i += 1;
                Tok::And
            }
            '|' => {
                i += 1;
                Tok::Or
            }
            '-' => {
                if bytes.get(i + 1) == Some(&b'>') {
                    i += 2;
                    Tok::Implies
                } else {
                    return Err(err(i, &["`->`"], found_at(input, i)));
                }
            }
            '[' => {
                if input[i..].starts_with("[p]") {
                    i += 3;
                    Tok::BoxRho
                } else if input[i..].starts_with("[]") {
                    i += 2;
                    Tok::BoxR1
                } else {
                    return Err(err(i, &["`[]`", "`[p]`"], found_at(input, i)));
                }
            }
            '<' => {
                if input[i..].starts_with("<p>") {
                    i += 3;
                    Tok::DiamondRho
                } else if input[i..].starts_with("<>") {
                    i += 2;
                    Tok::DiamondR1
                } else {
                    return Err(err(i, &["`<>`", "`<p>`"], found_at(input, i)));
                }
            }
            'Y' => {
                i += 1;
                Tok::Yesterday
            }
            'D' => {
                let mut j = i + 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j == i + 1 {
                    return Err(err(i + 1, &["digits after `D`"], found_at(input, i + 1)));
                }
                let n = input[i + 1..j].parse::<usize>().map_err(|_| {
                    err(i + 1, &["a representable height constant"], format!("`{}`", &input[i + 1..j]))
                })?;
                i = j;
                Tok::Dist(n)
            }
            'a'..='z' => {
                let mut j = i + 1;
                while j < bytes.len() && is_ident_char(bytes[j]) {
                    j += 1;
                }
                let mut name = input[i..j].to_string();
                // call form `name(arg)` — the paren must follow immediately
                if bytes.get(j) == Some(&b'(') {
                    let arg_start = j + 1;
                    if !bytes
                        .get(arg_start)
                        .is_some_and(|&b| b.is_ascii_alphabetic() || b == b'_')
                    {
                        return Err(err(
                            arg_start,
                            &["an argument name"],
                            found_at(input, arg_start),
                        ));
                    }
                    let mut k = arg_start + 1;
                    while k < bytes.len() && is_ident_char(bytes[k]) {
                        k += 1;
                    }
                    if bytes.get(k) != Some(&b')') {
                        return Err(err(k, &["`)`"], found_at(input, k)));
                    }
                    name = format!("{}({})", &input[i..j], &input[arg_start..k]);
                    j = k + 1;
                }
                i = j;
                Tok::Atom(name)
            }
            _ => return Err(err(i, &["a formula token"], found_at(input, i))),
        };
        toks.push(Lexed { tok, offset: start });
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [Lexed],
    pos: usize,
    input_len: usize,
}

const OPERAND_EXPECTED: &[&str] =
    &["an atom", "`D<digits>`", "`!`", "`[]`", "`<>`", "`[p]`", "`<p>`", "`Y`", "`(`"];

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Lexed> {
        self.toks.get(self.pos)
    }

    fn advance(&mut self) -> Option<&'a Lexed> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn error(&self, expected: &[&str]) -> SyntaxError {
        match self.peek() {
            Some(l) => err(l.offset, expected, l.tok.describe()),
            None => err(self.input_len, expected, "end of input".into()),
        }
    }

    fn parse_implies(&mut self) -> Result<Formula, SyntaxError> {
        let lhs = self.parse_or()?;
        if matches!(self.peek(), Some(Lexed { tok: Tok::Implies, .. })) {
            self.advance();
            let rhs = self.parse_implies()?;
            return Ok(Formula::Implies(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_or(&mut self) -> Result<Formula, SyntaxError> {
        let mut lhs = self.parse_and()?;
        while matches!(self.peek(), Some(Lexed { tok: Tok::Or, .. })) {
            self.advance();
            let rhs = self.parse_and()?;
            lhs = Formula::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Formula, SyntaxError> {
        let mut lhs = self.parse_unary()?;
        while matches!(self.peek(), Some(Lexed { tok: Tok::And, .. })) {
            self.advance();
            let rhs = self.parse_unary()?;
            lhs = Formula::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Formula, SyntaxError> {
        let wrap = match self.peek().map(|l| &l.tok) {
            Some(Tok::Not) => Formula::Not,
            Some(Tok::BoxR1) => Formula::BoxR1,
            Some(Tok::DiamondR1) => Formula::DiamondR1,
            Some(Tok::BoxRho) => Formula::BoxRho,
            Some(Tok::DiamondRho) => Formula::DiamondRho,
            Some(Tok::Yesterday) => Formula::Yesterday,
            _ => return self.parse_primary(),
        };
        self.advance();
        Ok(wrap(Box::new(self.parse_unary()?)))
    }

    fn parse_primary(&mut self) -> Result<Formula, SyntaxError> {
        match self.peek().map(|l| &l.tok) {
            Some(Tok::Atom(name)) => {
                let name = name.clone();
                self.advance();
                Ok(Formula::Atom(name))
            }
            Some(&Tok::Dist(n)) => {
                self.advance();
                Ok(Formula::Dist(n))
            }
            Some(Tok::LParen) => {
                self.advance();
                let inner = self.parse_implies()?;
                if !matches!(self.peek(), Some(Lexed { tok: Tok::RParen, .. })) {
                    return Err(self.error(&["`)`"]));
                }
                self.advance();
                Ok(inner)
            }
            _ => Err(self.error(OPERAND_EXPECTED)),
        }
    }
}

/// Parses the concrete syntax; `->` is right-associative and binds loosest,
/// then `|`, then `&`, then the prefix operators.
pub fn parse_formula(input: &str) -> Result<Formula, SyntaxError> {
    let toks = lex(input)?;
    let mut parser = Parser { toks: &toks, pos: 0, input_len: input.len() };
    let formula = parser.parse_implies()?;
    if parser.peek().is_some() {
        return Err(parser.error(&["`&`", "`|`", "`->`", "end of input"]));
    }
    Ok(formula)
}

fn fmt_prec(f: &Formula, out: &mut String, min_bp: u8) {
    match f {
        Formula::Atom(name) => out.push_str(name),
        Formula::Dist(n) => out.push_str(&format!("D{n}")),
        Formula::Not(g)
        | Formula::BoxR1(g)
        | Formula::DiamondR1(g)
        | Formula::BoxRho(g)
        | Formula::DiamondRho(g)
        | Formula::Yesterday(g) => {
            out.push_str(match f {
                Formula::Not(_) => "!",
                Formula::BoxR1(_) => "[]",
                Formula::DiamondR1(_) => "<>",
                Formula::BoxRho(_) => "[p]",
                Formula::DiamondRho(_) => "<p>",
                _ => "Y",
            });
            fmt_prec(g, out, 4);
        }
        Formula::And(a, b) => {
            let wrap = min_bp > 3;
            if wrap {
                out.push('(');
            }
            fmt_prec(a, out, 3);
            out.push_str(" & ");
            fmt_prec(b, out, 4);
            if wrap {
                out.push(')');
            }
        }
        Formula::Or(a, b) => {
            let wrap = min_bp > 2;
            if wrap {
                out.push('(');
            }
            fmt_prec(a, out, 2);
            out.push_str(" | ");
            fmt_prec(b, out, 3);
            if wrap {
                out.push(')');
            }
        }
        Formula::Implies(a, b) => {
            let wrap = min_bp > 1;
            if wrap {
                out.push('(');
            }
            fmt_prec(a, out, 2);
            out.push_str(" -> ");
            fmt_prec(b, out, 1);
            if wrap {
                out.push(')');
            }
        }
    }
}

impl fmt::Display for Formula {
    /// Minimally parenthesized concrete syntax; parsing it back yields the
    /// same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        fmt_prec(self, &mut out, 0);
        f.write_str(&out)
    }
}

struct Ctx<'m> {
    ids: Vec<&'m str>,
    r1_succ: Vec<Vec<usize>>,
    rho_succ: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    states: Vec<&'m BtpkState>,
}

impl<'m> Ctx<'m> {
    fn new(model: &'m BtpkModel) -> (Self, HashMap<&'m str, usize>) {
        let states: Vec<&BtpkState> = model.states().iter().collect();
        let ids: Vec<&str> = states.iter().map(|s| s.id.as_str()).collect();
        let idx: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let n = states.len();
        let mut r1_succ = vec![Vec::new(); n];
        let mut rho_succ = vec![Vec::new(); n];
        let mut parent = vec![None; n];
        for (u, v) in model.r1_edges() {
            let (ui, vi) = (idx[u.as_str()], idx[v.as_str()]);
            r1_succ[ui].push(vi);
            if parent[vi].is_none() {
                parent[vi] = Some(ui);
            }
        }
        for (u, v) in model.rho_edges() {
            rho_succ[idx[u.as_str()]].push(idx[v.as_str()]);
        }
        (Self { ids, r1_succ, rho_succ, parent, states }, idx)
    }
}

enum FlatNode<'f> {
    Atom(&'f str),
    Dist(usize),
    Not(usize),
    And(usize, usize),
    Or(usize, usize),
    Implies(usize, usize),
    BoxR1(usize),
    DiamondR1(usize),
    BoxRho(usize),
    DiamondRho(usize),
    Yesterday(usize),
}

/// Post-order flattening: children always precede their parent.
fn flatten<'f>(f: &'f Formula, out: &mut Vec<FlatNode<'f>>) -> usize {
    let node = match f {
        Formula::Atom(name) => FlatNode::Atom(name),
        Formula::Dist(n) => FlatNode::Dist(*n),
        Formula::Not(g) => FlatNode::Not(flatten(g, out)),
        Formula::And(a, b) => {
            let (ia, ib) = (flatten(a, out), flatten(b, out));
            FlatNode::And(ia, ib)
        }
        Formula::Or(a, b) => {
            let (ia, ib) = (flatten(a, out), flatten(b, out));
            FlatNode::Or(ia, ib)
        }
        Formula::Implies(a, b) => {
            let (ia, ib) = (flatten(a, out), flatten(b, out));
            FlatNode::Implies(ia, ib)
        }
        Formula::BoxR1(g) => FlatNode::BoxR1(flatten(g, out)),
        Formula::DiamondR1(g) => FlatNode::DiamondR1(flatten(g, out)),
        Formula::BoxRho(g) => FlatNode::BoxRho(flatten(g, out)),
        Formula::DiamondRho(g) => FlatNode::DiamondRho(flatten(g, out)),
        Formula::Yesterday(g) => FlatNode::Yesterday(flatten(g, out)),
    };
    out.push(node);
    out.len() - 1
}

fn eval_memo(
    ctx: &Ctx,
    nodes: &[FlatNode],
    memo: &mut [Vec<Option<bool>>],
    s: usize,
    i: usize,
) -> bool {
    if let Some(v) = memo[s][i] {
        return v;
    }
    let v = match &nodes[i] {
        FlatNode::Atom(a) => ctx.states[s].atoms.contains(*a),
        FlatNode::Dist(n) => ctx.states[s].height == *n,
        FlatNode::Not(g) => !eval_memo(ctx, nodes, memo, s, *g),
        FlatNode::And(a, b) => {
            eval_memo(ctx, nodes, memo, s, *a) && eval_memo(ctx, nodes, memo, s, *b)
        }
        FlatNode::Or(a, b) => {
            eval_memo(ctx, nodes, memo, s, *a) || eval_memo(ctx, nodes, memo, s, *b)
        }
        FlatNode::Implies(a, b) => {
            !eval_memo(ctx, nodes, memo, s, *a) || eval_memo(ctx, nodes, memo, s, *b)
        }
        FlatNode::BoxR1(g) => ctx.r1_succ[s].iter().all(|&t| eval_memo(ctx, nodes, memo, t, *g)),
        FlatNode::DiamondR1(g) => {
            ctx.r1_succ[s].iter().any(|&t| eval_memo(ctx, nodes, memo, t, *g))
        }
        FlatNode::BoxRho(g) => ctx.rho_succ[s].iter().all(|&t| eval_memo(ctx, nodes, memo, t, *g)),
        FlatNode::DiamondRho(g) => {
            ctx.rho_succ[s].iter().any(|&t| eval_memo(ctx, nodes, memo, t, *g))
        }
        FlatNode::Yesterday(g) => match ctx.parent[s] {
            Some(p) => eval_memo(ctx, nodes, memo, p, *g),
            None => false,
        },
    };
    memo[s][i] = Some(v);
    v
}

/// Memoized satisfaction of `formula` at one state. Unknown atoms are
/// false; an unknown state id is an error.
pub fn check(btpk: &BtpkModel, state: &str, formula: &Formula) -> Result<bool, LogicError> {
    let (ctx, idx) = Ctx::new(btpk);
    let s = *idx.get(state).ok_or_else(|| LogicError::UnknownState(state.to_string()))?;
    let mut nodes = Vec::new();
    let root = flatten(formula, &mut nodes);
    let mut memo = vec![vec![None; nodes.len()]; ctx.ids.len()];
    Ok(eval_memo(&ctx, &nodes, &mut memo, s, root))
}

/// Direct structural recursion with no sharing; kept as an independent
/// reference for the memoized and bottom-up strategies.
#[cfg(test)]
fn check_naive(ctx: &Ctx, s: usize, f: &Formula) -> bool {
    match f {
        Formula::Atom(a) => ctx.states[s].atoms.contains(a),
        Formula::Dist(n) => ctx.states[s].height == *n,
        Formula::Not(g) => !check_naive(ctx, s, g),
        Formula::And(a, b) => check_naive(ctx, s, a) && check_naive(ctx, s, b),
        Formula::Or(a, b) => check_naive(ctx, s, a) || check_naive(ctx, s, b),
        Formula::Implies(a, b) => !check_naive(ctx, s, a) || check_naive(ctx, s, b),
        Formula::BoxR1(g) => ctx.r1_succ[s].iter().all(|&t| check_naive(ctx, t, g)),
        Formula::DiamondR1(g) => ctx.r1_succ[s].iter().any(|&t| check_naive(ctx, t, g)),
        Formula::BoxRho(g) => ctx.rho_succ[s].iter().all(|&t| check_naive(ctx, t, g)),
        Formula::DiamondRho(g) => ctx.rho_succ[s].iter().any(|&t| check_naive(ctx, t, g)),
        Formula::Yesterday(g) => ctx.parent[s].map_or(false, |p| check_naive(ctx, p, g)),
    }
}

/// Bottom-up global check: labels every state with each subformula in
/// post-order and returns the ids where the whole formula holds.
pub fn check_all(btpk: &BtpkModel, formula: &Formula) -> BTreeSet<String> {
    let (ctx, _) = Ctx::new(btpk);
    let mut nodes = Vec::new();
    let root = flatten(formula, &mut nodes);
    let n = ctx.ids.len();
    let mut sat: Vec<Vec<bool>> = Vec::with_capacity(nodes.len());
    for node in &nodes {
        let row: Vec<bool> = (0..n)
            .map(|s| match node {
                FlatNode::Atom(a) => ctx.states[s].atoms.contains(*a),
                FlatNode::Dist(d) => ctx.states[s].height == *d,
                FlatNode::Not(g) => !sat[*g][s],
                FlatNode::And(a, b) => sat[*a][s] && sat[*b][s],
                FlatNode::Or(a, b) => sat[*a][s] || sat[*b][s],
                FlatNode::Implies(a, b) => !sat[*a][s] || sat[*b][s],
                FlatNode::BoxR1(g) => ctx.r1_succ[s].iter().all(|&t| sat[*g][t]),
                FlatNode::DiamondR1(g) => ctx.r1_succ[s].iter().any(|&t| sat[*g][t]),
                FlatNode::BoxRho(g) => ctx.rho_succ[s].iter().all(|&t| sat[*g][t]),
                FlatNode::DiamondRho(g) => ctx.rho_succ[s].iter().any(|&t| sat[*g][t]),
                FlatNode::Yesterday(g) => ctx.parent[s].map_or(false, |p| sat[*g][p]),
            })
            .collect();
        sat.push(row);
    }
    (0..n)
        .filter(|&s| sat[root][s])
        .map(|s| ctx.ids[s].to_string())
        .collect()
}

/// Verdicts for one entity claim: does each root-to-leaf reading satisfy
/// the per-height recognition formula?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecognitionVerdict {
    /// The announcement-corrected path (through the primed branch).
    pub corrected: bool,
    /// The uncorrected forward-only trunk.
    pub trunk: bool,
    pub formula: Formula,
}

/// The per-height recognition claim: at the entity's first height the
/// label begins, inside it the label continues, everywhere else the label
/// is absent.
pub fn recognition_formula(n: usize, entity: &EntitySpan, entity_type: &str) -> Formula {
    let label = || Box::new(Formula::Atom(format!("label({entity_type})")));
    let begin = || Box::new(Formula::Atom("begin".to_string()));
    let mut acc: Option<Formula> = None;
    for h in 1..=n {
        let pos = h - 1;
        let claim = if pos == entity.start {
            Formula::And(label(), begin())
        } else if entity.covers(pos) {
            Formula::And(label(), Box::new(Formula::Not(begin())))
        } else {
            Formula::Not(label())
        };
        let clause = Formula::Implies(Box::new(Formula::Dist(h)), Box::new(claim));
        acc = Some(match acc {
            None => clause,
            Some(a) => Formula::And(Box::new(a), Box::new(clause)),
        });
    }
    acc.expect("n >= 1")
}

/// Checks the recognition formula along both readings of the tree.
pub fn verify_recognition(
    btpk: &BtpkModel,
    entity: &EntitySpan,
    entity_type: &str,
) -> Result<RecognitionVerdict, LogicError> {
    let n = btpk.height().saturating_sub(1);
    if entity.end >= n {
        return Err(LogicError::EntityOutOfRange { start: entity.start, end: entity.end, n });
    }
    let formula = recognition_formula(n, entity, entity_type);
    let sat = check_all(btpk, &formula);
    let holds_on = |path: Vec<&BtpkState>| path.iter().all(|s| sat.contains(&s.id));
    Ok(RecognitionVerdict {
        corrected: holds_on(btpk.corrected_path()),
        trunk: holds_on(btpk.trunk_path()),
        formula,
    })
}
