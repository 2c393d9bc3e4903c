// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic yes/no capability tasks: boolean expressions and factoid
//! questions over a fact table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BoolExpr,
    Factoid,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BoolExpr => "bool_expr",
            TaskKind::Factoid => "factoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub kind: TaskKind,
    pub question: String,
    /// "True"/"False" for boolean expressions, "Yes"/"No" for factoids.
    pub gold: String,
    pub seed: u64,
}

/// Prompt shown to the model for a capability item.
pub fn render_task_prompt(item: &TaskItem) -> String {
    format!("Q: {}\nA: ", item.question)
}

/// One row of the fact table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    /// Either "is" or "can".
    pub predicate: String,
    pub object: String,
    pub truth: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Expr {
    Lit(bool),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self) -> bool {
        match self {
            Expr::Lit(b) => *b,
            Expr::Not(e) => !e.eval(),
            Expr::And(a, b) => a.eval() && b.eval(),
            Expr::Or(a, b) => a.eval() || b.eval(),
        }
    }

    fn render(&self, top: bool, out: &mut String) {
        match self {
            Expr::Lit(b) => out.push_str(if *b { "True" } else { "False" }),
            Expr::Not(e) => {
                out.push_str("not ");
                e.render(false, out);
            }
            Expr::And(a, b) | Expr::Or(a, b) => {
                let op = if matches!(self, Expr::And(..)) { "and" } else { "or" };
                if !top {
                    out.push_str("( ");
                }
                a.render(false, out);
                out.push(' ');
                out.push_str(op);
                out.push(' ');
                b.render(false, out);
                if !top {
                    out.push_str(" )");
                }
            }
        }
    }

    /// Random tree whose deepest branch has exactly `depth` operators.
    fn random(depth: usize, rng: &mut ChaCha8Rng) -> Expr {
        if depth == 0 {
            return Expr::Lit(rng.random());
        }
        match rng.random_range(0..3) {
            0 => Expr::Not(Box::new(Expr::random(depth - 1, rng))),
            k => {
                let deep = Box::new(Expr::random(depth - 1, rng));
                let other_depth = rng.random_range(0..depth);
                let other = Box::new(Expr::random(other_depth, rng));
                let (a, b) = if rng.random() { (deep, other) } else { (other, deep) };
                if k == 1 {
                    Expr::And(a, b)
                } else {
                    Expr::Or(a, b)
                }
            }
        }
    }
}

fn bool_word(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Random boolean expression of the given nesting depth (0..=6).
pub fn gen_bool_expr(seed: u64, depth: usize) -> Result<TaskItem> {
    if depth > 6 {
        return Err(Error::Range {
            what: "expression depth",
            value: depth,
            bound: 7,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expr = Expr::random(depth, &mut rng);
    let mut question = String::new();
    expr.render(true, &mut question);
    Ok(TaskItem {
        kind: TaskKind::BoolExpr,
        question,
        gold: bool_word(expr.eval()).to_string(),
        seed,
    })
}

struct Parser<'a> {
    toks: Vec<&'a str>,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<&str> {
        let t = self.toks.get(self.pos).copied();
        self.pos += 1;
        t
    }

    // or_expr := and_expr ("or" and_expr)*
    fn or_expr(&mut self) -> Option<bool> {
        let mut v = self.and_expr()?;
        while self.peek() == Some("or") {
            self.bump();
            let r = self.and_expr()?;
            v = v || r;
        }
        Some(v)
    }

    fn and_expr(&mut self) -> Option<bool> {
        let mut v = self.unary()?;
        while self.peek() == Some("and") {
            self.bump();
            let r = self.unary()?;
            v = v && r;
        }
        Some(v)
    }

    fn unary(&mut self) -> Option<bool> {
        match self.bump()? {
            "not" => Some(!self.unary()?),
            "True" => Some(true),
            "False" => Some(false),
            "(" => {
                let v = self.or_expr()?;
                (self.bump()? == ")").then_some(v)
            }
            _ => None,
        }
    }
}

/// Evaluates a space-separated expression over `True`, `False`, `not`,
/// `and`, `or` and parentheses, with Python precedence.
pub fn eval_bool_expr(text: &str) -> Result<bool> {
    let mut p = Parser {
        toks: text.split_whitespace().collect(),
        pos: 0,
    };
    match p.or_expr() {
        Some(v) if p.pos == p.toks.len() => Ok(v),
        _ => Err(Error::contract(format!("malformed boolean expression: {text:?}"))),
    }
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn factoid_question(fact: &Fact, negated: bool) -> String {
    let not = if negated { "not " } else { "" };
    format!(
        "{} {} {}{}?",
        capitalize(&fact.predicate),
        fact.subject,
        not,
        fact.object
    )
}

/// Yes/no question over a random fact; about half are negated.
pub fn gen_factoid(seed: u64, facts: &[Fact]) -> Result<TaskItem> {
    if facts.is_empty() {
        return Err(Error::contract("fact table is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fact = &facts[rng.random_range(0..facts.len())];
    let negated: bool = rng.random();
    Ok(TaskItem {
        kind: TaskKind::Factoid,
        question: factoid_question(fact, negated),
        gold: if fact.truth != negated { "Yes" } else { "No" }.to_string(),
        seed,
    })
}

/// Looks the question up in the fact table; `None` if no fact matches.
pub fn answer_factoid(question: &str, facts: &[Fact]) -> Option<bool> {
    for fact in facts {
        for negated in [false, true] {
            if factoid_question(fact, negated) == question {
                return Some(fact.truth != negated);
            }
        }
    }
    None
}

/// Every question form derivable from the table, with its answer.
pub fn all_factoids(facts: &[Fact]) -> Vec<(String, &'static str)> {
    let mut out = Vec::with_capacity(facts.len() * 2);
    for fact in facts {
        for negated in [false, true] {
            let yes = fact.truth != negated;
            out.push((factoid_question(fact, negated), if yes { "Yes" } else { "No" }));
        }
    }
    out
}

/// Re-derives the gold answer of an item from its question alone.
pub fn recompute_gold(item: &TaskItem, facts: &[Fact]) -> Result<String> {
    match item.kind {
        TaskKind::BoolExpr => Ok(bool_word(eval_bool_expr(&item.question)?).to_string()),
        TaskKind::Factoid => answer_factoid(&item.question, facts)
            .map(|b| if b { "Yes" } else { "No" }.to_string())
            .ok_or_else(|| Error::contract(format!("no fact matches {:?}", item.question))),
    }
}
