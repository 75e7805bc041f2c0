//! Line-oriented text form of programs (`.prog` files).
//!
//! ```text
//! if (-0.16 - 0.31 * f0 - 2.1 * f1 - 6.6 * f2 - 2.3 * f3 > 0):
//!     Left
//! else:
//!     Right
//! ```
//!
//! Deeper programs chain clauses with `else if (...):`. Continuous
//! terminals print as `affine([[w, ...], ...]; [b, ...])`. Coefficients are
//! written with 17 significant digits (trailing zeros dropped), which is
//! enough for every `f64` to parse back to the same bits.

use super::{Clause, DiscreteProgram, Predicate, TerminalAction};
use crate::envs::{ActionSpace, Environment};
use crate::error::{Error, Result};

/// Names and limits needed to print or parse a program.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramContext {
    pub feature_names: Vec<String>,
    pub action_names: Vec<String>,
    pub action_space: ActionSpace,
    pub max_depth: usize,
}

impl ProgramContext {
    /// Features named `f0..`, discrete actions named `a0..`.
    pub fn new(feature_dim: usize, action_space: ActionSpace, max_depth: usize) -> Self {
        let action_names = match action_space {
            ActionSpace::Discrete(n) => (0..n).map(|i| format!("a{i}")).collect(),
            ActionSpace::Continuous { .. } => Vec::new(),
        };
        ProgramContext {
            feature_names: (0..feature_dim).map(|i| format!("f{i}")).collect(),
            action_names,
            action_space,
            max_depth,
        }
    }

    pub fn for_env(env: &dyn Environment, max_depth: usize) -> Self {
        let mut ctx = Self::new(env.feature_dim(), env.action_space(), max_depth);
        ctx.action_names = env.action_names();
        ctx
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }
}

/// Formats a coefficient with the fewest digits that parse back to the
/// same double. Positional notation is used for decimal exponents in `-7..=16`.
pub fn format_coefficient(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x == 0.0 {
        return format!("{sign}0");
    }
    // shortest digits that parse back to the same double
    let sci = format!("{:e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let digits = digits.trim_end_matches('0');
    let body = if (-7..=16).contains(&exp) {
        if exp >= 0 {
            let int_len = exp as usize + 1;
            if digits.len() <= int_len {
                format!("{digits}{}", "0".repeat(int_len - digits.len()))
            } else {
                format!("{}.{}", &digits[..int_len], &digits[int_len..])
            }
        } else {
            format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
        }
    } else if digits.len() == 1 {
        format!("{digits}e{exp}")
    } else {
        format!("{}.{}e{exp}", &digits[..1], &digits[1..])
    };
    format!("{sign}{body}")
}

fn format_linexpr(pred: &Predicate, ctx: &ProgramContext) -> String {
    let mut s = format_coefficient(pred.bias);
    for (w, name) in pred.weights.iter().zip(&ctx.feature_names) {
        let op = if w.is_sign_negative() { '-' } else { '+' };
        s.push_str(&format!(" {op} {} * {name}", format_coefficient(w.abs())));
    }
    s
}

fn format_action(action: &TerminalAction, ctx: &ProgramContext) -> String {
    match action {
        TerminalAction::Discrete(a) => ctx
            .action_names
            .get(*a)
            .cloned()
            .unwrap_or_else(|| format!("a{a}")),
        TerminalAction::Affine { weights, bias } => {
            let f = ctx.feature_dim().max(1);
            let rows: Vec<String> = weights
                .chunks(f)
                .map(|row| {
                    let cells: Vec<String> = row.iter().map(|&x| format_coefficient(x)).collect();
                    format!("[{}]", cells.join(", "))
                })
                .collect();
            let b: Vec<String> = bias.iter().map(|&x| format_coefficient(x)).collect();
            format!("affine([{}]; [{}])", rows.join(", "), b.join(", "))
        }
    }
}

impl DiscreteProgram {
    /// Renders the program as nested if/else text.
    pub fn to_text(&self, ctx: &ProgramContext) -> String {
        let mut out = String::new();
        for (i, c) in self.clauses.iter().enumerate() {
            let kw = if i == 0 { "if" } else { "else if" };
            out.push_str(&format!("{kw} ({} > 0):\n", format_linexpr(&c.predicate, ctx)));
            out.push_str(&format!("    {}\n", format_action(&c.action, ctx)));
        }
        if self.clauses.is_empty() {
            out.push_str(&format_action(&self.default, ctx));
            out.push('\n');
        } else {
            out.push_str("else:\n");
            out.push_str(&format!("    {}\n", format_action(&self.default, ctx)));
        }
        out
    }

    pub fn parse(text: &str, ctx: &ProgramContext) -> Result<Self> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens, pos: 0, ctx };
        let (clauses, default) = p.program()?;
        let depth = clauses.len() + 1;
        if depth > ctx.max_depth {
            return Err(Error::DepthExceeded {
                depth,
                max: ctx.max_depth,
            });
        }
        DiscreteProgram::new(ctx.feature_dim(), ctx.action_space.clone(), clauses, default)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Sym(char),
    Newline,
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        if c == '\n' {
            out.push(Token { tok: Tok::Newline, line, column: col });
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let begin = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lit: String = chars[begin..i].iter().collect();
            let v: f64 = lit
                .parse()
                .map_err(|_| syntax(start_line, start_col, format!("malformed number {lit:?}")))?;
            col += i - begin;
            out.push(Token { tok: Tok::Number(v), line: start_line, column: start_col });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let begin = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - begin;
            out.push(Token {
                tok: Tok::Ident(chars[begin..i].iter().collect()),
                line: start_line,
                column: start_col,
            });
            continue;
        }
        if "()[]:;,>*+-".contains(c) {
            out.push(Token { tok: Tok::Sym(c), line, column: col });
            i += 1;
            col += 1;
            continue;
        }
        return Err(syntax(line, col, format!("unexpected character {c:?}")));
    }
    out.push(Token { tok: Tok::Eof, line, column: col });
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    ctx: &'a ProgramContext,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, message: impl Into<String>) -> Error {
        let t = self.peek();
        syntax(t.line, t.column, message)
    }

    fn expect_sym(&mut self, c: char) -> Result<()> {
        if self.peek().tok == Tok::Sym(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.error_here(format!("expected '{c}', found {}", describe(&self.peek().tok))))
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if matches!(&self.peek().tok, Tok::Ident(s) if s == kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.error_here(format!("expected '{kw}', found {}", describe(&self.peek().tok))))
        }
    }

    fn expect_newline(&mut self) -> Result<()> {
        if self.peek().tok != Tok::Newline {
            return Err(self.error_here(format!(
                "expected end of line, found {}",
                describe(&self.peek().tok)
            )));
        }
        while self.peek().tok == Tok::Newline {
            self.bump();
        }
        Ok(())
    }

    fn skip_newlines(&mut self) {
        while self.peek().tok == Tok::Newline {
            self.bump();
        }
    }

    fn expect_eof(&mut self) -> Result<()> {
        self.skip_newlines();
        if self.peek().tok == Tok::Eof {
            Ok(())
        } else {
            Err(self.error_here(format!(
                "expected end of program, found {}",
                describe(&self.peek().tok)
            )))
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn program(&mut self) -> Result<(Vec<Clause>, TerminalAction)> {
        self.skip_newlines();
        let mut clauses = Vec::new();
        if !self.is_keyword("if") {
            let default = self.action()?;
            self.expect_eof()?;
            return Ok((clauses, default));
        }
        loop {
            self.expect_keyword("if")?;
            self.expect_sym('(')?;
            let predicate = self.linexpr()?;
            self.expect_sym('>')?;
            let zero = self.peek().clone();
            match zero.tok {
                Tok::Number(v) if v == 0.0 => {
                    self.bump();
                }
                _ => return Err(syntax(zero.line, zero.column, "predicates must compare against 0")),
            }
            self.expect_sym(')')?;
            self.expect_sym(':')?;
            self.expect_newline()?;
            let action = self.action()?;
            self.expect_newline()?;
            self.expect_keyword("else")?;
            clauses.push(Clause { predicate, action });
            if self.peek().tok == Tok::Sym(':') {
                self.bump();
                self.expect_newline()?;
                let default = self.action()?;
                self.expect_eof()?;
                return Ok((clauses, default));
            }
            if !self.is_keyword("if") {
                return Err(self.error_here("expected ':' or 'if' after 'else'"));
            }
        }
    }

    fn signed_number(&mut self) -> Result<f64> {
        let negative = match self.peek().tok {
            Tok::Sym('-') => {
                self.bump();
                true
            }
            Tok::Sym('+') => {
                self.bump();
                false
            }
            _ => false,
        };
        let t = self.bump();
        match t.tok {
            Tok::Number(v) => Ok(if negative { -v } else { v }),
            other => Err(syntax(t.line, t.column, format!("expected number, found {}", describe(&other)))),
        }
    }

    fn feature_term(&mut self, coeff: f64, weights: &mut [Option<f64>]) -> Result<()> {
        self.expect_sym('*')?;
        let t = self.bump();
        let Tok::Ident(name) = &t.tok else {
            return Err(syntax(t.line, t.column, format!("expected feature name, found {}", describe(&t.tok))));
        };
        let idx = self
            .ctx
            .feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| syntax(t.line, t.column, format!("unknown feature name '{name}'")))?;
        if weights[idx].replace(coeff).is_some() {
            return Err(syntax(t.line, t.column, format!("feature '{name}' appears twice")));
        }
        Ok(())
    }

    fn linexpr(&mut self) -> Result<Predicate> {
        let mut weights: Vec<Option<f64>> = vec![None; self.ctx.feature_dim()];
        let first = self.signed_number()?;
        let mut bias = 0.0;
        if self.peek().tok == Tok::Sym('*') {
            self.feature_term(first, &mut weights)?;
        } else {
            bias = first;
        }
        while matches!(self.peek().tok, Tok::Sym('+') | Tok::Sym('-')) {
            let coeff = self.signed_number()?;
            self.feature_term(coeff, &mut weights)?;
        }
        Ok(Predicate::new(
            weights.into_iter().map(|w| w.unwrap_or(0.0)).collect(),
            bias,
        ))
    }

    fn number_list(&mut self) -> Result<Vec<f64>> {
        self.expect_sym('[')?;
        let mut xs = Vec::new();
        if self.peek().tok != Tok::Sym(']') {
            loop {
                xs.push(self.signed_number()?);
                if self.peek().tok == Tok::Sym(',') {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_sym(']')?;
        Ok(xs)
    }

    fn action(&mut self) -> Result<TerminalAction> {
        let t = self.bump();
        let Tok::Ident(name) = &t.tok else {
            return Err(syntax(t.line, t.column, format!("expected action, found {}", describe(&t.tok))));
        };
        if name == "affine" && self.peek().tok == Tok::Sym('(') {
            let ActionSpace::Continuous { dim, .. } = self.ctx.action_space else {
                return Err(syntax(t.line, t.column, "affine action in a discrete action space"));
            };
            self.bump();
            self.expect_sym('[')?;
            let mut weights = Vec::new();
            let mut rows = 0;
            loop {
                let row = self.number_list()?;
                if row.len() != self.ctx.feature_dim() {
                    return Err(self.error_here(format!(
                        "affine row has {} entries, expected {}",
                        row.len(),
                        self.ctx.feature_dim()
                    )));
                }
                weights.extend(row);
                rows += 1;
                if self.peek().tok == Tok::Sym(',') {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect_sym(']')?;
            self.expect_sym(';')?;
            let bias = self.number_list()?;
            self.expect_sym(')')?;
            if rows != dim || bias.len() != dim {
                return Err(syntax(t.line, t.column, format!("affine action must have {dim} rows")));
            }
            return Ok(TerminalAction::Affine { weights, bias });
        }
        self.ctx
            .action_names
            .iter()
            .position(|a| a == name)
            .map(TerminalAction::Discrete)
            .ok_or_else(|| syntax(t.line, t.column, format!("unknown action '{name}'")))
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Number(v) => format!("number {v}"),
        Tok::Sym(c) => format!("'{c}'"),
        Tok::Newline => "end of line".into(),
        Tok::Eof => "end of input".into(),
    }
}
