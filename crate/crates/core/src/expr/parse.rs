//! Recursive-descent parser for expression text.
//!
//! Grammar (whitespace insensitive, `#` is not a comment character here):
//!
//! ```text
//! expr            := term (("+" | "-") term)*
//! term            := unary (("*" | "/") unary)*
//! unary           := "-" unary | power
//! power           := atom ("^" signed_rational)?
//! atom            := NUMBER | IDENT | IDENT "(" expr ")" | "(" expr ")"
//! signed_rational := "-"? INTEGER ("/" INTEGER)? | "(" signed_rational ")"
//! ```
//!
//! Binding order is `^` over unary minus over `*`/`/` over `+`/`-`, so
//! `-x^2` is `-(x^2)`. Exponents are exact rationals, not subexpressions:
//! `x^(-8/3)` keeps the rational `-8/3`. Identifiers that name a declared
//! coordinate become coordinate references; `sin`, `cos`, `exp`, `log` and
//! `sqrt` are function names; every other identifier is a parameter
//! reference.

use super::{Expr, ExprError, Rational};

const FUNCTIONS: [&str; 5] = ["sin", "cos", "exp", "log", "sqrt"];

/// Parses `text` against the declared coordinate list.
pub fn parse_expr(text: &str, coords: &[&str]) -> Result<Expr, ExprError> {
    let mut p = Parser { text, bytes: text.as_bytes(), pos: 0, coords };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    coords: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn syntax(&self, message: &str) -> ExprError {
        ExprError::Syntax { offset: self.pos, message: message.to_owned() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                acc = acc.add(&rhs);
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                acc = acc.sub(&rhs);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.unary()?;
                acc = acc.mul(&rhs);
            } else if self.eat(b'/') {
                let rhs = self.unary()?;
                acc = acc.div(&rhs);
            } else {
                return Ok(acc);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            Ok(inner.neg())
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let q = self.signed_rational()?;
            self.skip_ws();
            Ok(base.powr(q))
        } else {
            Ok(base)
        }
    }

    fn signed_rational(&mut self) -> Result<Rational, ExprError> {
        if self.eat(b'(') {
            let q = self.signed_rational()?;
            self.expect(b')')?;
            return Ok(q);
        }
        let negative = self.eat(b'-');
        let num = self.integer()?;
        // `/` continues the rational only when an integer follows; otherwise
        // it is the division operator of the surrounding term.
        let den = if self.peek() == Some(b'/') && self.digit_follows_slash() {
            self.pos += 1;
            self.skip_ws();
            self.integer()?
        } else {
            1
        };
        if den == 0 {
            return Err(self.syntax("zero denominator in exponent"));
        }
        let q = Rational::new(num, den);
        Ok(if negative { -q } else { q })
    }

    fn digit_follows_slash(&self) -> bool {
        let mut i = self.pos + 1;
        while i < self.bytes.len() && self.bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        i < self.bytes.len() && self.bytes[i].is_ascii_digit()
    }

    fn integer(&mut self) -> Result<i64, ExprError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.syntax("expected an integer exponent"));
        }
        let s = &self.text[start..self.pos];
        self.skip_ws();
        s.parse::<i64>().map_err(|_| ExprError::Syntax {
            offset: start,
            message: format!("integer `{s}` out of range"),
        })
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(c) => Err(self.syntax(&format!("unexpected character `{}`", c as char))),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // `e` belonged to a following identifier, not an exponent.
                self.pos = mark;
            }
        }
        let s = &self.text[start..self.pos];
        let v: f64 = s.parse().map_err(|_| ExprError::Syntax {
            offset: start,
            message: format!("malformed number `{s}`"),
        })?;
        if !v.is_finite() {
            return Err(ExprError::Syntax {
                offset: start,
                message: format!("number `{s}` overflows"),
            });
        }
        self.skip_ws();
        Ok(Expr::number(v))
    }

    fn identifier(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = &self.text[start..self.pos];
        self.skip_ws();
        if self.peek() == Some(b'(') {
            if !FUNCTIONS.contains(&name) {
                return Err(ExprError::UnknownIdentifier { name: name.to_owned(), offset: start });
            }
            self.pos += 1;
            self.skip_ws();
            let arg = self.expr()?;
            self.expect(b')')?;
            let e = match name {
                "sin" => arg.sin(),
                "cos" => arg.cos(),
                "exp" => arg.exp(),
                "log" => arg.log(),
                "sqrt" => arg.sqrt(),
                _ => unreachable!(),
            };
            return Ok(e);
        }
        if let Some(index) = self.coords.iter().position(|c| *c == name) {
            return Ok(Expr::coord(name, index));
        }
        Ok(Expr::param(name))
    }
}
