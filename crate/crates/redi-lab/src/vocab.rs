//! The fixed token vocabulary shared by the task generator, the teacher,
//! and the policy.
//!
//! Layout (21 symbols, ids are stable and serialized as plain integers):
//!
//! ```text
//! 0      PAD     left-padding inside the policy context window
//! 1      END     end-of-trace marker
//! 2      THINK   reserved marker emitted once at the start of a trace
//! 3..13  digits 0..9
//! 13     '+'  14 '-'  15 '*'
//! 16     '('  17 ')'
//! 18     MOD ("mod")
//! 19     '='
//! 20     ';'  step separator
//! ```

use crate::{Error, Result};

/// Token id. Values are always `< SIZE` for task data; the policy accepts
/// any vocabulary size given in its config.
pub type Token = u32;

pub const PAD: Token = 0;
pub const END: Token = 1;
pub const THINK: Token = 2;
pub const DIGIT_BASE: Token = 3;
pub const PLUS: Token = 13;
pub const MINUS: Token = 14;
pub const TIMES: Token = 15;
pub const LPAREN: Token = 16;
pub const RPAREN: Token = 17;
pub const MOD: Token = 18;
pub const EQUALS: Token = 19;
pub const SEP: Token = 20;

/// Number of distinct symbols.
pub const SIZE: usize = 21;

/// Number of digit symbols; moduli must not exceed this.
pub const DIGIT_RANGE: i64 = 10;

/// Token for decimal digit `d` (0..=9).
pub fn digit(d: i64) -> Result<Token> {
    if (0..DIGIT_RANGE).contains(&d) {
        Ok(DIGIT_BASE + d as Token)
    } else {
        Err(Error::Range(format!("digit {d} outside 0..{DIGIT_RANGE}")))
    }
}

/// Inverse of [`digit`]: `Some(value)` iff `tok` is a digit token.
pub fn digit_value(tok: Token) -> Option<i64> {
    if (DIGIT_BASE..DIGIT_BASE + DIGIT_RANGE as Token).contains(&tok) {
        Some((tok - DIGIT_BASE) as i64)
    } else {
        None
    }
}

/// Encodes a non-negative integer as decimal digit tokens.
pub fn encode_number(mut n: i64, out: &mut Vec<Token>) {
    assert!(n >= 0, "only non-negative numbers are rendered");
    let start = out.len();
    loop {
        out.push(DIGIT_BASE + (n % 10) as Token);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out[start..].reverse();
}

/// True iff every token is a known symbol.
pub fn all_in_vocab(tokens: &[Token]) -> bool {
    tokens.iter().all(|&t| (t as usize) < SIZE)
}

/// Human-readable rendering, used in error messages and reports.
pub fn render(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, &t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match t {
            PAD => out.push('_'),
            END => out.push_str("<end>"),
            THINK => out.push_str("<think>"),
            PLUS => out.push('+'),
            MINUS => out.push('-'),
            TIMES => out.push('*'),
            LPAREN => out.push('('),
            RPAREN => out.push(')'),
            MOD => out.push_str("mod"),
            EQUALS => out.push('='),
            SEP => out.push(';'),
            _ => match digit_value(t) {
                Some(d) => out.push_str(&d.to_string()),
                None => out.push_str(&format!("<{t}?>")),
            },
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_round_trip() {
        for d in 0..10 {
            assert_eq!(digit_value(digit(d).unwrap()), Some(d));
        }
        assert!(digit(10).is_err());
        assert!(digit(-1).is_err());
        assert_eq!(digit_value(PLUS), None);
    }

    #[test]
    fn encode_number_multi_digit() {
        let mut out = Vec::new();
        encode_number(10, &mut out);
        assert_eq!(out, vec![digit(1).unwrap(), digit(0).unwrap()]);
    }

    #[test]
    fn render_is_readable() {
        let toks = vec![
            LPAREN,
            digit(3).unwrap(),
            PLUS,
            digit(4).unwrap(),
            RPAREN,
            MOD,
            digit(5).unwrap(),
        ];
        assert_eq!(render(&toks), "( 3 + 4 ) mod 5");
    }

    #[test]
    fn vocab_ids_are_dense_and_distinct() {
        assert!(all_in_vocab(&[PAD, END, THINK, PLUS, MINUS, TIMES, LPAREN, RPAREN, MOD, EQUALS, SEP]));
        assert_eq!(SIZE, 21);
        assert!(!all_in_vocab(&[SIZE as Token]));
    }
}
