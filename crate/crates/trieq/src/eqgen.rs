//! Random arithmetic equations and their spoken-word verbalizations.
//!
//! Every equation is an always-true identity `lhs = rhs` where the right-hand
//! side is the exact integer value of the left-hand side. Generation works
//! value-first: a result is drawn, then an expression tree that evaluates to
//! exactly that result is built around it, so every intermediate node stays
//! an integer in the literal range and no rejection loop is needed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number words for literals 0..=20. Single lowercase words only, so spoken
/// strings survive the evaluation normalizer unchanged.
pub const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

/// Operator and filler words used by the verbalizer.
pub const OPERATOR_WORDS: [&str; 8] = ["plus", "minus", "equals", "over", "to", "the", "log", "of"];

/// The complete spoken-word lexicon, in canonical order. Token ids for the
/// text and audio vocabulary blocks index into this list.
pub fn lexicon() -> Vec<&'static str> {
    NUMBER_WORDS.iter().chain(OPERATOR_WORDS.iter()).copied().collect()
}

pub const MAX_LITERAL: u32 = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EqError {
    #[error("literal {0} outside the verbalizable range 0..={MAX_LITERAL}")]
    LiteralOutOfRange(u32),
}

/// Expression tree over integer literals. `Frac` is exact division and `Log`
/// is base-2; the generator only ever produces operands for which both are
/// integer-valued.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Literal(u32),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Frac(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Log(Box<Expr>),
}

impl Expr {
    /// Exact integer evaluation. `None` on non-integer division, log of a
    /// non-power-of-two, or out-of-range intermediates.
    pub fn eval(&self) -> Option<u32> {
        match self {
            Expr::Literal(v) => Some(*v),
            Expr::Add(a, b) => a.eval()?.checked_add(b.eval()?),
            Expr::Sub(a, b) => a.eval()?.checked_sub(b.eval()?),
            Expr::Frac(a, b) => {
                let (x, y) = (a.eval()?, b.eval()?);
                if y == 0 || x % y != 0 {
                    None
                } else {
                    Some(x / y)
                }
            }
            Expr::Pow(a, b) => a.eval()?.checked_pow(b.eval()?),
            Expr::Log(a) => {
                let x = a.eval()?;
                if x > 0 && x.is_power_of_two() {
                    Some(x.trailing_zeros())
                } else {
                    None
                }
            }
        }
    }

    /// Number of operator nodes in the tree (literals excluded).
    pub fn operator_count(&self) -> usize {
        match self {
            Expr::Literal(_) => 0,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Frac(a, b) | Expr::Pow(a, b) => {
                1 + a.operator_count() + b.operator_count()
            }
            Expr::Log(a) => 1 + a.operator_count(),
        }
    }
}

/// One always-true identity plus its two deterministic renderings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equation {
    pub lhs: Expr,
    pub rhs: u32,
    /// Canonical symbolic rendering, e.g. `3 + 5 = 8`.
    pub text: String,
    /// Whitespace-separated lowercase word sequence, e.g. `three plus five equals eight`.
    pub spoken: String,
}

impl Equation {
    /// Build from a left-hand side; the right-hand side is its exact value.
    /// Panics if the expression is not integer-valued (the generator never
    /// produces such trees).
    pub fn from_lhs(lhs: Expr) -> Result<Equation, EqError> {
        let rhs = lhs.eval().expect("generator produced a non-integer expression");
        let text = format!("{} = {}", render_text(&lhs), rhs);
        let mut words = verbalize(&lhs)?;
        words.push("equals".to_string());
        words.push(number_word(rhs)?.to_string());
        let spoken = words.join(" ");
        Ok(Equation { lhs, rhs, text, spoken })
    }

    pub fn spoken_words(&self) -> Vec<&str> {
        self.spoken.split(' ').collect()
    }
}

/// Three equations of which two are read aloud, in a meaningful order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquationTriple {
    pub equations: [Equation; 3],
    /// The two spoken equations, as indices into `equations`, in spoken
    /// order (not sorted).
    pub spoken_indices: [usize; 2],
}

impl EquationTriple {
    pub fn spoken_equations(&self) -> [&Equation; 2] {
        [
            &self.equations[self.spoken_indices[0]],
            &self.equations[self.spoken_indices[1]],
        ]
    }

    /// Reference transcript: concatenated spoken strings in spoken order.
    pub fn transcript(&self) -> String {
        let [a, b] = self.spoken_equations();
        format!("{} {}", a.spoken, b.spoken)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EqConfig {
    /// Maximum operator nesting depth of the left-hand side. 1 gives exactly
    /// one operator node.
    pub depth_limit: u32,
    /// Probability that a child with remaining depth collapses to a literal.
    pub literal_bias: f64,
}

impl Default for EqConfig {
    fn default() -> Self {
        EqConfig { depth_limit: 2, literal_bias: 0.6 }
    }
}

fn number_word(v: u32) -> Result<&'static str, EqError> {
    NUMBER_WORDS
        .get(v as usize)
        .copied()
        .ok_or(EqError::LiteralOutOfRange(v))
}

/// Spoken-word rendering of an expression. Infix, no parentheses: spoken
/// arithmetic is ambiguous exactly the way read-aloud math is.
pub fn verbalize(expr: &Expr) -> Result<Vec<String>, EqError> {
    let mut out = Vec::new();
    verbalize_into(expr, &mut out)?;
    Ok(out)
}

fn verbalize_into(expr: &Expr, out: &mut Vec<String>) -> Result<(), EqError> {
    let mut push = |w: &str| out.push(w.to_string());
    match expr {
        Expr::Literal(v) => push(number_word(*v)?),
        Expr::Add(a, b) => {
            verbalize_into(a, out)?;
            out.push("plus".into());
            verbalize_into(b, out)?;
        }
        Expr::Sub(a, b) => {
            verbalize_into(a, out)?;
            out.push("minus".into());
            verbalize_into(b, out)?;
        }
        Expr::Frac(a, b) => {
            verbalize_into(a, out)?;
            out.push("over".into());
            verbalize_into(b, out)?;
        }
        Expr::Pow(a, b) => {
            verbalize_into(a, out)?;
            out.push("to".into());
            out.push("the".into());
            verbalize_into(b, out)?;
        }
        Expr::Log(a) => {
            out.push("log".into());
            out.push("of".into());
            verbalize_into(a, out)?;
        }
    }
    Ok(())
}

/// Symbolic rendering. Operator operands are parenthesized, literal operands
/// are not, so depth-1 equations come out as plain `3 + 5`.
pub fn render_text(expr: &Expr) -> String {
    fn operand(e: &Expr) -> String {
        match e {
            Expr::Literal(_) => render_text(e),
            _ => format!("({})", render_text(e)),
        }
    }
    match expr {
        Expr::Literal(v) => v.to_string(),
        Expr::Add(a, b) => format!("{} + {}", operand(a), operand(b)),
        Expr::Sub(a, b) => format!("{} - {}", operand(a), operand(b)),
        Expr::Frac(a, b) => format!("{} / {}", operand(a), operand(b)),
        Expr::Pow(a, b) => format!("{} ^ {}", operand(a), operand(b)),
        Expr::Log(a) => format!("log {}", operand(a)),
    }
}

/// Generate one equation. Identical seeds yield identical equations.
pub fn generate_equation(seed: u64, cfg: &EqConfig) -> Equation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value = rng.gen_range(0..=MAX_LITERAL);
    let lhs = gen_operator_node(&mut rng, cfg, cfg.depth_limit.max(1), value);
    Equation::from_lhs(lhs).expect("generated literals are always in range")
}

/// Generate a triple: three independently seeded equations plus a uniform
/// draw over the 6 ordered 2-permutations of {0,1,2}.
pub fn generate_triple(seed: u64, cfg: &EqConfig) -> EquationTriple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = [0u64; 3];
    for s in seeds.iter_mut() {
        *s = rng.gen::<u64>();
    }
    let equations = [
        generate_equation(seeds[0], cfg),
        generate_equation(seeds[1], cfg),
        generate_equation(seeds[2], cfg),
    ];
    const PERMS: [[usize; 2]; 6] = [[0, 1], [0, 2], [1, 0], [1, 2], [2, 0], [2, 1]];
    let spoken_indices = PERMS[rng.gen_range(0..6)];
    EquationTriple { equations, spoken_indices }
}

/// Build an operator node whose exact value is `value`.
fn gen_operator_node(rng: &mut ChaCha8Rng, cfg: &EqConfig, depth: u32, value: u32) -> Expr {
    // Pow can only hit values with a small-base integer power representation;
    // Log needs 2^value <= MAX_LITERAL.
    let pow_ok = !pow_decompositions(value).is_empty();
    let log_ok = value <= 4;
    let mut ops: Vec<u8> = vec![0, 1, 2]; // add, sub, frac are always applicable
    if pow_ok {
        ops.push(3);
    }
    if log_ok {
        ops.push(4);
    }
    let op = ops[rng.gen_range(0..ops.len())];
    match op {
        0 => {
            let a = rng.gen_range(0..=value);
            let (x, y) = (
                gen_child(rng, cfg, depth - 1, a),
                gen_child(rng, cfg, depth - 1, value - a),
            );
            Expr::Add(Box::new(x), Box::new(y))
        }
        1 => {
            let a = rng.gen_range(value..=MAX_LITERAL);
            let (x, y) = (
                gen_child(rng, cfg, depth - 1, a),
                gen_child(rng, cfg, depth - 1, a - value),
            );
            Expr::Sub(Box::new(x), Box::new(y))
        }
        2 => {
            let divisor_max = if value == 0 { MAX_LITERAL } else { MAX_LITERAL / value };
            let b = rng.gen_range(1..=divisor_max.max(1));
            let (x, y) = (
                gen_child(rng, cfg, depth - 1, value * b),
                gen_child(rng, cfg, depth - 1, b),
            );
            Expr::Frac(Box::new(x), Box::new(y))
        }
        3 => {
            let pairs = pow_decompositions(value);
            let (base, exp) = pairs[rng.gen_range(0..pairs.len())];
            let (x, y) = (
                gen_child(rng, cfg, depth - 1, base),
                gen_child(rng, cfg, depth - 1, exp),
            );
            Expr::Pow(Box::new(x), Box::new(y))
        }
        _ => {
            let x = gen_child(rng, cfg, depth - 1, 1 << value);
            Expr::Log(Box::new(x))
        }
    }
}

/// Child with exact value `value`: a literal when depth is exhausted or the
/// literal bias fires, otherwise a nested operator node.
fn gen_child(rng: &mut ChaCha8Rng, cfg: &EqConfig, depth: u32, value: u32) -> Expr {
    if depth == 0 || rng.gen::<f64>() < cfg.literal_bias {
        Expr::Literal(value)
    } else {
        gen_operator_node(rng, cfg, depth, value)
    }
}

/// All (base, exponent) pairs with exponent >= 2 and base^exponent == value
/// staying within the literal range.
fn pow_decompositions(value: u32) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for base in 0..=MAX_LITERAL {
        for exp in 2..=4 {
            if base.checked_pow(exp) == Some(value) {
                pairs.push((base, exp));
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn add(a: u32, b: u32) -> Expr {
        Expr::Add(Box::new(Expr::Literal(a)), Box::new(Expr::Literal(b)))
    }

    #[test]
    fn add_renders_per_lexicon() {
        let eq = Equation::from_lhs(add(3, 5)).unwrap();
        assert_eq!(eq.text, "3 + 5 = 8");
        assert_eq!(eq.spoken, "three plus five equals eight");
    }

    #[test]
    fn fraction_renders_as_over() {
        let lhs = Expr::Frac(Box::new(Expr::Literal(8)), Box::new(Expr::Literal(2)));
        let eq = Equation::from_lhs(lhs).unwrap();
        assert_eq!(eq.text, "8 / 2 = 4");
        assert_eq!(eq.spoken, "eight over two equals four");
    }

    #[test]
    fn power_renders_as_to_the() {
        let lhs = Expr::Pow(Box::new(Expr::Literal(2)), Box::new(Expr::Literal(3)));
        let eq = Equation::from_lhs(lhs).unwrap();
        assert_eq!(eq.text, "2 ^ 3 = 8");
        assert_eq!(eq.spoken, "two to the three equals eight");
    }

    #[test]
    fn log_spoken_contains_log() {
        let lhs = Expr::Log(Box::new(Expr::Literal(8)));
        let eq = Equation::from_lhs(lhs).unwrap();
        assert_eq!(eq.text, "log 8 = 3");
        assert!(eq.spoken.split(' ').any(|w| w == "log"));
    }

    #[test]
    fn verbalize_rejects_out_of_range_literal() {
        assert_eq!(
            verbalize(&Expr::Literal(21)),
            Err(EqError::LiteralOutOfRange(21))
        );
    }

    #[test]
    fn depth_one_has_exactly_one_operator() {
        let cfg = EqConfig { depth_limit: 1, ..Default::default() };
        for seed in 0..200 {
            let eq = generate_equation(seed, &cfg);
            assert_eq!(eq.lhs.operator_count(), 1, "seed {seed}: {:?}", eq.lhs);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EqConfig::default();
        for seed in [0u64, 1, 42, u64::MAX] {
            assert_eq!(generate_equation(seed, &cfg), generate_equation(seed, &cfg));
            assert_eq!(generate_triple(seed, &cfg), generate_triple(seed, &cfg));
        }
    }

    #[test]
    fn every_operator_is_reachable() {
        let cfg = EqConfig::default();
        let mut seen = [false; 5];
        for seed in 0..500 {
            fn mark(e: &Expr, seen: &mut [bool; 5]) {
                match e {
                    Expr::Literal(_) => {}
                    Expr::Add(a, b) => {
                        seen[0] = true;
                        mark(a, seen);
                        mark(b, seen);
                    }
                    Expr::Sub(a, b) => {
                        seen[1] = true;
                        mark(a, seen);
                        mark(b, seen);
                    }
                    Expr::Frac(a, b) => {
                        seen[2] = true;
                        mark(a, seen);
                        mark(b, seen);
                    }
                    Expr::Pow(a, b) => {
                        seen[3] = true;
                        mark(a, seen);
                        mark(b, seen);
                    }
                    Expr::Log(a) => {
                        seen[4] = true;
                        mark(a, seen);
                    }
                }
            }
            mark(&generate_equation(seed, &cfg).lhs, &mut seen);
        }
        assert_eq!(seen, [true; 5], "some operator never generated");
    }

    #[test]
    fn equalities_hold_under_exact_rational_arithmetic() {
        // Independent oracle: evaluate with exact rationals (i128 num/den)
        // rather than the integer fast path used during construction.
        fn gcd(a: i128, b: i128) -> i128 {
            if b == 0 { a.abs() } else { gcd(b, a % b) }
        }
        fn reduce(n: i128, d: i128) -> (i128, i128) {
            let g = gcd(n, d).max(1);
            let sign = if d < 0 { -1 } else { 1 };
            (sign * n / g, sign * d / g)
        }
        fn rat(e: &Expr) -> (i128, i128) {
            match e {
                Expr::Literal(v) => (*v as i128, 1),
                Expr::Add(a, b) => {
                    let (an, ad) = rat(a);
                    let (bn, bd) = rat(b);
                    reduce(an * bd + bn * ad, ad * bd)
                }
                Expr::Sub(a, b) => {
                    let (an, ad) = rat(a);
                    let (bn, bd) = rat(b);
                    reduce(an * bd - bn * ad, ad * bd)
                }
                Expr::Frac(a, b) => {
                    let (an, ad) = rat(a);
                    let (bn, bd) = rat(b);
                    reduce(an * bd, ad * bn)
                }
                Expr::Pow(a, b) => {
                    let (an, ad) = rat(a);
                    let (bn, bd) = rat(b);
                    assert_eq!(ad, 1);
                    assert_eq!(bd, 1);
                    (an.pow(bn as u32), 1)
                }
                Expr::Log(a) => {
                    let (an, ad) = rat(a);
                    assert_eq!(ad, 1);
                    let mut v = an;
                    let mut e = 0;
                    while v > 1 {
                        assert_eq!(v % 2, 0, "log operand not a power of two");
                        v /= 2;
                        e += 1;
                    }
                    (e, 1)
                }
            }
        }
        let cfg = EqConfig::default();
        for seed in 0..500 {
            let eq = generate_equation(seed, &cfg);
            let (n, d) = rat(&eq.lhs);
            assert_eq!(n, eq.rhs as i128 * d, "seed {seed}: {} is false", eq.text);
        }
    }

    #[test]
    fn spoken_strings_use_lexicon_words_only() {
        let lex = lexicon();
        let cfg = EqConfig::default();
        for seed in 0..300 {
            let tr = generate_triple(seed, &cfg);
            for eq in &tr.equations {
                for w in eq.spoken_words() {
                    assert!(lex.contains(&w), "non-lexicon word {w:?}");
                    assert!(w.chars().all(|c| c.is_ascii_lowercase()));
                }
            }
        }
    }

    #[test]
    fn spoken_permutation_is_uniform() {
        // Chi-squared-style bound: each ordered pair within 3 sigma of 1/6.
        let cfg = EqConfig::default();
        let n = 60_000usize;
        let mut counts: HashMap<[usize; 2], usize> = HashMap::new();
        for seed in 0..n {
            let tr = generate_triple(seed as u64, &cfg);
            *counts.entry(tr.spoken_indices).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for (pair, c) in counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "pair {pair:?} frequency {freq} outside 3 sigma of 1/6"
            );
        }
    }

    #[test]
    fn triple_spoken_indices_are_distinct_and_in_range() {
        let cfg = EqConfig::default();
        for seed in 0..200 {
            let tr = generate_triple(seed, &cfg);
            let [a, b] = tr.spoken_indices;
            assert_ne!(a, b);
            assert!(a < 3 && b < 3);
        }
    }

    #[test]
    fn fig_style_spoken_order_is_preserved() {
        // Find a seed whose permutation draw is (2,1) and check the triple
        // reports it in spoken order, not sorted.
        let cfg = EqConfig::default();
        let tr = (0..1000)
            .map(|s| generate_triple(s, &cfg))
            .find(|t| t.spoken_indices == [2, 1])
            .expect("permutation (2,1) should appear within 1000 seeds");
        assert_eq!(tr.spoken_indices, [2, 1]);
        let transcript = tr.transcript();
        assert!(transcript.starts_with(&tr.equations[2].spoken));
        assert!(transcript.ends_with(&tr.equations[1].spoken));
    }
}
