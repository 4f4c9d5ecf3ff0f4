//! Fuzzy-inference merge-position selector.
//!
//! The rule base is plain text (see `data/merge_fuzzy_v1.rules` for the
//! grammar) so a different selector can be swapped in by pointing the
//! scenario at another file.

use std::path::Path;

use crate::error::{Error, Result};

const BUILTIN_RULES: &str = include_str!("../../data/merge_fuzzy_v1.rules");

/// Per-slot inputs to the selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotFeatures {
    pub offset: f64,
    pub approach_speed: f64,
    pub rear_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Triangle {
    pub fn membership(&self, x: f64) -> f64 {
        let Triangle { a, b, c } = *self;
        if x < a || x > c {
            0.0
        } else if x == b {
            1.0
        } else if x < b {
            if b == a {
                1.0
            } else {
                (x - a) / (b - a)
            }
        } else if c == b {
            1.0
        } else {
            (c - x) / (c - b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Variable {
    sets: Vec<(String, Triangle)>,
}

impl Variable {
    fn clamp(&self, x: f64) -> f64 {
        let lo = self
            .sets
            .iter()
            .map(|(_, t)| t.a)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .sets
            .iter()
            .map(|(_, t)| t.c)
            .fold(f64::NEG_INFINITY, f64::max);
        x.clamp(lo, hi)
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.sets.iter().position(|(n, _)| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Rule {
    /// Set index per input, `None` for a wildcard.
    antecedents: [Option<usize>; 3],
    consequent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyRuleBase {
    pub version: u32,
    inputs: [Variable; 3],
    outputs: Vec<(String, f64)>,
    rules: Vec<Rule>,
}

const INPUT_NAMES: [&str; 3] = ["offset", "speed", "gap"];

impl FuzzyRuleBase {
    /// The rule base shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_RULES).expect("shipped rule base parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut inputs: [Variable; 3] = Default::default();
        let mut outputs: Vec<(String, f64)> = Vec::new();
        let mut raw_rules: Vec<(usize, Vec<String>)> = Vec::new();

        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Config(format!("rule base line {lineno}: {msg}"));
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(&format!("'{s}' is not a number")))
            };
            match tokens[0] {
                "version" if tokens.len() == 2 => {
                    version = Some(tokens[1].parse::<u32>().map_err(|_| bad("bad version"))?);
                }
                "input" if tokens.len() == 6 => {
                    let var = INPUT_NAMES
                        .iter()
                        .position(|n| *n == tokens[1])
                        .ok_or_else(|| bad(&format!("unknown input '{}'", tokens[1])))?;
                    let tri = Triangle {
                        a: num(tokens[3])?,
                        b: num(tokens[4])?,
                        c: num(tokens[5])?,
                    };
                    if !(tri.a <= tri.b && tri.b <= tri.c) || tri.a == tri.c {
                        return Err(bad("triangle needs a <= b <= c with a < c"));
                    }
                    if inputs[var].index(tokens[2]).is_some() {
                        return Err(bad(&format!("duplicate set '{}'", tokens[2])));
                    }
                    inputs[var].sets.push((tokens[2].to_string(), tri));
                }
                "output" if tokens.len() == 3 => {
                    outputs.push((tokens[1].to_string(), num(tokens[2])?));
                }
                "rule" if tokens.len() == 6 && tokens[4] == "->" => {
                    raw_rules.push((lineno, tokens[1..].iter().map(|s| s.to_string()).collect()));
                }
                _ => return Err(bad(&format!("cannot parse '{line}'"))),
            }
        }

        let version =
            version.ok_or_else(|| Error::Config("rule base has no version line".into()))?;
        if let Some(i) = inputs.iter().position(|v| v.sets.is_empty()) {
            return Err(Error::Config(format!(
                "rule base defines no sets for input '{}'",
                INPUT_NAMES[i]
            )));
        }
        let mut rules = Vec::with_capacity(raw_rules.len());
        for (lineno, toks) in raw_rules {
            let mut antecedents = [None; 3];
            for (var, tok) in toks[..3].iter().enumerate() {
                if tok != "*" {
                    antecedents[var] = Some(inputs[var].index(tok).ok_or_else(|| {
                        Error::Config(format!(
                            "rule base line {lineno}: unknown {} set '{tok}'",
                            INPUT_NAMES[var]
                        ))
                    })?);
                }
            }
            let consequent = outputs
                .iter()
                .position(|(n, _)| *n == toks[4])
                .ok_or_else(|| {
                    Error::Config(format!(
                        "rule base line {lineno}: unknown output '{}'",
                        toks[4]
                    ))
                })?;
            rules.push(Rule {
                antecedents,
                consequent,
            });
        }
        if rules.is_empty() {
            return Err(Error::Config("rule base has no rules".into()));
        }
        Ok(Self {
            version,
            inputs,
            outputs,
            rules,
        })
    }

    /// Returns a copy with every output centroid multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for (_, c) in &mut out.outputs {
            *c *= factor;
        }
        out
    }

    /// Defuzzified fitness of one slot; 0 when no rule fires.
    pub fn score(&self, f: &SlotFeatures) -> f64 {
        let values = [f.offset, f.approach_speed, f.rear_gap];
        let degrees: Vec<Vec<f64>> = self
            .inputs
            .iter()
            .zip(values)
            .map(|(var, x)| {
                let x = var.clamp(x);
                var.sets.iter().map(|(_, t)| t.membership(x)).collect()
            })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for rule in &self.rules {
            let strength = rule
                .antecedents
                .iter()
                .enumerate()
                .map(|(var, set)| set.map_or(1.0, |s| degrees[var][s]))
                .fold(1.0, f64::min);
            num += strength * self.outputs[rule.consequent].1;
            den += strength;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    pub fn scores(&self, slots: &[SlotFeatures]) -> Vec<f64> {
        slots.iter().map(|s| self.score(s)).collect()
    }

    /// Index of the best-scoring slot; ties go to the smaller index.
    pub fn select(&self, slots: &[SlotFeatures]) -> Result<usize> {
        argmax(&self.scores(slots)).ok_or_else(|| Error::Protocol("no merge slots to score".into()))
    }
}

/// Scores within a relative 1e-9 of each other count as tied so that rounding
/// in the weighted mean cannot reorder equal slots.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s - b > 1e-9 * s.abs().max(b.abs())) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slot(offset: f64, approach_speed: f64, rear_gap: f64) -> SlotFeatures {
        SlotFeatures {
            offset,
            approach_speed,
            rear_gap,
        }
    }

    #[test]
    fn triangle_shapes() {
        let t = Triangle {
            a: 10.0,
            b: 30.0,
            c: 50.0,
        };
        assert_eq!(t.membership(20.0), 0.5);
        assert_eq!(t.membership(30.0), 1.0);
        assert_eq!(t.membership(45.0), 0.25);
        assert_eq!(t.membership(5.0), 0.0);
        let left = Triangle {
            a: 0.0,
            b: 0.0,
            c: 20.0,
        };
        assert_eq!(left.membership(0.0), 1.0);
        assert_eq!(left.membership(5.0), 0.75);
        let right = Triangle {
            a: 40.0,
            b: 80.0,
            c: 80.0,
        };
        assert_eq!(right.membership(80.0), 1.0);
    }

    #[test]
    fn hand_evaluated_scores() {
        let rb = FuzzyRuleBase::builtin();
        assert_eq!(rb.version, 1);
        // 5 m off the slot, matched speed, wide rear gap: only near∧matched∧adequate fires (0.75)
        assert!((rb.score(&slot(5.0, 0.0, 40.0)) - 0.95).abs() < 1e-12);
        // 20 m rear gap: tight 0.2, adequate 1/3 → (0.95/3 + 0.7·0.2) / (1/3 + 0.2)
        assert!((rb.score(&slot(5.0, 0.0, 20.0)) - 0.85625).abs() < 1e-12);
        // medium 0.5, faster 0.5, tight 0.4, adequate 1/6
        let expected = (0.95 / 6.0 + 0.7 * 0.4) / (1.0 / 6.0 + 0.4);
        assert!((rb.score(&slot(20.0, 3.0, 15.0)) - expected).abs() < 1e-12);
        assert!((expected - 0.773_529_411_764_705_9).abs() < 1e-12);
    }

    #[test]
    fn near_head_matched_picks_leader_slot() {
        let rb = FuzzyRuleBase::builtin();
        let slots = [
            slot(0.0, 0.0, 40.0),
            slot(20.0, 0.0, 40.0),
            slot(40.0, 0.0, 40.0),
        ];
        assert_eq!(rb.select(&slots).unwrap(), 0);
    }

    #[test]
    fn identical_slots_pick_first() {
        let rb = FuzzyRuleBase::builtin();
        assert_eq!(rb.select(&[slot(12.0, 1.0, 18.0); 4]).unwrap(), 0);
        assert!(rb.select(&[]).is_err());
    }

    #[test]
    fn infinite_rear_gap_saturates() {
        let rb = FuzzyRuleBase::builtin();
        assert_eq!(
            rb.score(&slot(5.0, 0.0, f64::INFINITY)),
            rb.score(&slot(5.0, 0.0, 40.0))
        );
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = FuzzyRuleBase::parse("version 1\ninput offset near 0 0 x\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = FuzzyRuleBase::parse("version 1\ninput offset near 0 0 1\ninput speed s 0 0 1\ninput gap g 0 0 1\noutput o 1\nrule near s bogus -> o\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(FuzzyRuleBase::parse("input offset near 0 0 1\n").is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_positive_rescaling(
            feats in prop::collection::vec((0.0f64..90.0, -8.0f64..8.0, 0.0f64..60.0), 1..8),
            factor in 0.01f64..100.0,
        ) {
            let rb = FuzzyRuleBase::builtin();
            let slots: Vec<SlotFeatures> = feats.iter().map(|&(o, s, g)| slot(o, s, g)).collect();
            let scaled = rb.scaled(factor);
            prop_assert_eq!(argmax(&rb.scores(&slots)), argmax(&scaled.scores(&slots)));
            prop_assert_eq!(rb.select(&slots).unwrap(), scaled.select(&slots).unwrap());
        }
    }
}
