//! Generated two-criteria corpora for desk-scale experiments.
//!
//! Each sentence is a random sequence of lexicon words, person names and
//! designated compound pairs. The fine criterion keeps every token apart
//! (`刘 国梁`, `世界 冠军`); the coarse criterion merges a surname with its
//! given name and each designated pair into one word (`刘国梁`, `世界冠军`).
//! Lexicon words share characters, so boundaries depend on context.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SURNAMES: &str = "刘王张李陈杨赵黄";
const GIVEN_NAME_CHARS: &str = "国梁伟芳娜敏静丽强磊洋艳勇辉杰娟涛明超秀霞平刚桂英华玉萍红";
const LEXICON_CHARS: &str = "赢得世界冠军我们他你的是在有个这来到时大地为子中说生会着去之过家学对可里后小么心多天而能好都然没日于起还发成事只作当想看文无开手十用主行方又如前所本见经头面公同三已老从动两长知民样现分将外但身些与高意进把法此实回二理美点月明其种声全工己话儿者向情部正名定女问力机给等几很业最间新什打便位因重被走电四第门相次东政海口使教西再平真听";
const FIXED_WORDS: [&str; 3] = ["赢得", "世界", "冠军"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub lexicon_size: usize,
    /// Number of distinct characters lexicon words are drawn from.
    pub char_pool: usize,
    pub compound_pairs: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Chance that a token slot holds a person name.
    pub name_prob: f64,
    /// Chance that a token slot holds a designated compound pair.
    pub compound_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sentences: 2000,
            lexicon_size: 120,
            char_pool: 90,
            compound_pairs: 20,
            min_tokens: 4,
            max_tokens: 10,
            name_prob: 0.15,
            compound_prob: 0.15,
            seed: 2020,
        }
    }
}

/// One generated token before a criterion is applied.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Word(String),
    Name { surname: String, given: String },
    Compound(String, String),
}

/// The same sentences under both criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub fine: Vec<Vec<String>>,
    pub coarse: Vec<Vec<String>>,
    pub lexicon: Vec<String>,
    pub compounds: Vec<(String, String)>,
}

impl SyntheticCorpus {
    /// Splits off the last `test_fraction` of sentences as the test set:
    /// `(train, test)` for each criterion, fine first.
    #[allow(clippy::type_complexity)]
    pub fn split(
        &self,
        test_fraction: f64,
    ) -> Result<(
        (Vec<Vec<String>>, Vec<Vec<String>>),
        (Vec<Vec<String>>, Vec<Vec<String>>),
    )> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::invalid(format!("test fraction {test_fraction} not in (0, 1)")));
        }
        let n = self.fine.len();
        let cut = n - ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let part = |v: &Vec<Vec<String>>| (v[..cut].to_vec(), v[cut..].to_vec());
        Ok((part(&self.fine), part(&self.coarse)))
    }
}

fn build_lexicon(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    let mut pool: Vec<char> = LEXICON_CHARS.chars().collect();
    let mut seen: BTreeSet<char> = SURNAMES.chars().chain(GIVEN_NAME_CHARS.chars()).collect();
    pool.retain(|c| seen.insert(*c));
    let fixed: BTreeSet<char> = FIXED_WORDS.iter().flat_map(|w| w.chars()).collect();
    if cfg.char_pool < fixed.len() || cfg.char_pool > pool.len() {
        return Err(Error::invalid(format!(
            "character pool must be between {} and {}",
            fixed.len(),
            pool.len()
        )));
    }
    let mut rest: Vec<char> = pool.into_iter().filter(|c| !fixed.contains(c)).collect();
    rest.shuffle(rng);
    let chars: Vec<char> = fixed.iter().copied().chain(rest).take(cfg.char_pool).collect();
    let mut words: BTreeSet<String> = FIXED_WORDS.iter().map(|w| w.to_string()).collect();
    let mut lexicon: Vec<String> = FIXED_WORDS.iter().map(|w| w.to_string()).collect();
    let mut attempts = 0;
    while lexicon.len() < cfg.lexicon_size {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid("character pool too small for the requested lexicon"));
        }
        let len = match rng.gen_range(0..20) {
            0..=2 => 1,
            3..=16 => 2,
            _ => 3,
        };
        let w: String = (0..len).map(|_| *chars.choose(rng).unwrap()).collect();
        if words.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    Ok(lexicon)
}

fn given_name(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.05) {
        return "国梁".to_string();
    }
    let pool: Vec<char> = GIVEN_NAME_CHARS.chars().collect();
    let len = if rng.gen_bool(0.6) { 2 } else { 1 };
    (0..len).map(|_| *pool.choose(rng).unwrap()).collect()
}

/// Deterministic corpus for a configuration.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens {
        return Err(Error::invalid("token range must satisfy 1 <= min <= max"));
    }
    if cfg.sentences == 0 {
        return Err(Error::invalid("at least one sentence is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = build_lexicon(cfg, &mut rng)?;
    let two_char: Vec<&String> = lexicon.iter().filter(|w| w.chars().count() == 2).collect();
    let mut compounds = vec![("世界".to_string(), "冠军".to_string())];
    let mut seen: BTreeSet<(String, String)> = compounds.iter().cloned().collect();
    while compounds.len() < cfg.compound_pairs {
        let a = two_char.choose(&mut rng).unwrap().to_string();
        let b = two_char.choose(&mut rng).unwrap().to_string();
        if a != b && seen.insert((a.clone(), b.clone())) {
            compounds.push((a, b));
        }
    }
    let compound_set: BTreeSet<(String, String)> = compounds.iter().cloned().collect();
    let surnames: Vec<char> = SURNAMES.chars().collect();
    let mut fine = Vec::with_capacity(cfg.sentences);
    let mut coarse = Vec::with_capacity(cfg.sentences);
    for _ in 0..cfg.sentences {
        let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let r: f64 = rng.gen();
            let tok = if r < cfg.name_prob {
                Token::Name {
                    surname: surnames.choose(&mut rng).unwrap().to_string(),
                    given: given_name(&mut rng),
                }
            } else if r < cfg.name_prob + cfg.compound_prob {
                let (a, b) = compounds.choose(&mut rng).unwrap().clone();
                Token::Compound(a, b)
            } else {
                Token::Word(lexicon.choose(&mut rng).unwrap().clone())
            };
            tokens.push(tok);
        }
        let mut f = Vec::new();
        let mut c: Vec<String> = Vec::new();
        for t in tokens {
            match t {
                Token::Word(w) => {
                    // adjacent words that happen to form a designated pair merge too
                    let merge = c.last().zip(f.last()).is_some_and(|(lc, lf): (&String, &String)| {
                        lc == lf && compound_set.contains(&(lf.clone(), w.clone()))
                    });
                    f.push(w.clone());
                    if merge {
                        c.last_mut().unwrap().push_str(&w);
                    } else {
                        c.push(w);
                    }
                }
                Token::Name { surname, given } => {
                    c.push(format!("{surname}{given}"));
                    f.push(surname);
                    f.push(given);
                }
                Token::Compound(a, b) => {
                    c.push(format!("{a}{b}"));
                    f.push(a);
                    f.push(b);
                }
            }
        }
        fine.push(f);
        coarse.push(c);
    }
    Ok(SyntheticCorpus {
        fine,
        coarse,
        lexicon,
        compounds,
    })
}

/// The fixed example sentence under both criteria.
pub fn example_sentence() -> (Vec<&'static str>, Vec<&'static str>) {
    (
        vec!["刘", "国梁", "赢得", "世界", "冠军"],
        vec!["刘国梁", "赢得", "世界冠军"],
    )
}
