//! Synthetic tasks in the two reward regimes: a rule-based 0/1
//! extract-and-match arithmetic task (objective) and a lexicon sentiment
//! scorer (subjective), plus corpus/lexicon file ingestion.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::mdp::{TokenId, TokenSeq, Vocab, EOS_SYMBOL, PAD_SYMBOL, SEP_SYMBOL};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("line {line}: unknown symbol {symbol:?}")]
    ParseError { line: usize, symbol: String },
    #[error("line {line}: missing TAB-separated answer")]
    MissingAnswer { line: usize },
    #[error("prompts exceed the maximum length {max}: lines {lines:?}")]
    PromptTooLong { max: usize, lines: Vec<usize> },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("line {line}: bad weight {value:?}")]
    BadWeight { line: usize, value: String },
    #[error("vocabulary is missing symbol {0:?}")]
    MissingSymbol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Task reward r(s0, a): a pure function of the query and the action.
pub trait TaskReward: Sync + Send {
    fn reward(&self, query: &TokenSeq, action: &TokenSeq) -> f64;
}

/// A prompt paired with the token subsequence that counts as the answer.
#[derive(Debug, Clone)]
pub struct ObjectiveInstance {
    pub prompt: TokenSeq,
    pub ground_truth: Vec<TokenId>,
}

/// Mean lexicon weight over the action's real tokens (terminal eos excluded,
/// unknown tokens score 0), clamped to [-1, 1]. An empty completion scores 0.
pub fn lexicon_score(action: &TokenSeq, lexicon: &HashMap<TokenId, f64>) -> f64 {
    let toks = action.real_tokens_without_eos();
    if toks.is_empty() {
        return 0.0;
    }
    let sum: f64 = toks
        .iter()
        .map(|t| lexicon.get(t).copied().unwrap_or(0.0))
        .sum();
    (sum / toks.len() as f64).clamp(-1.0, 1.0)
}

/// Returns 1 iff the last maximal run of digit-class tokens in the action
/// equals `truth` exactly; 0 otherwise (including when no digit appears).
pub fn extract_and_match(
    action: &TokenSeq,
    truth: &[TokenId],
    is_digit: &dyn Fn(TokenId) -> bool,
) -> f64 {
    debug_assert!(!truth.is_empty());
    let toks = action.real_tokens();
    let mut last_run: Option<(usize, usize)> = None;
    let mut run_start = None;
    for (i, &t) in toks.iter().enumerate() {
        if is_digit(t) {
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else if let Some(s) = run_start.take() {
            last_run = Some((s, i));
        }
    }
    if let Some(s) = run_start {
        last_run = Some((s, toks.len()));
    }
    match last_run {
        Some((s, e)) if &toks[s..e] == truth => 1.0,
        _ => 0.0,
    }
}

const ARITH_FILLERS: [&str; 4] = ["so", "is", "then", "ok"];

/// Vocabulary for the arithmetic task: specials, digits 0-9, operator
/// symbols, and a small filler set (V = 19).
pub fn arith_vocab() -> Vocab {
    let mut symbols = vec![
        PAD_SYMBOL.to_string(),
        EOS_SYMBOL.to_string(),
        SEP_SYMBOL.to_string(),
    ];
    for d in 0..10 {
        symbols.push(d.to_string());
    }
    symbols.push("+".to_string());
    symbols.push("=".to_string());
    symbols.extend(ARITH_FILLERS.iter().map(|s| s.to_string()));
    Vocab::new(symbols).expect("static table is valid")
}

const LEX_POSITIVE: [&str; 4] = ["good", "great", "fun", "warm"];
const LEX_NEGATIVE: [&str; 4] = ["bad", "dull", "gray", "cold"];
const LEX_NEUTRAL: [&str; 8] = ["the", "a", "movie", "plot", "it", "was", "and", "very"];

/// Vocabulary for the lexicon task: specials plus a tiny review word list.
pub fn lexicon_vocab() -> Vocab {
    let mut symbols = vec![
        PAD_SYMBOL.to_string(),
        EOS_SYMBOL.to_string(),
        SEP_SYMBOL.to_string(),
    ];
    symbols.extend(LEX_POSITIVE.iter().map(|s| s.to_string()));
    symbols.extend(LEX_NEGATIVE.iter().map(|s| s.to_string()));
    symbols.extend(LEX_NEUTRAL.iter().map(|s| s.to_string()));
    Vocab::new(symbols).expect("static table is valid")
}

/// The +/-1 weights over the lexicon vocabulary.
pub fn default_lexicon(vocab: &Vocab) -> HashMap<TokenId, f64> {
    let mut m = HashMap::new();
    for w in LEX_POSITIVE {
        m.insert(vocab.id_of(w).expect("lexicon vocab"), 1.0);
    }
    for w in LEX_NEGATIVE {
        m.insert(vocab.id_of(w).expect("lexicon vocab"), -1.0);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Subjective,
    Objective,
}

#[derive(Debug, Clone)]
enum TaskKind {
    /// Single-digit addition chains; the answer is the digit run of the sum.
    Arith {
        difficulty: u8,
        corpus: Option<Vec<ObjectiveInstance>>,
    },
    /// Sentiment-style completion scored by a token lexicon.
    Lexicon {
        lexicon: HashMap<TokenId, f64>,
        prompts: Option<Vec<TokenSeq>>,
    },
}

/// A task: vocabulary, prompt source, reward rule, and the sequence-length
/// caps M (state capacity) and N (action length).
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub vocab: Vocab,
    pub max_prompt_len: usize,
    pub max_action_len: usize,
    kind: TaskKind,
    digit_ids: Vec<TokenId>,
}

impl TaskSpec {
    pub fn arith(difficulty: u8, max_action_len: usize) -> Self {
        assert!(
            (1..=3).contains(&difficulty),
            "difficulty must be 1, 2, or 3"
        );
        let vocab = arith_vocab();
        let digit_ids = (0..10)
            .map(|d| vocab.id_of(&d.to_string()).unwrap())
            .collect();
        // longest prompt (difficulty 3) is "d + d + d =", plus room for a
        // knowledge-transfer reference and the generated action
        let max_prompt_len = 6 + 2 + max_action_len + 2 * max_action_len;
        Self {
            name: format!("arith{difficulty}"),
            vocab,
            max_prompt_len,
            max_action_len,
            kind: TaskKind::Arith {
                difficulty,
                corpus: None,
            },
            digit_ids,
        }
    }

    pub fn lexicon(max_action_len: usize) -> Self {
        let vocab = lexicon_vocab();
        let lexicon = default_lexicon(&vocab);
        let max_prompt_len = 8 + 2 + max_action_len + 2 * max_action_len;
        Self {
            name: "lexicon".to_string(),
            vocab,
            max_prompt_len,
            max_action_len,
            kind: TaskKind::Lexicon {
                lexicon,
                prompts: None,
            },
            digit_ids: Vec::new(),
        }
    }

    /// Replaces the generator with prompts (and answers, for the objective
    /// task) read from a corpus file.
    pub fn with_corpus(mut self, path: &Path) -> Result<Self, TaskError> {
        match &mut self.kind {
            TaskKind::Arith { corpus, .. } => {
                let entries = load_corpus(path, &self.vocab, self.max_prompt_len, true)?;
                *corpus = Some(
                    entries
                        .into_iter()
                        .map(|e| ObjectiveInstance {
                            prompt: e.prompt,
                            ground_truth: e.truth.expect("answers required"),
                        })
                        .collect(),
                );
            }
            TaskKind::Lexicon { prompts, .. } => {
                let entries = load_corpus(path, &self.vocab, self.max_prompt_len, false)?;
                *prompts = Some(entries.into_iter().map(|e| e.prompt).collect());
            }
        }
        Ok(self)
    }

    /// Replaces the built-in lexicon weights (subjective task only).
    pub fn with_lexicon_file(mut self, path: &Path) -> Result<Self, TaskError> {
        if let TaskKind::Lexicon { lexicon, .. } = &mut self.kind {
            *lexicon = load_lexicon(path, &self.vocab)?;
        }
        Ok(self)
    }

    pub fn reward_kind(&self) -> RewardKind {
        match self.kind {
            TaskKind::Arith { .. } => RewardKind::Objective,
            TaskKind::Lexicon { .. } => RewardKind::Subjective,
        }
    }

    pub fn is_digit(&self, t: TokenId) -> bool {
        self.digit_ids.contains(&t)
    }

    fn digit_token(&self, d: u32) -> TokenId {
        self.digit_ids[d as usize]
    }

    /// Token encoding of a number's digit string.
    pub fn number_tokens(&self, n: u32) -> Vec<TokenId> {
        n.to_string()
            .chars()
            .map(|c| self.digit_token(c.to_digit(10).unwrap()))
            .collect()
    }

    // Difficulty 1 keeps operands in 0..=4 so every sum is a single digit and
    // the instance space stays small enough to master in a short run.
    fn operand_pairs(difficulty: u8) -> Vec<(u32, u32)> {
        match difficulty {
            1 => (0..4u32)
                .flat_map(|a| (0..4u32).map(move |b| (a, b)))
                .collect(),
            _ => (0..10u32)
                .flat_map(|a| (0..10u32).map(move |b| (a, b)))
                .collect(),
        }
    }

    /// Draws one arithmetic instance. Difficulty 1 keeps sums single-digit
    /// (uniform over the admissible ordered pairs), difficulty 2 allows
    /// two-digit sums, difficulty 3 adds a third operand.
    pub fn gen_arithmetic_instance(&self, rng: &mut impl Rng, difficulty: u8) -> ObjectiveInstance {
        let plus = self.vocab.id_of("+").expect("arith vocab");
        let eq = self.vocab.id_of("=").expect("arith vocab");
        let (operands, sum) = match difficulty {
            1 | 2 => {
                let pairs = Self::operand_pairs(difficulty);
                let (a, b) = pairs[rng.gen_range(0..pairs.len())];
                (vec![a, b], a + b)
            }
            3 => {
                let a = rng.gen_range(0..10u32);
                let b = rng.gen_range(0..10u32);
                let c = rng.gen_range(0..10u32);
                (vec![a, b, c], a + b + c)
            }
            _ => panic!("difficulty must be 1, 2, or 3"),
        };
        let mut toks = Vec::new();
        for (i, &x) in operands.iter().enumerate() {
            if i > 0 {
                toks.push(plus);
            }
            toks.push(self.digit_token(x));
        }
        toks.push(eq);
        let prompt = TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len)
            .expect("prompt fits by construction");
        ObjectiveInstance {
            prompt,
            ground_truth: self.number_tokens(sum),
        }
    }

    /// Parses an arithmetic prompt back into its answer tokens. Returns None
    /// for queries that are not of the "d + d [+ d] =" form.
    pub fn answer_for_query(&self, query: &TokenSeq) -> Option<Vec<TokenId>> {
        match &self.kind {
            TaskKind::Arith {
                corpus: Some(entries),
                ..
            } => entries
                .iter()
                .find(|e| e.prompt.real_tokens() == query.real_tokens())
                .map(|e| e.ground_truth.clone()),
            TaskKind::Arith { .. } => {
                let plus = self.vocab.id_of("+")?;
                let eq = self.vocab.id_of("=")?;
                let toks = query.real_tokens();
                let upto = toks.iter().position(|&t| t == eq)?;
                let mut sum: u32 = 0;
                for group in toks[..upto].split(|&t| t == plus) {
                    if group.is_empty() || !group.iter().all(|&t| self.is_digit(t)) {
                        return None;
                    }
                    let mut val: u32 = 0;
                    for &t in group {
                        let d = self.digit_ids.iter().position(|&x| x == t)? as u32;
                        val = val * 10 + d;
                    }
                    sum += val;
                }
                Some(self.number_tokens(sum))
            }
            TaskKind::Lexicon { .. } => None,
        }
    }

    /// Draws a batch of training queries. Difficulty-1 batches cycle through
    /// the full (shuffled) instance set so every operand pair appears equally
    /// often, the way epochs over a finite query dataset would.
    pub fn sample_queries(&self, n: usize, rng: &mut impl Rng) -> Vec<TokenSeq> {
        match &self.kind {
            TaskKind::Arith { difficulty, corpus } => match corpus {
                Some(entries) => (0..n)
                    .map(|_| entries[rng.gen_range(0..entries.len())].prompt.clone())
                    .collect(),
                None if *difficulty == 1 => {
                    let mut out = Vec::with_capacity(n);
                    while out.len() < n {
                        let mut block = self.eval_instances(usize::MAX, rng);
                        block.shuffle(rng);
                        for inst in block {
                            if out.len() == n {
                                break;
                            }
                            out.push(inst.prompt);
                        }
                    }
                    out
                }
                None => (0..n)
                    .map(|_| self.gen_arithmetic_instance(rng, *difficulty).prompt)
                    .collect(),
            },
            TaskKind::Lexicon { prompts, .. } => match prompts {
                Some(list) => (0..n)
                    .map(|_| list[rng.gen_range(0..list.len())].clone())
                    .collect(),
                None => (0..n)
                    .map(|_| {
                        // 2-8 token snippets over the non-special symbols
                        let len = rng.gen_range(2..=8);
                        let lo = 3; // first non-special id
                        let toks: Vec<TokenId> = (0..len)
                            .map(|_| rng.gen_range(lo..self.vocab.size()))
                            .collect();
                        TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len).unwrap()
                    })
                    .collect(),
            },
        }
    }

    /// One reference-context example whose completion echoes the (random)
    /// reference: teaches generic in-context reuse, no task knowledge.
    pub fn echo_sample(&self, rng: &mut impl Rng) -> (TokenSeq, Vec<TokenId>) {
        let sep = self.vocab.sep_id();
        match &self.kind {
            TaskKind::Arith { difficulty, .. } => {
                let inst = self.gen_arithmetic_instance(rng, *difficulty);
                let width = match difficulty {
                    1 => 1,
                    _ => rng.gen_range(1..=2),
                };
                let reference: Vec<TokenId> = (0..width)
                    .map(|_| self.digit_ids[rng.gen_range(0..10)])
                    .collect();
                let mut toks = inst.prompt.real_tokens().to_vec();
                toks.push(sep);
                toks.extend_from_slice(&reference);
                toks.push(sep);
                let prompt =
                    TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len).unwrap();
                let mut cont = reference;
                cont.push(self.vocab.eos_id());
                (prompt, cont)
            }
            TaskKind::Lexicon { .. } => {
                let base = self.sample_queries(1, rng).pop().unwrap();
                let len = rng.gen_range(1..self.max_action_len.max(2));
                let lo = 3;
                let reference: Vec<TokenId> = (0..len)
                    .map(|_| rng.gen_range(lo..self.vocab.size()))
                    .collect();
                let mut toks = base.real_tokens().to_vec();
                toks.push(sep);
                toks.extend_from_slice(&reference);
                toks.push(sep);
                let prompt =
                    TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len).unwrap();
                let mut cont = reference;
                cont.push(self.vocab.eos_id());
                (prompt, cont)
            }
        }
    }

    /// One supervised example teaching response FORMAT, not task knowledge:
    /// a task prompt (sometimes wrapped in the reference template) paired
    /// with a well-formed but content-random completion ending in eos.
    pub fn pretrain_sample(&self, rng: &mut impl Rng) -> (TokenSeq, Vec<TokenId>) {
        let sep = self.vocab.sep_id();
        match &self.kind {
            TaskKind::Arith { difficulty, .. } => {
                let inst = self.gen_arithmetic_instance(rng, *difficulty);
                let width = match difficulty {
                    1 => 1,
                    _ => rng.gen_range(1..=2),
                };
                // content-random digits; never the true sum
                let digits: Vec<TokenId> = (0..width)
                    .map(|_| self.digit_ids[rng.gen_range(0..10)])
                    .collect();
                let mut cont = digits;
                cont.push(self.vocab.eos_id());
                if rng.gen_bool(0.3) {
                    // reference-wrapped variant: q <sep> d.. <sep>, completed
                    // with fresh random digits
                    let mut toks = inst.prompt.real_tokens().to_vec();
                    toks.push(sep);
                    for _ in 0..width {
                        toks.push(self.digit_ids[rng.gen_range(0..10)]);
                    }
                    toks.push(sep);
                    let prompt =
                        TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len).unwrap();
                    (prompt, cont)
                } else {
                    (inst.prompt, cont)
                }
            }
            TaskKind::Lexicon { .. } => {
                let prompt = self.sample_queries(1, rng).pop().unwrap();
                let len = rng.gen_range(1..self.max_action_len.max(2));
                let lo = 3;
                let words: Vec<TokenId> = (0..len)
                    .map(|_| rng.gen_range(lo..self.vocab.size()))
                    .collect();
                let mut cont = words.clone();
                cont.push(self.vocab.eos_id());
                if rng.gen_bool(0.3) {
                    let mut toks = prompt.real_tokens().to_vec();
                    toks.push(sep);
                    for _ in 0..len {
                        toks.push(rng.gen_range(lo..self.vocab.size()));
                    }
                    toks.push(sep);
                    let prompt =
                        TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len).unwrap();
                    (prompt, cont)
                } else {
                    (prompt, cont)
                }
            }
        }
    }

    /// Evaluation instances for the objective task. Difficulty 1 enumerates
    /// every admissible operand pair; higher difficulties sample `limit`.
    pub fn eval_instances(&self, limit: usize, rng: &mut impl Rng) -> Vec<ObjectiveInstance> {
        match &self.kind {
            TaskKind::Arith {
                difficulty: 1,
                corpus: None,
            } => {
                let plus = self.vocab.id_of("+").unwrap();
                let eq = self.vocab.id_of("=").unwrap();
                Self::operand_pairs(1)
                    .into_iter()
                    .map(|(a, b)| {
                        let toks = vec![self.digit_token(a), plus, self.digit_token(b), eq];
                        ObjectiveInstance {
                            prompt: TokenSeq::from_tokens(&self.vocab, &toks, self.max_prompt_len)
                                .unwrap(),
                            ground_truth: self.number_tokens(a + b),
                        }
                    })
                    .collect()
            }
            TaskKind::Arith { difficulty, corpus } => match corpus {
                Some(entries) => entries.iter().take(limit).cloned().collect(),
                None => (0..limit)
                    .map(|_| self.gen_arithmetic_instance(rng, *difficulty))
                    .collect(),
            },
            TaskKind::Lexicon { .. } => Vec::new(),
        }
    }
}

impl TaskReward for TaskSpec {
    fn reward(&self, query: &TokenSeq, action: &TokenSeq) -> f64 {
        match &self.kind {
            TaskKind::Arith { .. } => match self.answer_for_query(query) {
                Some(truth) => extract_and_match(action, &truth, &|t| self.is_digit(t)),
                None => 0.0,
            },
            TaskKind::Lexicon { lexicon, .. } => lexicon_score(action, lexicon),
        }
    }
}

/// One parsed corpus line.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub prompt: TokenSeq,
    pub truth: Option<Vec<TokenId>>,
}

fn tokenize_symbols(text: &str, vocab: &Vocab, line: usize) -> Result<Vec<TokenId>, TaskError> {
    text.split_whitespace()
        .map(|s| {
            vocab.id_of(s).ok_or_else(|| TaskError::ParseError {
                line,
                symbol: s.to_string(),
            })
        })
        .collect()
}

/// Joins token ids back into a whitespace-normalized line.
pub fn detokenize(tokens: &[TokenId], vocab: &Vocab) -> String {
    tokens
        .iter()
        .map(|&t| vocab.symbol(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads a corpus: one prompt per UTF-8 line, whitespace-separated symbols;
/// objective corpora carry a TAB-separated answer. Blank lines are skipped.
/// Prompts longer than `max_prompt_len` are rejected with their line numbers.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocab,
    max_prompt_len: usize,
    expect_truth: bool,
) -> Result<Vec<CorpusEntry>, TaskError> {
    let file = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    let mut too_long = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let raw = line?;
        if raw.trim().is_empty() {
            continue;
        }
        let (prompt_text, truth_text) = match raw.split_once('\t') {
            Some((p, t)) => (p, Some(t)),
            None => (raw.as_str(), None),
        };
        let prompt_toks = tokenize_symbols(prompt_text, vocab, line_no)?;
        if prompt_toks.len() > max_prompt_len {
            too_long.push(line_no);
            continue;
        }
        let truth = match (expect_truth, truth_text) {
            (true, Some(t)) => Some(tokenize_symbols(t, vocab, line_no)?),
            (true, None) => return Err(TaskError::MissingAnswer { line: line_no }),
            (false, _) => None,
        };
        let prompt = TokenSeq::from_tokens(vocab, &prompt_toks, max_prompt_len)
            .expect("length checked above");
        entries.push(CorpusEntry { prompt, truth });
    }
    if !too_long.is_empty() {
        return Err(TaskError::PromptTooLong {
            max: max_prompt_len,
            lines: too_long,
        });
    }
    if entries.is_empty() {
        return Err(TaskError::EmptyCorpus);
    }
    Ok(entries)
}

/// Reads "symbol TAB weight" lines into a token->weight map.
pub fn load_lexicon(path: &Path, vocab: &Vocab) -> Result<HashMap<TokenId, f64>, TaskError> {
    let file = std::fs::File::open(path)?;
    let mut out = HashMap::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let raw = line?;
        if raw.trim().is_empty() {
            continue;
        }
        let (sym, w) = raw.split_once('\t').ok_or(TaskError::BadWeight {
            line: line_no,
            value: raw.clone(),
        })?;
        let id = vocab
            .id_of(sym.trim())
            .ok_or_else(|| TaskError::ParseError {
                line: line_no,
                symbol: sym.to_string(),
            })?;
        let weight: f64 = w.trim().parse().map_err(|_| TaskError::BadWeight {
            line: line_no,
            value: w.to_string(),
        })?;
        out.insert(id, weight);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn lexicon_score_cases() {
        let v = lexicon_vocab();
        let lex = default_lexicon(&v);
        let good = v.id_of("good").unwrap();
        let bad = v.id_of("bad").unwrap();
        let the = v.id_of("the").unwrap();
        let seq = |toks: &[TokenId]| TokenSeq::from_tokens(&v, toks, 10).unwrap();
        // all-neutral tokens
        assert_eq!(lexicon_score(&seq(&[the, the]), &lex), 0.0);
        // (1 + 1 - 1) / 3
        assert!((lexicon_score(&seq(&[good, good, bad]), &lex) - 1.0 / 3.0).abs() < 1e-15);
        // empty completion (immediate eos)
        assert_eq!(lexicon_score(&seq(&[v.eos_id()]), &lex), 0.0);
        // trailing eos does not dilute the mean
        assert!(
            (lexicon_score(&seq(&[good, good, bad, v.eos_id()]), &lex) - 1.0 / 3.0).abs() < 1e-15
        );
    }

    #[test]
    fn extract_and_match_cases() {
        let t = TaskSpec::arith(1, 8);
        let v = &t.vocab;
        let d = |n: u32| t.number_tokens(n)[0];
        let eq = v.id_of("=").unwrap();
        let filler = v.id_of("so").unwrap();
        let seq = |toks: &[TokenId]| TokenSeq::from_tokens(v, toks, 12).unwrap();
        let dig = |x: TokenId| t.is_digit(x);
        // "... = 4 2 eos" with truth 42
        let truth42 = vec![d(4), d(2)];
        assert_eq!(
            extract_and_match(&seq(&[eq, d(4), d(2), v.eos_id()]), &truth42, &dig),
            1.0
        );
        // two runs; only the final one counts
        let a = seq(&[d(1), d(3), filler, d(4), d(2)]);
        assert_eq!(extract_and_match(&a, &[d(1), d(3)], &dig), 0.0);
        assert_eq!(extract_and_match(&a, &truth42, &dig), 1.0);
        // no digits at all
        assert_eq!(
            extract_and_match(&seq(&[filler, filler]), &truth42, &dig),
            0.0
        );
        // appending non-digits after the final run changes nothing
        let b = seq(&[d(4), d(2), filler, filler]);
        assert_eq!(extract_and_match(&b, &truth42, &dig), 1.0);
    }

    #[test]
    fn arithmetic_instances() {
        let t = TaskSpec::arith(1, 8);
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            let inst = t.gen_arithmetic_instance(&mut rng, 1);
            assert_eq!(inst.ground_truth.len(), 1); // sums stay single-digit
            assert_eq!(t.answer_for_query(&inst.prompt).unwrap(), inst.ground_truth);
        }
        // (7, 8) -> [1, 5] at difficulty 2
        let plus = t.vocab.id_of("+").unwrap();
        let eq = t.vocab.id_of("=").unwrap();
        let q = TokenSeq::from_tokens(
            &t.vocab,
            &[t.number_tokens(7)[0], plus, t.number_tokens(8)[0], eq],
            t.max_prompt_len,
        )
        .unwrap();
        assert_eq!(t.answer_for_query(&q).unwrap(), t.number_tokens(15));
    }

    #[test]
    fn oracle_policy_earns_full_reward() {
        let t = TaskSpec::arith(1, 8);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..30 {
            let inst = t.gen_arithmetic_instance(&mut rng, 1);
            let mut toks = inst.ground_truth.clone();
            toks.push(t.vocab.eos_id());
            let action = TokenSeq::from_tokens(&t.vocab, &toks, 8).unwrap();
            assert_eq!(t.reward(&inst.prompt, &action), 1.0);
        }
    }

    #[test]
    fn difficulty_one_pairs_are_uniform() {
        let t = TaskSpec::arith(1, 8);
        let pairs = TaskSpec::operand_pairs(1);
        assert_eq!(pairs.len(), 16);
        let mut counts: HashMap<Vec<TokenId>, usize> = HashMap::new();
        let mut rng = StdRng::seed_from_u64(77);
        let n = 10_000;
        for _ in 0..n {
            let inst = t.gen_arithmetic_instance(&mut rng, 1);
            *counts
                .entry(inst.prompt.real_tokens().to_vec())
                .or_default() += 1;
        }
        assert_eq!(counts.len(), pairs.len());
        let p = 1.0 / pairs.len() as f64;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        for &c in counts.values() {
            let expect = p * n as f64;
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "count {c} vs expected {expect} (3 sigma {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let v = arith_vocab();
        let dir = std::env::temp_dir().join("cory_corpus_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.txt");
        std::fs::write(&path, "1 + 2 =\t3\n4 + 5 =\t9\n7 + 0 =\t7\n").unwrap();
        let entries = load_corpus(&path, &v, 16, true).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(detokenize(entries[0].prompt.real_tokens(), &v), "1 + 2 =");
        assert_eq!(detokenize(entries[1].truth.as_ref().unwrap(), &v), "9");

        std::fs::write(&path, "1 + zork =\t3\n").unwrap();
        match load_corpus(&path, &v, 16, true) {
            Err(TaskError::ParseError { line, symbol }) => {
                assert_eq!(line, 1);
                assert_eq!(symbol, "zork");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "1 + 2 = 3 + 4 = 5 + 6 =\t3\n0 + 0 =\t0\n").unwrap();
        match load_corpus(&path, &v, 4, true) {
            Err(TaskError::PromptTooLong { lines, .. }) => assert_eq!(lines, vec![1]),
            other => panic!("expected length error, got {other:?}"),
        }

        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            load_corpus(&path, &v, 16, true),
            Err(TaskError::EmptyCorpus)
        ));
    }

    #[test]
    fn lexicon_file_round_trip() {
        let v = lexicon_vocab();
        let dir = std::env::temp_dir().join("cory_lexicon_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lexicon.tsv");
        std::fs::write(&path, "good\t0.5\nbad\t-0.25\n").unwrap();
        let lex = load_lexicon(&path, &v).unwrap();
        assert_eq!(lex[&v.id_of("good").unwrap()], 0.5);
        assert_eq!(lex[&v.id_of("bad").unwrap()], -0.25);
    }

    #[test]
    fn subjective_rewards_stay_bounded() {
        let t = TaskSpec::lexicon(8);
        let mut rng = StdRng::seed_from_u64(3);
        let queries = t.sample_queries(50, &mut rng);
        for q in &queries {
            let len = q.real_len();
            assert!((2..=8).contains(&len));
            let r = t.reward(q, q); // score an arbitrary token sequence
            assert!((-1.0..=1.0).contains(&r));
        }
    }
}
