//! Token alphabet, synthetic modular-arithmetic tasks, answer checking and
//! JSONL task ingestion.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Dense token identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

const TOKENS: [&str; 18] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "*", "=", "</think>", "<answer>",
    "</answer>", "<eos>", "<pad>",
];

/// The fixed 18-token alphabet: ten digits, two operators, `=`, four
/// structural tokens and padding.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const PLUS: TokenId = TokenId(10);
    pub const TIMES: TokenId = TokenId(11);
    pub const EQUALS: TokenId = TokenId(12);
    pub const THINK_END: TokenId = TokenId(13);
    pub const ANS: TokenId = TokenId(14);
    pub const ANS_END: TokenId = TokenId(15);
    pub const EOS: TokenId = TokenId(16);
    pub const PAD: TokenId = TokenId(17);
    /// Length of the early-exit postfix `</think><answer>`.
    pub const POSTFIX_LEN: usize = 2;

    pub fn new() -> Self {
        let tokens: Vec<String> = TOKENS.iter().map(|s| s.to_string()).collect();
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        Self { tokens, id_of }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.idx()]
    }

    pub fn digit(d: u8) -> TokenId {
        debug_assert!(d < 10);
        TokenId(d as u32)
    }

    pub fn digit_value(id: TokenId) -> Option<u8> {
        (id.0 < 10).then_some(id.0 as u8)
    }

    /// Ids of the answer alphabet (the ten digits), in digit order.
    pub fn answer_alphabet(&self) -> Vec<TokenId> {
        (0..10).map(TokenId).collect()
    }

    pub fn structural(&self) -> [TokenId; 4] {
        [Self::THINK_END, Self::ANS, Self::ANS_END, Self::EOS]
    }

    pub fn is_structural(id: TokenId) -> bool {
        matches!(id, Self::THINK_END | Self::ANS | Self::ANS_END | Self::EOS)
    }

    /// `</think><answer>`: forces an immediate answer when appended to a prefix.
    pub fn postfix(&self) -> [TokenId; 2] {
        [Self::THINK_END, Self::ANS]
    }

    /// Tokenizes whitespace-separated vocabulary tokens.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t).ok_or_else(|| Error::Vocabulary {
                    token: t.to_string(),
                    line: None,
                })
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Mul,
}

impl Operator {
    pub fn token(self) -> TokenId {
        match self {
            Operator::Add => Vocab::PLUS,
            Operator::Mul => Vocab::TIMES,
        }
    }

    fn apply(self, a: u8, b: u8) -> u8 {
        match self {
            Operator::Add => (a + b) % 10,
            Operator::Mul => (a * b) % 10,
        }
    }
}

/// A chain `d0 op0 d1 op1 d2 ...` over single digits, evaluated strictly left to
/// right modulo 10.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expression {
    operands: Vec<u8>,
    operators: Vec<Operator>,
}

impl Expression {
    pub const MODULUS: u8 = 10;

    pub fn new(operands: Vec<u8>, operators: Vec<Operator>) -> Result<Self> {
        if operands.len() < 2 {
            return Err(Error::InvalidExpression(format!(
                "need at least 2 operands, got {}",
                operands.len()
            )));
        }
        if operators.len() + 1 != operands.len() {
            return Err(Error::InvalidExpression(format!(
                "{} operands need {} operators, got {}",
                operands.len(),
                operands.len() - 1,
                operators.len()
            )));
        }
        if let Some(&bad) = operands.iter().find(|&&d| d >= Self::MODULUS) {
            return Err(Error::InvalidExpression(format!("operand {bad} is not a digit")));
        }
        Ok(Self {
            operands,
            operators,
        })
    }

    pub fn operands(&self) -> &[u8] {
        &self.operands
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    /// Query tokens: the expression followed by `=`.
    pub fn to_query(&self) -> Vec<TokenId> {
        let mut q = Vec::with_capacity(2 * self.operands.len());
        q.push(Vocab::digit(self.operands[0]));
        for (op, &d) in self.operators.iter().zip(&self.operands[1..]) {
            q.push(op.token());
            q.push(Vocab::digit(d));
        }
        q.push(Vocab::EQUALS);
        q
    }
}

/// Left fold of the operators with every intermediate reduced mod 10.
pub fn eval_expression(expr: &Expression) -> u8 {
    expr.operators
        .iter()
        .zip(&expr.operands[1..])
        .fold(expr.operands[0], |acc, (op, &d)| op.apply(acc, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic,
    Ingested,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub query: Vec<TokenId>,
    pub answer: TokenId,
    pub source: TaskSource,
    /// Operand count.
    pub difficulty: usize,
}

/// Samples one expression with `n` operands from the stream keyed by `seed`.
pub fn generate_task(seed: u64, n: usize) -> Result<Task> {
    if n < 2 {
        return Err(Error::InvalidDifficulty(n));
    }
    let mut rng = rng::stream(seed, &[0x7A5C]);
    let operands: Vec<u8> = (0..n).map(|_| rng.random_range(0..10u8)).collect();
    let operators: Vec<Operator> = (0..n - 1)
        .map(|_| {
            if rng.random_bool(0.5) {
                Operator::Add
            } else {
                Operator::Mul
            }
        })
        .collect();
    let expr = Expression::new(operands, operators)?;
    Ok(Task {
        query: expr.to_query(),
        answer: Vocab::digit(eval_expression(&expr)),
        source: TaskSource::Synthetic,
        difficulty: n,
    })
}

/// Correct iff the token right after the first `<answer>` equals the target.
pub fn check_answer(task: &Task, completion: &[TokenId]) -> bool {
    completion
        .iter()
        .position(|&t| t == Vocab::ANS)
        .and_then(|i| completion.get(i + 1))
        .is_some_and(|&d| d == task.answer)
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    query: String,
    answer: String,
}

fn task_from_record(vocab: &Vocab, rec: &TaskRecord, line: usize) -> Result<Task> {
    let lookup = |t: &str| {
        vocab.id(t).ok_or_else(|| Error::Vocabulary {
            token: t.to_string(),
            line: Some(line),
        })
    };
    let query = rec
        .query
        .split_whitespace()
        .map(lookup)
        .collect::<Result<Vec<_>>>()?;
    if query.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty query".into(),
        });
    }
    if let Some(&bad) = query
        .iter()
        .find(|&&t| Vocab::is_structural(t) || t == Vocab::PAD)
    {
        return Err(Error::Parse {
            line,
            message: format!("query contains reserved token {:?}", vocab.token(bad)),
        });
    }
    let answer = lookup(rec.answer.trim())?;
    if Vocab::digit_value(answer).is_none() {
        return Err(Error::Parse {
            line,
            message: format!("answer {:?} is not a digit", rec.answer),
        });
    }
    let difficulty = query
        .iter()
        .filter(|&&t| Vocab::digit_value(t).is_some())
        .count();
    Ok(Task {
        query,
        answer,
        source: TaskSource::Ingested,
        difficulty,
    })
}

/// Reads `{"query": "3 + 4 =", "answer": "7"}` lines. Blank lines are skipped.
pub fn load_tasks_jsonl(path: impl AsRef<Path>) -> Result<Vec<Task>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let vocab = Vocab::new();
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        tasks.push(task_from_record(&vocab, &rec, line_no)?);
    }
    Ok(tasks)
}

pub fn write_tasks_jsonl(path: impl AsRef<Path>, tasks: &[Task]) -> Result<()> {
    let path = path.as_ref();
    let vocab = Vocab::new();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for task in tasks {
        let rec = TaskRecord {
            query: vocab.detokenize(&task.query),
            answer: vocab.token(task.answer).to_string(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
