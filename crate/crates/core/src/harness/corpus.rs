//! Synthetic long-context tasks.
//!
//! Vocabulary layout (fits the default 256-token backbone):
//!
//! | ids       | role                        |
//! |-----------|-----------------------------|
//! | 1         | `BOS`                       |
//! | 2         | `QUERY` (opens a lookup)    |
//! | 3         | `COPY` (opens a copy)       |
//! | 4         | `SPAN` (marks a copy span)  |
//! | 16..80    | key tokens                  |
//! | 80..144   | value tokens                |
//! | 144..256  | filler                      |
//!
//! Every sample is a prompt plus a response; the response starts with a
//! teacher-forced query and ends with the answer tokens, so answers are only
//! ever produced by decode steps running on the (possibly compressed) cache.

use serde::{Deserialize, Serialize};

use crate::backbone::Token;
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const BOS: Token = 1;
pub const QUERY: Token = 2;
pub const COPY: Token = 3;
pub const SPAN: Token = 4;
pub const KEY_BASE: Token = 16;
pub const VALUE_BASE: Token = 80;
pub const FILLER_BASE: Token = 144;
pub const N_KEYS: usize = 64;
pub const N_VALUES: usize = 64;
pub const N_FILLER: usize = 112;
/// Smallest vocabulary that holds every task token.
pub const MIN_VOCAB: usize = FILLER_BASE as usize + N_FILLER;

pub const KV_PAIRS: usize = 4;
pub const COPY_SPAN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Needle,
    Copy,
    KvRecall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Needle => "needle",
            TaskKind::Copy => "copy",
            TaskKind::KvRecall => "kv-recall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(TaskKind::Needle),
            "copy" => Ok(TaskKind::Copy),
            "kv-recall" => Ok(TaskKind::KvRecall),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }

    /// Prompt tokens the payload needs besides `BOS`.
    fn payload_len(self) -> usize {
        match self {
            TaskKind::Needle => 2,
            TaskKind::KvRecall => 2 * KV_PAIRS,
            TaskKind::Copy => COPY_SPAN + 2,
        }
    }
}

/// One prompt/response pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub kind: TaskKind,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// `response[answer_start..]` are the answer tokens.
    pub answer_start: usize,
    /// Prompt positions holding the payload (needle key/value, pairs, span).
    pub payload_positions: Vec<usize>,
}

impl Sample {
    pub fn answer(&self) -> &[Token] {
        &self.response[self.answer_start..]
    }

    /// Teacher-forced query part of the response.
    pub fn query(&self) -> &[Token] {
        &self.response[..self.answer_start]
    }
}

fn filler(rng: &mut Rng) -> Token {
    FILLER_BASE + rng.below(N_FILLER) as Token
}

/// `count` samples of one kind with prompt length `l`.
pub fn gen_corpus(kind: TaskKind, count: usize, l: usize, seed: u64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Parameter("corpus count must be at least 1".into()));
    }
    // BOS, the payload and at least one filler slot
    if l < kind.payload_len() + 2 {
        return Err(Error::Parameter(format!("prompt length {l} too small for a {} payload", kind.name())));
    }
    let mut rng = Rng::new(seed ^ (kind as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    Ok((0..count).map(|_| gen_sample(kind, l, &mut rng)).collect())
}

/// Blocks of `width` consecutive slots placed without overlap inside
/// `1..l`, returned by start position.
fn place_blocks(rng: &mut Rng, l: usize, blocks: usize, width: usize) -> Vec<usize> {
    // Choose `blocks` starts from the compressed range, then spread them out.
    let free = l - 1 - blocks * width;
    let mut offs: Vec<usize> = (0..blocks).map(|_| rng.below(free + 1)).collect();
    offs.sort_unstable();
    offs.iter().enumerate().map(|(b, &o)| 1 + o + b * width).collect()
}

fn gen_sample(kind: TaskKind, l: usize, rng: &mut Rng) -> Sample {
    let mut prompt: Vec<Token> = std::iter::once(BOS).chain((1..l).map(|_| filler(rng))).collect();
    match kind {
        TaskKind::Needle => {
            let p = place_blocks(rng, l, 1, 2)[0];
            let key = KEY_BASE + rng.below(N_KEYS) as Token;
            let value = VALUE_BASE + rng.below(N_VALUES) as Token;
            prompt[p] = key;
            prompt[p + 1] = value;
            Sample {
                kind,
                prompt,
                response: vec![QUERY, key, value],
                answer_start: 2,
                payload_positions: vec![p, p + 1],
            }
        }
        TaskKind::KvRecall => {
            let starts = place_blocks(rng, l, KV_PAIRS, 2);
            let mut keys: Vec<usize> = (0..N_KEYS).collect();
            rng.shuffle(&mut keys);
            let mut pairs = Vec::with_capacity(KV_PAIRS);
            let mut positions = Vec::with_capacity(2 * KV_PAIRS);
            for (i, &p) in starts.iter().enumerate() {
                let key = KEY_BASE + keys[i] as Token;
                let value = VALUE_BASE + rng.below(N_VALUES) as Token;
                prompt[p] = key;
                prompt[p + 1] = value;
                pairs.push((key, value));
                positions.extend([p, p + 1]);
            }
            let (key, value) = pairs[rng.below(KV_PAIRS)];
            Sample { kind, prompt, response: vec![QUERY, key, value], answer_start: 2, payload_positions: positions }
        }
        TaskKind::Copy => {
            let p = place_blocks(rng, l, 1, COPY_SPAN + 2)[0];
            prompt[p] = SPAN;
            let span: Vec<Token> = (0..COPY_SPAN).map(|_| VALUE_BASE + rng.below(N_VALUES) as Token).collect();
            prompt[p + 1..p + 1 + COPY_SPAN].copy_from_slice(&span);
            prompt[p + 1 + COPY_SPAN] = SPAN;
            let mut response = vec![COPY, SPAN];
            response.extend(&span);
            Sample {
                kind,
                prompt,
                response,
                answer_start: 2,
                payload_positions: (p..p + COPY_SPAN + 2).collect(),
            }
        }
    }
}

/// Interleaved mixture of kinds over several prompt lengths; sample `i` uses
/// kind `kinds[i % kinds.len()]` and length `lengths[(i / kinds.len()) % lengths.len()]`.
pub fn gen_mixture(kinds: &[TaskKind], lengths: &[usize], count: usize, seed: u64) -> Result<Vec<Sample>> {
    if kinds.is_empty() || lengths.is_empty() {
        return Err(Error::Parameter("mixture needs at least one kind and one length".into()));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let l = lengths[(i / kinds.len()) % lengths.len()];
        if l < kind.payload_len() + 2 {
            return Err(Error::Parameter(format!("prompt length {l} too small for a {} payload", kind.name())));
        }
        let mut srng = rng.fork(i as u64);
        out.push(gen_sample(kind, l, &mut srng));
    }
    Ok(out)
}
