use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bijective token <-> id map with four reserved specials at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    /// Specials followed by `tokens` in order. Duplicates are dropped.
    pub fn with_specials<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for s in Self::SPECIALS {
            v.push(s.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, t: String) {
        if !self.ids.contains_key(&t) {
            self.ids.insert(t.clone(), self.tokens.len() as u32);
            self.tokens.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < 4
    }

    /// Id of `token`, or UNK with a warning.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.id(token).unwrap_or_else(|| {
            log::warn!("token {token:?} not in vocabulary; encoding as <unk>");
            Self::UNK
        })
    }

    pub fn to_json(&self) -> String {
        let map: std::collections::BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    /// Parse a JSON token->id map; ids must be dense from 0 with the
    /// specials at their reserved positions.
    pub fn from_json(s: &str) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(s)?;
        let mut tokens = vec![None; map.len()];
        for (t, &id) in &map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("vocab id {id} not dense")))?;
            if slot.replace(t.clone()).is_some() {
                return Err(Error::InvalidArgument(format!("vocab id {id} used twice")));
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense")).collect();
        if tokens.len() < 4 || tokens[..4] != Self::SPECIALS {
            return Err(Error::InvalidArgument(
                "vocab specials missing or misplaced".into(),
            ));
        }
        Ok(Vocab::with_specials(tokens.into_iter().skip(4)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Which of the three recognition tasks a sequence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Structure,
    Bbox,
    Content,
}

impl Task {
    /// Maximum sequence length including BOS and EOS.
    pub fn max_len(self) -> usize {
        match self {
            Task::Structure => 512,
            Task::Bbox => 1024,
            Task::Content => 200,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Structure => "structure",
            Task::Bbox => "bbox",
            Task::Content => "content",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(Task::Structure),
            "bbox" => Ok(Task::Bbox),
            "content" => Ok(Task::Content),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

/// Token ids for one task, framed by BOS/EOS when complete.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub task: Task,
}

impl TokenSeq {
    /// Frame `payload` with BOS/EOS, rejecting sequences over the task limit.
    pub fn framed(task: Task, payload: &[u32]) -> Result<Self> {
        let len = payload.len() + 2;
        if len > task.max_len() {
            return Err(Error::SequenceTooLong {
                task: task.name(),
                len,
                max: task.max_len(),
            });
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(Vocab::BOS);
        ids.extend_from_slice(payload);
        ids.push(Vocab::EOS);
        Ok(TokenSeq { ids, task })
    }

    /// Ids between a leading BOS and the first EOS.
    pub fn payload(&self) -> &[u32] {
        let start = usize::from(self.ids.first() == Some(&Vocab::BOS));
        let end = self.ids[start..]
            .iter()
            .position(|&i| i == Vocab::EOS)
            .map_or(self.ids.len(), |p| p + start);
        &self.ids[start..end]
    }

    pub fn is_complete(&self) -> bool {
        self.ids.first() == Some(&Vocab::BOS) && self.ids.last() == Some(&Vocab::EOS)
    }
}
