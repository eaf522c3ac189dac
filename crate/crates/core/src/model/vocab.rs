//! Word-level vocabulary with fixed reserved ids.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Token <-> id map. Reserved tokens always occupy ids 0..=4; everything
/// else keeps the order it was added in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens only.
    pub fn reserved() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS {
            v.push(t.to_string());
        }
        v
    }

    /// Reserved tokens followed by `extra` in the given order. Duplicates
    /// of already-present tokens are ignored.
    pub fn with_tokens<I: IntoIterator<Item = String>>(extra: I) -> Self {
        let mut v = Vocab::reserved();
        for t in extra {
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unknown id when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// FNV-1a over the token list; pins checkpoints to the vocabulary they
    /// were trained with.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0x0a;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*t) {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("vocab file does not start with reserved tokens: {tokens:?}"),
                ));
            }
        }
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            v.push(t);
        }
        Ok(v)
    }
}
