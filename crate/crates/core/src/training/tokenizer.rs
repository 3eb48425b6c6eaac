use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
const FIRST_MERGE: u32 = 258;

/// Byte-level BPE. Ids 0..256 are raw bytes, then BOS and EOS, then one id
/// per learned merge in the order it was learned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
}

fn count_pairs(seq: &[u32], width: usize, counts: &mut [u32]) {
    counts.iter_mut().for_each(|c| *c = 0);
    for w in seq.windows(2) {
        counts[w[0] as usize * width + w[1] as usize] += 1;
    }
}

fn apply_merge(seq: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            seq[out] = id;
            i += 2;
        } else {
            seq[out] = seq[i];
            i += 1;
        }
        out += 1;
    }
    seq.truncate(out);
}

impl Tokenizer {
    /// Learns `vocab_size - 258` merges greedily: each round merges the most
    /// frequent adjacent pair (ties to the smallest pair). Stops early when no
    /// pair occurs twice.
    pub fn train(corpus: &[u8], vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot build a tokenizer from an empty corpus"));
        }
        if vocab_size < FIRST_MERGE as usize {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the 258 byte and special ids"
            )));
        }
        let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
        let mut merges = Vec::new();
        let mut counts = vec![0u32; vocab_size * vocab_size];
        for id in FIRST_MERGE..vocab_size as u32 {
            count_pairs(&seq, vocab_size, &mut counts);
            let (best, &n) = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty counts");
            if n < 2 {
                break;
            }
            let pair = ((best / vocab_size) as u32, (best % vocab_size) as u32);
            apply_merge(&mut seq, pair, id);
            merges.push(pair);
        }
        Ok(Self { merges })
    }

    pub fn byte_level() -> Self {
        Self { merges: Vec::new() }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_MERGE as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        for (i, &pair) in self.merges.iter().enumerate() {
            if seq.len() < 2 {
                break;
            }
            apply_merge(&mut seq, pair, FIRST_MERGE + i as u32);
        }
        seq
    }

    /// Inverse of [`encode`](Self::encode). BOS and EOS decode to nothing;
    /// unknown ids are an index error.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            self.expand(id, &mut out)?;
        }
        Ok(out)
    }

    /// Lossy UTF-8 rendering of [`decode`](Self::decode).
    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .flat_map(|&id| {
                let mut v = Vec::new();
                let _ = self.expand(id, &mut v);
                v
            })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn expand(&self, id: u32, out: &mut Vec<u8>) -> Result<()> {
        match id {
            0..=255 => out.push(id as u8),
            BOS | EOS => {}
            _ => {
                let (a, b) = *self
                    .merges
                    .get((id - FIRST_MERGE) as usize)
                    .ok_or(Error::Index {
                        op: "decode",
                        index: id as usize,
                        size: self.vocab_size(),
                    })?;
                self.expand(a, out)?;
                self.expand(b, out)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Tokenizer = serde_json::from_str(&s)?;
        for (i, &(a, b)) in t.merges.iter().enumerate() {
            let id = FIRST_MERGE + i as u32;
            if a >= id || b >= id || a == BOS || a == EOS || b == BOS || b == EOS {
                return Err(Error::Format(format!("merge {i} refers to an invalid id")));
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_vocab_is_pure_bytes() {
        let t = Tokenizer::train(b"abababab", 258).unwrap();
        assert_eq!(t.vocab_size(), 258);
        assert_eq!(t.encode(b"ab"), vec![97, 98]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let t = Tokenizer::train(b"xyzxyzqq", 260).unwrap();
        // "xy" and "yz" both occur twice; the smaller pair wins.
        assert_eq!(t.merges()[0], (b'x' as u32, b'y' as u32));
    }

    #[test]
    fn round_trip_and_compression() {
        let text = b"the cat sat on the mat. the cat ate the rat.";
        let t = Tokenizer::train(text, 280).unwrap();
        let ids = t.encode(text);
        assert!(ids.len() < text.len());
        assert_eq!(t.decode(&ids).unwrap(), text.to_vec());
        assert_eq!(t.decode(&t.encode(b"")).unwrap(), b"".to_vec());
    }

    #[test]
    fn specials_decode_to_nothing() {
        let t = Tokenizer::byte_level();
        assert_eq!(t.decode(&[BOS, 104, 105, EOS]).unwrap(), b"hi".to_vec());
        assert!(t.decode(&[300]).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Tokenizer::train(b"", 300), Err(Error::Contract(_))));
    }
}
