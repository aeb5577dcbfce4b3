//! Concatenation of a unit corpus into fixed-length training chunks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::units::UnitSequence;

/// Chunk length used for the language-model training data.
pub const DEFAULT_CHUNK_LEN: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedDataset {
    pub chunk_len: usize,
    pub chunks: Vec<Vec<u32>>,
    /// `k`, or `k + 1` when a separator is appended after every utterance.
    pub vocab_size: usize,
    pub separator_id: Option<u32>,
    /// Tokens left over after the last full chunk; they are not stored.
    pub dropped_tail: usize,
}

impl PackedDataset {
    pub fn num_tokens(&self) -> usize {
        self.chunks.len() * self.chunk_len
    }

    /// The packed token stream cut at separators, i.e. the utterances that
    /// survived packing. Without a separator the whole stream is one sequence.
    pub fn segments(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        for &t in self.chunks.iter().flatten() {
            if Some(t) == self.separator_id {
                out.push(std::mem::take(&mut current));
            } else {
                current.push(t);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let sep = self
            .separator_id
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".to_string());
        let _ = writeln!(
            out,
            "#chunk_len={};vocab={};sep={}",
            self.chunk_len, self.vocab_size, sep
        );
        let _ = writeln!(out, "#dropped_tail={}", self.dropped_tail);
        for chunk in &self.chunks {
            for (i, t) in chunk.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{t}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, "empty packed file"))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(format!("{origin}:1"), "missing #chunk_len header"))?;
        let mut chunk_len = None;
        let mut vocab_size = None;
        let mut separator_id = None;
        for field in header.split(';') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("{origin}:1"), format!("bad header field {field:?}")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| Error::parse(format!("{origin}:1"), format!("{key}: {e}")))
            };
            match key {
                "chunk_len" => chunk_len = Some(num(value)?),
                "vocab" => vocab_size = Some(num(value)?),
                "sep" if value == "none" => separator_id = None,
                "sep" => separator_id = Some(num(value)? as u32),
                _ => {}
            }
        }
        let (Some(chunk_len), Some(vocab_size)) = (chunk_len, vocab_size) else {
            return Err(Error::parse(format!("{origin}:1"), "header needs chunk_len and vocab"));
        };
        let mut dropped_tail = 0;
        let mut chunks = Vec::new();
        for (lineno, line) in lines {
            let loc = || format!("{origin}:{}", lineno + 1);
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.strip_prefix("dropped_tail=") {
                    dropped_tail = v.parse().map_err(|e| Error::parse(loc(), format!("{e}")))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let chunk = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|e| Error::parse(loc(), format!("bad token {t:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if chunk.len() != chunk_len {
                return Err(Error::parse(
                    loc(),
                    format!("chunk has {} tokens, expected {chunk_len}", chunk.len()),
                ));
            }
            if let Some(t) = chunk.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::parse(
                    loc(),
                    format!("token {t} outside vocabulary of {vocab_size}"),
                ));
            }
            chunks.push(chunk);
        }
        Ok(PackedDataset {
            chunk_len,
            chunks,
            vocab_size,
            separator_id,
            dropped_tail,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_to_string(path)?, &path.display().to_string())
    }
}

/// Concatenates `corpus` in order (appending separator id `k` after every
/// utterance when `use_separator`) and splits the stream into full chunks of
/// `chunk_len` tokens. The remainder is dropped and counted.
pub fn pack(corpus: &[UnitSequence], chunk_len: usize, k: usize, use_separator: bool) -> Result<PackedDataset> {
    if corpus.is_empty() {
        return Err(Error::Empty("unit corpus"));
    }
    if chunk_len == 0 {
        return Err(Error::invalid("chunk_len must be >= 1"));
    }
    if k == 0 || k >= u32::MAX as usize {
        return Err(Error::invalid(format!("vocabulary size {k} out of range")));
    }
    let separator_id = use_separator.then_some(k as u32);
    let mut stream = Vec::with_capacity(corpus.iter().map(|s| s.len() + 1).sum());
    for seq in corpus {
        if let Some(u) = seq.units.iter().find(|&&u| u as usize >= k) {
            return Err(Error::invalid(format!(
                "utterance {:?} holds unit {u} outside vocabulary of {k}",
                seq.utt_id
            )));
        }
        stream.extend_from_slice(&seq.units);
        if let Some(sep) = separator_id {
            stream.push(sep);
        }
    }
    let full = stream.len() / chunk_len;
    let dropped_tail = stream.len() % chunk_len;
    let chunks = stream[..full * chunk_len]
        .chunks_exact(chunk_len)
        .map(<[u32]>::to_vec)
        .collect();
    Ok(PackedDataset {
        chunk_len,
        chunks,
        vocab_size: if use_separator { k + 1 } else { k },
        separator_id,
        dropped_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lens: &[usize]) -> Vec<UnitSequence> {
        lens.iter()
            .enumerate()
            .map(|(i, &n)| UnitSequence::new(format!("u{i}"), (0..n as u32).map(|t| t % 7).collect()))
            .collect()
    }

    #[test]
    fn five_thousand_tokens_into_2048_chunks() {
        let p = pack(&corpus(&[3000, 2000]), 2048, 7, false).unwrap();
        assert_eq!(p.chunks.len(), 2);
        assert_eq!(p.dropped_tail, 904);
        assert_eq!(p.vocab_size, 7);
        assert_eq!(p.separator_id, None);
    }

    #[test]
    fn exact_fit() {
        let p = pack(&corpus(&[2048]), DEFAULT_CHUNK_LEN, 7, false).unwrap();
        assert_eq!(p.chunks.len(), 1);
        assert_eq!(p.dropped_tail, 0);
    }

    #[test]
    fn separators_use_k_and_split_back() {
        let c = vec![UnitSequence::new("a", vec![1, 2]), UnitSequence::new("b", vec![3])];
        let p = pack(&c, 5, 4, true).unwrap();
        assert_eq!(p.chunks, vec![vec![1, 2, 4, 3, 4]]);
        assert_eq!(p.vocab_size, 5);
        assert_eq!(p.segments(), vec![vec![1, 2], vec![3]]);
    }

    #[test]
    fn errors() {
        assert!(matches!(pack(&[], 4, 2, true), Err(Error::Empty(_))));
        assert!(pack(&corpus(&[3]), 0, 7, true).is_err());
        assert!(pack(&[UnitSequence::new("a", vec![9])], 1, 4, false).is_err());
    }

    #[test]
    fn text_round_trip() {
        let p = pack(&corpus(&[10, 7]), 4, 7, true).unwrap();
        let text = p.to_text();
        assert!(text.starts_with("#chunk_len=4;vocab=8;sep=7\n"));
        assert_eq!(PackedDataset::parse(&text, "p").unwrap(), p);
        let q = pack(&corpus(&[5]), 2, 7, false).unwrap();
        assert!(q.to_text().starts_with("#chunk_len=2;vocab=7;sep=none\n"));
        assert_eq!(PackedDataset::parse(&q.to_text(), "q").unwrap(), q);
        assert!(PackedDataset::parse("#chunk_len=2;vocab=3;sep=none\n1 2 3\n", "x").is_err());
        assert!(PackedDataset::parse("#chunk_len=2;vocab=3;sep=none\n1 5\n", "x").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conservation_and_order(lens in proptest::collection::vec(0usize..50, 1..12), chunk_len in 1usize..40, sep in any::<bool>()) {
                let c = corpus(&lens);
                let p = pack(&c, chunk_len, 7, sep).unwrap();
                let mut stream: Vec<u32> = Vec::new();
                for s in &c {
                    stream.extend(&s.units);
                    if sep { stream.push(7); }
                }
                prop_assert_eq!(p.chunks.len() * chunk_len + p.dropped_tail, stream.len());
                prop_assert!(p.dropped_tail < chunk_len);
                let flat: Vec<u32> = p.chunks.iter().flatten().copied().collect();
                prop_assert_eq!(&flat[..], &stream[..flat.len()]);
                prop_assert!(p.chunks.iter().all(|ch| ch.len() == chunk_len));
            }
        }
    }
}
