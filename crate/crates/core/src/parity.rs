//! Exhaustive PARITY datasets grouped into equal-length buckets.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SequenceBatch, SOS};

pub const MAX_SUPPORTED_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    /// Class index used by the classifier: even 0, odd 1.
    pub fn label(self) -> usize {
        match self {
            Parity::Even => 0,
            Parity::Odd => 1,
        }
    }

    pub fn from_label(label: usize) -> Option<Self> {
        match label {
            0 => Some(Parity::Even),
            1 => Some(Parity::Odd),
            _ => None,
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("parity is undefined for an empty string")]
    Empty,
    #[error("token {0} is not a bit")]
    NotABit(usize),
    #[error("max_len {0} is outside 1..={MAX_SUPPORTED_LEN}")]
    MaxLen(usize),
}

/// Odd iff the number of ones is odd.
pub fn parity_oracle(bits: &[usize]) -> Result<Parity, DataError> {
    if bits.is_empty() {
        return Err(DataError::Empty);
    }
    let mut ones = 0usize;
    for &b in bits {
        match b {
            0 => {}
            1 => ones += 1,
            other => return Err(DataError::NotABit(other)),
        }
    }
    Ok(if ones % 2 == 1 { Parity::Odd } else { Parity::Even })
}

/// All strings of one length, stored as SOS-prefixed token rows laid end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    seq_len: usize,
    tokens: Vec<usize>,
    labels: Vec<usize>,
}

impl LengthBucket {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn span(&self) -> usize {
        self.seq_len + 1
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// SOS followed by the bits of item `i`.
    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.span()..(i + 1) * self.span()]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self) -> Result<(SequenceBatch, Vec<usize>), ModelError> {
        self.subset(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<(SequenceBatch, Vec<usize>), ModelError> {
        let seqs: Vec<&[usize]> = indices.iter().map(|&i| self.sequence(i)).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((SequenceBatch::new(&seqs)?, labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityDataset {
    max_len: usize,
    buckets: Vec<LengthBucket>,
}

/// Every binary string of length `1..=max_len`, length-major then lexicographic.
pub fn gen_dataset(max_len: usize) -> Result<ParityDataset, DataError> {
    if !(1..=MAX_SUPPORTED_LEN).contains(&max_len) {
        return Err(DataError::MaxLen(max_len));
    }
    let buckets = (1..=max_len)
        .map(|len| {
            let count = 1usize << len;
            let mut tokens = Vec::with_capacity(count * (len + 1));
            let mut labels = Vec::with_capacity(count);
            for code in 0..count {
                tokens.push(SOS);
                tokens.extend((0..len).rev().map(|bit| (code >> bit) & 1));
                labels.push((code.count_ones() % 2) as usize);
            }
            LengthBucket {
                seq_len: len,
                tokens,
                labels,
            }
        })
        .collect();
    Ok(ParityDataset { max_len, buckets })
}

impl ParityDataset {
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn buckets(&self) -> &[LengthBucket] {
        &self.buckets
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(LengthBucket::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(tokens, label)` in dataset order.
    pub fn items(&self) -> impl Iterator<Item = (&[usize], usize)> + '_ {
        self.buckets
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| (b.sequence(i), b.labels[i])))
    }

    /// `(even, odd)` counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let odd: usize = self.buckets.iter().flat_map(|b| &b.labels).sum();
        (self.len() - odd, odd)
    }

    /// One `<bits> <label>` line per item.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * (self.max_len + 6));
        for (tokens, label) in self.items() {
            out.extend(tokens[1..].iter().map(|&b| if b == 1 { '1' } else { '0' }));
            out.push(' ');
            out.push_str(if label == 1 { "odd" } else { "even" });
            out.push('\n');
        }
        out
    }
}
