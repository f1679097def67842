//! Tokenizers for the text tower.
//!
//! `Bpe` follows the published CLIP byte-level BPE (lower-cased, whitespace
//! collapsed, `</w>` word endings). `Bytes` is a vocabulary-free fallback used
//! with seeded weights: one token per UTF-8 byte plus start/end markers.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum Tokenizer {
    Bytes,
    Bpe(Box<BpeTokenizer>),
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 258,
            Tokenizer::Bpe(b) => b.encoder.len(),
        }
    }

    /// Token ids including start and end markers, checked against `context`.
    pub fn encode(&self, text: &str, context: usize) -> Result<Vec<usize>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let ids = match self {
            Tokenizer::Bytes => {
                let clean = clean_text(text);
                let mut ids = vec![256];
                ids.extend(clean.bytes().map(|b| b as usize));
                ids.push(257);
                ids
            }
            Tokenizer::Bpe(b) => b.encode(text)?,
        };
        if ids.len() > context {
            return Err(Error::PromptTooLong {
                len: ids.len(),
                max: context,
            });
        }
        Ok(ids)
    }
}

fn clean_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// GPT-2 style reversible byte-to-unicode table.
fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec![' '; 256];
    for (b, c) in bs.into_iter().zip(cs) {
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

#[derive(Clone, Debug)]
pub struct BpeTokenizer {
    encoder: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    byte_table: Vec<char>,
    pattern: Regex,
    sot: usize,
    eot: usize,
}

impl BpeTokenizer {
    /// `vocab`: token to id map. `merges`: merge rules in priority order.
    pub fn new(vocab: HashMap<String, usize>, merges: Vec<(String, String)>) -> Result<Self> {
        let sot = *vocab
            .get("<|startoftext|>")
            .ok_or_else(|| Error::Tokenizer("vocabulary lacks <|startoftext|>".into()))?;
        let eot = *vocab
            .get("<|endoftext|>")
            .ok_or_else(|| Error::Tokenizer("vocabulary lacks <|endoftext|>".into()))?;
        let ranks = merges
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        let pattern = Regex::new(
            r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .map_err(|e| Error::Tokenizer(e.to_string()))?;
        Ok(BpeTokenizer {
            encoder: vocab,
            ranks,
            byte_table: bytes_to_unicode(),
            pattern,
            sot,
            eot,
        })
    }

    /// Reads a HF-style `vocab.json` and `merges.txt`.
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let v: HashMap<String, usize> = serde_json::from_slice(&std::fs::read(vocab)?)?;
        let text = std::fs::read_to_string(merges)?;
        let m = text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Tokenizer(format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v, m)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut parts: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len()
                    && self.ranks.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", parts[i], parts[i + 1]));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let clean = clean_text(text);
        let mut ids = vec![self.sot];
        for m in self.pattern.find_iter(&clean) {
            let mapped: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_table[b as usize])
                .collect();
            for piece in self.bpe(&mapped) {
                let id = self.encoder.get(&piece).ok_or_else(|| {
                    Error::Tokenizer(format!("token {piece:?} not in vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        ids.push(self.eot);
        Ok(ids)
    }
}
