//! Corpus ingestion: newline-delimited UTF-8 documents packed into fixed
//! length training chunks with BOS separators, plus a synthetic corpus
//! generator for demos and self-contained runs.

use crate::error::{Error, Result};
use crate::harness::tokenizer::{tokenize, BOS};
use crate::nncore::rng::CounterRng;

/// Pack documents into chunks of `seq_len + 1` token ids (inputs plus one
/// shifted target column). Documents are concatenated with BOS separators;
/// a trailing partial chunk is dropped.
pub fn pack_chunks(text: &str, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    if seq_len < 2 {
        return Err(Error::InvalidConfig("seq_len must be >= 2".into()));
    }
    let mut stream: Vec<usize> = Vec::with_capacity(text.len() + 64);
    for doc in text.lines() {
        if doc.is_empty() {
            continue;
        }
        stream.extend(tokenize(doc));
    }
    if stream.is_empty() {
        stream.push(BOS);
    }
    let width = seq_len + 1;
    Ok(stream.chunks_exact(width).map(|c| c.to_vec()).collect())
}

/// Deterministic split into train and held-out chunks.
pub fn split_eval(mut chunks: Vec<Vec<usize>>, eval_fraction: f64, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = CounterRng::new(seed, 0x5b11);
    // Fisher-Yates
    for i in (1..chunks.len()).rev() {
        let j = rng.next_below(i + 1);
        chunks.swap(i, j);
    }
    let n_eval = ((chunks.len() as f64 * eval_fraction).round() as usize)
        .clamp(1, chunks.len().saturating_sub(1).max(1));
    let train = chunks.split_off(n_eval);
    (train, chunks)
}

const NOUNS: &[&str] = &[
    "river", "mountain", "forest", "engine", "signal", "garden", "harbor", "valley", "market",
    "castle", "village", "lantern", "compass", "bridge", "meadow", "glacier",
];
const VERBS: &[&str] = &[
    "crosses", "follows", "guards", "feeds", "carries", "shadows", "circles", "warms",
];
const ADJS: &[&str] = &[
    "quiet", "bright", "ancient", "narrow", "golden", "distant", "frozen", "hidden",
];

/// Synthetic patterned text: each document (one line) reuses a small topic
/// vocabulary, so short-range structure is easy and long-range repetition
/// rewards a model that can see the whole prefix.
pub fn synthetic_corpus(seed: u64, target_bytes: usize) -> String {
    let mut rng = CounterRng::new(seed, 0xc0);
    let mut out = String::with_capacity(target_bytes + 128);
    while out.len() < target_bytes {
        let topic_nouns: Vec<&str> = (0..3).map(|_| NOUNS[rng.next_below(NOUNS.len())]).collect();
        let topic_adj = ADJS[rng.next_below(ADJS.len())];
        let sentences = 3 + rng.next_below(5);
        let mut doc = String::new();
        for _ in 0..sentences {
            let a = topic_nouns[rng.next_below(topic_nouns.len())];
            let b = topic_nouns[rng.next_below(topic_nouns.len())];
            let v = VERBS[rng.next_below(VERBS.len())];
            match rng.next_below(3) {
                0 => {
                    doc.push_str("the ");
                    doc.push_str(topic_adj);
                    doc.push(' ');
                    doc.push_str(a);
                    doc.push(' ');
                    doc.push_str(v);
                    doc.push_str(" the ");
                    doc.push_str(b);
                    doc.push_str(". ");
                }
                1 => {
                    doc.push_str("every ");
                    doc.push_str(a);
                    doc.push(' ');
                    doc.push_str(v);
                    doc.push_str(" a ");
                    doc.push_str(topic_adj);
                    doc.push(' ');
                    doc.push_str(b);
                    doc.push_str(". ");
                }
                _ => {
                    doc.push_str("the ");
                    doc.push_str(a);
                    doc.push_str(" and the ");
                    doc.push_str(b);
                    doc.push_str(" ");
                    doc.push_str(v);
                    doc.push_str(" here. ");
                }
            }
        }
        out.push_str(doc.trim_end());
        out.push('\n');
    }
    out
}
