//! Corpus ingestion: `__eou__`-delimited dialogue lines, token-frequency
//! vocabularies with a hard cap, (context -> target) example
//! construction for 1-turn and 2-turn generation, and padded batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SOS: u32 = 2;
pub const EOU: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOU_TOKEN: &str = "__eou__";

const RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, SOS_TOKEN, EOU_TOKEN];

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub utterances: Vec<Vec<String>>,
}

impl Dialogue {
    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(|u| u.len()).sum()
    }
}

#[derive(Debug)]
pub struct ParseReport {
    pub dialogues: Vec<Dialogue>,
    /// Lines that yielded fewer than two utterances.
    pub dropped: usize,
}

pub fn tokenize_utterance(raw: &str) -> Vec<String> {
    raw.split_whitespace().map(|t| t.to_lowercase()).collect()
}

pub fn parse_corpus_str(text: &str) -> ParseReport {
    let mut dialogues = Vec::new();
    let mut dropped = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let utterances: Vec<Vec<String>> = line
            .split(EOU_TOKEN)
            .map(tokenize_utterance)
            .filter(|u| !u.is_empty())
            .collect();
        if utterances.len() < 2 {
            dropped += 1;
        } else {
            dialogues.push(Dialogue { utterances });
        }
    }
    ParseReport { dialogues, dropped }
}

pub fn parse_corpus(path: &Path) -> Result<ParseReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report = parse_corpus_str(&text);
    if report.dialogues.is_empty() {
        return Err(Error::EmptyCorpus { path: path.to_path_buf() });
    }
    Ok(report)
}

/// Keep dialogues whose total token count is <= max_tokens ("more than
/// `max_tokens` tokens" are removed, so the boundary is retained).
pub fn filter_dialogues(dialogues: Vec<Dialogue>, max_tokens: usize) -> (Vec<Dialogue>, usize) {
    assert!(max_tokens >= 1, "filter_dialogues: max_tokens must be >= 1");
    let before = dialogues.len();
    let kept: Vec<Dialogue> =
        dialogues.into_iter().filter(|d| d.token_count() <= max_tokens).collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Rank tokens by corpus frequency (ties broken lexicographically)
    /// and keep the top `cap` after the four reserved entries.
    pub fn build(dialogues: &[Dialogue], cap: usize) -> Vocabulary {
        assert!(cap >= 1, "vocabulary cap must be >= 1");
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for d in dialogues {
            for u in &d.utterances {
                for tok in u {
                    if RESERVED.contains(&tok.as_str()) {
                        continue;
                    }
                    *freq.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap);

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts: Vec<u64> = vec![0; RESERVED.len()];
        for (tok, c) in ranked {
            id_to_token.push(tok.to_string());
            counts.push(c);
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { token_to_id, id_to_token, counts }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// `token<TAB>id<TAB>count` lines.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", tok, i, self.counts[i]));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let tok = parts
                .next()
                .ok_or_else(|| Error::Vocab(format!("{}: bad line {}", path.display(), lineno + 1)))?;
            let id: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Vocab(format!("{}: bad id on line {}", path.display(), lineno + 1)))?;
            let count: u64 = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
            if id != id_to_token.len() {
                return Err(Error::Vocab(format!(
                    "{}: non-contiguous id {} on line {}",
                    path.display(),
                    id,
                    lineno + 1
                )));
            }
            id_to_token.push(tok.to_string());
            counts.push(count);
        }
        if id_to_token.len() < RESERVED.len()
            || RESERVED.iter().enumerate().any(|(i, r)| id_to_token[i] != *r)
        {
            return Err(Error::Vocab(format!(
                "{}: reserved tokens missing or out of order",
                path.display()
            )));
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocabulary { token_to_id, id_to_token, counts })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExampleMode {
    /// Every turn i >= 2 is a target; turns 1..i-1 are the context.
    NextTurn,
    /// Every turn i >= 3 is a target; turns i-2 and i-1 are the context.
    TwoPrevSource,
    /// Turns (i, i+1) are joint targets; prior turns are the context.
    TwoTurnTarget,
}

/// Token-space example; targets already carry a trailing EOU marker.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: Vec<Vec<String>>,
    pub targets: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub context: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

pub fn make_examples(dialogues: &[Dialogue], mode: ExampleMode) -> Vec<Example> {
    let mut out = Vec::new();
    for d in dialogues {
        let n = d.utterances.len();
        match mode {
            ExampleMode::NextTurn => {
                for i in 1..n {
                    out.push(Example {
                        context: d.utterances[..i].to_vec(),
                        targets: vec![with_eou(&d.utterances[i])],
                    });
                }
            }
            ExampleMode::TwoPrevSource => {
                for i in 2..n {
                    out.push(Example {
                        context: d.utterances[i - 2..i].to_vec(),
                        targets: vec![with_eou(&d.utterances[i])],
                    });
                }
            }
            ExampleMode::TwoTurnTarget => {
                for i in 1..n.saturating_sub(1) {
                    out.push(Example {
                        context: d.utterances[..i].to_vec(),
                        targets: vec![with_eou(&d.utterances[i]), with_eou(&d.utterances[i + 1])],
                    });
                }
            }
        }
    }
    out
}

fn with_eou(utterance: &[String]) -> Vec<String> {
    let mut t = utterance.to_vec();
    t.push(EOU_TOKEN.to_string());
    t
}

pub fn encode_example(ex: &Example, vocab: &Vocabulary) -> EncodedExample {
    EncodedExample {
        context: ex.context.iter().map(|u| u.iter().map(|t| vocab.encode(t)).collect()).collect(),
        targets: ex.targets.iter().map(|u| u.iter().map(|t| vocab.encode(t)).collect()).collect(),
    }
}

/// Padded batch with masks; `mask[i][t] == 1` iff `t < length(i)`.
#[derive(Clone, Debug)]
pub struct Batch {
    /// [example][utterance][position], PAD-padded.
    pub ctx_tokens: Vec<Vec<Vec<u32>>>,
    /// [example][utterance] true lengths; absent utterance slots are 0.
    pub ctx_lens: Vec<Vec<usize>>,
    pub ctx_mask: Vec<Vec<Vec<u8>>>,
    /// [target slot][example][position], PAD-padded.
    pub tgt_tokens: Vec<Vec<Vec<u32>>>,
    pub tgt_lens: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<Vec<u8>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ctx_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ctx_tokens.is_empty()
    }

    pub fn target_slots(&self) -> usize {
        self.tgt_tokens.len()
    }

    /// Unpadded context utterances of example i.
    pub fn context_of(&self, i: usize) -> Vec<Vec<u32>> {
        self.ctx_lens[i]
            .iter()
            .enumerate()
            .filter(|(_, &len)| len > 0)
            .map(|(u, &len)| self.ctx_tokens[i][u][..len].to_vec())
            .collect()
    }

    /// Unpadded target sequences of example i, one per slot.
    pub fn targets_of(&self, i: usize) -> Vec<Vec<u32>> {
        (0..self.target_slots())
            .map(|s| self.tgt_tokens[s][i][..self.tgt_lens[s][i]].to_vec())
            .collect()
    }
}

pub fn batch_examples(examples: &[EncodedExample], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    examples.chunks(batch_size).map(build_batch).collect()
}

fn build_batch(chunk: &[EncodedExample]) -> Batch {
    let slots = chunk[0].targets.len();
    assert!(
        chunk.iter().all(|e| e.targets.len() == slots),
        "batch: examples mix target-slot counts"
    );
    let max_utts = chunk.iter().map(|e| e.context.len()).max().unwrap();
    let max_ctx_len =
        chunk.iter().flat_map(|e| e.context.iter().map(|u| u.len())).max().unwrap_or(0);

    let mut ctx_tokens = Vec::with_capacity(chunk.len());
    let mut ctx_lens = Vec::with_capacity(chunk.len());
    let mut ctx_mask = Vec::with_capacity(chunk.len());
    for e in chunk {
        let mut utts = Vec::with_capacity(max_utts);
        let mut lens = Vec::with_capacity(max_utts);
        let mut masks = Vec::with_capacity(max_utts);
        for u in 0..max_utts {
            let src: &[u32] = e.context.get(u).map(|v| v.as_slice()).unwrap_or(&[]);
            let mut padded = vec![PAD; max_ctx_len];
            padded[..src.len()].copy_from_slice(src);
            let mask: Vec<u8> =
                (0..max_ctx_len).map(|t| if t < src.len() { 1 } else { 0 }).collect();
            utts.push(padded);
            lens.push(src.len());
            masks.push(mask);
        }
        ctx_tokens.push(utts);
        ctx_lens.push(lens);
        ctx_mask.push(masks);
    }

    let mut tgt_tokens = Vec::with_capacity(slots);
    let mut tgt_lens = Vec::with_capacity(slots);
    let mut tgt_mask = Vec::with_capacity(slots);
    for s in 0..slots {
        let max_len = chunk.iter().map(|e| e.targets[s].len()).max().unwrap();
        let mut toks = Vec::with_capacity(chunk.len());
        let mut lens = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for e in chunk {
            let src = &e.targets[s];
            let mut padded = vec![PAD; max_len];
            padded[..src.len()].copy_from_slice(src);
            let mask: Vec<u8> = (0..max_len).map(|t| if t < src.len() { 1 } else { 0 }).collect();
            toks.push(padded);
            lens.push(src.len());
            masks.push(mask);
        }
        tgt_tokens.push(toks);
        tgt_lens.push(lens);
        tgt_mask.push(masks);
    }

    Batch { ctx_tokens, ctx_lens, ctx_mask, tgt_tokens, tgt_lens, tgt_mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_line_format() {
        let r = parse_corpus_str("hi __eou__ hello there __eou__\n");
        assert_eq!(r.dialogues.len(), 1);
        assert_eq!(r.dialogues[0].utterances, vec![utt(&["hi"]), utt(&["hello", "there"])]);
        assert_eq!(r.dropped, 0);
    }

    #[test]
    fn parse_drops_single_utterance_lines() {
        let r = parse_corpus_str("hi __eou__\n");
        assert_eq!(r.dialogues.len(), 0);
        assert_eq!(r.dropped, 1);
    }

    #[test]
    fn parse_counts_malformed_lines() {
        let r = parse_corpus_str("a __eou__ b __eou__\nonly one\nc __eou__ d __eou__\n");
        assert_eq!(r.dialogues.len(), 2);
        assert_eq!(r.dropped, 1);
    }

    #[test]
    fn parse_missing_file_is_io_error() {
        let err = parse_corpus(Path::new("/nonexistent/corpus.txt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn corpus_with_no_valid_dialogues_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        fs::write(&path, "only one utterance\n\n").unwrap();
        let err = parse_corpus(&path).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus { .. }));
    }

    #[test]
    fn tokenize_cases() {
        assert_eq!(tokenize_utterance("How are you ?"), utt(&["how", "are", "you", "?"]));
        assert_eq!(tokenize_utterance(""), Vec::<String>::new());
        assert_eq!(tokenize_utterance("  a   b  "), utt(&["a", "b"]));
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let exactly = Dialogue { utterances: vec![vec!["w".to_string(); 150], vec!["w".to_string(); 150]] };
        let over = Dialogue { utterances: vec![vec!["w".to_string(); 150], vec!["w".to_string(); 151]] };
        let (kept, removed) = filter_dialogues(vec![exactly.clone(), over], 300);
        assert_eq!(kept, vec![exactly]);
        assert_eq!(removed, 1);
        let (empty, removed) = filter_dialogues(vec![], 300);
        assert!(empty.is_empty());
        assert_eq!(removed, 0);
    }

    #[test]
    fn vocabulary_ranking_and_ties() {
        let ds = parse_corpus_str("a a a b b c __eou__ x __eou__\n").dialogues;
        let v = Vocabulary::build(&ds, 2);
        assert_eq!(v.len(), 6); // 4 reserved + 2
        assert_eq!(v.encode("a"), 4);
        assert_eq!(v.encode("b"), 5);
        assert_eq!(v.encode("c"), UNK);

        // tie a/b at 2 with cap 1 keeps "a" lexicographically
        let ds = parse_corpus_str("a a b __eou__ b __eou__\n").dialogues;
        let v = Vocabulary::build(&ds, 1);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let ds = parse_corpus_str("z y x w __eou__ w x y __eou__\nq r __eou__ s t __eou__\n").dialogues;
        let a = Vocabulary::build(&ds, 5);
        let b = Vocabulary::build(&ds, 5);
        assert_eq!(a.id_to_token, b.id_to_token);
    }

    #[test]
    fn vocabulary_dump_load_roundtrip() {
        let ds = parse_corpus_str("a a b __eou__ c __eou__\n").dialogues;
        let v = Vocabulary::build(&ds, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.dump(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v.id_to_token, loaded.id_to_token);
        assert_eq!(v.counts, loaded.counts);
    }

    #[test]
    fn make_examples_modes() {
        let d = Dialogue { utterances: vec![utt(&["a"]), utt(&["b"]), utt(&["c"])] };
        let next = make_examples(std::slice::from_ref(&d), ExampleMode::NextTurn);
        assert_eq!(next.len(), 2);
        assert_eq!(next[0].context, vec![utt(&["a"])]);
        assert_eq!(next[0].targets, vec![utt(&["b", EOU_TOKEN])]);
        assert_eq!(next[1].context, vec![utt(&["a"]), utt(&["b"])]);

        let two_prev = make_examples(std::slice::from_ref(&d), ExampleMode::TwoPrevSource);
        assert_eq!(two_prev.len(), 1);
        assert_eq!(two_prev[0].context, vec![utt(&["a"]), utt(&["b"])]);
        assert_eq!(two_prev[0].targets, vec![utt(&["c", EOU_TOKEN])]);

        let d4 = Dialogue {
            utterances: vec![utt(&["a"]), utt(&["b"]), utt(&["c"]), utt(&["d"])],
        };
        let two_turn = make_examples(std::slice::from_ref(&d4), ExampleMode::TwoTurnTarget);
        assert_eq!(two_turn.len(), 2);
        assert!(two_turn.iter().any(|e| e.context == vec![utt(&["a"]), utt(&["b"])]
            && e.targets == vec![utt(&["c", EOU_TOKEN]), utt(&["d", EOU_TOKEN])]));
    }

    #[test]
    fn encode_and_roundtrip() {
        let ds = parse_corpus_str("hi there __eou__ hi __eou__\n").dialogues;
        let v = Vocabulary::build(&ds, 10);
        let ex = Example { context: vec![utt(&["hi"])], targets: vec![utt(&["hi", EOU_TOKEN])] };
        let enc = encode_example(&ex, &v);
        assert_eq!(enc.targets[0].last(), Some(&EOU));
        let decoded: Vec<String> =
            enc.targets[0].iter().map(|&id| v.decode(id).to_string()).collect();
        assert_eq!(decoded, ex.targets[0]);

        let oov = Example { context: vec![utt(&["zzzz"])], targets: vec![utt(&["zzzz", EOU_TOKEN])] };
        let enc = encode_example(&oov, &v);
        assert_eq!(enc.targets[0], vec![UNK, EOU]);
    }

    #[test]
    fn batching_shapes_and_masks() {
        let exs: Vec<EncodedExample> = (0..10)
            .map(|i| EncodedExample {
                context: vec![vec![4; 3]],
                targets: vec![vec![5; 2 + (i % 2)].into_iter().chain([EOU]).collect()],
            })
            .collect();
        let batches = batch_examples(&exs, 8);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 8);
        assert_eq!(batches[1].len(), 2);

        let long = EncodedExample { context: vec![vec![4, 4, 4]], targets: vec![vec![5; 5]] };
        let short = EncodedExample { context: vec![vec![4]], targets: vec![vec![5; 3]] };
        let b = &batch_examples(&[short, long], 2)[0];
        assert_eq!(b.tgt_tokens[0][0].len(), 5);
        let mask_sums: Vec<usize> =
            b.tgt_mask[0].iter().map(|m| m.iter().map(|&x| x as usize).sum()).collect();
        assert_eq!(mask_sums, vec![3, 5]);
        for (i, m) in b.tgt_mask[0].iter().enumerate() {
            for (t, &bit) in m.iter().enumerate() {
                assert_eq!(bit == 1, t < b.tgt_lens[0][i]);
            }
        }
        assert_eq!(b.context_of(0), vec![vec![4]]);
        assert_eq!(b.context_of(1), vec![vec![4, 4, 4]]);
    }
}
