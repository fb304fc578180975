//! Byte-level BPE tokenizer with the GPT-2 vocabulary.
//!
//! Text is split on the literal end-of-text marker, pre-tokenized with the
//! GPT-2 regex, mapped byte-by-byte into the printable unicode alphabet and
//! then merged greedily by merge rank.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub const GPT2_VOCAB_SIZE: usize = 50_257;
pub const EOT_ID: u32 = 50_256;
pub const EOT_MARKER: &str = "<|endoftext|>";

const PRETOKENIZE: &str =
    r"'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

static BUNDLED_VOCAB: &str = include_str!("../assets/vocab.json");
static BUNDLED_MERGES: &str = include_str!("../assets/merges.txt");

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// Raw bytes for every id.
    decoder: Vec<Vec<u8>>,
    /// Id of each single byte.
    byte_ids: [u32; 256],
    /// (left, right) → (rank, merged id).
    merges: HashMap<(u32, u32), (u32, u32)>,
    eot_id: u32,
    pattern: Regex,
}

/// GPT-2's reversible byte → printable unicode map.
pub fn byte_encoder() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut printable = vec![false; 256];
    for b in (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF) {
        printable[b as usize] = true;
        table[b as usize] = char::from(b);
    }
    let mut next = 0u32;
    for b in 0..256usize {
        if !printable[b] {
            table[b] = char::from_u32(256 + next).expect("valid code point");
            next += 1;
        }
    }
    table
}

/// Load the tokenizer from a vocab map (JSON object of token → id) and a
/// merges list (one space-separated pair per line, rank = line order).
pub fn load_tokenizer(vocab_path: &Path, merges_path: &Path) -> Result<Tokenizer> {
    let read = |p: &Path| -> Result<String> {
        if !p.exists() {
            return Err(Error::AssetNotFound(p.to_path_buf()));
        }
        fs::read_to_string(p).map_err(|e| Error::io(p, e))
    };
    let vocab = read(vocab_path)?;
    let merges = read(merges_path)?;
    Tokenizer::from_strs(&vocab, &merges)
}

impl Tokenizer {
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let vocab: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::malformed("vocab", e.to_string()))?;
        if vocab.len() != GPT2_VOCAB_SIZE {
            return Err(Error::VocabSizeMismatch {
                expected: GPT2_VOCAB_SIZE,
                found: vocab.len(),
            });
        }

        let enc = byte_encoder();
        let mut dec_char: HashMap<char, u8> = HashMap::with_capacity(256);
        for (b, c) in enc.iter().enumerate() {
            dec_char.insert(*c, b as u8);
        }

        let mut decoder: Vec<Option<Vec<u8>>> = vec![None; vocab.len()];
        let mut eot_id = None;
        for (token, &id) in &vocab {
            let slot = decoder.get_mut(id as usize).ok_or_else(|| {
                Error::malformed("vocab", format!("id {id} outside [0, {})", vocab.len()))
            })?;
            let bytes = if token == EOT_MARKER {
                eot_id = Some(id);
                EOT_MARKER.as_bytes().to_vec()
            } else {
                token
                    .chars()
                    .map(|c| {
                        dec_char.get(&c).copied().ok_or_else(|| {
                            Error::malformed("vocab", format!("token {token:?} has non-byte char"))
                        })
                    })
                    .collect::<Result<Vec<u8>>>()?
            };
            if bytes.is_empty() {
                return Err(Error::malformed("vocab", format!("empty token for id {id}")));
            }
            if slot.replace(bytes).is_some() {
                return Err(Error::malformed("vocab", format!("duplicate id {id}")));
            }
        }
        let decoder: Vec<Vec<u8>> = decoder
            .into_iter()
            .enumerate()
            .map(|(i, d)| d.ok_or_else(|| Error::malformed("vocab", format!("missing id {i}"))))
            .collect::<Result<_>>()?;
        let eot_id = eot_id.ok_or_else(|| Error::malformed("vocab", "no end-of-text token"))?;

        let mut byte_ids = [0u32; 256];
        for (b, c) in enc.iter().enumerate() {
            byte_ids[b] = *vocab
                .get(&c.to_string())
                .ok_or_else(|| Error::malformed("vocab", format!("byte {b} has no token")))?;
        }

        let mut merges = HashMap::new();
        let rules = merges_txt
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty());
        for (rank, line) in rules.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::malformed("merges", format!("line {:?}", line)))?;
            let lookup = |s: &str| {
                vocab.get(s).copied().ok_or_else(|| {
                    Error::malformed("merges", format!("token {s:?} not in vocab"))
                })
            };
            let merged = lookup(&format!("{a}{b}"))?;
            merges
                .entry((lookup(a)?, lookup(b)?))
                .or_insert((rank as u32, merged));
        }

        let pattern = Regex::new(PRETOKENIZE).expect("static pattern compiles");
        Ok(Self {
            decoder,
            byte_ids,
            merges,
            eot_id,
            pattern,
        })
    }

    /// The GPT-2 assets shipped in `assets/`.
    pub fn bundled() -> Result<Self> {
        Self::from_strs(BUNDLED_VOCAB, BUNDLED_MERGES)
    }

    /// Process-wide shared instance of [`Tokenizer::bundled`].
    pub fn gpt2() -> &'static Tokenizer {
        static CELL: OnceLock<Tokenizer> = OnceLock::new();
        CELL.get_or_init(|| Tokenizer::bundled().expect("bundled tokenizer assets are valid"))
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn eot_id(&self) -> u32 {
        self.eot_id
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        let mut first = true;
        for segment in text.split(EOT_MARKER) {
            if !first {
                out.push(self.eot_id);
            }
            first = false;
            self.encode_ordinary(segment, &mut out);
        }
        out
    }

    fn encode_ordinary(&self, text: &str, out: &mut Vec<u32>) {
        for m in self.pattern.find_iter(text) {
            // The pattern has no failure modes on valid UTF-8 short of
            // backtrack limits, which these alternatives cannot hit.
            let piece = m.expect("pretokenizer regex").as_str();
            self.bpe(piece.as_bytes(), out);
        }
    }

    fn bpe(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut parts: Vec<u32> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.get(&(w[0], w[1])).map(|&(r, id)| (r, i, id)))
                .min();
            let Some((_, i, id)) = best else { break };
            parts[i] = id;
            parts.remove(i + 1);
        }
        out.extend(parts);
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.decoder.get(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.decoder.len(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Invalid UTF-8 (a multi-byte char cut between tokens) is replaced
    /// lossily; use [`Tokenizer::decode_bytes`] for the raw bytes.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_vocab_has_gpt2_shape() {
        let t = Tokenizer::gpt2();
        assert_eq!(t.vocab_size(), 50_257);
        assert_eq!(t.eot_id(), 50_256);
        assert_eq!(t.decode(&[50_256]).unwrap(), "<|endoftext|>");
        for id in 0..t.vocab_size() as u32 {
            assert!(!t.decode_bytes(&[id]).unwrap().is_empty());
        }
    }

    #[test]
    fn empty_round_trips() {
        let t = Tokenizer::gpt2();
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn sensor_phrase_round_trips() {
        let t = Tokenizer::gpt2();
        assert_eq!(t.decode(&t.encode("Sensor data")).unwrap(), "Sensor data");
    }

    #[test]
    fn eot_only_from_literal_marker() {
        let t = Tokenizer::gpt2();
        assert!(!t.encode("end of text <|endoftext").contains(&EOT_ID));
        assert_eq!(t.encode("Hold<|endoftext|>"), vec![26807, 50256]);
    }

    #[test]
    fn ascii_never_expands() {
        let t = Tokenizer::gpt2();
        let s: String = (0..1024).map(|i| char::from(b' ' + (i * 31 % 95) as u8)).collect();
        assert!(t.encode(&s).len() <= 1024);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let t = Tokenizer::gpt2();
        assert!(matches!(
            t.decode(&[50_257]),
            Err(Error::TokenOutOfRange { id: 50_257, .. })
        ));
    }

    #[test]
    fn byte_encoder_is_a_bijection() {
        let enc = byte_encoder();
        let mut seen: Vec<char> = enc.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(enc[b' ' as usize], 'Ġ');
    }
}
