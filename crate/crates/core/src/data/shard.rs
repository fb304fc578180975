//! Token shard files.
//!
//! Layout (little-endian): `"TLLMSHRD"`, u32 version, u32 reserved (0),
//! u64 token count, then one u16 per token.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const SHARD_MAGIC: &[u8; 8] = b"TLLMSHRD";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_BYTES: u64 = 24;
pub const DEFAULT_SHARD_BYTES: u64 = 200 * 1000 * 1000;
pub const TEST_SHARD_BYTES: u64 = 1 << 20;
const MIN_SHARD_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenShard {
    pub path: PathBuf,
    pub token_count: u64,
    pub version: u32,
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<(u32, u64)> {
    let mut h = [0u8; SHARD_HEADER_BYTES as usize];
    r.read_exact(&mut h).map_err(|e| Error::io(path, e))?;
    if &h[..8] != SHARD_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TLLMSHRD".into(),
        });
    }
    let version = u32::from_le_bytes(h[8..12].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(Error::VersionMismatch {
            expected: SHARD_VERSION,
            found: version,
        });
    }
    let count = u64::from_le_bytes(h[16..24].try_into().unwrap());
    Ok((version, count))
}

/// Open a shard and check its header against the file length.
pub fn open_shard(path: &Path) -> Result<(TokenShard, BufReader<File>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::with_capacity(1 << 16, file);
    let (version, token_count) = read_header(path, &mut r)?;
    let expected = SHARD_HEADER_BYTES + 2 * token_count;
    if actual != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok((
        TokenShard {
            path: path.to_path_buf(),
            token_count,
            version,
        },
        r,
    ))
}

pub fn read_shard(path: &Path) -> Result<Vec<u32>> {
    let (shard, mut r) = open_shard(path)?;
    let mut raw = vec![0u8; 2 * shard.token_count as usize];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .chunks_exact(2)
        .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
        .collect())
}

/// Shard files (`*.bin`) in a directory, in name order.
pub fn list_shards(dir: &Path) -> Result<Vec<TokenShard>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    paths.sort();
    paths.iter().map(|p| open_shard(p).map(|(s, _)| s)).collect()
}

/// Sequential writer that rolls over to a new file whenever the current one
/// reaches the byte limit. Documents may straddle shard boundaries.
pub struct ShardWriter {
    dir: PathBuf,
    prefix: String,
    max_tokens: u64,
    current: Option<(BufWriter<File>, PathBuf, u64)>,
    done: Vec<TokenShard>,
}

impl ShardWriter {
    pub fn new(dir: &Path, shard_size_limit: u64) -> Result<Self> {
        Self::with_prefix(dir, "shard", shard_size_limit)
    }

    pub fn with_prefix(dir: &Path, prefix: &str, shard_size_limit: u64) -> Result<Self> {
        if shard_size_limit < MIN_SHARD_BYTES {
            return Err(Error::InvalidConfig(format!(
                "shard size limit {shard_size_limit} is below 1 MiB"
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // Stale shards from an earlier run would otherwise be read back as
        // part of this stream.
        for old in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = old.map_err(|e| Error::io(dir, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with(&format!("{prefix}_")) && name.ends_with(".bin") {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            prefix: prefix.to_owned(),
            max_tokens: shard_size_limit / 2,
            current: None,
            done: Vec::new(),
        })
    }

    fn open_next(&mut self) -> Result<()> {
        let path = self
            .dir
            .join(format!("{}_{:05}.bin", self.prefix, self.done.len()));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::with_capacity(1 << 16, file);
        let mut header = Vec::with_capacity(SHARD_HEADER_BYTES as usize);
        header.extend_from_slice(SHARD_MAGIC);
        header.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        w.write_all(&header).map_err(|e| Error::io(&path, e))?;
        self.current = Some((w, path, 0));
        Ok(())
    }

    fn close_current(&mut self) -> Result<()> {
        if let Some((w, path, count)) = self.current.take() {
            let mut file = w.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
            file.seek(SeekFrom::Start(16)).map_err(|e| Error::io(&path, e))?;
            file.write_all(&count.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
            self.done.push(TokenShard {
                path,
                token_count: count,
                version: SHARD_VERSION,
            });
        }
        Ok(())
    }

    pub fn write_tokens(&mut self, tokens: &[u32]) -> Result<()> {
        let mut rest = tokens;
        while !rest.is_empty() {
            if self.current.as_ref().is_none_or(|c| c.2 >= self.max_tokens) {
                self.close_current()?;
                self.open_next()?;
            }
            let (w, path, count) = self.current.as_mut().expect("shard open");
            let room = (self.max_tokens - *count) as usize;
            let (now, later) = rest.split_at(room.min(rest.len()));
            let mut buf = Vec::with_capacity(now.len() * 2);
            for &t in now {
                let t = u16::try_from(t).map_err(|_| {
                    Error::InvalidInput(format!("token id {t} does not fit a u16 shard"))
                })?;
                buf.extend_from_slice(&t.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io(&*path, e))?;
            *count += now.len() as u64;
            rest = later;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<TokenShard>> {
        self.close_current()?;
        Ok(self.done)
    }
}

/// Encode documents in order, each followed by the end-of-text id, into
/// shards of at most `shard_size_limit` bytes of token payload.
pub fn tokenize_corpus<I, S>(
    docs: I,
    tokenizer: &Tokenizer,
    shard_size_limit: u64,
    out_dir: &Path,
) -> Result<Vec<TokenShard>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut writer = ShardWriter::new(out_dir, shard_size_limit)?;
    for doc in docs {
        let mut ids = tokenizer.encode(doc.as_ref());
        ids.push(tokenizer.eot_id());
        writer.write_tokens(&ids)?;
    }
    writer.finish()
}

/// Lazy, chunked reader over an ordered shard stream.
pub struct TokenCursor {
    paths: Vec<PathBuf>,
    next_shard: usize,
    reader: Option<(BufReader<File>, PathBuf, u64)>,
    buf: Vec<u32>,
    pos: usize,
}

const CHUNK_TOKENS: usize = 1 << 15;

impl TokenCursor {
    pub fn new(shards: &[TokenShard]) -> Self {
        Self {
            paths: shards.iter().map(|s| s.path.clone()).collect(),
            next_shard: 0,
            reader: None,
            buf: Vec::new(),
            pos: 0,
        }
    }

    pub fn open_dir(dir: &Path) -> Result<Self> {
        Ok(Self::new(&list_shards(dir)?))
    }

    /// Rewind to the first token of the first shard.
    pub fn reset(&mut self) {
        self.next_shard = 0;
        self.reader = None;
        self.buf.clear();
        self.pos = 0;
    }

    fn refill(&mut self) -> Result<bool> {
        loop {
            if let Some((r, path, remaining)) = self.reader.as_mut() {
                if *remaining > 0 {
                    let n = (*remaining as usize).min(CHUNK_TOKENS);
                    let mut raw = vec![0u8; n * 2];
                    r.read_exact(&mut raw).map_err(|e| Error::io(&*path, e))?;
                    self.buf.clear();
                    self.buf.extend(
                        raw.chunks_exact(2)
                            .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]]))),
                    );
                    self.pos = 0;
                    *remaining -= n as u64;
                    return Ok(true);
                }
                self.reader = None;
            }
            let Some(path) = self.paths.get(self.next_shard) else {
                return Ok(false);
            };
            self.next_shard += 1;
            let (shard, r) = open_shard(path)?;
            self.reader = Some((r, shard.path, shard.token_count));
        }
    }

    pub fn next_token(&mut self) -> Result<Option<u32>> {
        if self.pos >= self.buf.len() && !self.refill()? {
            return Ok(None);
        }
        let t = self.buf[self.pos];
        self.pos += 1;
        Ok(Some(t))
    }

    /// Fill `out` completely; returns how many tokens were available.
    pub fn read_into(&mut self, out: &mut [u32]) -> Result<usize> {
        let mut filled = 0;
        while filled < out.len() {
            if self.pos >= self.buf.len() && !self.refill()? {
                break;
            }
            let n = (self.buf.len() - self.pos).min(out.len() - filled);
            out[filled..filled + n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
            self.pos += n;
            filled += n;
        }
        Ok(filled)
    }

    /// Next document, including its terminating `eot`. A trailing fragment
    /// without a terminator is returned as-is.
    pub fn next_document(&mut self, eot: u32) -> Result<Option<Vec<u32>>> {
        let mut doc = Vec::new();
        while let Some(t) = self.next_token()? {
            doc.push(t);
            if t == eot {
                return Ok(Some(doc));
            }
        }
        Ok(if doc.is_empty() { None } else { Some(doc) })
    }
}
