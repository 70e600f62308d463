//! On-disk formats. All integers little-endian, no alignment padding.
//!
//! - `UC2E`: magic, version u32, n_rows u64, dim u32, then n_rows×dim f32
//!   row-major.
//! - `UC2C`: magic, version u32, K u64, dim u32, has_index u8, K×dim f32
//!   centroids; if has_index: K1 u32, K1×dim f32 coarse centroids, K u32
//!   parent-cell ids.
//! - `UC2T`: magic, version u32, K u64, n_sequences u64, then per sequence
//!   T u32 followed by T u32 ids.
//!
//! Writes go to a temp file in the target directory and are renamed into
//! place. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::types::{Codebook, CodebookMeta, EmbeddingMatrix, HierarchicalIndex, TokenSequence};

pub const MAGIC_EMBEDDINGS: [u8; 4] = *b"UC2E";
pub const MAGIC_CODEBOOK: [u8; 4] = *b"UC2C";
pub const MAGIC_TOKENS: [u8; 4] = *b"UC2T";
pub const FORMAT_VERSION: u32 = 1;

/// Tracks bytes consumed so truncation errors can report exact counts.
struct CountingReader<R> {
    inner: R,
    read: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, read: 0 }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.read += n as u64;
        Ok(n)
    }
}

fn truncated<R>(r: &CountingReader<R>, further: u64) -> Error {
    Error::Truncated { expected: r.read + further, actual: r.read }
}

fn read_exact_or_truncated<R: Read>(r: &mut CountingReader<R>, buf: &mut [u8]) -> Result<()> {
    let want = buf.len() as u64;
    let before = r.read;
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Err(Error::Truncated { expected: before + want, actual: r.read })
        }
        Err(e) => Err(e.into()),
    }
}

fn check_header<R: Read>(r: &mut CountingReader<R>, expected_magic: [u8; 4]) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if magic != expected_magic {
        return Err(Error::BadMagic { found: magic, expected: expected_magic });
    }
    let mut vbuf = [0u8; 4];
    read_exact_or_truncated(r, &mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion { found: version, expected: FORMAT_VERSION });
    }
    Ok(())
}

fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_f32_rows<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Reads `n_rows * dim` f32s in fixed-size row chunks.
fn read_f32_rows<R: Read>(
    r: &mut CountingReader<R>,
    n_rows: usize,
    dim: usize,
) -> Result<Vec<f32>> {
    let mut values = Vec::with_capacity(n_rows * dim);
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..n_rows {
        read_exact_or_truncated(r, &mut buf)?;
        for chunk in buf.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
    }
    Ok(values)
}

pub fn write_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(&MAGIC_EMBEDDINGS)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(matrix.n_rows() as u64)?;
        w.write_u32::<LittleEndian>(matrix.dim() as u32)?;
        write_f32_rows(w, matrix.values())
    })
}

/// Reads a UC2E file; with `validate` the payload is rejected if any value
/// is non-finite.
pub fn read_embeddings(path: &Path, validate: bool) -> Result<EmbeddingMatrix> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    check_header(&mut r, MAGIC_EMBEDDINGS)?;
    let n_rows = r.read_u64::<LittleEndian>().map_err(|_| truncated(&r, 8))? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r, 4))? as usize;
    if dim == 0 {
        return Err(Error::ShapeMismatch("dim 0 in header".into()));
    }
    let values = read_f32_rows(&mut r, n_rows, dim)?;
    let matrix = EmbeddingMatrix::new(n_rows, dim, values)?;
    if validate {
        matrix.validate()?;
    }
    Ok(matrix)
}

pub fn write_codebook(
    path: &Path,
    codebook: &Codebook,
    index: Option<&HierarchicalIndex>,
) -> Result<()> {
    let parents = match index {
        Some(idx) => Some(idx.parent_ids(codebook.k())?),
        None => None,
    };
    atomic_write(path, |w| {
        w.write_all(&MAGIC_CODEBOOK)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(codebook.k() as u64)?;
        w.write_u32::<LittleEndian>(codebook.dim() as u32)?;
        w.write_u8(if index.is_some() { 1 } else { 0 })?;
        write_f32_rows(w, codebook.centroids().values())?;
        if let (Some(idx), Some(parents)) = (index, &parents) {
            w.write_u32::<LittleEndian>(idx.k1() as u32)?;
            write_f32_rows(w, idx.coarse_centroids().values())?;
            for &p in parents {
                w.write_u32::<LittleEndian>(p)?;
            }
        }
        Ok(())
    })
}

pub fn read_codebook(path: &Path) -> Result<(Codebook, Option<HierarchicalIndex>)> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    check_header(&mut r, MAGIC_CODEBOOK)?;
    let k = r.read_u64::<LittleEndian>().map_err(|_| truncated(&r, 8))? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r, 4))? as usize;
    let has_index = {
        let mut b = [0u8; 1];
        read_exact_or_truncated(&mut r, &mut b)?;
        b[0] != 0
    };
    if dim == 0 {
        return Err(Error::ShapeMismatch("dim 0 in header".into()));
    }
    let centroids = EmbeddingMatrix::new(k, dim, read_f32_rows(&mut r, k, dim)?)?;
    let codebook = Codebook::new(centroids, CodebookMeta::default())?;
    let index = if has_index {
        let k1 = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r, 4))? as usize;
        let coarse = EmbeddingMatrix::new(k1, dim, read_f32_rows(&mut r, k1, dim)?)?;
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); k1];
        for id in 0..k as u32 {
            let parent = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r, 4))? as usize;
            if parent >= k1 {
                return Err(Error::ShapeMismatch(format!(
                    "parent cell {parent} out of range for K1 = {k1}"
                )));
            }
            buckets[parent].push(id);
        }
        Some(HierarchicalIndex::new(coarse, buckets)?)
    } else {
        None
    };
    Ok((codebook, index))
}

pub fn write_tokens(path: &Path, sequences: &[TokenSequence], k: usize) -> Result<()> {
    for seq in sequences {
        if seq.codebook_k() != k {
            return Err(Error::ShapeMismatch(format!(
                "sequence vocabulary {} vs declared K = {k}",
                seq.codebook_k()
            )));
        }
        for &t in seq.tokens() {
            if t as usize >= k {
                return Err(Error::OutOfVocabulary { token: t, k });
            }
        }
    }
    atomic_write(path, |w| {
        w.write_all(&MAGIC_TOKENS)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(k as u64)?;
        w.write_u64::<LittleEndian>(sequences.len() as u64)?;
        for seq in sequences {
            w.write_u32::<LittleEndian>(seq.len() as u32)?;
            for &t in seq.tokens() {
                w.write_u32::<LittleEndian>(t)?;
            }
        }
        Ok(())
    })
}

pub fn read_tokens(path: &Path) -> Result<(Vec<TokenSequence>, usize)> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    check_header(&mut r, MAGIC_TOKENS)?;
    let k = r.read_u64::<LittleEndian>().map_err(|_| truncated(&r, 8))? as usize;
    let n_sequences = r.read_u64::<LittleEndian>().map_err(|_| truncated(&r, 8))? as usize;
    let mut sequences = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let t = r.read_u32::<LittleEndian>().map_err(|_| truncated(&r, 4))? as usize;
        let mut tokens = Vec::with_capacity(t);
        let mut buf = vec![0u8; t * 4];
        read_exact_or_truncated(&mut r, &mut buf)?;
        for chunk in buf.chunks_exact(4) {
            tokens.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        sequences.push(TokenSequence::new(tokens, k)?);
    }
    Ok((sequences, k))
}

/// Labels as plain text, one integer per line.
pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    atomic_write(path, |w| {
        for &l in labels {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<u32>().map_err(|_| {
            Error::ShapeMismatch(format!("labels line {}: not an integer: {line:?}", i + 1))
        })?);
    }
    Ok(labels)
}
