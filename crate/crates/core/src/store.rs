//! Binary record containers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[4] | version u32 | record_count u64 | header_len u64 | header (UTF-8 JSON)
//! record*  = sample_id i64 | block_0 f32* | block_1 f32* | ...
//! ```
//!
//! Records have a fixed stride derived from the header, so any record (or any
//! single block of a record) can be reached with one seek. Gradient files use
//! magic `GSG1`; projected files reuse the container with magic `GSP1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{de::DeserializeOwned, Serialize};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::manifest::{ComponentManifest, GradientRecord};

pub const GRADIENT_MAGIC: [u8; 4] = *b"GSG1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 4 + 4 + 8 + 8;

static RECORD_READS: AtomicU64 = AtomicU64::new(0);

/// Total number of records (or record blocks) read from any container in
/// this process. Used to verify that search stages never touch gradient
/// files.
pub fn record_reads() -> u64 {
    RECORD_READS.load(Ordering::Relaxed)
}

pub(crate) struct RawWriter {
    out: BufWriter<NamedTempFile>,
    dest: PathBuf,
    block_lens: Vec<usize>,
    count: u64,
}

impl RawWriter {
    pub(crate) fn create<H: Serialize>(
        path: &Path,
        magic: [u8; 4],
        header: &H,
        block_lens: Vec<usize>,
    ) -> Result<Self> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = NamedTempFile::new_in(dir)?;
        let mut out = BufWriter::new(tmp);
        let header = serde_json::to_vec(header)?;
        out.write_all(&magic)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?; // patched in finish()
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        Ok(RawWriter { out, dest: path.to_path_buf(), block_lens, count: 0 })
    }

    pub(crate) fn write<B: AsRef<[f32]>>(&mut self, sample_id: u64, blocks: &[B]) -> Result<()> {
        if blocks.len() != self.block_lens.len()
            || blocks.iter().zip(&self.block_lens).any(|(b, &n)| b.as_ref().len() != n)
        {
            return Err(Error::ManifestMismatch(format!(
                "sample {sample_id}: block lengths {:?} do not match header {:?}",
                blocks.iter().map(|b| b.as_ref().len()).collect::<Vec<_>>(),
                self.block_lens
            )));
        }
        self.out.write_all(&(sample_id as i64).to_le_bytes())?;
        let mut buf = Vec::new();
        for b in blocks {
            buf.clear();
            buf.extend(b.as_ref().iter().flat_map(|v| v.to_le_bytes()));
            self.out.write_all(&buf)?;
        }
        self.count += 1;
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<()> {
        let mut tmp = self.out.into_inner().map_err(|e| e.into_error())?;
        tmp.as_file_mut().seek(SeekFrom::Start(8))?;
        tmp.as_file_mut().write_all(&self.count.to_le_bytes())?;
        tmp.as_file_mut().sync_all()?;
        tmp.persist(&self.dest).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

pub(crate) struct RawReader {
    file: BufReader<File>,
    block_lens: Vec<usize>,
    block_offsets: Vec<u64>,
    count: u64,
    data_start: u64,
    stride: u64,
}

impl RawReader {
    pub(crate) fn open<H: DeserializeOwned>(
        path: &Path,
        magic: [u8; 4],
        block_lens: impl FnOnce(&H) -> Vec<usize>,
    ) -> Result<(Self, H)> {
        let file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut file = BufReader::new(file);
        let mut pre = [0u8; PREAMBLE_LEN as usize];
        read_exact_or_truncated(&mut file, &mut pre[..4], "magic")?;
        let found: [u8; 4] = pre[..4].try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        read_exact_or_truncated(&mut file, &mut pre[4..], "preamble")?;
        let version = u32::from_le_bytes(pre[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = u64::from_le_bytes(pre[8..16].try_into().unwrap());
        let header_len = u64::from_le_bytes(pre[16..24].try_into().unwrap());
        if PREAMBLE_LEN + header_len > file_len {
            return Err(Error::Truncated(format!("header of {header_len} bytes exceeds file")));
        }
        let mut header = vec![0u8; header_len as usize];
        read_exact_or_truncated(&mut file, &mut header, "header")?;
        let header: H = serde_json::from_slice(&header)?;
        let block_lens = block_lens(&header);

        let mut block_offsets = Vec::with_capacity(block_lens.len());
        let mut off = 8u64;
        for &n in &block_lens {
            block_offsets.push(off);
            off += 4 * n as u64;
        }
        let stride = off;
        let data_start = PREAMBLE_LEN + header_len;
        let expected = data_start + count * stride;
        if file_len < expected {
            return Err(Error::Truncated(format!(
                "expected {count} records ({expected} bytes), file has {file_len} bytes"
            )));
        }
        if file_len > expected {
            return Err(Error::Format(format!("{} trailing bytes after last record", file_len - expected)));
        }
        Ok((RawReader { file, block_lens, block_offsets, count, data_start, stride }, header))
    }

    pub(crate) fn len(&self) -> u64 {
        self.count
    }

    fn seek_record(&mut self, index: u64, offset_in_record: u64) -> Result<()> {
        if index >= self.count {
            return Err(Error::Invalid(format!("record index {index} out of range ({})", self.count)));
        }
        let pos = self.data_start + index * self.stride + offset_in_record;
        self.file.seek(SeekFrom::Start(pos))?;
        Ok(())
    }

    pub(crate) fn read_at(&mut self, index: u64) -> Result<(u64, Vec<Vec<f32>>)> {
        self.seek_record(index, 0)?;
        self.read_next()
    }

    /// Reads the record at the current position.
    pub(crate) fn read_next(&mut self) -> Result<(u64, Vec<Vec<f32>>)> {
        RECORD_READS.fetch_add(1, Ordering::Relaxed);
        let mut id = [0u8; 8];
        read_exact_or_truncated(&mut self.file, &mut id, "sample id")?;
        let sample_id = i64::from_le_bytes(id) as u64;
        let mut blocks = Vec::with_capacity(self.block_lens.len());
        for k in 0..self.block_lens.len() {
            blocks.push(self.read_block_here(k)?);
        }
        Ok((sample_id, blocks))
    }

    fn read_block_here(&mut self, k: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; 4 * self.block_lens[k]];
        read_exact_or_truncated(&mut self.file, &mut buf, "record block")?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn read_block(&mut self, index: u64, k: usize) -> Result<Vec<f32>> {
        if k >= self.block_lens.len() {
            return Err(Error::UnknownComponent(k));
        }
        self.seek_record(index, self.block_offsets[k])?;
        RECORD_READS.fetch_add(1, Ordering::Relaxed);
        self.read_block_here(k)
    }

    pub(crate) fn sample_id_at(&mut self, index: u64) -> Result<u64> {
        self.seek_record(index, 0)?;
        let mut id = [0u8; 8];
        read_exact_or_truncated(&mut self.file, &mut id, "sample id")?;
        Ok(i64::from_le_bytes(id) as u64)
    }

    pub(crate) fn rewind(&mut self) -> Result<()> {
        self.file.seek(SeekFrom::Start(self.data_start))?;
        Ok(())
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("unexpected end of file reading {what}")),
        _ => Error::Io(e),
    })
}

/// Streaming writer for gradient files. The file appears at its destination
/// only after [`GradientWriter::finish`]; dropping the writer early leaves
/// nothing behind.
pub struct GradientWriter {
    raw: RawWriter,
    manifest: ComponentManifest,
}

impl GradientWriter {
    pub fn create(path: impl AsRef<Path>, manifest: &ComponentManifest) -> Result<Self> {
        manifest.validate()?;
        let raw = RawWriter::create(path.as_ref(), GRADIENT_MAGIC, manifest, manifest.param_counts())?;
        Ok(GradientWriter { raw, manifest: manifest.clone() })
    }

    pub fn write(&mut self, record: &GradientRecord) -> Result<()> {
        record.check(&self.manifest)?;
        self.raw.write(record.sample_id, &record.blocks)
    }

    pub fn finish(self) -> Result<()> {
        self.raw.finish()
    }
}

pub fn write_gradient_file<'a>(
    path: impl AsRef<Path>,
    manifest: &ComponentManifest,
    records: impl IntoIterator<Item = &'a GradientRecord>,
) -> Result<()> {
    let mut w = GradientWriter::create(path, manifest)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Seekable reader over a gradient file. Records are decoded on demand.
pub struct GradientReader {
    raw: RawReader,
    manifest: ComponentManifest,
}

impl GradientReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let (raw, manifest) = RawReader::open(path.as_ref(), GRADIENT_MAGIC, |m: &ComponentManifest| m.param_counts())?;
        manifest.validate()?;
        Ok(GradientReader { raw, manifest })
    }

    pub fn manifest(&self) -> &ComponentManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.raw.len() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.raw.len() == 0
    }

    pub fn read_at(&mut self, index: usize) -> Result<GradientRecord> {
        let (sample_id, blocks) = self.raw.read_at(index as u64)?;
        Ok(GradientRecord { sample_id, blocks })
    }

    /// Reads a single component block; memory is bounded by that block.
    pub fn read_block(&mut self, index: usize, component: usize) -> Result<Vec<f32>> {
        self.raw.read_block(index as u64, component)
    }

    /// Maps sample ids to record positions by reading only the id fields.
    pub fn sample_index(&mut self) -> Result<std::collections::HashMap<u64, usize>> {
        let mut map = std::collections::HashMap::with_capacity(self.len());
        for i in 0..self.len() {
            let id = self.raw.sample_id_at(i as u64)?;
            if map.insert(id, i).is_some() {
                return Err(Error::Format(format!("duplicate sample id {id}")));
            }
        }
        Ok(map)
    }

    /// Lazily iterates over all records from the start of the file.
    pub fn records(&mut self) -> Result<Records<'_>> {
        self.raw.rewind()?;
        let remaining = self.raw.len();
        Ok(Records { raw: &mut self.raw, remaining })
    }

    pub fn into_records(mut self) -> Result<IntoRecords> {
        self.raw.rewind()?;
        let remaining = self.raw.len();
        Ok(IntoRecords { raw: self.raw, remaining })
    }
}

pub struct Records<'a> {
    raw: &'a mut RawReader,
    remaining: u64,
}

impl Iterator for Records<'_> {
    type Item = Result<GradientRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.raw.read_next().map(|(sample_id, blocks)| GradientRecord { sample_id, blocks }))
    }
}

pub struct IntoRecords {
    raw: RawReader,
    remaining: u64,
}

impl Iterator for IntoRecords {
    type Item = Result<GradientRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.raw.read_next().map(|(sample_id, blocks)| GradientRecord { sample_id, blocks }))
    }
}

/// Opens a gradient file, returning its manifest and a lazy record stream.
pub fn read_gradient_file(path: impl AsRef<Path>) -> Result<(ComponentManifest, IntoRecords)> {
    let reader = GradientReader::open(path)?;
    let manifest = reader.manifest().clone();
    Ok((manifest, reader.into_records()?))
}

/// Reads every record into memory.
pub fn read_all(path: impl AsRef<Path>) -> Result<(ComponentManifest, Vec<GradientRecord>)> {
    let (m, recs) = read_gradient_file(path)?;
    Ok((m, recs.collect::<Result<Vec<_>>>()?))
}
