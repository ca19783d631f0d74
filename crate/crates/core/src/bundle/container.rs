//! Chunked little-endian container: `CPSL` magic, u16 version, u16 flags,
//! u32 chunk count, then `[tag: 4][len: u32][payload][crc32: u32]` chunks.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPSL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

pub const TAG_MANIFEST: [u8; 4] = *b"MANI";
pub const TAG_LAYER: [u8; 4] = *b"LAYR";
pub const TAG_EDGES: [u8; 4] = *b"EDCS";
pub const TAG_CONFIDENCE: [u8; 4] = *b"CONF";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

impl Chunk {
    pub fn new(tag: [u8; 4], payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut c = flate2::Crc::new();
    c.update(bytes);
    c.sum()
}

pub fn write_container(chunks: &[Chunk]) -> Result<Vec<u8>> {
    let total: usize = HEADER_LEN + chunks.iter().map(|c| c.payload.len() + 12).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
    for c in chunks {
        let len = u32::try_from(c.payload.len()).map_err(|_| Error::invalid(format!("chunk {} exceeds 4 GiB", c.tag_str())))?;
        out.extend_from_slice(&c.tag);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&c.payload);
        out.extend_from_slice(&crc32(&c.payload).to_le_bytes());
    }
    Ok(out)
}

/// Parses the header and every chunk. Fails with `CorruptContainer` on a
/// foreign magic, bad tag or checksum, `VersionMismatch` on another version
/// and `TruncatedStream` when the bytes end inside the header or a chunk.
pub fn read_container(bytes: &[u8]) -> Result<Vec<Chunk>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedStream("file ends inside the header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CorruptContainer("missing CPSL magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedStream("file ends inside the header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: VERSION as u32,
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let mut pos = HEADER_LEN;
    let mut chunks = Vec::new();
    while chunks.len() < count {
        if bytes.len() - pos < 8 {
            return Err(Error::TruncatedStream(format!("chunk header at byte {pos}")));
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().expect("4 bytes");
        if !tag.iter().all(|b| b.is_ascii_uppercase()) {
            return Err(Error::CorruptContainer(format!("bad chunk tag at byte {pos}")));
        }
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        let start = pos + 8;
        if bytes.len() - start < len + 4 {
            return Err(Error::TruncatedStream(format!("chunk {} needs {} bytes", String::from_utf8_lossy(&tag), len + 4)));
        }
        let payload = &bytes[start..start + len];
        let crc = u32::from_le_bytes(bytes[start + len..start + len + 4].try_into().expect("4 bytes"));
        if crc != crc32(payload) {
            return Err(Error::CorruptContainer(format!("checksum mismatch in chunk {}", String::from_utf8_lossy(&tag))));
        }
        chunks.push(Chunk::new(tag, payload.to_vec()));
        pos = start + len + 4;
    }
    if pos != bytes.len() {
        return Err(Error::CorruptContainer(format!("{} bytes after the last chunk", bytes.len() - pos)));
    }
    Ok(chunks)
}

/// Little-endian cursor over a chunk payload; running out of bytes is a
/// truncated stream.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedStream(format!("{} ends at byte {}", self.what, self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
