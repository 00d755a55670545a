//! Little-endian byte cursor shared by the bag and checkpoint formats.
//!
//! Readers track their offset so format errors can say exactly where the
//! file went wrong; writers are append-only into a Vec.

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

/// Low-level decode failure: what was expected and at which byte.
#[derive(Debug)]
pub(crate) struct ReadFailure {
    pub offset: usize,
    pub what: String,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ReadFailure> {
        if self.remaining() < n {
            return Err(ReadFailure {
                offset: self.pos,
                what: format!("truncated: needed {n} bytes for {what}, {} left", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), ReadFailure> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(ReadFailure {
                offset: 0,
                what: format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(found)
                ),
            });
        }
        Ok(())
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, ReadFailure> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, ReadFailure> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, ReadFailure> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn utf16_string(&mut self, what: &str) -> Result<String, ReadFailure> {
        let start = self.pos;
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ReadFailure {
            offset: start,
            what: format!("{what} is not valid UTF-8"),
        })
    }

    pub fn expect_end(&self) -> Result<(), ReadFailure> {
        if self.remaining() != 0 {
            return Err(ReadFailure {
                offset: self.pos,
                what: format!("{} trailing bytes after payload", self.remaining()),
            });
        }
        Ok(())
    }
}

pub(crate) fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// u16 length prefix + UTF-8 bytes. Errors if the string cannot fit.
pub(crate) fn push_str(buf: &mut Vec<u8>, s: &str) -> Result<(), String> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(format!("string of {} bytes exceeds u16 length prefix", bytes.len()));
    }
    push_u16(buf, bytes.len() as u16);
    buf.extend_from_slice(bytes);
    Ok(())
}
