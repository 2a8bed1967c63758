//! Canonical field-tagged binary encoding.
//!
//! A body is a sequence of fields, each laid out as
//!
//! ```text
//! +--------+------------------+-------------------+
//! | tag u8 | length u32 (BE)  | value (length B)  |
//! +--------+------------------+-------------------+
//! ```
//!
//! Integers are 8-byte big-endian, booleans one byte (0 or 1), strings raw
//! UTF-8, and nested records are themselves field sequences. Lists repeat
//! the same tag once per element. Canonical bodies list fields in ascending
//! tag order; the decoder rejects a tag lower than its predecessor, so equal
//! values always encode to identical bytes.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder::default()
    }

    pub fn bytes(&mut self, tag: u8, value: &[u8]) -> &mut Self {
        let len = u32::try_from(value.len()).expect("field larger than 4 GiB");
        self.buf.push(tag);
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(value);
        self
    }

    pub fn u64(&mut self, tag: u8, value: u64) -> &mut Self {
        self.bytes(tag, &value.to_be_bytes())
    }

    pub fn bool(&mut self, tag: u8, value: bool) -> &mut Self {
        self.bytes(tag, &[value as u8])
    }

    pub fn str(&mut self, tag: u8, value: &str) -> &mut Self {
        self.bytes(tag, value.as_bytes())
    }

    pub fn opt_u64(&mut self, tag: u8, value: Option<u64>) -> &mut Self {
        if let Some(v) = value {
            self.u64(tag, v);
        }
        self
    }

    pub fn nested(&mut self, tag: u8, build: impl FnOnce(&mut Encoder)) -> &mut Self {
        let mut inner = Encoder::new();
        build(&mut inner);
        self.bytes(tag, &inner.buf)
    }

    pub fn record<T: Wire>(&mut self, tag: u8, value: &T) -> &mut Self {
        self.nested(tag, |e| value.encode(e))
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

/// One decoded field borrowed from the input.
#[derive(Debug, Clone, Copy)]
pub struct Field<'a> {
    pub tag: u8,
    pub value: &'a [u8],
}

impl<'a> Field<'a> {
    pub fn u64(&self) -> Result<u64> {
        let raw: [u8; 8] = self
            .value
            .try_into()
            .map_err(|_| Error::decode(format!("field {} is not a u64", self.tag)))?;
        Ok(u64::from_be_bytes(raw))
    }

    pub fn u32(&self) -> Result<u32> {
        u32::try_from(self.u64()?).map_err(|_| Error::decode(format!("field {} overflows u32", self.tag)))
    }

    pub fn bool(&self) -> Result<bool> {
        match self.value {
            [0] => Ok(false),
            [1] => Ok(true),
            _ => Err(Error::decode(format!("field {} is not a bool", self.tag))),
        }
    }

    pub fn str(&self) -> Result<&'a str> {
        std::str::from_utf8(self.value).map_err(|_| Error::decode(format!("field {} is not utf-8", self.tag)))
    }

    pub fn string(&self) -> Result<String> {
        self.str().map(str::to_owned)
    }

    pub fn record<T: Wire>(&self) -> Result<T> {
        T::decode(&mut Decoder::new(self.value))
    }

    pub fn decoder(&self) -> Decoder<'a> {
        Decoder::new(self.value)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    last_tag: Option<u8>,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0, last_tag: None }
    }

    pub fn next_field(&mut self) -> Result<Option<Field<'a>>> {
        if self.pos == self.buf.len() {
            return Ok(None);
        }
        let rest = &self.buf[self.pos..];
        if rest.len() < 5 {
            return Err(Error::decode("truncated field header"));
        }
        let tag = rest[0];
        let len = u32::from_be_bytes([rest[1], rest[2], rest[3], rest[4]]) as usize;
        if rest.len() - 5 < len {
            return Err(Error::decode(format!("field {tag} truncated")));
        }
        if let Some(prev) = self.last_tag {
            if tag < prev {
                return Err(Error::decode(format!("field {tag} after {prev}: not canonical")));
            }
        }
        self.last_tag = Some(tag);
        let value = &rest[5..5 + len];
        self.pos += 5 + len;
        Ok(Some(Field { tag, value }))
    }

    /// Collects all fields; convenient for small records.
    pub fn fields(mut self) -> Result<Vec<Field<'a>>> {
        let mut out = Vec::new();
        while let Some(f) = self.next_field()? {
            out.push(f);
        }
        Ok(out)
    }
}

/// Types with a canonical field-tagged encoding.
pub trait Wire: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(&mut Decoder::new(bytes))
    }
}

/// Helper for decoding a record whose fields are all optional until checked.
pub fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::decode(format!("missing field {what}")))
}
