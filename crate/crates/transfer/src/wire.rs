//! Data-plane framing for the streamed transport.
//!
//! Every message is a 16-byte header followed by a body:
//!
//! ```text
//! 0      4        5      6          8                 16
//! | RSDP | version | kind | reserved | body length u64 |
//! ```
//!
//! All integers are big-endian. Bodies are fixed layouts; trailing strings
//! run to the end of the body and are UTF-8.

use std::io::{self, Read, Write};

use crate::TransferError;

pub const MAGIC: [u8; 4] = *b"RSDP";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on a single body; one unit never exceeds this.
pub const MAX_BODY: u64 = 1 << 36;

pub mod kind {
    pub const PROGRESS_QUERY: u8 = 1;
    pub const PROGRESS: u8 = 2;
    pub const PULL: u8 = 3;
    pub const DATA: u8 = 4;
    pub const END: u8 = 5;
    pub const ERROR: u8 = 6;
}

/// Status byte of an END message.
pub const END_DONE: u8 = 0;
pub const END_RETRY: u8 = 1;

/// Code byte of an ERROR message.
pub const ERR_NOT_SERVING: u8 = 1;
pub const ERR_PROTOCOL: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ProgressQuery { key: String, version: u64, shard: u32 },
    Progress { entries: u32 },
    Pull { key: String, version: u64, shard: u32, lo: u32, hi: u32 },
    Data { lo: u32, hi: u32, bytes: Vec<u8> },
    End { status: u8, progress: u32 },
    Error { code: u8, message: String },
}

pub fn header(kind: u8, body_len: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4] = WIRE_VERSION;
    h[5] = kind;
    h[8..].copy_from_slice(&body_len.to_be_bytes());
    h
}

pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(u8, u64), TransferError> {
    if h[..4] != MAGIC {
        return Err(TransferError::Protocol("bad magic".into()));
    }
    if h[4] != WIRE_VERSION {
        return Err(TransferError::Protocol(format!("unsupported version {}", h[4])));
    }
    let len = u64::from_be_bytes(h[8..].try_into().expect("8 bytes"));
    if len > MAX_BODY {
        return Err(TransferError::Protocol(format!("body of {len} bytes is too large")));
    }
    Ok((h[5], len))
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::ProgressQuery { .. } => kind::PROGRESS_QUERY,
            Message::Progress { .. } => kind::PROGRESS,
            Message::Pull { .. } => kind::PULL,
            Message::Data { .. } => kind::DATA,
            Message::End { .. } => kind::END,
            Message::Error { .. } => kind::ERROR,
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            Message::ProgressQuery { key, version, shard } => {
                b.extend_from_slice(&version.to_be_bytes());
                b.extend_from_slice(&shard.to_be_bytes());
                b.extend_from_slice(key.as_bytes());
            }
            Message::Progress { entries } => b.extend_from_slice(&entries.to_be_bytes()),
            Message::Pull {
                key,
                version,
                shard,
                lo,
                hi,
            } => {
                b.extend_from_slice(&version.to_be_bytes());
                b.extend_from_slice(&shard.to_be_bytes());
                b.extend_from_slice(&lo.to_be_bytes());
                b.extend_from_slice(&hi.to_be_bytes());
                b.extend_from_slice(key.as_bytes());
            }
            Message::Data { lo, hi, bytes } => {
                b.extend_from_slice(&lo.to_be_bytes());
                b.extend_from_slice(&hi.to_be_bytes());
                b.extend_from_slice(bytes);
            }
            Message::End { status, progress } => {
                b.push(*status);
                b.extend_from_slice(&progress.to_be_bytes());
            }
            Message::Error { code, message } => {
                b.push(*code);
                b.extend_from_slice(message.as_bytes());
            }
        }
        b
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = header(self.kind(), body.len() as u64).to_vec();
        out.extend_from_slice(&body);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn decode(kind: u8, body: &[u8]) -> Result<Message, TransferError> {
        let short = || TransferError::Protocol(format!("short body for kind {kind}"));
        let u32_at = |at: usize| -> Result<u32, TransferError> {
            body.get(at..at + 4)
                .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
                .ok_or_else(short)
        };
        let u64_at = |at: usize| -> Result<u64, TransferError> {
            body.get(at..at + 8)
                .map(|s| u64::from_be_bytes(s.try_into().expect("8 bytes")))
                .ok_or_else(short)
        };
        let text = |at: usize| -> Result<String, TransferError> {
            String::from_utf8(body.get(at..).ok_or_else(short)?.to_vec())
                .map_err(|_| TransferError::Protocol("string is not UTF-8".into()))
        };
        let exact = |n: usize, m: Message| if body.len() == n { Ok(m) } else { Err(short()) };
        match kind {
            kind::PROGRESS_QUERY => Ok(Message::ProgressQuery {
                version: u64_at(0)?,
                shard: u32_at(8)?,
                key: text(12)?,
            }),
            kind::PROGRESS => exact(4, Message::Progress { entries: u32_at(0)? }),
            kind::PULL => Ok(Message::Pull {
                version: u64_at(0)?,
                shard: u32_at(8)?,
                lo: u32_at(12)?,
                hi: u32_at(16)?,
                key: text(20)?,
            }),
            kind::DATA => Ok(Message::Data {
                lo: u32_at(0)?,
                hi: u32_at(4)?,
                bytes: body[8..].to_vec(),
            }),
            kind::END => exact(
                5,
                Message::End {
                    status: *body.first().ok_or_else(short)?,
                    progress: u32_at(1)?,
                },
            ),
            kind::ERROR => Ok(Message::Error {
                code: *body.first().ok_or_else(short)?,
                message: text(1)?,
            }),
            other => Err(TransferError::Protocol(format!("unknown message kind {other}"))),
        }
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Message> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h)?;
        let (kind, len) = parse_header(&h).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        Message::decode(kind, &body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Writes a DATA message whose payload is split across `pieces`, without
/// first joining them.
pub fn write_data(w: &mut impl Write, lo: u32, hi: u32, pieces: &[&[u8]]) -> io::Result<()> {
    let len: usize = pieces.iter().map(|p| p.len()).sum();
    w.write_all(&header(kind::DATA, 8 + len as u64))?;
    w.write_all(&lo.to_be_bytes())?;
    w.write_all(&hi.to_be_bytes())?;
    for p in pieces {
        w.write_all(p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pull_request_bytes() {
        let m = Message::Pull {
            key: "k".into(),
            version: 12,
            shard: 1,
            lo: 5,
            hi: 10,
        };
        let bytes = m.to_bytes();
        assert_eq!(
            bytes,
            [
                b'R', b'S', b'D', b'P', 1, 3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 21, //
                0, 0, 0, 0, 0, 0, 0, 12, 0, 0, 0, 1, 0, 0, 0, 5, 0, 0, 0, 10, b'k'
            ]
        );
        assert_eq!(Message::read_from(&mut bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn every_kind_round_trips() {
        let msgs = [
            Message::ProgressQuery {
                key: "a/b".into(),
                version: 3,
                shard: 2,
            },
            Message::Progress { entries: 7 },
            Message::Data {
                lo: 0,
                hi: 3,
                bytes: vec![1, 2, 3],
            },
            Message::End {
                status: END_RETRY,
                progress: 7,
            },
            Message::Error {
                code: ERR_NOT_SERVING,
                message: "gone".into(),
            },
        ];
        for m in msgs {
            assert_eq!(Message::read_from(&mut m.to_bytes().as_slice()).unwrap(), m);
        }
        let mut split = Vec::new();
        write_data(&mut split, 1, 2, &[b"ab", b"c"]).unwrap();
        assert_eq!(
            Message::read_from(&mut split.as_slice()).unwrap(),
            Message::Data {
                lo: 1,
                hi: 2,
                bytes: b"abc".to_vec()
            }
        );
    }

    #[test]
    fn rejects_bad_headers() {
        let mut b = Message::Progress { entries: 1 }.to_bytes();
        b[0] = b'X';
        assert!(Message::read_from(&mut b.as_slice()).is_err());
        let mut b = Message::Progress { entries: 1 }.to_bytes();
        b[4] = 9;
        assert!(Message::read_from(&mut b.as_slice()).is_err());
        let b = header(kind::PROGRESS, 2).iter().chain(&[0, 0]).copied().collect::<Vec<u8>>();
        assert!(Message::read_from(&mut b.as_slice()).is_err());
    }
}
