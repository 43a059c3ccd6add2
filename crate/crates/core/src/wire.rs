//! Byte layout of slice frames and acknowledgements exchanged between engine
//! instances over stream transports.
//!
//! ```text
//! frame: work_id u64 | batch_id u64 | segment_hash [u8; 16] | offset u64 | len u64 | payload
//! ack:   work_id u64 | batch_id u64 | status u8 | pad [u8; 7]
//! ```
//!
//! All integers are little-endian.

use sha2::{Digest, Sha256};

use crate::slice::{BatchId, CompletionStatus, WorkId};

pub const FRAME_HEADER_LEN: usize = 48;
pub const ACK_LEN: usize = 24;

/// Stable 16-byte name of a segment id, shared by both ends.
pub fn segment_hash(id: &str) -> [u8; 16] {
    let digest = Sha256::digest(id.as_bytes());
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub work: WorkId,
    pub batch: BatchId,
    /// Hash of the destination segment id.
    pub segment: [u8; 16],
    /// Destination offset inside that segment.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("buffer too short: need {need} bytes, got {got}")]
    Short { need: usize, got: usize },
    #[error("unknown status code {0}")]
    BadStatus(u8),
}

fn u64_at(buf: &[u8], at: usize) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&buf[at..at + 8]);
    u64::from_le_bytes(b)
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[0..8].copy_from_slice(&self.work.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.batch.0.to_le_bytes());
        out[16..32].copy_from_slice(&self.segment);
        out[32..40].copy_from_slice(&self.offset.to_le_bytes());
        out[40..48].copy_from_slice(&self.len.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < FRAME_HEADER_LEN {
            return Err(WireError::Short {
                need: FRAME_HEADER_LEN,
                got: buf.len(),
            });
        }
        let mut segment = [0u8; 16];
        segment.copy_from_slice(&buf[16..32]);
        Ok(FrameHeader {
            work: WorkId(u64_at(buf, 0)),
            batch: BatchId(u64_at(buf, 8)),
            segment,
            offset: u64_at(buf, 32),
            len: u64_at(buf, 40),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub work: WorkId,
    pub batch: BatchId,
    pub status: CompletionStatus,
}

impl Ack {
    pub fn encode(&self) -> [u8; ACK_LEN] {
        let mut out = [0u8; ACK_LEN];
        out[0..8].copy_from_slice(&self.work.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.batch.0.to_le_bytes());
        out[16] = self.status.code();
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < ACK_LEN {
            return Err(WireError::Short {
                need: ACK_LEN,
                got: buf.len(),
            });
        }
        Ok(Ack {
            work: WorkId(u64_at(buf, 0)),
            batch: BatchId(u64_at(buf, 8)),
            status: CompletionStatus::from_code(buf[16]).ok_or(WireError::BadStatus(buf[16]))?,
        })
    }
}
