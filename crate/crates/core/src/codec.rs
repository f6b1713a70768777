//! Query wire format.
//!
//! All integers little-endian. Layout, in order:
//!
//! ```text
//! offset  size  field
//! 0       1     version (= 1)
//! 1       2     r1 (u16)
//! 3       2     r2 (u16)
//! 5       2     r3 (u16)
//! 7       4     eps_micro (u32, round(eps * 1e6))
//! 11      4     task_id (u32)
//! 15      8     seed (u64)
//! 23      8*N   masked core, N = r1*r2*r3 f64 values, row-major over (i,j,k)
//! 23+8N   4     CRC-32 (IEEE, reflected) of bytes [0, 23+8N)
//! ```
//!
//! Factor matrices are never transmitted; the payload is the masked core only.

use crate::error::{Error, Result};
use crate::masking::CompressedState;
use crate::tensor::{Ranks, Tensor3};

pub const QUERY_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 23;
pub const CHECKSUM_LEN: usize = 4;
/// Header plus checksum: the size of an empty (rank-0) query.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + CHECKSUM_LEN;

/// A decoded query.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub version: u8,
    pub ranks: [u16; 3],
    pub eps_micro: u32,
    pub task_id: u32,
    pub seed: u64,
    /// Masked core, shape `(r1, r2, r3)`.
    pub core: Tensor3,
    pub checksum: u32,
}

impl Query {
    pub fn eps(&self) -> f64 {
        self.eps_micro as f64 * 1e-6
    }

    pub fn ranks(&self) -> Ranks {
        self.ranks.map(usize::from)
    }
}

/// Payload size in bytes for the given ranks: `8·r1·r2·r3`.
pub fn payload_bytes(ranks: Ranks) -> usize {
    8 * ranks.iter().product::<usize>()
}

/// Total frame size for the given ranks.
pub fn frame_len(ranks: Ranks) -> usize {
    FRAME_OVERHEAD + payload_bytes(ranks)
}

fn eps_to_micro(eps: f64) -> Result<u32> {
    let scaled = (eps * 1e6).round();
    if !scaled.is_finite() || scaled < 0.0 || scaled > u32::MAX as f64 {
        return Err(Error::Capacity(format!(
            "eps {eps} not representable as u32 micro-units"
        )));
    }
    Ok(scaled as u32)
}

/// Serialize a bare core with its metadata.
pub fn encode_core(core: &Tensor3, eps: f64, task_id: u32, seed: u64) -> Result<Vec<u8>> {
    let mut ranks16 = [0u16; 3];
    for (n, &r) in core.shape().iter().enumerate() {
        ranks16[n] = u16::try_from(r)
            .map_err(|_| Error::Capacity(format!("rank {r} in mode {n} exceeds 65535")))?;
    }
    let eps_micro = eps_to_micro(eps)?;

    let mut out = Vec::with_capacity(frame_len(core.shape()));
    out.push(QUERY_VERSION);
    for r in ranks16 {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&eps_micro.to_le_bytes());
    out.extend_from_slice(&task_id.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for v in core.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// `Enc(Ψ_ASM(X))`: ranks, ε, task id, seed and the masked core.
pub fn encode(cs: &CompressedState, task_id: u32, seed: u64) -> Result<Vec<u8>> {
    encode_core(&cs.masked_core, cs.maskset.eps_rel, task_id, seed)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Trailing checksum of a frame, without verifying it.
pub fn frame_checksum(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < FRAME_OVERHEAD {
        return Err(Error::Framing(format!(
            "{} bytes is shorter than the {FRAME_OVERHEAD}-byte minimum frame",
            bytes.len()
        )));
    }
    Ok(le_u32(bytes, bytes.len() - CHECKSUM_LEN))
}

/// Parse and verify a frame. Checks run in the order: minimum length,
/// checksum, version, payload length.
pub fn decode(bytes: &[u8]) -> Result<Query> {
    let stored = frame_checksum(bytes)?;
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(Error::Integrity {
            expected: stored,
            found: computed,
        });
    }
    let version = body[0];
    if version != QUERY_VERSION {
        return Err(Error::Version(version));
    }
    let ranks = [le_u16(body, 1), le_u16(body, 3), le_u16(body, 5)];
    let eps_micro = le_u32(body, 7);
    let task_id = le_u32(body, 11);
    let seed = le_u64(body, 15);

    let shape = ranks.map(usize::from);
    let expected = frame_len(shape);
    if bytes.len() != expected {
        return Err(Error::Framing(format!(
            "ranks {:?} imply {expected} bytes, got {}",
            ranks,
            bytes.len()
        )));
    }
    let data: Vec<f64> = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let core = Tensor3::new(shape, data).map_err(|e| Error::Framing(e.to_string()))?;
    Ok(Query {
        version,
        ranks,
        eps_micro,
        task_id,
        seed,
        core,
        checksum: stored,
    })
}

/// Total encoded size in bytes.
pub fn query_budget_bytes(bytes: &[u8]) -> usize {
    bytes.len()
}
