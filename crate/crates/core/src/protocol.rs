//! Command message codec.
//!
//! ```text
//! offset  size  field
//!      0     1  sync 0xAA
//!      1     1  flags    bit i = motor slot i actuated, bit 7 reserved (0)
//!      2     7  targets  normalized positions, slots 0..=6
//!      9     7  pwms     speeds, slots 0..=6
//!     16     1  CRC-8 (poly 0x07, init 0x00) over bytes 1..=15
//! ```
//!
//! The frame is fixed length. Payload bytes may contain 0xAA; a parser
//! that lands on a false sync byte recovers through the checksum.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DOF;

pub const SYNC: u8 = 0xAA;
pub const PAYLOAD_LEN: usize = 1 + 2 * DOF;
pub const FRAME_LEN: usize = PAYLOAD_LEN + 2;
pub const RESERVED_BIT: u8 = 0x80;
/// Upper bound on bytes held by [`FrameStream`].
pub const STREAM_CAPACITY: usize = 64;

const CRC_POLY: u8 = 0x07;
const CRC_TABLE: [u8; 256] = crc_table();

const fn crc_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u8;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 0x80 != 0 {
                (c << 1) ^ CRC_POLY
            } else {
                c << 1
            };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc8(bytes: &[u8]) -> u8 {
    bytes
        .iter()
        .fold(0u8, |crc, b| CRC_TABLE[usize::from(crc ^ b)])
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("reserved flag bit 7 is set")]
    ReservedBitSet,
    #[error("slot {slot} is flagged with zero pwm")]
    ZeroPwm { slot: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("expected sync byte 0xAA, found {found:#04x} ({skipped} byte(s) skipped)")]
    BadSync { found: u8, skipped: usize },
    #[error("checksum mismatch: computed {computed:#04x}, frame carries {received:#04x}")]
    BadChecksum { computed: u8, received: u8 },
    #[error("reserved flag bit 7 is set")]
    ReservedBitSet,
    #[error("frame needs {FRAME_LEN} bytes, got {len}")]
    ShortFrame { len: usize },
    #[error("invalid frame contents: {0}")]
    Invalid(FrameError),
}

/// One command: which motors move, where to, and how fast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CommandFrame {
    pub flags: u8,
    pub targets: [u8; DOF],
    pub pwms: [u8; DOF],
}

impl CommandFrame {
    pub fn noop() -> Self {
        CommandFrame::default()
    }

    /// Adds a motor to the frame, replacing any earlier entry for its slot.
    pub fn with(mut self, slot: usize, target: u8, pwm: u8) -> Self {
        self.set(slot, target, pwm);
        self
    }

    pub fn set(&mut self, slot: usize, target: u8, pwm: u8) {
        assert!(slot < DOF, "slot {slot} out of range");
        self.flags |= 1 << slot;
        self.targets[slot] = target;
        self.pwms[slot] = pwm;
    }

    pub fn is_flagged(&self, slot: usize) -> bool {
        slot < DOF && self.flags & (1 << slot) != 0
    }

    pub fn flagged_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..DOF).filter(|s| self.is_flagged(*s))
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.flags & RESERVED_BIT != 0 {
            return Err(FrameError::ReservedBitSet);
        }
        match self.flagged_slots().find(|s| self.pwms[*s] == 0) {
            Some(slot) => Err(FrameError::ZeroPwm { slot }),
            None => Ok(()),
        }
    }

    fn payload(&self) -> [u8; PAYLOAD_LEN] {
        let mut p = [0u8; PAYLOAD_LEN];
        p[0] = self.flags;
        p[1..=DOF].copy_from_slice(&self.targets);
        p[DOF + 1..].copy_from_slice(&self.pwms);
        p
    }
}

pub fn encode(frame: &CommandFrame) -> Result<[u8; FRAME_LEN], FrameError> {
    frame.validate()?;
    let mut out = [0u8; FRAME_LEN];
    out[0] = SYNC;
    out[1..=PAYLOAD_LEN].copy_from_slice(&frame.payload());
    out[FRAME_LEN - 1] = crc8(&out[1..=PAYLOAD_LEN]);
    Ok(out)
}

/// Decodes the frame at the start of `bytes`; trailing bytes are ignored.
pub fn decode(bytes: &[u8]) -> Result<CommandFrame, DecodeError> {
    if bytes.len() < FRAME_LEN {
        return Err(DecodeError::ShortFrame { len: bytes.len() });
    }
    if bytes[0] != SYNC {
        return Err(DecodeError::BadSync {
            found: bytes[0],
            skipped: 0,
        });
    }
    let payload = &bytes[1..=PAYLOAD_LEN];
    let computed = crc8(payload);
    let received = bytes[FRAME_LEN - 1];
    if computed != received {
        return Err(DecodeError::BadChecksum { computed, received });
    }
    let mut frame = CommandFrame {
        flags: payload[0],
        ..CommandFrame::default()
    };
    frame.targets.copy_from_slice(&payload[1..=DOF]);
    frame.pwms.copy_from_slice(&payload[DOF + 1..]);
    match frame.validate() {
        Ok(()) => Ok(frame),
        Err(FrameError::ReservedBitSet) => Err(DecodeError::ReservedBitSet),
        Err(e) => Err(DecodeError::Invalid(e)),
    }
}

/// Incremental parser for a byte stream carrying back-to-back frames.
///
/// Feed arbitrary chunks with [`push`](FrameStream::push) and drain with
/// [`next_frame`](FrameStream::next_frame). Garbage before a sync byte
/// is reported once per run as `BadSync`; a frame that fails its checksum
/// drops only its sync byte so that a real frame starting inside it is
/// still found.
#[derive(Debug, Default, Clone)]
pub struct FrameStream {
    buf: VecDeque<u8>,
    dropped_overflow: usize,
}

impl FrameStream {
    pub fn new() -> Self {
        FrameStream::default()
    }

    /// Appends bytes, parsing as it goes so the buffer never exceeds
    /// [`STREAM_CAPACITY`]. Returns everything completed by this chunk.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Result<CommandFrame, DecodeError>> {
        let mut out = Vec::new();
        for &b in bytes {
            if self.buf.len() == STREAM_CAPACITY {
                // only reachable if a caller never drains; parse first
                while let Some(item) = self.next_frame() {
                    out.push(item);
                }
                if self.buf.len() == STREAM_CAPACITY {
                    self.buf.pop_front();
                    self.dropped_overflow += 1;
                }
            }
            self.buf.push_back(b);
            // a garbage run is reported once, when the next sync byte shows up
            let ready = match self.buf.front() {
                Some(&SYNC) => self.buf.len() >= FRAME_LEN,
                _ => b == SYNC,
            };
            if ready {
                while let Some(item) = self.next_frame() {
                    out.push(item);
                }
            }
        }
        out
    }

    /// Next complete frame or error, or `None` if more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Result<CommandFrame, DecodeError>> {
        let front = *self.buf.front()?;
        if front != SYNC {
            let skipped = self.buf.iter().take_while(|b| **b != SYNC).count();
            self.buf.drain(..skipped);
            return Some(Err(DecodeError::BadSync {
                found: front,
                skipped,
            }));
        }
        if self.buf.len() < FRAME_LEN {
            return None;
        }
        let mut raw = [0u8; FRAME_LEN];
        for (dst, src) in raw.iter_mut().zip(self.buf.iter()) {
            *dst = *src;
        }
        match decode(&raw) {
            Ok(frame) => {
                self.buf.drain(..FRAME_LEN);
                Some(Ok(frame))
            }
            Err(e) => {
                self.buf.pop_front();
                Some(Err(e))
            }
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn overflow_drops(&self) -> usize {
        self.dropped_overflow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bit-at-a-time CRC, independent of the table.
    fn crc8_bitwise(bytes: &[u8]) -> u8 {
        let mut crc = 0u8;
        for b in bytes {
            crc ^= b;
            for _ in 0..8 {
                crc = if crc & 0x80 != 0 {
                    (crc << 1) ^ 0x07
                } else {
                    crc << 1
                };
            }
        }
        crc
    }

    fn index_full() -> CommandFrame {
        CommandFrame::noop().with(1, 255, 255)
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc8(b"123456789"), 0xF4);
        assert_eq!(crc8(&[]), 0x00);
    }

    #[test]
    fn crc_matches_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in 0..40 {
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            assert_eq!(crc8(&data), crc8_bitwise(&data));
        }
    }

    #[test]
    fn index_frame_layout() {
        let bytes = encode(&index_full()).unwrap();
        let mut expected = vec![0xAA, 0x02, 0, 0xFF, 0, 0, 0, 0, 0, 0, 0xFF, 0, 0, 0, 0, 0];
        expected.push(crc8_bitwise(&expected[1..]));
        assert_eq!(bytes.to_vec(), expected);
        assert_eq!(bytes[16], 0x10);
    }

    #[test]
    fn noop_frame() {
        let bytes = encode(&CommandFrame::noop()).unwrap();
        assert_eq!(bytes[0], SYNC);
        assert!(bytes[1..16].iter().all(|b| *b == 0));
        assert_eq!(bytes[16], 0);
        assert_eq!(decode(&bytes).unwrap(), CommandFrame::noop());
    }

    #[test]
    fn all_motors_round_trip() {
        let f = CommandFrame {
            flags: 0x7F,
            targets: [128; 7],
            pwms: [200; 7],
        };
        assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn encode_rejects_invalid() {
        let f = CommandFrame {
            flags: 0x80,
            ..Default::default()
        };
        assert_eq!(encode(&f), Err(FrameError::ReservedBitSet));
        let f = CommandFrame {
            flags: 0x04,
            ..Default::default()
        };
        assert_eq!(encode(&f), Err(FrameError::ZeroPwm { slot: 2 }));
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = encode(&index_full()).unwrap();
        assert_eq!(
            decode(&good[..10]),
            Err(DecodeError::ShortFrame { len: 10 })
        );
        let mut bad = good;
        bad[0] = 0x55;
        assert!(matches!(
            decode(&bad),
            Err(DecodeError::BadSync { found: 0x55, .. })
        ));
        let mut bad = good;
        bad[5] ^= 0x10;
        assert!(matches!(decode(&bad), Err(DecodeError::BadChecksum { .. })));
        let mut bad = good;
        bad[1] |= 0x80;
        bad[16] = crc8(&bad[1..16]);
        assert_eq!(decode(&bad), Err(DecodeError::ReservedBitSet));
        let mut bad = good;
        bad[10] = 0;
        bad[16] = crc8(&bad[1..16]);
        assert_eq!(
            decode(&bad),
            Err(DecodeError::Invalid(FrameError::ZeroPwm { slot: 1 }))
        );
    }

    #[test]
    fn every_single_bit_flip_detected() {
        let good = encode(&index_full()).unwrap();
        for byte in 1..FRAME_LEN {
            for bit in 0..8 {
                let mut bad = good;
                bad[byte] ^= 1 << bit;
                assert!(
                    matches!(decode(&bad), Err(DecodeError::BadChecksum { .. })),
                    "flip at byte {byte} bit {bit} not detected"
                );
            }
        }
    }

    #[test]
    fn stream_two_frames() {
        let a = index_full();
        let b = CommandFrame::noop().with(5, 10, 40);
        let mut bytes = encode(&a).unwrap().to_vec();
        bytes.extend(encode(&b).unwrap());
        let mut s = FrameStream::new();
        let out = s.push(&bytes);
        assert_eq!(out, vec![Ok(a), Ok(b)]);
        assert_eq!(s.buffered(), 0);
    }

    #[test]
    fn stream_split_at_every_boundary() {
        let f = CommandFrame::noop().with(0, 77, 99).with(6, 3, 255);
        let bytes = encode(&f).unwrap();
        for cut in 0..=FRAME_LEN {
            let mut s = FrameStream::new();
            let mut out = s.push(&bytes[..cut]);
            if cut < FRAME_LEN {
                assert!(out.is_empty(), "cut {cut}: {out:?}");
            }
            out.extend(s.push(&bytes[cut..]));
            assert_eq!(out, vec![Ok(f)], "cut {cut}");
        }
    }

    #[test]
    fn sync_byte_inside_payload() {
        let f = CommandFrame {
            flags: 0x2A,
            targets: [0xAA; 7],
            pwms: [0xAA; 7],
        };
        let mut bytes = Vec::new();
        for _ in 0..3 {
            bytes.extend(encode(&f).unwrap());
        }
        let mut s = FrameStream::new();
        assert_eq!(s.push(&bytes), vec![Ok(f), Ok(f), Ok(f)]);
    }

    #[test]
    fn resync_after_garbage_prefix() {
        let f = CommandFrame::noop().with(3, 200, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let mut bytes: Vec<u8> = (0..n)
                .map(|_| loop {
                    let b: u8 = rng.gen();
                    if b != SYNC {
                        break b;
                    }
                })
                .collect();
            bytes.extend(encode(&f).unwrap());
            let mut s = FrameStream::new();
            let out = s.push(&bytes);
            assert_eq!(out.len(), 2);
            assert!(matches!(out[0], Err(DecodeError::BadSync { skipped, .. }) if skipped == n));
            assert_eq!(out[1], Ok(f));
        }
    }

    #[test]
    fn resync_after_corrupt_frame() {
        let f = CommandFrame::noop().with(2, 9, 33);
        let mut corrupt = encode(&f).unwrap();
        corrupt[4] ^= 0x01;
        let mut bytes = corrupt.to_vec();
        bytes.extend(encode(&f).unwrap());
        let mut s = FrameStream::new();
        let out = s.push(&bytes);
        assert!(matches!(out[0], Err(DecodeError::BadChecksum { .. })));
        assert_eq!(out.last(), Some(&Ok(f)));
    }

    #[test]
    fn stream_buffer_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = FrameStream::new();
        for _ in 0..2000 {
            let n = rng.gen_range(0..100);
            let chunk: Vec<u8> = (0..n)
                .map(|_| if rng.gen_bool(0.3) { SYNC } else { rng.gen() })
                .collect();
            s.push(&chunk);
            assert!(s.buffered() <= STREAM_CAPACITY);
        }
    }

    fn arb_frame() -> impl Strategy<Value = CommandFrame> {
        (0u8..0x80, any::<[u8; 7]>(), any::<[u8; 7]>()).prop_map(|(flags, targets, mut pwms)| {
            for (slot, p) in pwms.iter_mut().enumerate() {
                if flags & (1 << slot) != 0 && *p == 0 {
                    *p = 1;
                }
            }
            CommandFrame {
                flags,
                targets,
                pwms,
            }
        })
    }

    proptest! {
        #[test]
        fn round_trip(f in arb_frame()) {
            let bytes = encode(&f).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), f);
        }

        #[test]
        fn decode_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
            let mut s = FrameStream::new();
            let _ = s.push(&bytes);
        }

        #[test]
        fn chunked_stream_matches_whole(frames in proptest::collection::vec(arb_frame(), 1..6),
                                        cuts in proptest::collection::vec(1usize..20, 1..20)) {
            let bytes: Vec<u8> = frames.iter().flat_map(|f| encode(f).unwrap()).collect();
            let mut s = FrameStream::new();
            let mut got = Vec::new();
            let mut pos = 0;
            for c in cuts.iter().cycle() {
                if pos >= bytes.len() { break; }
                let end = (pos + c).min(bytes.len());
                got.extend(s.push(&bytes[pos..end]));
                pos = end;
            }
            let want: Vec<_> = frames.into_iter().map(Ok).collect();
            prop_assert_eq!(got, want);
        }
    }
}
