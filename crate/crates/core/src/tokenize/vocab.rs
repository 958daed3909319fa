//! Fixed token vocabulary: 306 ids with a deterministic layout, emitted as
//! vocab.json so downstream artifacts can pin the assignment by hash.

use crate::midi::Role;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Positions per 4/4 bar at the 1/4-beat grid.
pub const POSITIONS_PER_BAR: u8 = 16;
/// Maximum note duration in grid units (16 beats).
pub const MAX_DUR_UNITS: u8 = 64;
/// Melodic pitch range (A0..C8 inclusive).
pub const PITCH_MIN: u8 = 21;
pub const PITCH_MAX: u8 = 108;

pub const VOCAB_SIZE: usize = 306;

const TRACK_BASE: u32 = 4;
const POS_BASE: u32 = 10;
const PITCH_BASE: u32 = 26;
const DRUM_BASE: u32 = 114;
const DUR_BASE: u32 = 242;

/// One vocabulary entry. Melodic pitches and drum pitches are distinct kinds
/// so the drum percussion map keeps its full 0-127 range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Bos,
    Eos,
    Bar,
    /// Per-bar summary token.
    Sum,
    Track(Role),
    /// Position within the bar, 0..16.
    Pos(u8),
    /// Melodic pitch, 21..=108.
    Pitch(u8),
    /// Drum pitch, 0..=127.
    DrumPitch(u8),
    /// Duration in grid units, 1..=64.
    Dur(u8),
}

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Bos => 0,
            Token::Eos => 1,
            Token::Bar => 2,
            Token::Sum => 3,
            Token::Track(role) => TRACK_BASE + role.index() as u32,
            Token::Pos(p) => {
                debug_assert!(p < POSITIONS_PER_BAR);
                POS_BASE + u32::from(p)
            }
            Token::Pitch(p) => {
                debug_assert!((PITCH_MIN..=PITCH_MAX).contains(&p));
                PITCH_BASE + u32::from(p - PITCH_MIN)
            }
            Token::DrumPitch(p) => {
                debug_assert!(p <= 127);
                DRUM_BASE + u32::from(p)
            }
            Token::Dur(u) => {
                debug_assert!((1..=MAX_DUR_UNITS).contains(&u));
                DUR_BASE + u32::from(u - 1)
            }
        }
    }

    pub fn from_id(id: u32) -> Option<Token> {
        match id {
            0 => Some(Token::Bos),
            1 => Some(Token::Eos),
            2 => Some(Token::Bar),
            3 => Some(Token::Sum),
            4..=9 => Some(Token::Track(Role::ALL[(id - TRACK_BASE) as usize])),
            10..=25 => Some(Token::Pos((id - POS_BASE) as u8)),
            26..=113 => Some(Token::Pitch((id - PITCH_BASE) as u8 + PITCH_MIN)),
            114..=241 => Some(Token::DrumPitch((id - DRUM_BASE) as u8)),
            242..=305 => Some(Token::Dur((id - DUR_BASE) as u8 + 1)),
            _ => None,
        }
    }

    /// Stable display name used in vocab.json.
    pub fn name(self) -> String {
        match self {
            Token::Bos => "BOS".into(),
            Token::Eos => "EOS".into(),
            Token::Bar => "BAR".into(),
            Token::Sum => "SUM".into(),
            Token::Track(role) => format!("TRACK_{role}"),
            Token::Pos(p) => format!("POS_{p}"),
            Token::Pitch(p) => format!("PITCH_{p}"),
            Token::DrumPitch(p) => format!("DRUM_{p}"),
            Token::Dur(u) => format!("DUR_{u}"),
        }
    }
}

#[derive(Serialize)]
struct VocabFile {
    version: u32,
    size: usize,
    /// Token names indexed by id.
    tokens: Vec<String>,
}

/// Canonical vocab.json contents (stable across runs).
pub fn vocab_json() -> String {
    let tokens: Vec<String> = (0..VOCAB_SIZE as u32)
        .map(|id| Token::from_id(id).expect("dense id space").name())
        .collect();
    let file = VocabFile { version: 1, size: VOCAB_SIZE, tokens };
    serde_json::to_string_pretty(&file).expect("vocab serializes")
}

/// Hex sha256 of the canonical vocab.json; recorded in corpus metadata and
/// checkpoints so mismatched vocabularies are detected.
pub fn vocab_sha256() -> String {
    let mut hasher = Sha256::new();
    hasher.update(vocab_json().as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_layout_spot_values() {
        assert_eq!(Token::Bos.id(), 0);
        assert_eq!(Token::Eos.id(), 1);
        assert_eq!(Token::Bar.id(), 2);
        assert_eq!(Token::Sum.id(), 3);
        assert_eq!(Token::Track(Role::Melody).id(), 4);
        assert_eq!(Token::Track(Role::Drum).id(), 9);
        assert_eq!(Token::Pos(0).id(), 10);
        assert_eq!(Token::Pos(15).id(), 25);
        assert_eq!(Token::Pitch(21).id(), 26);
        assert_eq!(Token::Pitch(108).id(), 113);
        assert_eq!(Token::DrumPitch(0).id(), 114);
        assert_eq!(Token::DrumPitch(127).id(), 241);
        assert_eq!(Token::Dur(1).id(), 242);
        assert_eq!(Token::Dur(64).id(), 305);
    }

    #[test]
    fn ids_are_dense_and_round_trip() {
        for id in 0..VOCAB_SIZE as u32 {
            let tok = Token::from_id(id).unwrap();
            assert_eq!(tok.id(), id);
        }
        assert_eq!(Token::from_id(VOCAB_SIZE as u32), None);
        assert_eq!(Token::from_id(u32::MAX), None);
    }

    #[test]
    fn vocab_json_is_stable_and_hashed() {
        let a = vocab_json();
        let b = vocab_json();
        assert_eq!(a, b);
        assert!(a.contains("\"TRACK_melody\""));
        assert!(a.contains("\"DUR_64\""));
        let h = vocab_sha256();
        assert_eq!(h.len(), 64);
        assert_eq!(h, vocab_sha256());
    }
}
