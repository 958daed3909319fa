//! Bar-aware token grammar: serialization of a TrackSet into the token
//! sequence `BOS, X_1, s_1, …, X_b, s_b, EOS` where X_i is bar i's music
//! tokens and s_i its summary token, plus the inverse decoders and the
//! (bar, beat) position indices used by the embedding layer.

pub mod io;
pub mod vocab;

use crate::midi::{beats, Bar, Beats, Role, TrackSet};
use num_rational::Ratio;
use thiserror::Error;

pub use vocab::{Token, MAX_DUR_UNITS, PITCH_MAX, PITCH_MIN, POSITIONS_PER_BAR, VOCAB_SIZE};

/// Velocity assigned to decoded notes (velocity is not tokenized).
pub const DEFAULT_VELOCITY: u8 = 100;

/// Tokenization grid: 1/4 beat, 16 positions per 4/4 bar.
pub fn grid() -> Beats {
    beats(1, 4)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("bar {bar} is not 4 beats long")]
    BarLength { bar: usize },
    #[error("{role} note {index} is not aligned to the 1/4-beat grid")]
    OffGrid { role: Role, index: usize },
    #[error("{role} note {index} outside vocabulary: {what}")]
    OutOfVocab { role: Role, index: usize, what: String },
    #[error("grammar violation at token {index}: {what}")]
    Grammar { index: usize, what: String },
    #[error("unknown token id {id} at position {index}")]
    UnknownId { index: usize, id: u32 },
    #[error("malformed sequence structure at token {index}: {what}")]
    Structure { index: usize, what: String },
}

/// Interleaved token sequence with its bar segmentation.
///
/// `bar_spans[i]` is the half-open token range of bar i's music tokens
/// (starting at its BAR token); `sum_positions[i]` is the index of bar i's
/// SUM token, which immediately follows the span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    pub bar_spans: Vec<(usize, usize)>,
    pub sum_positions: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bar_count(&self) -> usize {
        self.bar_spans.len()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id()).collect()
    }

    /// Music-token count: everything except SUM tokens (BOS/EOS included).
    pub fn music_len(&self) -> usize {
        self.tokens.len() - self.sum_positions.len()
    }

    /// Per-bar music-token counts with BOS folded into the first bar and EOS
    /// into the last, so the lengths sum to `music_len`. Empty for a song
    /// with zero bars.
    pub fn music_bar_lengths(&self) -> Vec<usize> {
        let b = self.bar_count();
        let mut lens: Vec<usize> = self
            .bar_spans
            .iter()
            .map(|&(start, end)| end - start)
            .collect();
        if b > 0 {
            lens[0] += 1; // BOS
            lens[b - 1] += 1; // EOS
        }
        lens
    }

    /// Rebuild the segmentation from a raw token list, validating the
    /// canonical interleave: BOS, then per bar a BAR-led music run closed by
    /// exactly one SUM, then EOS.
    pub fn from_tokens(tokens: Vec<Token>) -> Result<TokenSeq, TokenError> {
        let structure = |index: usize, what: &str| TokenError::Structure {
            index,
            what: what.into(),
        };
        if tokens.first() != Some(&Token::Bos) {
            return Err(structure(0, "sequence must begin with BOS"));
        }
        if tokens.last() != Some(&Token::Eos) {
            return Err(structure(tokens.len().saturating_sub(1), "sequence must end with EOS"));
        }
        let mut bar_spans = Vec::new();
        let mut sum_positions = Vec::new();
        let mut open_bar: Option<usize> = None;
        for (i, tok) in tokens.iter().enumerate().take(tokens.len() - 1).skip(1) {
            match tok {
                Token::Bos => return Err(structure(i, "BOS inside sequence")),
                Token::Eos => return Err(structure(i, "EOS before end")),
                Token::Bar => {
                    if open_bar.is_some() {
                        return Err(structure(i, "BAR before previous bar's SUM"));
                    }
                    open_bar = Some(i);
                }
                Token::Sum => {
                    let start = open_bar
                        .take()
                        .ok_or_else(|| structure(i, "SUM with no open bar"))?;
                    bar_spans.push((start, i));
                    sum_positions.push(i);
                }
                _ => {
                    if open_bar.is_none() {
                        return Err(structure(i, "music token outside any bar"));
                    }
                }
            }
        }
        if let Some(start) = open_bar {
            return Err(structure(start, "bar not closed by SUM"));
        }
        Ok(TokenSeq { tokens, bar_spans, sum_positions })
    }

    pub fn from_ids(ids: &[u32]) -> Result<TokenSeq, TokenError> {
        let tokens = ids
            .iter()
            .enumerate()
            .map(|(index, &id)| Token::from_id(id).ok_or(TokenError::UnknownId { index, id }))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(tokens)
    }

    /// First `max_bars` bars re-closed with EOS; identity when already
    /// within bounds.
    pub fn truncate_bars(&self, max_bars: usize) -> TokenSeq {
        assert!(max_bars >= 1, "cannot truncate to zero bars");
        if self.bar_count() <= max_bars {
            return self.clone();
        }
        let cut = self.sum_positions[max_bars - 1] + 1;
        let mut tokens = self.tokens[..cut].to_vec();
        tokens.push(Token::Eos);
        TokenSeq {
            tokens,
            bar_spans: self.bar_spans[..max_bars].to_vec(),
            sum_positions: self.sum_positions[..max_bars].to_vec(),
        }
    }
}

/// Beat bucket for tokens that carry no within-bar position.
pub const BEAT_NONE: usize = 16;

/// (bar, beat) index per token for the embedding layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionIndex {
    pub bar_id: Vec<usize>,
    /// 0..16 for positioned tokens, BEAT_NONE otherwise.
    pub beat_id: Vec<usize>,
}

/// Serialize a quantized 4/4 TrackSet. Per bar: BAR, then per role in the
/// fixed order a TRACK token and the bar's notes sorted by (pos, pitch, dur)
/// as POS PITCH DUR triples with POS shared across consecutive equal
/// positions; empty roles omitted; SUM closes the bar.
pub fn encode(ts: &TrackSet) -> Result<TokenSeq, TokenError> {
    let grid = grid();
    let four = Beats::from_integer(4);
    let mut tokens = vec![Token::Bos];
    let mut bar_spans = Vec::with_capacity(ts.bars.len());
    let mut sum_positions = Vec::with_capacity(ts.bars.len());

    for (bi, bar) in ts.bars.iter().enumerate() {
        if bar.length != four {
            return Err(TokenError::BarLength { bar: bi });
        }
        let start_idx = tokens.len();
        tokens.push(Token::Bar);
        for role in Role::ALL {
            let mut triples: Vec<(u8, u8, u8)> = Vec::new();
            for (index, n) in ts.role(role).iter().enumerate() {
                if !bar.contains_onset(n.onset) {
                    continue;
                }
                let pos = (n.onset - bar.start) / grid;
                if !pos.is_integer() {
                    return Err(TokenError::OffGrid { role, index });
                }
                let pos = pos.to_integer() as u8;
                let dur = n.duration / grid;
                if !dur.is_integer() {
                    return Err(TokenError::OffGrid { role, index });
                }
                let dur = dur.to_integer();
                if dur < 1 || dur > i64::from(MAX_DUR_UNITS) {
                    return Err(TokenError::OutOfVocab {
                        role,
                        index,
                        what: format!("duration {dur} grid units"),
                    });
                }
                if role != Role::Drum && !(PITCH_MIN..=PITCH_MAX).contains(&n.pitch) {
                    return Err(TokenError::OutOfVocab {
                        role,
                        index,
                        what: format!("melodic pitch {}", n.pitch),
                    });
                }
                triples.push((pos, n.pitch, dur as u8));
            }
            if triples.is_empty() {
                continue;
            }
            triples.sort_unstable();
            tokens.push(Token::Track(role));
            let mut prev_pos = None;
            for (pos, pitch, dur) in triples {
                if prev_pos != Some(pos) {
                    tokens.push(Token::Pos(pos));
                    prev_pos = Some(pos);
                }
                tokens.push(if role == Role::Drum {
                    Token::DrumPitch(pitch)
                } else {
                    Token::Pitch(pitch)
                });
                tokens.push(Token::Dur(dur));
            }
        }
        bar_spans.push((start_idx, tokens.len()));
        sum_positions.push(tokens.len());
        tokens.push(Token::Sum);
    }
    tokens.push(Token::Eos);
    Ok(TokenSeq { tokens, bar_spans, sum_positions })
}

/// Note-parsing state inside a track scope.
struct NoteState {
    role: Option<Role>,
    pos: Option<u8>,
    pending_pitch: Option<u8>,
}

impl NoteState {
    fn new() -> Self {
        Self { role: None, pos: None, pending_pitch: None }
    }

    /// Drop any half-built note (the truncation rule for dangling triples).
    fn close_scope(&mut self) {
        self.pos = None;
        self.pending_pitch = None;
    }
}

struct ParsedBars {
    /// Notes per role per bar, as (pos, pitch, dur_units).
    notes: [Vec<(usize, u8, u8, u8)>; 6],
    bars: usize,
}

impl ParsedBars {
    fn into_track_set(self, bars_kept: usize) -> TrackSet {
        let mut ts = TrackSet::default();
        let grid = grid();
        for (ri, notes) in self.notes.iter().enumerate() {
            for &(bar, pos, pitch, dur) in notes {
                if bar >= bars_kept {
                    continue;
                }
                ts.notes[ri].push(crate::midi::Note {
                    onset: Beats::from_integer(4 * bar as i64)
                        + Ratio::from_integer(i64::from(pos)) * grid,
                    pitch,
                    duration: Ratio::from_integer(i64::from(dur)) * grid,
                    velocity: DEFAULT_VELOCITY,
                });
            }
            ts.notes[ri].sort();
        }
        ts.bars = (0..bars_kept)
            .map(|i| Bar {
                start: Beats::from_integer(4 * i as i64),
                length: Beats::from_integer(4),
            })
            .collect();
        ts.tempo_bpm = 120.0;
        ts.time_signatures = vec![(Beats::from_integer(0), 4, 4)];
        ts
    }
}

/// One token step of the shared decode machine. Returns Err for grammar
/// violations; scope-closing tokens silently drop dangling half-notes.
fn decode_step(
    index: usize,
    tok: Token,
    state: &mut NoteState,
    parsed: &mut ParsedBars,
) -> Result<(), TokenError> {
    let violation = |what: String| TokenError::Grammar { index, what };
    match tok {
        Token::Bos => return Err(violation("BOS inside sequence".into())),
        Token::Eos => unreachable!("caller handles EOS"),
        Token::Bar => {
            state.close_scope();
            state.role = None;
            parsed.bars += 1;
        }
        Token::Sum => {
            state.close_scope();
            state.role = None;
        }
        Token::Track(role) => {
            if parsed.bars == 0 {
                return Err(violation("TRACK before any BAR".into()));
            }
            state.close_scope();
            state.role = Some(role);
        }
        Token::Pos(p) => {
            if state.role.is_none() {
                return Err(violation("POS outside a track scope".into()));
            }
            if state.pending_pitch.is_some() {
                return Err(violation("POS while a note awaits DUR".into()));
            }
            state.pos = Some(p);
        }
        Token::Pitch(p) | Token::DrumPitch(p) => {
            let role = state
                .role
                .ok_or_else(|| violation("PITCH outside a track scope".into()))?;
            let is_drum_tok = matches!(tok, Token::DrumPitch(_));
            if (role == Role::Drum) != is_drum_tok {
                return Err(violation(format!(
                    "{} pitch token in {role} track",
                    if is_drum_tok { "drum" } else { "melodic" }
                )));
            }
            if state.pos.is_none() {
                return Err(violation("PITCH before any POS".into()));
            }
            if state.pending_pitch.is_some() {
                return Err(violation("PITCH while previous note awaits DUR".into()));
            }
            state.pending_pitch = Some(p);
        }
        Token::Dur(d) => {
            let pitch = state
                .pending_pitch
                .take()
                .ok_or_else(|| violation("DUR without a pending PITCH".into()))?;
            let role = state.role.expect("pending pitch implies track scope");
            let pos = state.pos.expect("pending pitch implies position");
            parsed.notes[role.index()].push((parsed.bars - 1, pos, pitch, d));
        }
    }
    Ok(())
}

/// Strict decode: inverse of `encode` on well-formed sequences. Dangling
/// half-notes at scope boundaries are dropped (never produced by `encode`);
/// genuine grammar violations are errors. Decoded notes carry
/// `DEFAULT_VELOCITY`, tempo 120, and 4/4 bars.
pub fn decode(seq: &TokenSeq) -> Result<TrackSet, TokenError> {
    let mut state = NoteState::new();
    let mut parsed = ParsedBars { notes: Default::default(), bars: 0 };
    for (index, &tok) in seq.tokens.iter().enumerate() {
        if index == 0 {
            if tok != Token::Bos {
                return Err(TokenError::Structure { index, what: "missing BOS".into() });
            }
            continue;
        }
        if tok == Token::Eos {
            break;
        }
        decode_step(index, tok, &mut state, &mut parsed)?;
    }
    let bars = parsed.bars;
    Ok(parsed.into_track_set(bars))
}

/// Tolerant decode for generated id sequences. A grammar violation truncates
/// the result at the last bar that closed cleanly (its SUM seen); a missing
/// EOS keeps all complete notes parsed so far.
pub struct LossyDecode {
    pub track_set: TrackSet,
    pub bars_kept: usize,
    /// First violation, if any, as (token index, description).
    pub error: Option<(usize, String)>,
}

pub fn decode_lossy(ids: &[u32]) -> LossyDecode {
    let mut state = NoteState::new();
    let mut parsed = ParsedBars { notes: Default::default(), bars: 0 };
    let mut closed_bars = 0usize; // bars whose SUM has been seen
    let mut error = None;

    for (index, &id) in ids.iter().enumerate() {
        let Some(tok) = Token::from_id(id) else {
            error = Some((index, format!("unknown token id {id}")));
            break;
        };
        if index == 0 {
            if tok != Token::Bos {
                error = Some((0, "missing BOS".into()));
                break;
            }
            continue;
        }
        if tok == Token::Eos {
            break;
        }
        if tok == Token::Bos {
            error = Some((index, "BOS inside sequence".into()));
            break;
        }
        if tok == Token::Sum && parsed.bars > closed_bars {
            closed_bars = parsed.bars;
        }
        if let Err(e) = decode_step(index, tok, &mut state, &mut parsed) {
            let what = match e {
                TokenError::Grammar { what, .. } => what,
                other => other.to_string(),
            };
            error = Some((index, what));
            break;
        }
    }

    let bars_kept = if error.is_some() { closed_bars } else { parsed.bars };
    LossyDecode {
        track_set: parsed.into_track_set(bars_kept),
        bars_kept,
        error,
    }
}

/// Map every token to (bar_id, beat_id). PITCH/DUR inherit the governing
/// POS; BAR/TRACK/SUM/BOS/EOS use BEAT_NONE. The SUM token carries its own
/// bar's id; BOS folds into bar 0 and EOS into the last bar.
pub fn position_indices(seq: &TokenSeq) -> PositionIndex {
    let n = seq.tokens.len();
    let mut bar_id = Vec::with_capacity(n);
    let mut beat_id = Vec::with_capacity(n);
    let mut bars_seen = 0usize;
    let mut current_beat: Option<u8> = None;
    for &tok in &seq.tokens {
        let (bar, beat) = match tok {
            Token::Bos => (0, BEAT_NONE),
            Token::Eos => (bars_seen.saturating_sub(1), BEAT_NONE),
            Token::Bar => {
                current_beat = None;
                bars_seen += 1;
                (bars_seen - 1, BEAT_NONE)
            }
            Token::Sum => {
                current_beat = None;
                (bars_seen.saturating_sub(1), BEAT_NONE)
            }
            Token::Track(_) => {
                current_beat = None;
                (bars_seen.saturating_sub(1), BEAT_NONE)
            }
            Token::Pos(p) => {
                current_beat = Some(p);
                (bars_seen.saturating_sub(1), usize::from(p))
            }
            Token::Pitch(_) | Token::DrumPitch(_) | Token::Dur(_) => (
                bars_seen.saturating_sub(1),
                current_beat.map_or(BEAT_NONE, usize::from),
            ),
        };
        bar_id.push(bar);
        beat_id.push(beat);
    }
    PositionIndex { bar_id, beat_id }
}
