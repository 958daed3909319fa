//! MIDI ingestion: SMF parsing, track compression to six canonical roles,
//! grid quantization, and corpus filtering.
//!
//! All musical time is exact rational beats (`ticks / ticks_per_quarter`);
//! nothing in this module introduces floating-point drift into onsets or
//! durations.

pub mod smf;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use smf::parse_smf;

/// Exact musical time in beats (quarter notes).
pub type Beats = Ratio<i64>;

/// Shorthand constructor for a rational beat value.
pub fn beats(numer: i64, denom: i64) -> Beats {
    Ratio::new(numer, denom)
}

/// Parse "3", "3/4", or "0.25" into exact beats.
pub fn parse_beats(s: &str) -> Result<Beats, String> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: i64 = n.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
        let d: i64 = d.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
        if d == 0 {
            return Err(format!("zero denominator in {s:?}"));
        }
        return Ok(Ratio::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let int: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| format!("bad number {s:?}"))? };
        let scale = 10i64.checked_pow(frac.len() as u32).ok_or_else(|| format!("too many decimals in {s:?}"))?;
        let frac: i64 = frac.parse().map_err(|_| format!("bad number {s:?}"))?;
        return Ok(Ratio::from_integer(int) + Ratio::new(frac, scale));
    }
    s.parse::<i64>()
        .map(Ratio::from_integer)
        .map_err(|_| format!("bad beats value {s:?}"))
}

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed SMF header: {0}")]
    MalformedHeader(String),
    #[error("unsupported SMF format {0} (only 0 and 1)")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteTiming,
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid event at offset {offset}: {what}")]
    InvalidEvent { offset: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A matched note-on/off pair in raw tick time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawNote {
    pub tick: u64,
    pub duration_ticks: u64,
    pub channel: u8,
    pub program: u8,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TempoEvent {
    pub tick: u64,
    pub us_per_quarter: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSigEvent {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

/// Decoded SMF contents in raw tick time.
#[derive(Clone, Debug)]
pub struct MidiPiece {
    pub ticks_per_quarter: u32,
    pub tracks: Vec<Vec<RawNote>>,
    pub tempo_events: Vec<TempoEvent>,
    pub time_signatures: Vec<TimeSigEvent>,
    /// Note-ons with no matching note-off, recovered by closing at track end.
    pub unclosed_note_ons: usize,
}

impl Default for MidiPiece {
    fn default() -> Self {
        Self {
            ticks_per_quarter: 480,
            tracks: Vec::new(),
            tempo_events: Vec::new(),
            time_signatures: Vec::new(),
            unclosed_note_ons: 0,
        }
    }
}

pub fn read_smf_file(path: impl AsRef<Path>) -> Result<MidiPiece, MidiError> {
    let bytes = std::fs::read(path)?;
    parse_smf(&bytes)
}

/// The six canonical instrument roles, in the fixed serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Melody,
    Piano,
    Guitar,
    String,
    Bass,
    Drum,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Melody,
        Role::Piano,
        Role::Guitar,
        Role::String,
        Role::Bass,
        Role::Drum,
    ];

    pub fn index(self) -> usize {
        Role::ALL.iter().position(|&r| r == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Melody => "melody",
            Role::Piano => "piano",
            Role::Guitar => "guitar",
            Role::String => "string",
            Role::Bass => "bass",
            Role::Drum => "drum",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A note in beat time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Note {
    pub onset: Beats,
    pub pitch: u8,
    pub duration: Beats,
    pub velocity: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bar {
    pub start: Beats,
    pub length: Beats,
}

impl Bar {
    pub fn end(&self) -> Beats {
        self.start + self.length
    }

    pub fn contains_onset(&self, onset: Beats) -> bool {
        onset >= self.start && onset < self.end()
    }
}

/// A piece reduced to the six roles, with bars derived from time signatures.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackSet {
    /// Notes per role, indexed by `Role::index()`, each sorted by
    /// (onset, pitch, duration, velocity).
    pub notes: [Vec<Note>; 6],
    pub bars: Vec<Bar>,
    pub tempo_bpm: f64,
    /// (start_beat, numerator, denominator) changes; empty means no event
    /// was present and 4/4 was assumed.
    pub time_signatures: Vec<(Beats, u8, u8)>,
}

impl TrackSet {
    pub fn role(&self, role: Role) -> &[Note] {
        &self.notes[role.index()]
    }

    pub fn role_mut(&mut self, role: Role) -> &mut Vec<Note> {
        &mut self.notes[role.index()]
    }

    pub fn note_count(&self) -> usize {
        self.notes.iter().map(Vec::len).sum()
    }

    pub fn non_empty_roles(&self) -> usize {
        self.notes.iter().filter(|n| !n.is_empty()).count()
    }

    /// True when no explicit time-signature event was present.
    pub fn assumed_44(&self) -> bool {
        self.time_signatures.is_empty()
    }

    /// Index of the bar containing the onset, if any.
    pub fn bar_of(&self, onset: Beats) -> Option<usize> {
        self.bars.iter().position(|b| b.contains_onset(onset))
    }

    /// Whether bar `i` contains at least one note onset in any role.
    pub fn bar_has_onset(&self, i: usize) -> bool {
        let bar = &self.bars[i];
        self.notes
            .iter()
            .any(|ns| ns.iter().any(|n| bar.contains_onset(n.onset)))
    }
}

/// GM program number → role table; channel 9 always maps to drum regardless.
#[derive(Clone)]
pub struct RoleMapping {
    table: [Role; 128],
}

impl Default for RoleMapping {
    fn default() -> Self {
        let mut table = [Role::Piano; 128];
        for (program, slot) in table.iter_mut().enumerate() {
            *slot = match program {
                0..=23 => Role::Piano,    // pianos, chromatic percussion, organs
                24..=31 => Role::Guitar,
                32..=39 => Role::Bass,
                40..=79 => Role::String,  // strings, ensembles, brass, reeds, pipes
                80..=81 => Role::Melody,  // square and saw leads
                82..=103 => Role::String, // other leads, pads, effects
                104..=111 => Role::Guitar, // plucked ethnic
                _ => Role::Piano,         // percussive, sound effects
            };
        }
        Self { table }
    }
}

impl RoleMapping {
    pub fn role_for(&self, program: u8, channel: u8) -> Role {
        if channel == 9 {
            Role::Drum
        } else {
            self.table[usize::from(program & 0x7f)]
        }
    }

    /// Apply overrides from a JSON object {"<program>": "<role>", …}.
    pub fn from_json_str(json: &str) -> Result<Self, String> {
        let map: BTreeMap<String, Role> =
            serde_json::from_str(json).map_err(|e| format!("bad mapping file: {e}"))?;
        let mut mapping = Self::default();
        for (key, role) in map {
            let program: usize = key
                .parse()
                .map_err(|_| format!("bad program number {key:?} in mapping file"))?;
            if program > 127 {
                return Err(format!("program number {program} out of range 0-127"));
            }
            mapping.table[program] = role;
        }
        Ok(mapping)
    }
}

/// Corpus filtering rules. Ranges are inclusive.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub require_44: bool,
    pub min_instruments: usize,
    pub require_melody: bool,
    pub tempo_range: [f64; 2],
    /// Applies to melodic roles only; drum notes keep the full 0-127 range.
    pub pitch_range: [u8; 2],
    pub max_note_duration_beats: u32,
    pub max_consecutive_empty_bars: usize,
    pub reject_uniform_pitch_or_duration: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            require_44: true,
            min_instruments: 2,
            require_melody: true,
            tempo_range: [24.0, 200.0],
            pitch_range: [21, 108],
            max_note_duration_beats: 16,
            max_consecutive_empty_bars: 3,
            reject_uniform_pitch_or_duration: true,
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<(), String> {
        if self.tempo_range[0] > self.tempo_range[1] {
            return Err("tempo_range min > max".into());
        }
        if self.pitch_range[0] > self.pitch_range[1] {
            return Err("pitch_range min > max".into());
        }
        Ok(())
    }
}

/// Stable reason codes for rejected pieces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TimeSignature,
    Instruments,
    Melody,
    TempoRange,
    PitchRange,
    MaxNoteDuration,
    EmptyBars,
    UniformPitch,
    UniformDuration,
    /// Assigned at corpus level via `fingerprint`, never by `filter_piece`.
    Duplicate,
    /// Assigned by ingestion drivers for unreadable or unparseable files.
    Io,
    /// Assigned by ingestion drivers when an accepted piece fails to encode.
    Encode,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::TimeSignature => "time_signature",
            RejectReason::Instruments => "instruments",
            RejectReason::Melody => "melody",
            RejectReason::TempoRange => "tempo_range",
            RejectReason::PitchRange => "pitch_range",
            RejectReason::MaxNoteDuration => "max_note_duration",
            RejectReason::EmptyBars => "empty_bars",
            RejectReason::UniformPitch => "uniform_pitch",
            RejectReason::UniformDuration => "uniform_duration",
            RejectReason::Duplicate => "duplicate",
            RejectReason::Io => "io",
            RejectReason::Encode => "encode",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Derive contiguous bars from beat 0 through at least `end`, honoring
/// time-signature changes (a change mid-bar truncates the bar so the list
/// stays contiguous).
fn derive_bars(signatures: &[(Beats, u8, u8)], end: Beats) -> Vec<Bar> {
    let mut bars = Vec::new();
    if end <= Beats::zero() {
        return bars;
    }
    let mut start = Beats::zero();
    while start < end {
        let active = signatures
            .iter()
            .rev()
            .find(|(beat, _, _)| *beat <= start)
            .map(|&(_, n, d)| (n, d))
            .unwrap_or((4, 4));
        let (num, den) = if active.0 == 0 || active.1 == 0 { (4, 4) } else { active };
        let bar_len = Ratio::new(4 * i64::from(num), i64::from(den));
        let next_change = signatures
            .iter()
            .map(|&(beat, _, _)| beat)
            .find(|&beat| beat > start);
        let length = match next_change {
            Some(change) if start + bar_len > change => change - start,
            _ => bar_len,
        };
        bars.push(Bar { start, length });
        start += length;
    }
    bars
}

/// Assign every raw note to one of the six roles and derive bars.
/// Conserves note count exactly.
pub fn compress_tracks(piece: &MidiPiece, mapping: &RoleMapping) -> TrackSet {
    let tpq = i64::from(piece.ticks_per_quarter.max(1));
    let to_beats = |tick: u64| Ratio::new(tick as i64, tpq);

    let mut ts = TrackSet::default();
    for track in &piece.tracks {
        for raw in track {
            let role = mapping.role_for(raw.program, raw.channel);
            ts.role_mut(role).push(Note {
                onset: to_beats(raw.tick),
                pitch: raw.pitch,
                duration: to_beats(raw.duration_ticks),
                velocity: raw.velocity.max(1),
            });
        }
    }
    for notes in ts.notes.iter_mut() {
        notes.sort();
    }

    let mut sigs: Vec<(Beats, u8, u8)> = piece
        .time_signatures
        .iter()
        .map(|e| (to_beats(e.tick), e.numerator, e.denominator))
        .collect();
    sigs.sort_by_key(|&(beat, _, _)| beat);
    sigs.dedup_by_key(|&mut (beat, _, _)| beat); // keeps the first at each beat

    let end = ts
        .notes
        .iter()
        .flatten()
        .map(|n| n.onset + n.duration)
        .max()
        .unwrap_or_else(Beats::zero);
    ts.bars = derive_bars(&sigs, end);
    ts.time_signatures = sigs;

    ts.tempo_bpm = piece
        .tempo_events
        .iter()
        .min_by_key(|e| e.tick)
        .map(|e| 60_000_000.0 / f64::from(e.us_per_quarter.max(1)))
        .unwrap_or(120.0);
    ts
}

fn round_to_grid(x: Beats, grid: Beats) -> Beats {
    // round-half-up to the nearest grid multiple
    let steps = (x / grid + Ratio::new(1, 2)).floor();
    steps * grid
}

/// Snap onsets and durations to the grid (default 1/4 beat). Durations get a
/// floor of one grid unit. Idempotent; bars are re-derived so they still
/// cover every note.
pub fn quantize(ts: &TrackSet, grid: Beats) -> TrackSet {
    assert!(grid > Beats::zero(), "grid must be positive");
    let mut out = ts.clone();
    for notes in out.notes.iter_mut() {
        for n in notes.iter_mut() {
            n.onset = round_to_grid(n.onset, grid);
            let d = round_to_grid(n.duration, grid);
            n.duration = if d < grid { grid } else { d };
        }
        notes.sort();
    }
    let end = out
        .notes
        .iter()
        .flatten()
        .map(|n| n.onset + n.duration)
        .max()
        .unwrap_or_else(Beats::zero);
    out.bars = derive_bars(&out.time_signatures, end);
    out
}

/// All failing rules, in the fixed documented order. `filter_piece` reports
/// the first; Accept/Reject outcome is independent of the order.
pub fn rule_violations(ts: &TrackSet, rules: &FilterRules) -> Vec<RejectReason> {
    let mut out = Vec::new();

    if rules.require_44 {
        let explicit_not_44 = ts
            .time_signatures
            .iter()
            .any(|&(_, n, d)| (n, d) != (4, 4));
        let four = Beats::from_integer(4);
        if explicit_not_44 || ts.bars.iter().any(|b| b.length != four) {
            out.push(RejectReason::TimeSignature);
        }
    }
    if ts.non_empty_roles() < rules.min_instruments {
        out.push(RejectReason::Instruments);
    }
    if rules.require_melody && ts.role(Role::Melody).is_empty() {
        out.push(RejectReason::Melody);
    }
    if ts.tempo_bpm < rules.tempo_range[0] || ts.tempo_bpm > rules.tempo_range[1] {
        out.push(RejectReason::TempoRange);
    }
    let melodic_pitch_bad = Role::ALL
        .iter()
        .filter(|&&r| r != Role::Drum)
        .flat_map(|&r| ts.role(r))
        .any(|n| n.pitch < rules.pitch_range[0] || n.pitch > rules.pitch_range[1]);
    if melodic_pitch_bad {
        out.push(RejectReason::PitchRange);
    }
    let max_dur = Beats::from_integer(i64::from(rules.max_note_duration_beats));
    if ts.notes.iter().flatten().any(|n| n.duration > max_dur) {
        out.push(RejectReason::MaxNoteDuration);
    }
    let mut run = 0usize;
    let mut worst_run = 0usize;
    for i in 0..ts.bars.len() {
        if ts.bar_has_onset(i) {
            run = 0;
        } else {
            run += 1;
            worst_run = worst_run.max(run);
        }
    }
    if worst_run > rules.max_consecutive_empty_bars {
        out.push(RejectReason::EmptyBars);
    }
    if rules.reject_uniform_pitch_or_duration && ts.note_count() > 0 {
        let mut pitches = ts.notes.iter().flatten().map(|n| n.pitch);
        let first_pitch = pitches.next().unwrap();
        if pitches.all(|p| p == first_pitch) {
            out.push(RejectReason::UniformPitch);
        }
        let mut durs = ts.notes.iter().flatten().map(|n| n.duration);
        let first_dur = durs.next().unwrap();
        if durs.all(|d| d == first_dur) {
            out.push(RejectReason::UniformDuration);
        }
    }
    out
}

/// Accept (`Ok`) iff every rule passes; otherwise the first failing rule.
pub fn filter_piece(ts: &TrackSet, rules: &FilterRules) -> Result<(), RejectReason> {
    match rule_violations(ts, rules).first() {
        None => Ok(()),
        Some(&reason) => Err(reason),
    }
}

/// Corpus-level duplicate key: hash of total duration, #bars, #notes,
/// #distinct note positions, and #non-empty instruments.
pub fn fingerprint(ts: &TrackSet) -> String {
    let end = ts.bars.last().map(Bar::end).unwrap_or_else(Beats::zero);
    let positions: BTreeSet<Beats> = ts.notes.iter().flatten().map(|n| n.onset).collect();
    let canonical = format!(
        "dur={}/{};bars={};notes={};positions={};instruments={}",
        end.numer(),
        end.denom(),
        ts.bars.len(),
        ts.note_count(),
        positions.len(),
        ts.non_empty_roles()
    );
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the ingestion manifest (JSON-lines).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub bars: usize,
    pub notes: usize,
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reject: Option<RejectReason>,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Full single-file pipeline: parse, compress, quantize, filter.
pub struct IngestResult {
    pub track_set: TrackSet,
    pub reject: Option<RejectReason>,
    pub unclosed_note_ons: usize,
}

pub fn ingest_bytes(
    bytes: &[u8],
    mapping: &RoleMapping,
    grid: Beats,
    rules: &FilterRules,
) -> Result<IngestResult, MidiError> {
    let piece = parse_smf(bytes)?;
    let ts = quantize(&compress_tracks(&piece, mapping), grid);
    let reject = filter_piece(&ts, rules).err();
    Ok(IngestResult {
        track_set: ts,
        reject,
        unclosed_note_ons: piece.unclosed_note_ons,
    })
}

/// Per-role General MIDI program and channel used when writing SMF output.
pub fn role_program_channel(role: Role) -> (u8, u8) {
    match role {
        Role::Melody => (80, 0), // square lead
        Role::Piano => (0, 1),
        Role::Guitar => (24, 2),
        Role::String => (48, 3),
        Role::Bass => (33, 4),
        Role::Drum => (0, 9),
    }
}

/// Serialize a TrackSet as a format-1 SMF at 480 ticks per quarter, one
/// track per non-empty role.
pub fn write_smf(ts: &TrackSet) -> Vec<u8> {
    const TPQ: i64 = 480;
    let to_tick = |b: Beats| {
        let t = (b * Ratio::from_integer(TPQ)).round();
        t.to_integer().max(0) as u64
    };
    let mut tracks = Vec::new();
    for role in Role::ALL {
        let notes = ts.role(role);
        if notes.is_empty() {
            continue;
        }
        let (program, channel) = role_program_channel(role);
        let mut events = Vec::with_capacity(notes.len() * 2);
        for n in notes {
            let on = to_tick(n.onset);
            let off = to_tick(n.onset + n.duration).max(on + 1);
            events.push(smf::WriterEvent {
                tick: on,
                on: true,
                channel,
                pitch: n.pitch,
                velocity: n.velocity,
            });
            events.push(smf::WriterEvent {
                tick: off,
                on: false,
                channel,
                pitch: n.pitch,
                velocity: 0,
            });
        }
        tracks.push(smf::WriterTrack {
            program: (role != Role::Drum).then_some((channel, program)),
            events,
        });
    }
    let bpm = if ts.tempo_bpm.is_finite() && ts.tempo_bpm > 0.0 { ts.tempo_bpm } else { 120.0 };
    let us_per_quarter = (60_000_000.0 / bpm).round() as u32;
    let time_signature = ts
        .time_signatures
        .first()
        .map(|&(_, n, d)| (n, d))
        .unwrap_or((4, 4));
    smf::write_smf_raw(TPQ as u16, us_per_quarter, time_signature, &tracks)
}
