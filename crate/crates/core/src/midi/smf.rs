//! Standard MIDI File reader and writer.
//!
//! Reads format 0/1 files with metrical timing into [`MidiPiece`]. Running
//! status is honored, note-ons with velocity 0 close notes, and note-on/off
//! pairs are matched FIFO per (channel, pitch). Unclosed note-ons at the end
//! of a track are closed at the track's final tick and counted in
//! [`MidiPiece::unclosed_note_ons`].

use super::{MidiError, MidiPiece, RawNote, TempoEvent, TimeSigEvent};

const HEADER_MAGIC: &[u8; 4] = b"MThd";
const TRACK_MAGIC: &[u8; 4] = b"MTrk";

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, MidiError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, MidiError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, MidiError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most 4 bytes per the SMF spec.
    fn vlq(&mut self, what: &str) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for i in 0..4 {
            let byte = self.u8(what)?;
            value = (value << 7) | u32::from(byte & 0x7f);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                break;
            }
        }
        Err(MidiError::InvalidEvent {
            offset: self.pos,
            what: format!("{what}: variable-length quantity exceeds 4 bytes"),
        })
    }
}

/// Parse a Standard MIDI File (format 0 or 1, metrical timing).
pub fn parse_smf(bytes: &[u8]) -> Result<MidiPiece, MidiError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "header magic").map_err(|_| {
        MidiError::MalformedHeader("file shorter than the 4-byte 'MThd' magic".into())
    })?;
    if magic != HEADER_MAGIC {
        return Err(MidiError::MalformedHeader(format!(
            "expected 'MThd', found {:02x?}",
            magic
        )));
    }
    let header_len = cur.u32("header length")?;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header length {header_len} < 6"
        )));
    }
    let format = cur.u16("format")?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    let declared_tracks = cur.u16("track count")?;
    let division = cur.u16("division")?;
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteTiming);
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader(
            "ticks-per-quarter of zero".into(),
        ));
    }
    // skip any extra header bytes beyond the standard 6
    cur.take(header_len as usize - 6, "header padding")?;

    let mut piece = MidiPiece {
        ticks_per_quarter: u32::from(division),
        tracks: Vec::new(),
        tempo_events: Vec::new(),
        time_signatures: Vec::new(),
        unclosed_note_ons: 0,
    };

    while cur.remaining() >= 8 {
        let chunk_magic = cur.take(4, "chunk magic")?;
        let chunk_len = cur.u32("chunk length")? as usize;
        let body = cur.take(chunk_len, "chunk body")?;
        if chunk_magic == TRACK_MAGIC {
            parse_track(body, &mut piece)?;
        }
        // unknown chunk types are skipped per the SMF spec
    }
    if piece.tracks.len() != declared_tracks as usize && cur.remaining() > 0 {
        return Err(MidiError::Truncated(format!(
            "{} trailing bytes after {} of {} declared tracks",
            cur.remaining(),
            piece.tracks.len(),
            declared_tracks
        )));
    }
    Ok(piece)
}

/// A note-on waiting to be matched with its note-off.
struct OpenNote {
    tick: u64,
    velocity: u8,
    program: u8,
}

fn parse_track(body: &[u8], piece: &mut MidiPiece) -> Result<(), MidiError> {
    let mut cur = Cursor::new(body);
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    let mut programs = [0u8; 16];
    // FIFO per (channel, pitch) so overlapping identical notes pair in order
    let mut open: Vec<Vec<OpenNote>> = (0..16 * 128).map(|_| Vec::new()).collect();
    let mut notes: Vec<RawNote> = Vec::new();

    while cur.remaining() > 0 {
        let delta = cur.vlq("delta time")?;
        tick += u64::from(delta);
        let first = cur.u8("event status")?;
        let status = if first & 0x80 != 0 {
            if first < 0xf0 {
                running_status = Some(first);
            }
            first
        } else {
            // running status: data byte of a repeated channel message
            cur.pos -= 1;
            running_status.ok_or(MidiError::InvalidEvent {
                offset: cur.pos,
                what: "data byte with no running status".into(),
            })?
        };

        match status {
            0xff => {
                let meta_type = cur.u8("meta type")?;
                let len = cur.vlq("meta length")? as usize;
                let data = cur.take(len, "meta data")?;
                match meta_type {
                    0x51 if len >= 3 => piece.tempo_events.push(TempoEvent {
                        tick,
                        us_per_quarter: u32::from(data[0]) << 16
                            | u32::from(data[1]) << 8
                            | u32::from(data[2]),
                    }),
                    0x58 if len >= 2 => piece.time_signatures.push(TimeSigEvent {
                        tick,
                        numerator: data[0],
                        denominator: 1u8 << data[1].min(6),
                    }),
                    0x2f => break, // end of track
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = cur.vlq("sysex length")? as usize;
                cur.take(len, "sysex data")?;
            }
            _ => {
                let kind = status >> 4;
                let channel = status & 0x0f;
                match kind {
                    0x9 => {
                        let pitch = cur.u8("note-on pitch")? & 0x7f;
                        let velocity = cur.u8("note-on velocity")? & 0x7f;
                        let slot = usize::from(channel) * 128 + usize::from(pitch);
                        if velocity > 0 {
                            open[slot].push(OpenNote {
                                tick,
                                velocity,
                                program: programs[usize::from(channel)],
                            });
                        } else {
                            close_note(&mut open[slot], tick, channel, pitch, &mut notes);
                        }
                    }
                    0x8 => {
                        let pitch = cur.u8("note-off pitch")? & 0x7f;
                        cur.u8("note-off velocity")?;
                        let slot = usize::from(channel) * 128 + usize::from(pitch);
                        close_note(&mut open[slot], tick, channel, pitch, &mut notes);
                    }
                    0xc => {
                        programs[usize::from(channel)] = cur.u8("program number")? & 0x7f;
                    }
                    0xa | 0xb | 0xe => {
                        cur.take(2, "two-byte channel message")?;
                    }
                    0xd => {
                        cur.u8("channel pressure")?;
                    }
                    _ => {
                        return Err(MidiError::InvalidEvent {
                            offset: cur.pos,
                            what: format!("status byte {status:#04x}"),
                        });
                    }
                }
            }
        }
    }

    // recover unclosed note-ons by closing them at the track's final tick
    for (slot, stack) in open.iter_mut().enumerate() {
        let channel = (slot / 128) as u8;
        let pitch = (slot % 128) as u8;
        piece.unclosed_note_ons += stack.len();
        for on in stack.drain(..) {
            notes.push(RawNote {
                tick: on.tick,
                duration_ticks: tick.saturating_sub(on.tick),
                channel,
                program: on.program,
                pitch,
                velocity: on.velocity,
            });
        }
    }
    notes.sort_by_key(|n| (n.tick, n.channel, n.pitch, n.duration_ticks));
    piece.tracks.push(notes);
    Ok(())
}

fn close_note(
    stack: &mut Vec<OpenNote>,
    tick: u64,
    channel: u8,
    pitch: u8,
    notes: &mut Vec<RawNote>,
) {
    if stack.is_empty() {
        return; // stray note-off
    }
    let on = stack.remove(0);
    notes.push(RawNote {
        tick: on.tick,
        duration_ticks: tick.saturating_sub(on.tick),
        channel,
        program: on.program,
        pitch,
        velocity: on.velocity,
    });
}

fn push_vlq(out: &mut Vec<u8>, mut value: u64) {
    let mut stack = [0u8; 10];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = stack[i];
        if i > 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

/// One scheduled channel event for the writer.
#[derive(Clone, Copy)]
pub(super) struct WriterEvent {
    pub tick: u64,
    /// 0 = note-off, 1 = note-on; offs sort first at equal ticks so that
    /// back-to-back repeats of the same pitch pair up FIFO on re-parse.
    pub on: bool,
    pub channel: u8,
    pub pitch: u8,
    pub velocity: u8,
}

pub(super) struct WriterTrack {
    pub program: Option<(u8, u8)>, // (channel, program) change at tick 0
    pub events: Vec<WriterEvent>,
}

/// Serialize a format-1 file: one conductor track (tempo + time signature)
/// followed by the given note tracks.
pub(super) fn write_smf_raw(
    ticks_per_quarter: u16,
    us_per_quarter: u32,
    time_signature: (u8, u8),
    tracks: &[WriterTrack],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEADER_MAGIC);
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(tracks.len() as u16 + 1).to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());

    // conductor track
    let mut body = Vec::new();
    push_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x58, 0x04]);
    let (num, den) = time_signature;
    body.push(num);
    body.push(den.trailing_zeros() as u8);
    body.extend_from_slice(&[0x18, 0x08]);
    push_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x51, 0x03]);
    body.extend_from_slice(&us_per_quarter.to_be_bytes()[1..4]);
    finish_track(&mut out, body, 0);

    for track in tracks {
        let mut body = Vec::new();
        if let Some((channel, program)) = track.program {
            push_vlq(&mut body, 0);
            body.push(0xc0 | (channel & 0x0f));
            body.push(program & 0x7f);
        }
        let mut events = track.events.clone();
        events.sort_by_key(|e| (e.tick, e.on, e.pitch, e.velocity));
        let mut last_tick = 0u64;
        let mut end_tick = 0u64;
        for e in &events {
            push_vlq(&mut body, e.tick - last_tick);
            last_tick = e.tick;
            end_tick = e.tick;
            if e.on {
                body.push(0x90 | (e.channel & 0x0f));
                body.push(e.pitch & 0x7f);
                body.push(e.velocity.clamp(1, 127));
            } else {
                body.push(0x80 | (e.channel & 0x0f));
                body.push(e.pitch & 0x7f);
                body.push(0x40);
            }
        }
        let _ = end_tick;
        finish_track(&mut out, body, 0);
    }
    out
}

fn finish_track(out: &mut Vec<u8>, mut body: Vec<u8>, trailing_delta: u64) {
    push_vlq(&mut body, trailing_delta);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    out.extend_from_slice(TRACK_MAGIC);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(format: u16, ntrks: u16, division: u16) -> Vec<u8> {
        let mut v = b"MThd".to_vec();
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&format.to_be_bytes());
        v.extend_from_slice(&ntrks.to_be_bytes());
        v.extend_from_slice(&division.to_be_bytes());
        v
    }

    fn track(events: &[u8]) -> Vec<u8> {
        let mut v = b"MTrk".to_vec();
        v.extend_from_slice(&(events.len() as u32).to_be_bytes());
        v.extend_from_slice(events);
        v
    }

    #[test]
    fn minimal_single_note_file() {
        // one C4 quarter note at tick 0, 480 tpq
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[
            0x00, 0x90, 60, 100, // note on
            0x83, 0x60, 0x80, 60, 0x40, // delta 480, note off
            0x00, 0xff, 0x2f, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.ticks_per_quarter, 480);
        assert_eq!(piece.tracks.len(), 1);
        let n = &piece.tracks[0][0];
        assert_eq!((n.tick, n.duration_ticks, n.pitch, n.velocity), (0, 480, 60, 100));
        assert_eq!(piece.unclosed_note_ons, 0);
    }

    #[test]
    fn running_status_two_note_ons() {
        // second note-on omits the status byte
        let mut bytes = header(0, 1, 96);
        bytes.extend(track(&[
            0x00, 0x90, 60, 100, //
            0x00, 64, 100, // running status note-on
            0x60, 60, 0, // running status, velocity 0 = off
            0x00, 64, 0, //
            0x00, 0xff, 0x2f, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.tracks[0].len(), 2);
        let pitches: Vec<u8> = piece.tracks[0].iter().map(|n| n.pitch).collect();
        assert_eq!(pitches, vec![60, 64]);
        assert_eq!(piece.tracks[0][0].duration_ticks, 96);
    }

    #[test]
    fn running_status_matches_independent_reader() {
        // same byte stream decoded by midly must yield the same note-on set
        let mut bytes = header(0, 1, 96);
        bytes.extend(track(&[
            0x00, 0x90, 60, 100, //
            0x10, 64, 90, //
            0x20, 60, 0, //
            0x00, 64, 0, //
            0x00, 0xff, 0x2f, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        let smf = midly::Smf::parse(&bytes).unwrap();
        let mut oracle = Vec::new();
        let mut tick = 0u64;
        for ev in &smf.tracks[0] {
            tick += u64::from(ev.delta.as_int());
            if let midly::TrackEventKind::Midi {
                message: midly::MidiMessage::NoteOn { key, vel },
                ..
            } = ev.kind
            {
                if vel.as_int() > 0 {
                    oracle.push((tick, key.as_int()));
                }
            }
        }
        let ours: Vec<(u64, u8)> = piece.tracks[0].iter().map(|n| (n.tick, n.pitch)).collect();
        assert_eq!(ours, oracle);
    }

    #[test]
    fn empty_track_parses_to_zero_notes() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[0x00, 0xff, 0x2f, 0x00]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.tracks.len(), 1);
        assert!(piece.tracks[0].is_empty());
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(matches!(
            parse_smf(b"RIFF----"),
            Err(MidiError::MalformedHeader(_))
        ));
        assert!(matches!(parse_smf(b"MT"), Err(MidiError::MalformedHeader(_))));
    }

    #[test]
    fn format_2_rejected() {
        let bytes = header(2, 0, 480);
        assert!(matches!(parse_smf(&bytes), Err(MidiError::UnsupportedFormat(2))));
    }

    #[test]
    fn smpte_timing_rejected() {
        let bytes = header(0, 0, 0x8000 | 0x4818);
        assert!(matches!(parse_smf(&bytes), Err(MidiError::SmpteTiming)));
    }

    #[test]
    fn truncated_chunk_rejected() {
        let mut bytes = header(0, 1, 480);
        let mut t = b"MTrk".to_vec();
        t.extend_from_slice(&100u32.to_be_bytes()); // claims 100 bytes, has 2
        t.extend_from_slice(&[0x00, 0xff]);
        bytes.extend(t);
        assert!(matches!(parse_smf(&bytes), Err(MidiError::Truncated(_))));
    }

    #[test]
    fn unclosed_note_on_recovered_at_track_end() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[
            0x00, 0x90, 60, 100, //
            0x83, 0x60, 0xff, 0x2f, 0x00, // end of track at tick 480, no note-off
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.unclosed_note_ons, 1);
        assert_eq!(piece.tracks[0][0].duration_ticks, 480);
    }

    #[test]
    fn tempo_and_time_signature_extracted() {
        let mut bytes = header(0, 1, 480);
        bytes.extend(track(&[
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // 500000 us/q = 120 bpm
            0x00, 0xff, 0x58, 0x04, 0x03, 0x02, 0x18, 0x08, // 3/4
            0x00, 0xff, 0x2f, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.tempo_events[0].us_per_quarter, 500_000);
        let ts = &piece.time_signatures[0];
        assert_eq!((ts.numerator, ts.denominator), (3, 4));
    }

    #[test]
    fn overlapping_same_pitch_pairs_fifo() {
        let mut bytes = header(0, 1, 100);
        bytes.extend(track(&[
            0x00, 0x90, 60, 100, // on at 0
            0x0a, 60, 100, // on at 10
            0x0a, 60, 0, // off at 20 -> closes the tick-0 note
            0x0a, 60, 0, // off at 30 -> closes the tick-10 note
            0x00, 0xff, 0x2f, 0x00,
        ]));
        let piece = parse_smf(&bytes).unwrap();
        let durs: Vec<(u64, u64)> = piece.tracks[0]
            .iter()
            .map(|n| (n.tick, n.duration_ticks))
            .collect();
        assert_eq!(durs, vec![(0, 20), (10, 20)]);
    }

    #[test]
    fn writer_output_reparses() {
        let tracks = vec![WriterTrack {
            program: Some((0, 80)),
            events: vec![
                WriterEvent { tick: 0, on: true, channel: 0, pitch: 60, velocity: 90 },
                WriterEvent { tick: 480, on: false, channel: 0, pitch: 60, velocity: 0 },
                WriterEvent { tick: 480, on: true, channel: 0, pitch: 62, velocity: 90 },
                WriterEvent { tick: 960, on: false, channel: 0, pitch: 62, velocity: 0 },
            ],
        }];
        let bytes = write_smf_raw(480, 500_000, (4, 4), &tracks);
        let piece = parse_smf(&bytes).unwrap();
        assert_eq!(piece.tracks.len(), 2);
        let notes = &piece.tracks[1];
        assert_eq!(notes.len(), 2);
        assert_eq!(notes[0].program, 80);
        assert_eq!((notes[0].tick, notes[0].duration_ticks), (0, 480));
        assert_eq!((notes[1].tick, notes[1].duration_ticks), (480, 480));
        assert_eq!(piece.time_signatures[0].numerator, 4);
        // and midly agrees the stream is well-formed
        assert!(midly::Smf::parse(&bytes).is_ok());
    }
}
