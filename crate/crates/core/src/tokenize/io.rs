//! Token corpus files: one line of space-separated ids per song, a JSON-lines
//! sidecar with each song's bar spans and SUM positions, and a metadata file
//! pinning the vocabulary hash.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{vocab, TokenError, TokenSeq};

#[derive(Debug, Error)]
pub enum CorpusIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("song {song}: {source}")]
    Token { song: usize, source: TokenError },
    #[error("song {song}: bad integer {text:?}")]
    BadInt { song: usize, text: String },
    #[error("sidecar mismatch for song {song}: {what}")]
    SidecarMismatch { song: usize, what: String },
    #[error("bad sidecar line {line}: {what}")]
    BadSidecar { line: usize, what: String },
    #[error("corpus metadata: {0}")]
    BadMeta(String),
}

/// Sidecar record, one JSON object per song line.
#[derive(Serialize, Deserialize, PartialEq, Eq, Debug)]
struct SpanRecord {
    spans: Vec<(usize, usize)>,
    sums: Vec<usize>,
}

/// Corpus-level metadata written next to the token file.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CorpusMeta {
    pub songs: usize,
    pub total_tokens: usize,
    pub vocab_sha256: String,
    pub grid: String,
}

impl CorpusMeta {
    pub fn for_songs(songs: &[TokenSeq]) -> Self {
        Self {
            songs: songs.len(),
            total_tokens: songs.iter().map(TokenSeq::len).sum(),
            vocab_sha256: vocab::vocab_sha256(),
            grid: "1/4".into(),
        }
    }
}

pub fn sidecar_path(tokens_path: &Path) -> PathBuf {
    let mut os = tokens_path.as_os_str().to_owned();
    os.push(".spans.jsonl");
    PathBuf::from(os)
}

pub fn meta_path(tokens_path: &Path) -> PathBuf {
    let mut os = tokens_path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Write the token file, its span sidecar, metadata, and vocab.json into the
/// token file's directory.
pub fn write_corpus(tokens_path: &Path, songs: &[TokenSeq]) -> Result<(), CorpusIoError> {
    let mut w = BufWriter::new(File::create(tokens_path)?);
    for song in songs {
        let line: Vec<String> = song.ids().iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(sidecar_path(tokens_path))?);
    for song in songs {
        let rec = SpanRecord { spans: song.bar_spans.clone(), sums: song.sum_positions.clone() };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("span record serializes"))?;
    }
    w.flush()?;

    let meta = CorpusMeta::for_songs(songs);
    std::fs::write(
        meta_path(tokens_path),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;

    if let Some(dir) = tokens_path.parent() {
        std::fs::write(dir.join("vocab.json"), vocab::vocab_json())?;
    }
    Ok(())
}

/// Read a token corpus. Spans are re-derived from the ids; when the sidecar
/// exists it is cross-checked against the derived segmentation.
pub fn read_corpus(tokens_path: &Path) -> Result<Vec<TokenSeq>, CorpusIoError> {
    let reader = BufReader::new(File::open(tokens_path)?);
    let mut songs = Vec::new();
    for (song, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| CorpusIoError::BadInt { song, text: tok.into() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let seq = TokenSeq::from_ids(&ids).map_err(|source| CorpusIoError::Token { song, source })?;
        songs.push(seq);
    }

    let sidecar = sidecar_path(tokens_path);
    if sidecar.exists() {
        let reader = BufReader::new(File::open(&sidecar)?);
        let mut checked = 0usize;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SpanRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusIoError::BadSidecar { line: i, what: e.to_string() })?;
            let song = songs.get(checked).ok_or(CorpusIoError::BadSidecar {
                line: i,
                what: "more sidecar records than songs".into(),
            })?;
            if rec.spans != song.bar_spans || rec.sums != song.sum_positions {
                return Err(CorpusIoError::SidecarMismatch {
                    song: checked,
                    what: "bar spans differ from the token stream".into(),
                });
            }
            checked += 1;
        }
        if checked != songs.len() {
            return Err(CorpusIoError::BadSidecar {
                line: checked,
                what: format!("{checked} sidecar records for {} songs", songs.len()),
            });
        }
    }
    Ok(songs)
}

pub fn read_meta(tokens_path: &Path) -> Result<CorpusMeta, CorpusIoError> {
    let text = std::fs::read_to_string(meta_path(tokens_path))?;
    serde_json::from_str(&text).map_err(|e| CorpusIoError::BadMeta(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{beats, Bar, Note, Role, TrackSet};
    use crate::tokenize::{encode, DEFAULT_VELOCITY};

    fn sample_songs() -> Vec<TokenSeq> {
        let mut songs = Vec::new();
        for k in 0..3u8 {
            let mut ts = TrackSet::default();
            ts.role_mut(Role::Melody).push(Note {
                onset: beats(i64::from(k), 1),
                pitch: 60 + k,
                duration: beats(1, 1),
                velocity: DEFAULT_VELOCITY,
            });
            ts.role_mut(Role::Bass).push(Note {
                onset: beats(0, 1),
                pitch: 40,
                duration: beats(2, 1),
                velocity: DEFAULT_VELOCITY,
            });
            ts.bars = vec![Bar { start: beats(0, 1), length: beats(4, 1) }];
            songs.push(encode(&ts).unwrap());
        }
        songs
    }

    #[test]
    fn corpus_round_trips_with_sidecar_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tokens");
        let songs = sample_songs();
        write_corpus(&path, &songs).unwrap();

        let back = read_corpus(&path).unwrap();
        assert_eq!(back, songs);

        let meta = read_meta(&path).unwrap();
        assert_eq!(meta.songs, 3);
        assert_eq!(meta.vocab_sha256, vocab::vocab_sha256());
        assert!(dir.path().join("vocab.json").exists());
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn sidecar_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tokens");
        let songs = sample_songs();
        write_corpus(&path, &songs).unwrap();
        // tamper: shift one span
        let sidecar = sidecar_path(&path);
        let text = std::fs::read_to_string(&sidecar).unwrap();
        let tampered = text.replacen("[1,", "[0,", 1);
        assert_ne!(text, tampered);
        std::fs::write(&sidecar, tampered).unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusIoError::SidecarMismatch { song: 0, .. })
        ));
    }

    #[test]
    fn bad_token_line_reports_song_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tokens");
        std::fs::write(&path, "0 2 3 1\n0 2 zebra 1\n").unwrap();
        match read_corpus(&path) {
            Err(CorpusIoError::BadInt { song: 1, text }) => assert_eq!(text, "zebra"),
            other => panic!("expected BadInt, got {other:?}"),
        }
    }
}
