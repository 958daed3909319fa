//! Layout export formats: portable bitmap (PBM P4) for the boolean layouts
//! and a plain-text coordinate list for blocksparse layouts.

use std::io::{self, BufRead, Read, Write};

use super::bitmat::BoolLayout;
use super::block::BlockLayout;

/// Binary PBM: "P4", dimensions, then row-major bits MSB-first, each row
/// padded to a whole byte. A set bit (black pixel) marks an allowed cell.
pub fn write_pbm(w: &mut impl Write, layout: &BoolLayout) -> io::Result<()> {
    write!(w, "P4\n{} {}\n", layout.cols(), layout.rows())?;
    let stride = layout.cols().div_ceil(8);
    let mut row_bytes = vec![0u8; stride];
    for row in 0..layout.rows() {
        row_bytes.iter_mut().for_each(|b| *b = 0);
        for (start, end) in layout.row_runs(row) {
            for col in start..end {
                row_bytes[col / 8] |= 0x80 >> (col % 8);
            }
        }
        w.write_all(&row_bytes)?;
    }
    Ok(())
}

pub fn read_pbm(r: &mut impl Read) -> io::Result<BoolLayout> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |what: &str| io::Error::new(io::ErrorKind::InvalidData, what.to_string());
    // header: magic, whitespace-separated width and height, single whitespace
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P4" {
        return Err(bad("not a P4 bitmap"));
    }
    pos += 2;
    let read_int = |pos: &mut usize| -> io::Result<usize> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad dimension"))
    };
    let cols = read_int(&mut pos)?;
    let rows = read_int(&mut pos)?;
    pos += 1; // single whitespace after the header
    let stride = cols.div_ceil(8);
    if bytes.len() < pos + rows * stride {
        return Err(bad("truncated bitmap data"));
    }
    let mut layout = BoolLayout::new(rows, cols);
    for row in 0..rows {
        let base = pos + row * stride;
        for col in 0..cols {
            if bytes[base + col / 8] & (0x80 >> (col % 8)) != 0 {
                layout.set(row, col);
            }
        }
    }
    Ok(layout)
}

/// Text format: `block_size`, dimensions, then one `row col` pair per line.
pub fn write_block_list(w: &mut impl Write, blocks: &BlockLayout) -> io::Result<()> {
    writeln!(w, "block_size {}", blocks.block_size)?;
    writeln!(w, "rows {} cols {}", blocks.rows, blocks.cols)?;
    for &(br, bc) in &blocks.kept_blocks {
        writeln!(w, "{br} {bc}")?;
    }
    Ok(())
}

pub fn read_block_list(r: impl BufRead) -> io::Result<BlockLayout> {
    let bad = |what: String| io::Error::new(io::ErrorKind::InvalidData, what);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty block list".into()))??;
    let block_size = header
        .strip_prefix("block_size ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let dims = lines.next().ok_or_else(|| bad("missing dimensions".into()))??;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    let (rows, cols) = match parts.as_slice() {
        ["rows", r, "cols", c] => (
            r.parse().map_err(|_| bad(format!("bad rows in {dims:?}")))?,
            c.parse().map_err(|_| bad(format!("bad cols in {dims:?}")))?,
        ),
        _ => return Err(bad(format!("bad dimension line {dims:?}"))),
    };
    let mut kept_blocks = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let br = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad block line {line:?}")))?;
        let bc = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad block line {line:?}")))?;
        kept_blocks.push((br, bc));
    }
    Ok(BlockLayout { block_size, rows, cols, kept_blocks })
}
