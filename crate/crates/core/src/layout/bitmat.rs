//! Row-major boolean matrix backed by u64 words, with span filling and
//! run iteration. Unused high bits of each row's last word stay zero, so
//! equality and popcounts work on the raw words.

/// Query×source permission matrix.
#[derive(Clone, PartialEq, Eq)]
pub struct BoolLayout {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BoolLayout {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self { rows, cols, words_per_row, bits: vec![0; rows * words_per_row] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < self.rows && col < self.cols);
        let word = self.bits[row * self.words_per_row + col / 64];
        word >> (col % 64) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize) {
        debug_assert!(row < self.rows && col < self.cols);
        self.bits[row * self.words_per_row + col / 64] |= 1u64 << (col % 64);
    }

    /// Set the half-open span [start, end) of a row.
    pub fn fill_span(&mut self, row: usize, start: usize, end: usize) {
        debug_assert!(row < self.rows && start <= end && end <= self.cols);
        if start == end {
            return;
        }
        let base = row * self.words_per_row;
        let (w0, b0) = (start / 64, start % 64);
        let (w1, b1) = ((end - 1) / 64, (end - 1) % 64);
        if w0 == w1 {
            let mask = (u64::MAX >> (63 - b1)) & (u64::MAX << b0);
            self.bits[base + w0] |= mask;
        } else {
            self.bits[base + w0] |= u64::MAX << b0;
            for w in w0 + 1..w1 {
                self.bits[base + w] = u64::MAX;
            }
            self.bits[base + w1] |= u64::MAX >> (63 - b1);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn row_ones(&self, row: usize) -> usize {
        let base = row * self.words_per_row;
        self.bits[base..base + self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Maximal runs of allowed columns in a row, as half-open spans.
    pub fn row_runs(&self, row: usize) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let base = row * self.words_per_row;
        let mut open: Option<usize> = None;
        for wi in 0..self.words_per_row {
            let mut word = self.bits[base + wi];
            if word == u64::MAX {
                if open.is_none() {
                    open = Some(wi * 64);
                }
                continue;
            }
            let mut offset = 0usize;
            while offset < 64 {
                if word & 1 == 1 {
                    if open.is_none() {
                        open = Some(wi * 64 + offset);
                    }
                } else if let Some(start) = open.take() {
                    runs.push((start, wi * 64 + offset));
                }
                word >>= 1;
                offset += 1;
            }
        }
        if let Some(start) = open {
            runs.push((start, self.cols));
        }
        runs
    }

    /// New layout with columns relocated: cell (r, c) moves to
    /// (r, new_col[c]). `new_col` must be a permutation of 0..cols.
    pub fn permuted_cols(&self, new_col: &[usize]) -> BoolLayout {
        assert_eq!(new_col.len(), self.cols);
        let mut out = BoolLayout::new(self.rows, self.cols);
        for row in 0..self.rows {
            for (start, end) in self.row_runs(row) {
                for col in start..end {
                    out.set(row, new_col[col]);
                }
            }
        }
        out
    }

    /// New layout with rows relocated: row r moves to new_row[r].
    pub fn permuted_rows(&self, new_row: &[usize]) -> BoolLayout {
        assert_eq!(new_row.len(), self.rows);
        let mut out = BoolLayout::new(self.rows, self.cols);
        for row in 0..self.rows {
            let base = row * self.words_per_row;
            let dst = new_row[row] * self.words_per_row;
            out.bits[dst..dst + self.words_per_row]
                .copy_from_slice(&self.bits[base..base + self.words_per_row]);
        }
        out
    }
}

impl std::fmt::Debug for BoolLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BoolLayout {}x{}", self.rows, self.cols)?;
        for row in 0..self.rows.min(48) {
            let line: String = (0..self.cols.min(120))
                .map(|c| if self.get(row, c) { '#' } else { '.' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_and_count() {
        let mut m = BoolLayout::new(3, 130);
        assert!(!m.get(0, 0));
        m.set(0, 0);
        m.set(2, 129);
        m.set(1, 64);
        assert!(m.get(0, 0) && m.get(2, 129) && m.get(1, 64));
        assert_eq!(m.count_ones(), 3);
        assert_eq!(m.row_ones(1), 1);
    }

    #[test]
    fn fill_span_matches_per_bit_reference() {
        for (start, end) in [(0, 0), (0, 1), (3, 64), (63, 65), (5, 200), (64, 128), (127, 131)] {
            let mut fast = BoolLayout::new(1, 210);
            fast.fill_span(0, start, end);
            let mut slow = BoolLayout::new(1, 210);
            for c in start..end {
                slow.set(0, c);
            }
            assert_eq!(fast, slow, "span {start}..{end}");
            assert_eq!(fast.count_ones(), end - start);
        }
    }

    #[test]
    fn row_runs_reports_maximal_spans() {
        let mut m = BoolLayout::new(1, 200);
        m.fill_span(0, 2, 5);
        m.fill_span(0, 5, 9); // merges with previous
        m.set(0, 63);
        m.fill_span(0, 64, 130);
        m.set(0, 199);
        assert_eq!(m.row_runs(0), vec![(2, 9), (63, 130), (199, 200)]);
        let empty = BoolLayout::new(1, 10);
        assert!(empty.row_runs(0).is_empty());
        let mut full = BoolLayout::new(1, 128);
        full.fill_span(0, 0, 128);
        assert_eq!(full.row_runs(0), vec![(0, 128)]);
    }

    #[test]
    fn permutations_relocate_cells() {
        let mut m = BoolLayout::new(2, 4);
        m.set(0, 1);
        m.set(1, 3);
        // reverse the columns
        let perm: Vec<usize> = (0..4).rev().collect();
        let p = m.permuted_cols(&perm);
        assert!(p.get(0, 2) && p.get(1, 0));
        assert_eq!(p.count_ones(), 2);
        // swap the rows
        let r = m.permuted_rows(&[1, 0]);
        assert!(r.get(1, 1) && r.get(0, 3));
    }
}
