//! Block-sparsification: split a layout into fixed-size square blocks and
//! keep exactly the blocks containing at least one allowed cell.

use super::bitmat::BoolLayout;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_size: usize,
    /// Dimensions of the covered BoolLayout.
    pub rows: usize,
    pub cols: usize,
    /// Kept (block_row, block_col) pairs, sorted row-major.
    pub kept_blocks: Vec<(usize, usize)>,
}

impl BlockLayout {
    pub fn block_rows(&self) -> usize {
        self.rows.div_ceil(self.block_size)
    }

    pub fn block_cols(&self) -> usize {
        self.cols.div_ceil(self.block_size)
    }

    pub fn contains(&self, block_row: usize, block_col: usize) -> bool {
        self.kept_blocks.binary_search(&(block_row, block_col)).is_ok()
    }

    /// Fraction of the dense matrix the kept blocks cover:
    /// |kept| · block_size² / (rows · cols).
    pub fn density(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        (self.kept_blocks.len() * self.block_size * self.block_size) as f64
            / (self.rows * self.cols) as f64
    }
}

pub fn blocksparsify(layout: &BoolLayout, block_size: usize) -> BlockLayout {
    assert!(block_size >= 1, "block size must be >= 1");
    let block_cols = layout.cols().div_ceil(block_size);
    let mut kept_blocks = Vec::new();
    let mut row_touched = vec![false; block_cols];
    let mut block_row = 0usize;
    let mut row = 0usize;
    while row < layout.rows() {
        let row_end = (row + block_size).min(layout.rows());
        row_touched.iter_mut().for_each(|t| *t = false);
        for r in row..row_end {
            for (start, end) in layout.row_runs(r) {
                for bc in start / block_size..=(end - 1) / block_size {
                    row_touched[bc] = true;
                }
            }
        }
        for (bc, &touched) in row_touched.iter().enumerate() {
            if touched {
                kept_blocks.push((block_row, bc));
            }
        }
        row = row_end;
        block_row += 1;
    }
    BlockLayout {
        block_size,
        rows: layout.rows(),
        cols: layout.cols(),
        kept_blocks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Per-cell reference: a block is kept iff some cell in it is allowed.
    fn oracle(layout: &BoolLayout, bs: usize) -> Vec<(usize, usize)> {
        let mut kept = Vec::new();
        for br in 0..layout.rows().div_ceil(bs) {
            for bc in 0..layout.cols().div_ceil(bs) {
                let mut any = false;
                for r in br * bs..((br + 1) * bs).min(layout.rows()) {
                    for c in bc * bs..((bc + 1) * bs).min(layout.cols()) {
                        any |= layout.get(r, c);
                    }
                }
                if any {
                    kept.push((br, bc));
                }
            }
        }
        kept
    }

    #[test]
    fn all_false_layout_keeps_nothing() {
        let m = BoolLayout::new(8, 8);
        let b = blocksparsify(&m, 2);
        assert!(b.kept_blocks.is_empty());
        assert_eq!(b.density(), 0.0);
    }

    #[test]
    fn block_size_one_degenerates_to_cells() {
        let mut m = BoolLayout::new(4, 6);
        m.set(0, 0);
        m.set(2, 5);
        m.set(3, 1);
        let b = blocksparsify(&m, 1);
        assert_eq!(b.kept_blocks, vec![(0, 0), (2, 5), (3, 1)]);
        assert_eq!(b.kept_blocks.len(), m.count_ones());
    }

    #[test]
    fn matches_per_cell_oracle_on_random_layouts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..90);
            let mut m = BoolLayout::new(rows, cols);
            for _ in 0..rng.gen_range(0..rows * cols / 2 + 1) {
                m.set(rng.gen_range(0..rows), rng.gen_range(0..cols));
            }
            for bs in [1, 2, 3, 32] {
                let b = blocksparsify(&m, bs);
                assert_eq!(b.kept_blocks, oracle(&m, bs), "{rows}x{cols} bs={bs}");
                assert!(b.kept_blocks.windows(2).all(|w| w[0] < w[1]), "sorted row-major");
            }
        }
    }

    #[test]
    fn density_formula() {
        let mut m = BoolLayout::new(4, 4);
        m.set(0, 0); // one kept 2x2 block out of 4
        let b = blocksparsify(&m, 2);
        assert_eq!(b.kept_blocks, vec![(0, 0)]);
        assert!((b.density() - 0.25).abs() < 1e-15);
    }
}
