//! Attention-layout construction for the two FC-Attention steps.
//!
//! Sources for both steps live on one axis holding every summary and music
//! token. The canonical arrangement puts all summary tokens before the music
//! tokens (the compute-friendly convention); the interleaved arrangement
//! (summaries after their bars) is an index permutation of it.
//!
//! With 0-based bar indices and selection offsets `o`, bar i's structure-
//! related set is R(i) = {i−o : o ∈ selection, i−o ≥ 0}; the remaining
//! previous bars R̄(i) = {0..i−1} \ R(i) contribute their summary tokens.

pub mod bitmat;
pub mod block;
pub mod export;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::similarity::BarSelection;
use crate::tokenize::TokenSeq;

pub use bitmat::BoolLayout;
pub use block::{blocksparsify, BlockLayout};

pub const DEFAULT_BLOCK_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arrangement {
    /// All summary tokens before all music tokens (canonical for compute).
    SummaryFirst,
    /// Each bar's summary token immediately after its music tokens.
    Interleaved,
}

/// Everything needed to build a sample's layouts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSpec {
    bar_lens: Vec<usize>,
    music_prefix: Vec<usize>,
    selection: BarSelection,
    pub arrangement: Arrangement,
    /// Also allow summaries of structure-related bars as aggregation
    /// sources (the literal source set excludes them; the current bar's
    /// summary is never attended).
    pub include_selected_summaries: bool,
    /// When false, aggregation drops all summary sources (the
    /// no-coarse-attention ablation); summarization is unaffected.
    pub coarse_enabled: bool,
}

impl LayoutSpec {
    pub fn new(bar_lens: Vec<usize>, selection: BarSelection) -> Self {
        let mut music_prefix = Vec::with_capacity(bar_lens.len() + 1);
        let mut acc = 0usize;
        music_prefix.push(0);
        for &len in &bar_lens {
            acc += len;
            music_prefix.push(acc);
        }
        Self {
            bar_lens,
            music_prefix,
            selection,
            arrangement: Arrangement::SummaryFirst,
            include_selected_summaries: false,
            coarse_enabled: true,
        }
    }

    /// Bar lengths from a token sequence (BOS/EOS folded into the first and
    /// last bars).
    pub fn from_token_seq(seq: &TokenSeq, selection: BarSelection) -> Self {
        Self::new(seq.music_bar_lengths(), selection)
    }

    pub fn with_arrangement(mut self, arrangement: Arrangement) -> Self {
        self.arrangement = arrangement;
        self
    }

    pub fn with_selected_summaries(mut self, include: bool) -> Self {
        self.include_selected_summaries = include;
        self
    }

    pub fn with_coarse(mut self, enabled: bool) -> Self {
        self.coarse_enabled = enabled;
        self
    }

    pub fn bar_count(&self) -> usize {
        self.bar_lens.len()
    }

    pub fn bar_lens(&self) -> &[usize] {
        &self.bar_lens
    }

    pub fn selection(&self) -> &BarSelection {
        &self.selection
    }

    pub fn music_len(&self) -> usize {
        *self.music_prefix.last().unwrap()
    }

    /// Source-axis length: every summary plus every music token.
    pub fn total_len(&self) -> usize {
        self.bar_count() + self.music_len()
    }

    /// Music-token index range of bar i (in music-token space).
    pub fn music_range(&self, bar: usize) -> (usize, usize) {
        (self.music_prefix[bar], self.music_prefix[bar + 1])
    }

    pub fn bar_of_music(&self, music_idx: usize) -> usize {
        debug_assert!(music_idx < self.music_len());
        match self.music_prefix.binary_search(&music_idx) {
            Ok(mut i) => {
                // land on the bar that starts here, skipping empty bars
                while self.bar_lens[i] == 0 {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        }
    }

    /// Source-axis position of bar i's summary token.
    pub fn summary_source_index(&self, bar: usize) -> usize {
        match self.arrangement {
            Arrangement::SummaryFirst => bar,
            Arrangement::Interleaved => self.music_prefix[bar + 1] + bar,
        }
    }

    /// Source-axis position of a music token (by music-token index).
    pub fn music_source_index(&self, music_idx: usize) -> usize {
        match self.arrangement {
            Arrangement::SummaryFirst => self.bar_count() + music_idx,
            Arrangement::Interleaved => music_idx + self.bar_of_music(music_idx),
        }
    }

    /// Source-axis span of bar i's music tokens (contiguous in both
    /// arrangements).
    pub fn music_source_span(&self, bar: usize) -> (usize, usize) {
        let (lo, hi) = self.music_range(bar);
        match self.arrangement {
            Arrangement::SummaryFirst => (self.bar_count() + lo, self.bar_count() + hi),
            Arrangement::Interleaved => (lo + bar, hi + bar),
        }
    }

    /// R(i): structure-related bars of bar i, ascending.
    pub fn fine_bars(&self, bar: usize) -> Vec<usize> {
        let mut bars: Vec<usize> = self
            .selection
            .offsets()
            .iter()
            .filter(|&&o| o <= bar)
            .map(|&o| bar - o)
            .collect();
        bars.sort_unstable();
        bars
    }

    /// Bars whose summaries bar i's queries attend (R̄(i), or all previous
    /// bars when `include_selected_summaries`; empty when coarse attention
    /// is disabled).
    pub fn coarse_bars(&self, bar: usize) -> Vec<usize> {
        if !self.coarse_enabled {
            return Vec::new();
        }
        (0..bar)
            .filter(|&r| {
                self.include_selected_summaries || !self.selection.contains(bar - r)
            })
            .collect()
    }

    /// Column permutation sending this spec's canonical (summary-first)
    /// source axis to the interleaved one.
    pub fn interleave_permutation(&self) -> Vec<usize> {
        let b = self.bar_count();
        let inter = self.clone().with_arrangement(Arrangement::Interleaved);
        let mut perm = vec![0usize; self.total_len()];
        for i in 0..b {
            perm[i] = inter.summary_source_index(i);
        }
        for j in 0..self.music_len() {
            perm[b + j] = inter.music_source_index(j);
        }
        perm
    }
}

/// Summarization-step layout (summary-to-all): row i is the query s_i, which
/// attends exactly bar i's music tokens plus itself. An empty bar leaves s_i
/// attending only itself.
pub fn build_summary_layout(spec: &LayoutSpec) -> BoolLayout {
    let mut m = BoolLayout::new(spec.bar_count(), spec.total_len());
    for i in 0..spec.bar_count() {
        let (lo, hi) = spec.music_source_span(i);
        m.fill_span(i, lo, hi);
        m.set(i, spec.summary_source_index(i));
    }
    m
}

/// Aggregation-step layout (music-to-all): row j is the query for music
/// token j, attending all music tokens of its structure-related bars, the
/// causal prefix of its own bar (self included), and the summary tokens of
/// the remaining previous bars.
pub fn build_aggregation_layout(spec: &LayoutSpec) -> BoolLayout {
    let mut m = BoolLayout::new(spec.music_len(), spec.total_len());
    for i in 0..spec.bar_count() {
        let fine_spans: Vec<(usize, usize)> = spec
            .fine_bars(i)
            .into_iter()
            .map(|r| spec.music_source_span(r))
            .collect();
        let coarse_cols: Vec<usize> = spec
            .coarse_bars(i)
            .into_iter()
            .map(|r| spec.summary_source_index(r))
            .collect();
        let (lo, hi) = spec.music_range(i);
        for j in lo..hi {
            for &(s, e) in &fine_spans {
                m.fill_span(j, s, e);
            }
            for &c in &coarse_cols {
                m.set(j, c);
            }
            let causal_lo = spec.music_source_index(lo);
            let causal_hi = spec.music_source_index(j) + 1;
            m.fill_span(j, causal_lo, causal_hi);
        }
    }
    m
}

/// Square view with query rows placed at their source-axis positions —
/// the all-tokens attention matrix of the chosen arrangement.
pub fn combined_layout(spec: &LayoutSpec) -> BoolLayout {
    let summary = build_summary_layout(spec);
    let aggregation = build_aggregation_layout(spec);
    let total = spec.total_len();
    let mut m = BoolLayout::new(total, total);
    let mut copy_rows = |src: &BoolLayout, row_pos: &dyn Fn(usize) -> usize| {
        for r in 0..src.rows() {
            for (s, e) in src.row_runs(r) {
                m.fill_span(row_pos(r), s, e);
            }
        }
    };
    copy_rows(&summary, &|i| spec.summary_source_index(i));
    copy_rows(&aggregation, &|j| spec.music_source_index(j));
    m
}

/// Row-compressed view of a layout: per query row, the sorted allowed
/// source columns. This is what the attention kernels iterate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    idx: Vec<u32>,
}

impl Csr {
    pub fn from_layout(m: &BoolLayout) -> Self {
        let mut offsets = Vec::with_capacity(m.rows() + 1);
        let mut idx = Vec::new();
        offsets.push(0);
        for r in 0..m.rows() {
            for (s, e) in m.row_runs(r) {
                idx.extend((s..e).map(|c| c as u32));
            }
            offsets.push(idx.len());
        }
        Self { rows: m.rows(), cols: m.cols(), offsets, idx }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.idx[self.offsets[r]..self.offsets[r + 1]]
    }

    /// Start of row r's entries in flattened (nnz) order.
    pub fn offset(&self, r: usize) -> usize {
        self.offsets[r]
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutStats {
    pub allowed_pairs: usize,
    pub per_query_max: usize,
}

pub fn layout_stats(layout: &BoolLayout) -> LayoutStats {
    let mut allowed_pairs = 0usize;
    let mut per_query_max = 0usize;
    for r in 0..layout.rows() {
        let ones = layout.row_ones(r);
        allowed_pairs += ones;
        per_query_max = per_query_max.max(ones);
    }
    LayoutStats { allowed_pairs, per_query_max }
}

/// Both layouts of one sample, built once and shared across layers/heads.
pub struct Layouts {
    pub summary: BoolLayout,
    pub aggregation: BoolLayout,
    pub summary_csr: Csr,
    pub aggregation_csr: Csr,
}

impl Layouts {
    pub fn build(spec: &LayoutSpec) -> Self {
        let summary = build_summary_layout(spec);
        let aggregation = build_aggregation_layout(spec);
        let summary_csr = Csr::from_layout(&summary);
        let aggregation_csr = Csr::from_layout(&aggregation);
        Self { summary, aggregation, summary_csr, aggregation_csr }
    }
}

type CacheKey = (Vec<usize>, Vec<usize>, bool, bool, Arrangement);

/// Concurrent-read, single-writer cache keyed by (bar-length profile,
/// selection, flags).
#[derive(Default)]
pub struct LayoutCache {
    inner: RwLock<HashMap<CacheKey, Arc<Layouts>>>,
}

impl LayoutCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, spec: &LayoutSpec) -> Arc<Layouts> {
        let key: CacheKey = (
            spec.bar_lens.clone(),
            spec.selection.offsets().to_vec(),
            spec.include_selected_summaries,
            spec.coarse_enabled,
            spec.arrangement,
        );
        if let Some(hit) = self.inner.read().expect("cache lock").get(&key) {
            return Arc::clone(hit);
        }
        let built = Arc::new(Layouts::build(spec));
        let mut w = self.inner.write().expect("cache lock");
        Arc::clone(w.entry(key).or_insert(built))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
