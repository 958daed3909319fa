//! Bar-pair similarity, corpus similarity distributions L_t, Similarity
//! Error, and structure-related bar selection.
//!
//! Two notes are equal when their (pitch, duration, onset-position-within-
//! bar) triples match; bar similarity is the Jaccard index of the two bars'
//! note sets. A pair of empty bars has no defined similarity and is excluded
//! from means by default.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{Beats, Role, TrackSet};
use crate::tokenize::{grid, POSITIONS_PER_BAR};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("horizon must be >= 1")]
    BadHorizon,
    #[error("horizon mismatch: {a} vs {b}")]
    HorizonMismatch { a: usize, b: usize },
    #[error("L_{t} undefined (no contributing pairs)")]
    UndefinedInterval { t: usize },
    #[error("selection count must be >= 1")]
    BadK,
    #[error("selection count {k} exceeds max offset {max_offset}")]
    KExceedsMaxOffset { k: usize, max_offset: usize },
    #[error("max offset {max_offset} exceeds horizon {horizon}")]
    MaxOffsetExceedsHorizon { max_offset: usize, horizon: usize },
    #[error("invalid selection: {0}")]
    BadSelection(String),
    #[error("distribution csv: {0}")]
    Csv(String),
}

/// The note set of one bar on one track: (pitch, duration_units,
/// pos_in_bar). Set semantics — duplicate notes collapse.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BarNoteSet {
    pub notes: BTreeSet<(u8, u32, u8)>,
}

impl BarNoteSet {
    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

/// Extract per-bar note sets for one role. Positions and durations are
/// measured in 1/4-beat grid units.
pub fn bar_note_sets(ts: &TrackSet, scope: Role) -> Vec<BarNoteSet> {
    let grid = grid();
    let to_units = |b: Beats| (b / grid).round().to_integer().max(0) as u32;
    let mut sets = vec![BarNoteSet::default(); ts.bars.len()];
    for n in ts.role(scope) {
        let Some(bi) = ts.bar_of(n.onset) else { continue };
        let pos = to_units(n.onset - ts.bars[bi].start).min(u32::from(POSITIONS_PER_BAR) - 1) as u8;
        sets[bi].notes.insert((n.pitch, to_units(n.duration), pos));
    }
    sets
}

/// Jaccard similarity |a∩b| / |a∪b|; `None` when both bars are empty.
pub fn bar_similarity(a: &BarNoteSet, b: &BarNoteSet) -> Option<f64> {
    let union = a.notes.union(&b.notes).count();
    if union == 0 {
        return None;
    }
    let inter = a.notes.intersection(&b.notes).count();
    Some(inter as f64 / union as f64)
}

/// How a both-empty bar pair contributes to L_t.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BothEmpty {
    /// Excluded from the mean (default).
    Exclude,
    /// Counted as similarity 1.0.
    CountAsOne,
}

/// Whether pairs pool across the corpus or songs weigh equally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Every bar pair weighs 1 (default).
    PooledPairs,
    /// Mean of per-song means; counts then record contributing songs.
    PerSongMean,
}

#[derive(Clone, Copy, Debug)]
pub struct DistOptions {
    pub horizon: usize,
    pub scope: Role,
    pub both_empty: BothEmpty,
    pub weighting: Weighting,
}

impl Default for DistOptions {
    fn default() -> Self {
        Self {
            horizon: 40,
            scope: Role::Melody,
            both_empty: BothEmpty::Exclude,
            weighting: Weighting::PooledPairs,
        }
    }
}

/// L_t values for t = 1..=horizon; `l(t) == None` where no pair contributed.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    horizon: usize,
    l: Vec<Option<f64>>,
    counts: Vec<usize>,
    pub track_scope: Role,
}

impl SimilarityDistribution {
    pub fn new(horizon: usize, track_scope: Role) -> Result<Self, SimilarityError> {
        if horizon < 1 {
            return Err(SimilarityError::BadHorizon);
        }
        Ok(Self {
            horizon,
            l: vec![None; horizon],
            counts: vec![0; horizon],
            track_scope,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn l(&self, t: usize) -> Option<f64> {
        assert!((1..=self.horizon).contains(&t), "t out of range");
        self.l[t - 1]
    }

    pub fn count(&self, t: usize) -> usize {
        assert!((1..=self.horizon).contains(&t), "t out of range");
        self.counts[t - 1]
    }

    pub fn set(&mut self, t: usize, l: Option<f64>, count: usize) {
        assert!((1..=self.horizon).contains(&t), "t out of range");
        self.l[t - 1] = l;
        self.counts[t - 1] = count;
    }

    /// Intervals with at least one contributing pair.
    pub fn defined_intervals(&self) -> Vec<usize> {
        (1..=self.horizon).filter(|&t| self.l(t).is_some()).collect()
    }
}

/// L_t = mean of bar-pair similarities at interval t across the corpus.
pub fn similarity_distribution(
    corpus: &[TrackSet],
    opts: &DistOptions,
) -> Result<SimilarityDistribution, SimilarityError> {
    let mut dist = SimilarityDistribution::new(opts.horizon, opts.scope)?;
    let per_song: Vec<Vec<BarNoteSet>> = corpus
        .iter()
        .map(|ts| bar_note_sets(ts, opts.scope))
        .collect();

    for t in 1..=opts.horizon {
        match opts.weighting {
            Weighting::PooledPairs => {
                let mut sum = 0.0;
                let mut count = 0usize;
                for bars in &per_song {
                    for i in 0..bars.len().saturating_sub(t) {
                        if let Some(v) = pair_value(&bars[i], &bars[i + t], opts.both_empty) {
                            sum += v;
                            count += 1;
                        }
                    }
                }
                dist.set(t, (count > 0).then(|| sum / count as f64), count);
            }
            Weighting::PerSongMean => {
                let mut sum = 0.0;
                let mut songs = 0usize;
                for bars in &per_song {
                    let mut s = 0.0;
                    let mut c = 0usize;
                    for i in 0..bars.len().saturating_sub(t) {
                        if let Some(v) = pair_value(&bars[i], &bars[i + t], opts.both_empty) {
                            s += v;
                            c += 1;
                        }
                    }
                    if c > 0 {
                        sum += s / c as f64;
                        songs += 1;
                    }
                }
                dist.set(t, (songs > 0).then(|| sum / songs as f64), songs);
            }
        }
    }
    Ok(dist)
}

fn pair_value(a: &BarNoteSet, b: &BarNoteSet, both_empty: BothEmpty) -> Option<f64> {
    match bar_similarity(a, b) {
        Some(v) => Some(v),
        None => match both_empty {
            BothEmpty::Exclude => None,
            BothEmpty::CountAsOne => Some(1.0),
        },
    }
}

/// SE = (1/T) Σ_{t=1..T} |L̂_t − L_t|. Both distributions must share the
/// horizon and be defined at every interval.
pub fn similarity_error(
    gen: &SimilarityDistribution,
    reference: &SimilarityDistribution,
) -> Result<f64, SimilarityError> {
    if gen.horizon != reference.horizon {
        return Err(SimilarityError::HorizonMismatch {
            a: gen.horizon,
            b: reference.horizon,
        });
    }
    let mut sum = 0.0;
    for t in 1..=gen.horizon {
        let a = gen.l(t).ok_or(SimilarityError::UndefinedInterval { t })?;
        let b = reference.l(t).ok_or(SimilarityError::UndefinedInterval { t })?;
        sum += (a - b).abs();
    }
    Ok(sum / gen.horizon as f64)
}

/// SE restricted to the intervals where both distributions are defined.
/// Returns (value, #common intervals); used by the CLI when generated pieces
/// are too short to define every t.
pub fn similarity_error_common(
    gen: &SimilarityDistribution,
    reference: &SimilarityDistribution,
) -> Result<(f64, usize), SimilarityError> {
    if gen.horizon != reference.horizon {
        return Err(SimilarityError::HorizonMismatch {
            a: gen.horizon,
            b: reference.horizon,
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 1..=gen.horizon {
        if let (Some(a), Some(b)) = (gen.l(t), reference.l(t)) {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(SimilarityError::UndefinedInterval { t: 1 });
    }
    Ok((sum / n as f64, n))
}

/// Ordered set of positive bar offsets the fine-grained attention reaches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BarSelection {
    offsets: Vec<usize>,
}

impl BarSelection {
    pub fn new(offsets: Vec<usize>) -> Result<Self, SimilarityError> {
        if offsets.is_empty() {
            return Err(SimilarityError::BadSelection("empty selection".into()));
        }
        if offsets[0] == 0 {
            return Err(SimilarityError::BadSelection("offset 0 not allowed".into()));
        }
        if !offsets.windows(2).all(|w| w[0] < w[1]) {
            return Err(SimilarityError::BadSelection(
                "offsets must be strictly increasing".into(),
            ));
        }
        Ok(Self { offsets })
    }

    /// The default set: previous 1st, 2nd, 4th, 8th, 12th, 16th, 24th, and
    /// 32nd bars.
    pub fn reference_default() -> Self {
        Self { offsets: vec![1, 2, 4, 8, 12, 16, 24, 32] }
    }

    /// The "most recent bars" ablation: offsets {1..=k}.
    pub fn recent(k: usize) -> Self {
        assert!(k >= 1);
        Self { offsets: (1..=k).collect() }
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.offsets.binary_search(&offset).is_ok()
    }

    pub fn max_offset(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Parse "1,2,4,8".
    pub fn parse(s: &str) -> Result<Self, SimilarityError> {
        let offsets = s
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| SimilarityError::BadSelection(format!("bad offset {tok:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(offsets)
    }
}

impl TryFrom<Vec<usize>> for BarSelection {
    type Error = SimilarityError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BarSelection> for Vec<usize> {
    fn from(s: BarSelection) -> Vec<usize> {
        s.offsets
    }
}

impl std::fmt::Display for BarSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.offsets.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Deterministic statistic-guided selection: offsets 1 and 2 are always
/// included, then offsets are added greedily by highest L_t (ties favor the
/// smaller offset) until k are chosen. Undefined intervals rank as 0.
pub fn select_structure_bars(
    dist: &SimilarityDistribution,
    k: usize,
    max_offset: usize,
) -> Result<BarSelection, SimilarityError> {
    if k < 1 {
        return Err(SimilarityError::BadK);
    }
    if k > max_offset {
        return Err(SimilarityError::KExceedsMaxOffset { k, max_offset });
    }
    if max_offset > dist.horizon {
        return Err(SimilarityError::MaxOffsetExceedsHorizon {
            max_offset,
            horizon: dist.horizon,
        });
    }
    let mut chosen: Vec<usize> = [1, 2].into_iter().take(k).collect();
    let mut candidates: Vec<(usize, f64)> = (1..=max_offset)
        .filter(|t| !chosen.contains(t))
        .map(|t| (t, dist.l(t).unwrap_or(0.0)))
        .collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (t, _) in candidates {
        if chosen.len() >= k {
            break;
        }
        chosen.push(t);
    }
    chosen.sort_unstable();
    BarSelection::new(chosen)
}

/// CSV header + one `t,L_t,count` row per interval; undefined L_t prints
/// empty. Values use shortest round-trip formatting, so equal distributions
/// produce identical bytes.
pub fn write_distribution_csv(
    w: &mut impl Write,
    dist: &SimilarityDistribution,
) -> std::io::Result<()> {
    writeln!(w, "t,L_t,count")?;
    for t in 1..=dist.horizon {
        match dist.l(t) {
            Some(v) => writeln!(w, "{t},{v},{}", dist.count(t))?,
            None => writeln!(w, "{t},,{}", dist.count(t))?,
        }
    }
    Ok(())
}

pub fn read_distribution_csv(
    r: impl BufRead,
    track_scope: Role,
) -> Result<SimilarityDistribution, SimilarityError> {
    let mut rows: Vec<(usize, Option<f64>, usize)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SimilarityError::Csv(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('t')) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(SimilarityError::Csv(format!("line {}: expected 3 fields", i + 1)));
        }
        let t: usize = parts[0]
            .trim()
            .parse()
            .map_err(|_| SimilarityError::Csv(format!("line {}: bad t", i + 1)))?;
        let l = if parts[1].trim().is_empty() {
            None
        } else {
            Some(
                parts[1]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| SimilarityError::Csv(format!("line {}: bad L_t", i + 1)))?,
            )
        };
        let count: usize = parts[2]
            .trim()
            .parse()
            .map_err(|_| SimilarityError::Csv(format!("line {}: bad count", i + 1)))?;
        rows.push((t, l, count));
    }
    let horizon = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let mut dist = SimilarityDistribution::new(horizon.max(1), track_scope)?;
    if horizon == 0 {
        return Err(SimilarityError::Csv("no data rows".into()));
    }
    for (t, l, count) in rows {
        if t < 1 || t > horizon {
            return Err(SimilarityError::Csv(format!("t={t} out of range")));
        }
        dist.set(t, l, count);
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{beats, Bar, Note};
    use proptest::prelude::*;

    fn set_of(triples: &[(u8, u32, u8)]) -> BarNoteSet {
        BarNoteSet { notes: triples.iter().copied().collect() }
    }

    /// Song whose melody bars are given as triple lists.
    fn song(bars: &[&[(u8, u32, u8)]]) -> TrackSet {
        let mut ts = TrackSet::default();
        for (bi, bar) in bars.iter().enumerate() {
            for &(pitch, dur, pos) in bar.iter() {
                ts.role_mut(Role::Melody).push(Note {
                    onset: beats(4 * bi as i64, 1) + beats(i64::from(pos), 4),
                    pitch,
                    duration: beats(i64::from(dur), 4),
                    velocity: 100,
                });
            }
        }
        ts.bars = (0..bars.len() as i64)
            .map(|i| Bar { start: beats(4 * i, 1), length: beats(4, 1) })
            .collect();
        ts.tempo_bpm = 120.0;
        ts
    }

    #[test]
    fn jaccard_examples() {
        let x = (60, 4, 0);
        let y = (64, 2, 4);
        let z = (67, 1, 8);
        let w = (72, 1, 12);
        let a = set_of(&[x, y, z]);
        assert_eq!(bar_similarity(&a, &a), Some(1.0));
        let disjoint = set_of(&[w]);
        assert_eq!(bar_similarity(&set_of(&[x]), &disjoint), Some(0.0));
        let b = set_of(&[y, z, w]);
        assert_eq!(bar_similarity(&a, &b), Some(0.5)); // 2 / 4
        assert_eq!(bar_similarity(&set_of(&[]), &set_of(&[])), None);
        assert_eq!(bar_similarity(&a, &set_of(&[])), Some(0.0));
    }

    #[test]
    fn jaccard_matches_exhaustive_oracle_on_6_note_universe() {
        let universe: Vec<(u8, u32, u8)> = vec![
            (60, 1, 0),
            (62, 2, 2),
            (64, 4, 4),
            (65, 1, 6),
            (67, 2, 8),
            (69, 4, 10),
        ];
        for mask_a in 0u32..64 {
            for mask_b in 0u32..64 {
                let pick = |mask: u32| {
                    set_of(
                        &universe
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| mask >> i & 1 == 1)
                            .map(|(_, &t)| t)
                            .collect::<Vec<_>>(),
                    )
                };
                let a = pick(mask_a);
                let b = pick(mask_b);
                // oracle: count membership over the explicit universe
                let mut inter = 0usize;
                let mut union = 0usize;
                for (i, _) in universe.iter().enumerate() {
                    let in_a = mask_a >> i & 1 == 1;
                    let in_b = mask_b >> i & 1 == 1;
                    if in_a && in_b {
                        inter += 1;
                    }
                    if in_a || in_b {
                        union += 1;
                    }
                }
                let expect = if union == 0 { None } else { Some(inter as f64 / union as f64) };
                assert_eq!(bar_similarity(&a, &b), expect, "masks {mask_a} {mask_b}");
            }
        }
    }

    #[test]
    fn identical_bars_give_all_ones() {
        let bar: &[(u8, u32, u8)] = &[(60, 2, 0), (64, 2, 8)];
        let ts = song(&[bar; 10]);
        let dist = similarity_distribution(
            &[ts],
            &DistOptions { horizon: 5, ..DistOptions::default() },
        )
        .unwrap();
        for t in 1..=5 {
            assert_eq!(dist.l(t), Some(1.0));
            assert_eq!(dist.count(t), 10 - t);
        }
    }

    #[test]
    fn period_two_alternation() {
        let a: &[(u8, u32, u8)] = &[(60, 2, 0)];
        let b: &[(u8, u32, u8)] = &[(72, 1, 4)];
        let ts = song(&[a, b, a, b, a, b, a, b]);
        let dist = similarity_distribution(
            &[ts],
            &DistOptions { horizon: 4, ..DistOptions::default() },
        )
        .unwrap();
        assert_eq!(dist.l(1), Some(0.0));
        assert_eq!(dist.l(2), Some(1.0));
        assert_eq!(dist.l(3), Some(0.0));
        assert_eq!(dist.l(4), Some(1.0));
    }

    /// Independent brute-force oracle: inline Jaccard, explicit double loop.
    fn oracle_distribution(corpus: &[TrackSet], horizon: usize) -> Vec<Option<f64>> {
        let jaccard = |a: &BTreeSet<(u8, u32, u8)>, b: &BTreeSet<(u8, u32, u8)>| {
            let mut inter = 0usize;
            for t in a {
                if b.contains(t) {
                    inter += 1;
                }
            }
            let union = a.len() + b.len() - inter;
            if union == 0 {
                None
            } else {
                Some(inter as f64 / union as f64)
            }
        };
        (1..=horizon)
            .map(|t| {
                let mut vals = Vec::new();
                for ts in corpus {
                    let bars = bar_note_sets(ts, Role::Melody);
                    for i in 0..bars.len() {
                        let j = i + t;
                        if j >= bars.len() {
                            continue;
                        }
                        if let Some(v) = jaccard(&bars[i].notes, &bars[j].notes) {
                            vals.push(v);
                        }
                    }
                }
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect()
    }

    #[test]
    fn distribution_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut corpus = Vec::new();
        for _ in 0..5 {
            let nbars = rng.gen_range(2..12);
            let bars: Vec<Vec<(u8, u32, u8)>> = (0..nbars)
                .map(|_| {
                    (0..rng.gen_range(0..4))
                        .map(|_| {
                            (
                                rng.gen_range(60u8..72),
                                rng.gen_range(1u32..5),
                                rng.gen_range(0u8..16),
                            )
                        })
                        .collect()
                })
                .collect();
            let slices: Vec<&[(u8, u32, u8)]> = bars.iter().map(Vec::as_slice).collect();
            corpus.push(song(&slices));
        }
        let dist = similarity_distribution(
            &corpus,
            &DistOptions { horizon: 10, ..DistOptions::default() },
        )
        .unwrap();
        let oracle = oracle_distribution(&corpus, 10);
        for t in 1..=10 {
            match (dist.l(t), oracle[t - 1]) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b, "t={t}"),
            }
        }
    }

    #[test]
    fn both_empty_flag_counts_as_one() {
        let a: &[(u8, u32, u8)] = &[(60, 2, 0)];
        let e: &[(u8, u32, u8)] = &[];
        let ts = song(&[a, e, a, e]);
        let base = DistOptions { horizon: 2, ..DistOptions::default() };
        let excl = similarity_distribution(&[ts.clone()], &base).unwrap();
        // t=2 pairs: (0,2) similar=1, (1,3) both empty → excluded
        assert_eq!(excl.count(2), 1);
        assert_eq!(excl.l(2), Some(1.0));
        let incl = similarity_distribution(
            &[ts],
            &DistOptions { both_empty: BothEmpty::CountAsOne, ..base },
        )
        .unwrap();
        assert_eq!(incl.count(2), 2);
        assert_eq!(incl.l(2), Some(1.0));
    }

    #[test]
    fn per_song_mean_weighting() {
        let x: &[(u8, u32, u8)] = &[(60, 1, 0)];
        let y: &[(u8, u32, u8)] = &[(70, 1, 0)];
        // song A: two identical-adjacent pairs (l=1,1); song B: one disjoint pair (l=0)
        let a = song(&[x, x, x]);
        let b = song(&[x, y]);
        let pooled = similarity_distribution(
            &[a.clone(), b.clone()],
            &DistOptions { horizon: 1, ..DistOptions::default() },
        )
        .unwrap();
        assert!((pooled.l(1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(pooled.count(1), 3);
        let meaned = similarity_distribution(
            &[a, b],
            &DistOptions { weighting: Weighting::PerSongMean, horizon: 1, ..DistOptions::default() },
        )
        .unwrap();
        assert!((meaned.l(1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(meaned.count(1), 2); // contributing songs
    }

    #[test]
    fn similarity_error_examples() {
        let mut a = SimilarityDistribution::new(40, Role::Melody).unwrap();
        for t in 1..=40 {
            a.set(t, Some(0.3 + 0.01 * t as f64), 5);
        }
        assert_eq!(similarity_error(&a, &a), Ok(0.0));
        let mut b = a.clone();
        for t in 1..=40 {
            b.set(t, Some(a.l(t).unwrap() + 0.05), 5);
        }
        let se = similarity_error(&b, &a).unwrap();
        assert!((se - 0.05).abs() < 1e-12);
        // symmetric
        assert_eq!(similarity_error(&b, &a), similarity_error(&a, &b));
        // horizon mismatch
        let c = SimilarityDistribution::new(20, Role::Melody).unwrap();
        assert_eq!(
            similarity_error(&a, &c),
            Err(SimilarityError::HorizonMismatch { a: 40, b: 20 })
        );
        // undefined interval is an error for the strict form
        let mut d = a.clone();
        d.set(7, None, 0);
        assert_eq!(
            similarity_error(&d, &a),
            Err(SimilarityError::UndefinedInterval { t: 7 })
        );
        // but the common-interval form skips it
        let (se, n) = similarity_error_common(&d, &a).unwrap();
        assert_eq!(n, 39);
        assert!(se.abs() < 1e-12);
    }

    #[test]
    fn selection_reference_default_and_validation() {
        assert_eq!(
            BarSelection::reference_default().offsets(),
            &[1, 2, 4, 8, 12, 16, 24, 32]
        );
        assert_eq!(BarSelection::recent(8).offsets(), &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert!(BarSelection::new(vec![]).is_err());
        assert!(BarSelection::new(vec![0, 1]).is_err());
        assert!(BarSelection::new(vec![1, 1, 2]).is_err());
        assert!(BarSelection::new(vec![2, 1]).is_err());
        assert_eq!(BarSelection::parse("1,2,4").unwrap().offsets(), &[1, 2, 4]);
    }

    #[test]
    fn selection_greedy_rule() {
        let mut dist = SimilarityDistribution::new(16, Role::Melody).unwrap();
        for t in 1..=16 {
            let l = if t % 4 == 0 { 0.9 } else { 0.1 };
            dist.set(t, Some(l), 10);
        }
        // peaks at multiples of 4, k=4 → forced {1,2} plus greedy {4,8}
        let sel = select_structure_bars(&dist, 4, 16).unwrap();
        assert_eq!(sel.offsets(), &[1, 2, 4, 8]);
        assert_eq!(select_structure_bars(&dist, 1, 16).unwrap().offsets(), &[1]);
        assert_eq!(
            select_structure_bars(&dist, 17, 16),
            Err(SimilarityError::KExceedsMaxOffset { k: 17, max_offset: 16 })
        );
        assert_eq!(
            select_structure_bars(&dist, 4, 20),
            Err(SimilarityError::MaxOffsetExceedsHorizon { max_offset: 20, horizon: 16 })
        );
    }

    #[test]
    fn csv_round_trip_is_byte_stable() {
        let mut dist = SimilarityDistribution::new(6, Role::Melody).unwrap();
        for t in 1..=5 {
            dist.set(t, Some(1.0 / t as f64), t * 2);
        }
        dist.set(6, None, 0);
        let mut buf = Vec::new();
        write_distribution_csv(&mut buf, &dist).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,L_t,count\n"));
        assert!(text.contains("6,,0"));
        let back = read_distribution_csv(std::io::Cursor::new(&buf), Role::Melody).unwrap();
        assert_eq!(back, dist);
        let mut buf2 = Vec::new();
        write_distribution_csv(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    proptest! {
        #[test]
        fn bar_similarity_symmetric_and_bounded(
            a in proptest::collection::btree_set((21u8..109, 1u32..65, 0u8..16), 0..8),
            b in proptest::collection::btree_set((21u8..109, 1u32..65, 0u8..16), 0..8),
        ) {
            let sa = BarNoteSet { notes: a };
            let sb = BarNoteSet { notes: b };
            let ab = bar_similarity(&sa, &sb);
            prop_assert_eq!(ab, bar_similarity(&sb, &sa));
            if let Some(v) = ab {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !sa.is_empty() {
                prop_assert_eq!(bar_similarity(&sa, &sa), Some(1.0));
            }
        }

        #[test]
        fn selection_always_valid(
            ls in proptest::collection::vec(0.0f64..1.0, 16),
            k in 1usize..10,
        ) {
            let mut dist = SimilarityDistribution::new(16, Role::Melody).unwrap();
            for (i, &l) in ls.iter().enumerate() {
                dist.set(i + 1, Some(l), 1);
            }
            let sel = select_structure_bars(&dist, k, 16).unwrap();
            prop_assert_eq!(sel.len(), k);
            prop_assert!(sel.contains(1));
            let offs = sel.offsets();
            prop_assert!(offs.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(offs.iter().all(|&o| o >= 1 && o <= 16));
        }
    }
}
