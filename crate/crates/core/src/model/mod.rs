//! The full model: token/bar/beat embeddings combined by a linear map,
//! stacked FC-Attention layers, and a softmax head over music positions.
//! Parameters flatten to one deterministic f64 vector for the optimizer,
//! checkpoints, and finite-difference checks.

pub mod checkpoint;
pub mod sample;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::attention::layer::{
    layer_backward, layer_forward, FcLayer, LayerNorm, LayerOpts, LayerTape, LnTape,
    NormPlacement, SampleCtx,
};
use crate::attention::{xavier, AttnError};
use crate::layout::{LayoutCache, LayoutSpec, Layouts};
use crate::similarity::BarSelection;
use crate::tokenize::{position_indices, PositionIndex, Token, TokenSeq, BEAT_NONE, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error("empty sequence")]
    Empty,
    #[error("sequence has {bars} bars, model maximum is {max}")]
    TooManyBars { bars: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_bars: usize,
    pub positions_per_bar: usize,
    pub d_tok: usize,
    pub d_bar: usize,
    pub d_beat: usize,
    /// Structure-related bar offsets used to build attention layouts.
    pub selection: Vec<usize>,
    pub block_size: usize,
    pub include_selected_summaries: bool,
    pub coarse_enabled: bool,
    pub pre_norm: bool,
    pub ffn_on_summaries: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; the reference scale uses 4 layers, width 512,
    /// 8 heads, FFN 2048.
    fn default() -> Self {
        let d_model = 64;
        Self {
            n_layers: 2,
            d_model,
            n_heads: 4,
            ffn_hidden: 128,
            vocab_size: VOCAB_SIZE as usize,
            max_bars: 256,
            positions_per_bar: 16,
            d_tok: d_model,
            d_bar: d_model / 4,
            d_beat: d_model / 4,
            selection: BarSelection::reference_default().offsets().to_vec(),
            block_size: 32,
            include_selected_summaries: false,
            coarse_enabled: true,
            pre_norm: true,
            ffn_on_summaries: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.ffn_hidden,
            self.vocab_size,
            self.max_bars,
            self.positions_per_bar,
            self.d_tok,
            self.d_bar,
            self.d_beat,
            self.block_size,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positions_per_bar != usize::from(crate::tokenize::POSITIONS_PER_BAR) {
            return Err(ModelError::Config(format!(
                "positions_per_bar {} does not match the tokenizer grid ({})",
                self.positions_per_bar,
                crate::tokenize::POSITIONS_PER_BAR
            )));
        }
        BarSelection::new(self.selection.clone())
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn selection(&self) -> BarSelection {
        BarSelection::new(self.selection.clone()).expect("validated selection")
    }

    pub fn layer_opts(&self) -> LayerOpts {
        LayerOpts {
            placement: if self.pre_norm { NormPlacement::Pre } else { NormPlacement::Post },
            ffn_on_summaries: self.ffn_on_summaries,
        }
    }

    pub fn layout_spec(&self, bar_lens: Vec<usize>) -> LayoutSpec {
        LayoutSpec::new(bar_lens, self.selection())
            .with_selected_summaries(self.include_selected_summaries)
            .with_coarse(self.coarse_enabled)
    }
}

/// Token, bar, and beat tables plus the linear combiner.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub token: Array2<f64>,
    pub bar: Array2<f64>,
    pub beat: Array2<f64>,
    pub comb_w: Array2<f64>,
    pub comb_b: Array1<f64>,
}

impl EmbeddingTables {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            token: xavier(cfg.vocab_size, cfg.d_tok, rng),
            bar: xavier(cfg.max_bars, cfg.d_bar, rng),
            beat: xavier(cfg.positions_per_bar + 1, cfg.d_beat, rng),
            comb_w: xavier(cfg.d_tok + cfg.d_bar + cfg.d_beat, cfg.d_model, rng),
            comb_b: Array1::zeros(cfg.d_model),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            token: Array2::zeros((cfg.vocab_size, cfg.d_tok)),
            bar: Array2::zeros((cfg.max_bars, cfg.d_bar)),
            beat: Array2::zeros((cfg.positions_per_bar + 1, cfg.d_beat)),
            comb_w: Array2::zeros((cfg.d_tok + cfg.d_bar + cfg.d_beat, cfg.d_model)),
            comb_b: Array1::zeros(cfg.d_model),
        }
    }
}

/// All model parameters with their configuration.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: EmbeddingTables,
    pub layers: Vec<FcLayer>,
    /// Applied before the head in pre-norm stacks; inert otherwise.
    pub final_ln: LayerNorm,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = EmbeddingTables::init(&config, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| FcLayer::init(config.d_model, config.n_heads, config.ffn_hidden, &mut rng))
            .collect();
        Ok(Self {
            embed,
            layers,
            final_ln: LayerNorm::identity(config.d_model),
            head_w: xavier(config.d_model, config.vocab_size, &mut rng),
            head_b: Array1::zeros(config.vocab_size),
            config,
        })
    }

    /// Zero-valued clone of the shapes — the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let cfg = &self.config;
        Self {
            config: cfg.clone(),
            embed: EmbeddingTables::zeros(cfg),
            layers: (0..cfg.n_layers)
                .map(|_| FcLayer::zeros(cfg.d_model, cfg.n_heads, cfg.ffn_hidden))
                .collect(),
            final_ln: LayerNorm::zeros(cfg.d_model),
            head_w: Array2::zeros((cfg.d_model, cfg.vocab_size)),
            head_b: Array1::zeros(cfg.vocab_size),
        }
    }

    /// Deterministic flattening; `set_flat` reads the same order back.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for m in [&self.embed.token, &self.embed.bar, &self.embed.beat, &self.embed.comb_w] {
            out.extend(m.iter());
        }
        out.extend(self.embed.comb_b.iter());
        for layer in &self.layers {
            layer.write_flat(&mut out);
        }
        out.extend(self.final_ln.gamma.iter());
        out.extend(self.final_ln.beta.iter());
        out.extend(self.head_w.iter());
        out.extend(self.head_b.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter count");
        let mut it = flat.iter();
        use crate::attention::fill;
        for m in [
            &mut self.embed.token,
            &mut self.embed.bar,
            &mut self.embed.beat,
            &mut self.embed.comb_w,
        ] {
            fill(m.iter_mut(), &mut it);
        }
        fill(self.embed.comb_b.iter_mut(), &mut it);
        for layer in &mut self.layers {
            layer.read_flat(&mut it);
        }
        fill(self.final_ln.gamma.iter_mut(), &mut it);
        fill(self.final_ln.beta.iter_mut(), &mut it);
        fill(self.head_w.iter_mut(), &mut it);
        fill(self.head_b.iter_mut(), &mut it);
        assert!(it.next().is_none(), "flat parameter overrun");
    }

    pub fn n_params(&self) -> usize {
        let cfg = &self.config;
        let d = cfg.d_model;
        let per_layer = 6 * d * d + 6 * d          // attention mats + typed biases
            + 2 * 2 * d                             // two layer norms
            + d * cfg.ffn_hidden + cfg.ffn_hidden + cfg.ffn_hidden * d + d;
        cfg.vocab_size * cfg.d_tok
            + cfg.max_bars * cfg.d_bar
            + (cfg.positions_per_bar + 1) * cfg.d_beat
            + (cfg.d_tok + cfg.d_bar + cfg.d_beat) * d
            + d
            + cfg.n_layers * per_layer
            + 2 * d
            + d * cfg.vocab_size
            + cfg.vocab_size
    }
}

/// Per-row embedding inputs in canonical order: one row per summary token
/// (bar order), then one per music token (sequence order).
#[derive(Clone, Debug)]
pub struct EmbedIds {
    pub token: Vec<u32>,
    pub bar: Vec<usize>,
    pub beat: Vec<usize>,
    pub bars: usize,
    pub music: usize,
}

pub fn embed_ids(seq: &TokenSeq, pos: &PositionIndex) -> EmbedIds {
    let b = seq.bar_count();
    let rows = b + seq.music_len();
    let mut token = Vec::with_capacity(rows);
    let mut bar = Vec::with_capacity(rows);
    let mut beat = Vec::with_capacity(rows);
    for i in 0..b {
        token.push(Token::Sum.id());
        bar.push(i);
        beat.push(BEAT_NONE);
    }
    for (idx, tok) in seq.tokens.iter().enumerate() {
        if matches!(tok, Token::Sum) {
            continue;
        }
        token.push(tok.id());
        bar.push(pos.bar_id[idx]);
        beat.push(pos.beat_id[idx]);
    }
    EmbedIds { token, bar, beat, bars: b, music: seq.music_len() }
}

/// Concatenate [token; bar; beat] embeddings per row, then combine.
fn embed_forward(ids: &EmbedIds, e: &EmbeddingTables) -> (Array2<f64>, Array2<f64>) {
    let (dt, db, dbt) = (e.token.ncols(), e.bar.ncols(), e.beat.ncols());
    let rows = ids.token.len();
    let mut pre = Array2::zeros((rows, dt + db + dbt));
    for r in 0..rows {
        pre.slice_mut(s![r, 0..dt]).assign(&e.token.row(ids.token[r] as usize));
        pre.slice_mut(s![r, dt..dt + db]).assign(&e.bar.row(ids.bar[r]));
        pre.slice_mut(s![r, dt + db..]).assign(&e.beat.row(ids.beat[r]));
    }
    let x0 = pre.dot(&e.comb_w) + &e.comb_b;
    (pre, x0)
}

fn embed_backward(
    d_x0: &Array2<f64>,
    ids: &EmbedIds,
    pre: &Array2<f64>,
    e: &EmbeddingTables,
    grads: &mut EmbeddingTables,
) {
    grads.comb_w += &pre.t().dot(d_x0);
    grads.comb_b += &d_x0.sum_axis(Axis(0));
    let d_pre = d_x0.dot(&e.comb_w.t());
    let (dt, db) = (e.token.ncols(), e.bar.ncols());
    for r in 0..ids.token.len() {
        let row = d_pre.row(r);
        let mut t = grads.token.row_mut(ids.token[r] as usize);
        t += &row.slice(s![0..dt]);
        let mut b = grads.bar.row_mut(ids.bar[r]);
        b += &row.slice(s![dt..dt + db]);
        let mut bt = grads.beat.row_mut(ids.beat[r]);
        bt += &row.slice(s![dt + db..]);
    }
}

/// Everything the backward pass needs from one forward.
pub struct ForwardTape {
    pub ids: EmbedIds,
    pre_comb: Array2<f64>,
    layer_inputs: Vec<Array2<f64>>,
    layer_tapes: Vec<LayerTape>,
    final_ln: Option<LnTape>,
    final_states: Array2<f64>,
    music_states: Array2<f64>,
    layouts: Arc<Layouts>,
}

/// Next-token logits at every music position (summary positions predict
/// nothing).
pub fn forward(
    seq: &TokenSeq,
    params: &ModelParams,
    cache: &LayoutCache,
) -> Result<(Array2<f64>, ForwardTape), ModelError> {
    let cfg = &params.config;
    if seq.bar_count() == 0 || seq.music_len() == 0 {
        return Err(ModelError::Empty);
    }
    if seq.bar_count() > cfg.max_bars {
        return Err(ModelError::TooManyBars { bars: seq.bar_count(), max: cfg.max_bars });
    }
    let pos = position_indices(seq);
    let ids = embed_ids(seq, &pos);
    let layouts = cache.get_or_build(&cfg.layout_spec(seq.music_bar_lengths()));
    let ctx = SampleCtx::new(ids.bars, ids.music, &layouts);
    let (pre_comb, x0) = embed_forward(&ids, &params.embed);
    let mut states = x0;
    let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
    let mut layer_tapes = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        layer_inputs.push(states.clone());
        let (next, tape) = layer_forward(layer, &states, &ctx, cfg.layer_opts(), l)?;
        layer_tapes.push(tape);
        states = next;
    }
    let (final_states, final_ln) = if cfg.pre_norm {
        let (y, t) = params.final_ln.forward(&states);
        (y, Some(t))
    } else {
        (states, None)
    };
    let music_states = final_states.slice(s![ids.bars.., ..]).to_owned();
    let logits = music_states.dot(&params.head_w) + &params.head_b;
    Ok((
        logits,
        ForwardTape {
            ids,
            pre_comb,
            layer_inputs,
            layer_tapes,
            final_ln,
            final_states,
            music_states,
            layouts,
        },
    ))
}

/// Backward from logit gradients to a full parameter-gradient set.
pub fn backward(
    d_logits: &Array2<f64>,
    tape: &ForwardTape,
    params: &ModelParams,
) -> ModelParams {
    let cfg = &params.config;
    let mut grads = params.zeros_like();
    let b = tape.ids.bars;
    grads.head_w += &tape.music_states.t().dot(d_logits);
    grads.head_b += &d_logits.sum_axis(Axis(0));
    let d_music = d_logits.dot(&params.head_w.t());
    let mut d_states = Array2::zeros(tape.final_states.dim());
    d_states.slice_mut(s![b.., ..]).assign(&d_music);
    if let Some(ln_tape) = &tape.final_ln {
        d_states = params.final_ln.backward(&d_states, ln_tape, &mut grads.final_ln);
    }
    let ctx = SampleCtx::new(b, tape.ids.music, &tape.layouts);
    for l in (0..cfg.n_layers).rev() {
        d_states = layer_backward(
            &params.layers[l],
            &d_states,
            &tape.layer_inputs[l],
            &ctx,
            cfg.layer_opts(),
            &tape.layer_tapes[l],
            &mut grads.layers[l],
        );
    }
    embed_backward(&d_states, &tape.ids, &tape.pre_comb, &params.embed, &mut grads.embed);
    grads
}

/// Target ids for next-token prediction: the music-token stream shifted by
/// one. Logit row j predicts targets[j]; the last music position has no
/// target.
pub fn next_music_targets(seq: &TokenSeq) -> Vec<u32> {
    seq.tokens
        .iter()
        .filter(|t| !matches!(t, Token::Sum))
        .skip(1)
        .map(|t| t.id())
        .collect()
}

fn check_targets(logits: &Array2<f64>, targets: &[u32]) -> Result<(), ModelError> {
    if targets.len() + 1 != logits.nrows() {
        return Err(ModelError::Shape(format!(
            "{} logit rows vs {} targets (want rows − 1)",
            logits.nrows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(ModelError::Shape("no predicted positions".into()));
    }
    Ok(())
}

/// Per-position negative log-likelihood in nats.
pub fn nll_per_position(logits: &Array2<f64>, targets: &[u32]) -> Result<Vec<f64>, ModelError> {
    check_targets(logits, targets)?;
    let mut out = Vec::with_capacity(targets.len());
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        out.push(lse - row[t as usize]);
    }
    Ok(out)
}

/// Mean negative log-likelihood; perplexity is its exponential.
pub fn nll_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64, ModelError> {
    let per = nll_per_position(logits, targets)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean NLL and its logit gradient (softmax minus one-hot over predicted
/// rows, zero at the last row).
pub fn nll_and_grad(
    logits: &Array2<f64>,
    targets: &[u32],
) -> Result<(f64, Array2<f64>), ModelError> {
    check_targets(logits, targets)?;
    let count = targets.len() as f64;
    let mut d = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize];
        let mut drow = d.row_mut(r);
        for (c, &z) in row.iter().enumerate() {
            drow[c] = (z - max).exp() / sum / count;
        }
        drow[t as usize] -= 1.0 / count;
    }
    Ok((total / count, d))
}

/// Pooled perplexity over the first `L` predicted positions of each song,
/// one value per requested prefix length.
pub fn perplexity_at_prefix(
    corpus: &[TokenSeq],
    prefix_lengths: &[usize],
    params: &ModelParams,
    cache: &LayoutCache,
) -> Result<Vec<f64>, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut sums = vec![0.0f64; prefix_lengths.len()];
    let mut counts = vec![0usize; prefix_lengths.len()];
    for seq in corpus {
        let (logits, _) = forward(seq, params, cache)?;
        let targets = next_music_targets(seq);
        let per = nll_per_position(&logits, &targets)?;
        for (i, &l) in prefix_lengths.iter().enumerate() {
            let take = l.min(per.len());
            sums[i] += per[..take].iter().sum::<f64>();
            counts[i] += take;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (s / c.max(1) as f64).exp())
        .collect())
}

/// Mean NLL of one song under the model.
pub fn song_nll(
    seq: &TokenSeq,
    params: &ModelParams,
    cache: &LayoutCache,
) -> Result<f64, ModelError> {
    let (logits, _) = forward(seq, params, cache)?;
    nll_loss(&logits, &next_music_targets(seq))
}

/// Analytic gradients vs central finite differences of the summed song NLL,
/// probing every `stride`-th parameter. Returns the worst relative error.
pub fn grad_check(
    params: &ModelParams,
    songs: &[TokenSeq],
    eps: f64,
    stride: usize,
    cache: &LayoutCache,
) -> Result<f64, ModelError> {
    let loss_of = |p: &ModelParams| -> Result<f64, ModelError> {
        songs.iter().map(|s| song_nll(s, p, cache)).sum()
    };
    let mut analytic = vec![0.0f64; params.n_params()];
    for seq in songs {
        let (logits, tape) = forward(seq, params, cache)?;
        let (_, d_logits) = nll_and_grad(&logits, &next_music_targets(seq))?;
        let g = backward(&d_logits, &tape, params);
        for (a, v) in analytic.iter_mut().zip(g.flat()) {
            *a += v;
        }
    }
    let flat = params.flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in (0..flat.len()).step_by(stride.max(1)) {
        let mut fp = flat.clone();
        fp[i] += eps;
        probe.set_flat(&fp);
        let plus = loss_of(&probe)?;
        fp[i] = flat[i] - eps;
        probe.set_flat(&fp);
        let minus = loss_of(&probe)?;
        let fd = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{beats, Bar, Note, Role, TrackSet};
    use crate::tokenize::encode;

    fn bars_44(n: usize) -> Vec<Bar> {
        (0..n)
            .map(|i| Bar { start: beats(4 * i as i64, 1), length: beats(4, 1) })
            .collect()
    }

    fn note(onset: Beats, pitch: u8, dur: Beats) -> Note {
        Note { onset, pitch, duration: dur, velocity: 100 }
    }

    use crate::midi::Beats;

    /// Two-bar melody/piano song used across model tests.
    fn song() -> TokenSeq {
        let mut ts = TrackSet::default();
        ts.role_mut(Role::Melody).extend([
            note(beats(0, 1), 60, beats(1, 1)),
            note(beats(1, 1), 62, beats(1, 2)),
            note(beats(4, 1), 64, beats(1, 1)),
        ]);
        ts.role_mut(Role::Piano).push(note(beats(2, 1), 48, beats(2, 1)));
        ts.bars = bars_44(2);
        encode(&ts).unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_hidden: 24,
            max_bars: 8,
            d_tok: 16,
            d_bar: 4,
            d_beat: 4,
            selection: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embed_rows_and_bar_slice() {
        let seq = song();
        let pos = position_indices(&seq);
        let ids = embed_ids(&seq, &pos);
        assert_eq!(ids.token.len(), seq.bar_count() + seq.music_len());
        let params = ModelParams::init(tiny_config(), 0).unwrap();
        let (pre, x0) = embed_forward(&ids, &params.embed);
        assert_eq!(x0.nrows(), ids.token.len());
        // two rows identical except bar id differ only in the bar slice
        let (dt, db) = (16usize, 4usize);
        // summary rows of bars 0 and 1: same token (SUM) and beat (NONE)
        let a = pre.row(0);
        let c = pre.row(1);
        assert_eq!(a.slice(s![0..dt]), c.slice(s![0..dt]));
        assert!(a.slice(s![dt..dt + db]) != c.slice(s![dt..dt + db]));
        assert_eq!(a.slice(s![dt + db..]), c.slice(s![dt + db..]));
        // zero combiner zeroes the output
        let mut p2 = params.clone();
        p2.embed.comb_w.fill(0.0);
        p2.embed.comb_b.fill(0.0);
        let (_, x0z) = embed_forward(&ids, &p2.embed);
        assert!(x0z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_errors() {
        let seq = song();
        let params = ModelParams::init(tiny_config(), 1).unwrap();
        let cache = LayoutCache::new();
        let (logits, _) = forward(&seq, &params, &cache).unwrap();
        assert_eq!(logits.dim(), (seq.music_len(), params.config.vocab_size));

        let mut small = tiny_config();
        small.max_bars = 1;
        let p2 = ModelParams::init(small, 1).unwrap();
        assert!(matches!(
            forward(&seq, &p2, &cache),
            Err(ModelError::TooManyBars { bars: 2, max: 1 })
        ));
        // truncation makes it fit
        let cut = seq.truncate_bars(1);
        assert!(forward(&cut, &p2, &cache).is_ok());
    }

    #[test]
    fn editing_a_later_token_leaves_earlier_logits_unchanged() {
        let seq = song();
        let params = ModelParams::init(tiny_config(), 2).unwrap();
        let cache = LayoutCache::new();
        let (base, _) = forward(&seq, &params, &cache).unwrap();
        // flip the last PITCH token to another pitch (music index stays valid)
        let mut ids = seq.ids();
        let target_idx = ids
            .iter()
            .rposition(|&id| Token::from_id(id) == Some(Token::Pitch(64)))
            .unwrap();
        ids[target_idx] = Token::Pitch(65).id();
        let seq2 = TokenSeq::from_ids(&ids).unwrap();
        let (after, _) = forward(&seq2, &params, &cache).unwrap();
        // music index of the edited token
        let music_idx = seq.tokens[..target_idx]
            .iter()
            .filter(|t| !matches!(t, Token::Sum))
            .count();
        for r in 0..music_idx {
            for c in 0..base.ncols() {
                assert_eq!(base[[r, c]], after[[r, c]], "row {r} changed");
            }
        }
        assert!(
            (0..base.ncols()).any(|c| base[[music_idx, c]] != after[[music_idx, c]]),
            "edited position must change"
        );
    }

    #[test]
    fn nll_examples() {
        // uniform logits: ln V
        let v = 10;
        let logits = Array2::zeros((4, v));
        let targets = [1u32, 5, 9];
        let nll = nll_loss(&logits, &targets).unwrap();
        assert!((nll - (v as f64).ln()).abs() < 1e-12);
        // near-one-hot correct logits: nll near 0
        let mut hot = Array2::zeros((3, v));
        for (r, &t) in targets[..2].iter().enumerate() {
            hot[[r, t as usize]] = 50.0;
        }
        let nll = nll_loss(&hot, &targets[..2]).unwrap();
        assert!(nll < 1e-9);
        // ppl = exp(nll) consistency
        let per = nll_per_position(&logits, &targets).unwrap();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((mean.exp() - v as f64).abs() < 1e-9);
        // mismatched lengths
        assert!(nll_loss(&logits, &[1, 2]).is_err());
    }

    #[test]
    fn uniform_model_ppl_is_vocab_size() {
        let seq = song();
        let mut params = ModelParams::init(tiny_config(), 3).unwrap();
        params.head_w.fill(0.0);
        params.head_b.fill(0.0);
        let cache = LayoutCache::new();
        let ppl =
            perplexity_at_prefix(&[seq], &[4, 1024], &params, &cache).unwrap();
        for p in ppl {
            assert!((p - params.config.vocab_size as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_check_full_model() {
        let seq = song();
        let params = ModelParams::init(tiny_config(), 4).unwrap();
        let cache = LayoutCache::new();
        let worst = grad_check(&params, &[seq], 1e-5, 23, &cache).unwrap();
        assert!(worst < 1e-3, "max relative gradient error {worst}");
    }

    #[test]
    fn grad_check_post_norm_and_no_coarse() {
        let seq = song();
        let mut cfg = tiny_config();
        cfg.pre_norm = false;
        cfg.coarse_enabled = false;
        cfg.ffn_on_summaries = false;
        let params = ModelParams::init(cfg, 5).unwrap();
        let cache = LayoutCache::new();
        let worst = grad_check(&params, &[seq], 1e-5, 31, &cache).unwrap();
        assert!(worst < 1e-3, "max relative gradient error {worst}");
        // summary-source projections are unused without coarse attention
        let (logits, tape) = forward(&song(), &params, &cache).unwrap();
        let (_, d) = nll_and_grad(&logits, &next_music_targets(&song())).unwrap();
        let g = backward(&d, &tape, &params);
        for layer in &g.layers {
            assert!(layer.attn.w_k_sum_src.iter().all(|&x| x == 0.0));
            assert!(layer.attn.w_v_sum_src.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn flat_round_trip() {
        let params = ModelParams::init(tiny_config(), 6).unwrap();
        let flat = params.flat();
        assert_eq!(flat.len(), params.n_params());
        let mut other = ModelParams::init(tiny_config(), 7).unwrap();
        other.set_flat(&flat);
        assert_eq!(other.flat(), flat);
    }
}
