//! FC-Attention: masked scaled dot-product attention over layout-restricted
//! source sets, with the projection-sharing scheme (shared Q/K/V projections,
//! per-token-type biases, separate K/V projections for summary tokens used
//! as aggregation sources) and exact hand-written gradients.

pub mod layer;

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::layout::{BoolLayout, Csr};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokKind {
    Music,
    Summary,
}

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("attention row {row} has no allowed sources")]
    EmptyRow { row: usize },
    #[error("non-finite activation in layer {layer} at row {row}")]
    NonFinite { layer: usize, row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// One bias vector per token type, added after the shared projection.
#[derive(Clone, Debug)]
pub struct TypedBias {
    pub music: Array1<f64>,
    pub summary: Array1<f64>,
}

impl TypedBias {
    fn zeros(d: usize) -> Self {
        Self { music: Array1::zeros(d), summary: Array1::zeros(d) }
    }

    pub fn get(&self, kind: TokKind) -> &Array1<f64> {
        match kind {
            TokKind::Music => &self.music,
            TokKind::Summary => &self.summary,
        }
    }

    fn get_mut(&mut self, kind: TokKind) -> &mut Array1<f64> {
        match kind {
            TokKind::Music => &mut self.music,
            TokKind::Summary => &mut self.summary,
        }
    }
}

/// Attention parameters of one layer. Queries, keys and values share one
/// projection each across token types; type identity enters through the
/// post-projection biases. Summary tokens get separate key/value projections
/// when they serve as aggregation sources.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_q: TypedBias,
    pub b_k: TypedBias,
    pub b_v: TypedBias,
    pub w_k_sum_src: Array2<f64>,
    pub w_v_sum_src: Array2<f64>,
    pub w_o: Array2<f64>,
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..=a))
}

impl AttentionParams {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d_model % n_heads == 0, "d_model must divide into heads");
        Self {
            d_model,
            n_heads,
            w_q: xavier(d_model, d_model, rng),
            w_k: xavier(d_model, d_model, rng),
            w_v: xavier(d_model, d_model, rng),
            b_q: TypedBias::zeros(d_model),
            b_k: TypedBias::zeros(d_model),
            b_v: TypedBias::zeros(d_model),
            w_k_sum_src: xavier(d_model, d_model, rng),
            w_v_sum_src: xavier(d_model, d_model, rng),
            w_o: xavier(d_model, d_model, rng),
        }
    }

    pub fn zeros(d_model: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_heads,
            w_q: Array2::zeros((d_model, d_model)),
            w_k: Array2::zeros((d_model, d_model)),
            w_v: Array2::zeros((d_model, d_model)),
            b_q: TypedBias::zeros(d_model),
            b_k: TypedBias::zeros(d_model),
            b_v: TypedBias::zeros(d_model),
            w_k_sum_src: Array2::zeros((d_model, d_model)),
            w_v_sum_src: Array2::zeros((d_model, d_model)),
            w_o: Array2::zeros((d_model, d_model)),
        }
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.w_k_sum_src, &self.w_v_sum_src, &self.w_o]
        {
            out.extend(m.iter());
        }
        for b in [&self.b_q, &self.b_k, &self.b_v] {
            out.extend(b.music.iter());
            out.extend(b.summary.iter());
        }
    }

    pub(crate) fn read_flat(&mut self, it: &mut std::slice::Iter<'_, f64>) {
        for m in [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_k_sum_src,
            &mut self.w_v_sum_src,
            &mut self.w_o,
        ] {
            fill(m.iter_mut(), it);
        }
        for b in [&mut self.b_q, &mut self.b_k, &mut self.b_v] {
            fill(b.music.iter_mut(), it);
            fill(b.summary.iter_mut(), it);
        }
    }
}

pub(crate) fn fill<'a>(
    dst: impl Iterator<Item = &'a mut f64>,
    it: &mut std::slice::Iter<'_, f64>,
) {
    for x in dst {
        *x = *it.next().expect("flat parameter underrun");
    }
}

/// Attention weights of one step, ragged per query row; entry order follows
/// the layout's allowed columns, innermost stride is the head.
#[derive(Clone, Debug)]
pub struct AttnWeights {
    offsets: Vec<usize>,
    w: Vec<f64>,
    n_heads: usize,
}

impl AttnWeights {
    /// Weights of one (row, head) pair, aligned with `csr.row(r)`.
    pub fn row_weights(&self, r: usize, head: usize) -> Vec<f64> {
        let h = self.n_heads;
        self.w[self.offsets[r] * h..self.offsets[r + 1] * h]
            .iter()
            .skip(head)
            .step_by(h)
            .copied()
            .collect()
    }
}

/// Multi-head masked attention over pre-projected Q/K/V, computing only the
/// allowed query-source pairs. Disallowed pairs never enter the softmax, so
/// their weights are exactly zero.
fn mha_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    csr: &Csr,
    n_heads: usize,
) -> Result<(Array2<f64>, AttnWeights), AttnError> {
    let (t, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((t, d));
    let outs = out.as_slice_mut().unwrap();
    let mut w = vec![0.0f64; csr.nnz() * n_heads];
    let mut logits = Vec::new();
    for r in 0..t {
        let cols = csr.row(r);
        if cols.is_empty() {
            return Err(AttnError::EmptyRow { row: r });
        }
        let base = csr.offset(r) * n_heads;
        for h in 0..n_heads {
            let hq = &qs[r * d + h * dh..r * d + (h + 1) * dh];
            logits.clear();
            let mut max = f64::NEG_INFINITY;
            for &c in cols {
                let hk = &ks[c as usize * d + h * dh..c as usize * d + (h + 1) * dh];
                let z = dot(hq, hk) * scale;
                max = max.max(z);
                logits.push(z);
            }
            let mut sum = 0.0;
            for z in logits.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            let ho = &mut outs[r * d + h * dh..r * d + (h + 1) * dh];
            for (li, &c) in cols.iter().enumerate() {
                let wi = logits[li] / sum;
                w[base + li * n_heads + h] = wi;
                let hv = &vs[c as usize * d + h * dh..c as usize * d + (h + 1) * dh];
                for (o, &x) in ho.iter_mut().zip(hv) {
                    *o += wi * x;
                }
            }
        }
    }
    let offsets = (0..=t)
        .map(|r| if r < t { csr.offset(r) } else { csr.nnz() })
        .collect();
    Ok((out, AttnWeights { offsets, w, n_heads }))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward of `mha_forward`: gradients w.r.t. projected Q, K, V.
fn mha_backward(
    d_out: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    csr: &Csr,
    weights: &AttnWeights,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = q.dim();
    let n_heads = weights.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().unwrap();
    let ks = k.as_slice().unwrap();
    let vs = v.as_slice().unwrap();
    let dos = d_out.as_slice().unwrap();
    let mut dq = Array2::<f64>::zeros(q.dim());
    let mut dk = Array2::<f64>::zeros(k.dim());
    let mut dv = Array2::<f64>::zeros(v.dim());
    let dqs = dq.as_slice_mut().unwrap();
    let dks = dk.as_slice_mut().unwrap();
    let dvs = dv.as_slice_mut().unwrap();
    let mut da = Vec::new();
    for r in 0..t {
        let cols = csr.row(r);
        let base = weights.offsets[r] * n_heads;
        for h in 0..n_heads {
            let hdo = &dos[r * d + h * dh..r * d + (h + 1) * dh];
            // dA_c = dOut·V_c ; softmax backward: dz_c = w_c (dA_c − Σ w dA)
            da.clear();
            let mut s = 0.0;
            for (li, &c) in cols.iter().enumerate() {
                let hv = &vs[c as usize * d + h * dh..c as usize * d + (h + 1) * dh];
                let a = dot(hdo, hv);
                s += a * weights.w[base + li * n_heads + h];
                da.push(a);
            }
            for (li, &c) in cols.iter().enumerate() {
                let c = c as usize;
                let wi = weights.w[base + li * n_heads + h];
                let dz = wi * (da[li] - s) * scale;
                let hq = r * d + h * dh;
                let hk = c * d + h * dh;
                for j in 0..dh {
                    dqs[hq + j] += dz * ks[hk + j];
                    dks[hk + j] += dz * qs[hq + j];
                    dvs[hk + j] += wi * hdo[j];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Forward tape of one `attend` call.
pub struct AttendTape {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    concat: Array2<f64>,
    pub weights: AttnWeights,
}

fn project_queries(
    targets: &Array2<f64>,
    kind: TokKind,
    params: &AttentionParams,
) -> Array2<f64> {
    let mut q = targets.dot(&params.w_q);
    q += params.b_q.get(kind);
    q
}

/// Keys and values for a mixed-kind source matrix. Summary rows route
/// through the separate projections when `summary_separate` (the aggregation
/// step); biases are always per-kind.
fn project_sources(
    sources: &Array2<f64>,
    kinds: &[TokKind],
    summary_separate: bool,
    params: &AttentionParams,
) -> (Array2<f64>, Array2<f64>) {
    let mut k = sources.dot(&params.w_k);
    let mut v = sources.dot(&params.w_v);
    for (r, &kind) in kinds.iter().enumerate() {
        if kind == TokKind::Summary && summary_separate {
            let row = sources.row(r);
            k.row_mut(r).assign(&row.dot(&params.w_k_sum_src));
            v.row_mut(r).assign(&row.dot(&params.w_v_sum_src));
        }
        let (bk, bv) = (params.b_k.get(kind), params.b_v.get(kind));
        k.row_mut(r).zip_mut_with(bk, |x, b| *x += b);
        v.row_mut(r).zip_mut_with(bv, |x, b| *x += b);
    }
    (k, v)
}

/// Masked multi-head attention with the sharing scheme: project, attend over
/// the allowed pairs only, concatenate heads, apply the output projection.
pub fn attend(
    targets: &Array2<f64>,
    target_kind: TokKind,
    sources: &Array2<f64>,
    source_kinds: &[TokKind],
    summary_separate: bool,
    csr: &Csr,
    params: &AttentionParams,
) -> Result<(Array2<f64>, AttendTape), AttnError> {
    let d = params.d_model;
    if targets.ncols() != d || sources.ncols() != d {
        return Err(AttnError::Shape(format!(
            "state width {}/{} vs d_model {d}",
            targets.ncols(),
            sources.ncols()
        )));
    }
    if csr.rows() != targets.nrows() || csr.cols() != sources.nrows() {
        return Err(AttnError::Shape(format!(
            "layout {}x{} vs targets {} sources {}",
            csr.rows(),
            csr.cols(),
            targets.nrows(),
            sources.nrows()
        )));
    }
    if source_kinds.len() != sources.nrows() {
        return Err(AttnError::Shape("kind tags vs source rows".into()));
    }
    let q = project_queries(targets, target_kind, params);
    let (k, v) = project_sources(sources, source_kinds, summary_separate, params);
    let (concat, weights) = mha_forward(&q, &k, &v, csr, params.n_heads)?;
    let out = concat.dot(&params.w_o);
    Ok((out, AttendTape { q, k, v, concat, weights }))
}

/// Backward of `attend`. Accumulates parameter gradients into `grads`
/// (an `AttentionParams` of matching shapes) and returns gradients w.r.t.
/// the target and source state matrices.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    d_out: &Array2<f64>,
    targets: &Array2<f64>,
    target_kind: TokKind,
    sources: &Array2<f64>,
    source_kinds: &[TokKind],
    summary_separate: bool,
    csr: &Csr,
    params: &AttentionParams,
    tape: &AttendTape,
    grads: &mut AttentionParams,
) -> (Array2<f64>, Array2<f64>) {
    let d_concat = d_out.dot(&params.w_o.t());
    grads.w_o += &tape.concat.t().dot(d_out);
    let (dq, mut dk, mut dv) =
        mha_backward(&d_concat, &tape.q, &tape.k, &tape.v, csr, &tape.weights);

    let d_targets = dq.dot(&params.w_q.t());
    grads.w_q += &targets.t().dot(&dq);
    *grads.b_q.get_mut(target_kind) += &dq.sum_axis(ndarray::Axis(0));

    // biases first (kind-wise row sums), then split K/V by projection route
    let mut d_sources = Array2::<f64>::zeros(sources.dim());
    for (r, &kind) in source_kinds.iter().enumerate() {
        *grads.b_k.get_mut(kind) += &dk.row(r);
        *grads.b_v.get_mut(kind) += &dv.row(r);
    }
    if summary_separate {
        // move summary rows out of the shared-projection path
        let mut dk_sum = Array2::<f64>::zeros(dk.dim());
        let mut dv_sum = Array2::<f64>::zeros(dv.dim());
        for (r, &kind) in source_kinds.iter().enumerate() {
            if kind == TokKind::Summary {
                dk_sum.row_mut(r).assign(&dk.row(r));
                dv_sum.row_mut(r).assign(&dv.row(r));
                dk.row_mut(r).fill(0.0);
                dv.row_mut(r).fill(0.0);
            }
        }
        grads.w_k_sum_src += &sources.t().dot(&dk_sum);
        grads.w_v_sum_src += &sources.t().dot(&dv_sum);
        d_sources += &dk_sum.dot(&params.w_k_sum_src.t());
        d_sources += &dv_sum.dot(&params.w_v_sum_src.t());
    }
    grads.w_k += &sources.t().dot(&dk);
    grads.w_v += &sources.t().dot(&dv);
    d_sources += &dk.dot(&params.w_k.t());
    d_sources += &dv.dot(&params.w_v.t());

    (d_targets, d_sources)
}

/// How disallowed pairs are excluded in the dense reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Disallowed logits are −∞: weights exactly zero.
    Exact,
    /// Disallowed logits get a large negative additive term (a
    /// finite-precision kernel convention); weights are merely tiny.
    Additive(f64),
}

/// Dense reference path: full logit matrix, masking, softmax, values. Used
/// as the full-attention baseline for cost comparisons and as an in-crate
/// cross-check of the sparse kernel.
pub fn dense_attend(
    targets: &Array2<f64>,
    target_kind: TokKind,
    sources: &Array2<f64>,
    source_kinds: &[TokKind],
    summary_separate: bool,
    allowed: &BoolLayout,
    params: &AttentionParams,
    mode: MaskMode,
) -> Result<Array2<f64>, AttnError> {
    let d = params.d_model;
    let n_heads = params.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project_queries(targets, target_kind, params);
    let (k, v) = project_sources(sources, source_kinds, summary_separate, params);
    let (t, s) = (targets.nrows(), sources.nrows());
    let mut concat = Array2::<f64>::zeros((t, d));
    for h in 0..n_heads {
        let span = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., span.clone()]);
        let kh = k.slice(ndarray::s![.., span.clone()]);
        let vh = v.slice(ndarray::s![.., span.clone()]);
        let mut z = qh.dot(&kh.t());
        z *= scale;
        for r in 0..t {
            if allowed.row_ones(r) == 0 {
                return Err(AttnError::EmptyRow { row: r });
            }
            for c in 0..s {
                if !allowed.get(r, c) {
                    match mode {
                        MaskMode::Exact => z[[r, c]] = f64::NEG_INFINITY,
                        MaskMode::Additive(add) => z[[r, c]] += add,
                    }
                }
            }
            let max = z.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..s {
                let e = (z[[r, c]] - max).exp();
                z[[r, c]] = e;
                sum += e;
            }
            for c in 0..s {
                z[[r, c]] /= sum;
            }
        }
        concat.slice_mut(ndarray::s![.., span]).assign(&z.dot(&vh));
    }
    Ok(concat.dot(&params.w_o))
}
