//! Central finite-difference check of every network parameter gradient.
//!
//! Every perturbed loss comes from the exact perturbed network output. The
//! output is computed as base activations plus a propagated activation
//! difference. A single-parameter change enters its layer as a rank-1 update,
//! and linear stages fold into small precomputed products. Activation
//! differences `gelu(x + eps) - gelu(x)` come from a Taylor expansion at the
//! base pre-activation whose truncation error is below double round-off, so
//! no linearization of the network is involved.

use rayon::prelude::*;
use serde::Serialize;

use crate::ecm::kernels::{depthwise_channel_accumulate, depthwise_forward, gelu, gemm, im2col, Geometry, Op};
use crate::ecm::{concat_input, cross_entropy, forward_trace, sample_loss_and_grads, EcnParams, Trace};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, ProbMap, IGNORE_LABEL};

/// Finite-difference agreement of one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub count: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` over the tensor.
    pub rel_err: f64,
    /// Largest elementwise `|a - n| / max(|a|, |n|)`.
    pub max_elem_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude in the tensor.
    pub max_grad: f64,
    /// Elements whose elementwise relative error exceeds the tolerance.
    pub elems_over_tol: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub rel_tol: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.count).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn max_elem_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_elem_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_err).fold(0.0, f64::max)
    }

    pub fn elems_over_tol(&self) -> usize {
        self.tensors.iter().map(|t| t.elems_over_tol).sum()
    }
}

/// Options for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Perturbations evaluated per batch; each costs two network copies.
    pub chunk: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            chunk: 32,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Site {
    Stem { weight: bool },
    Dw { block: usize, weight: bool },
    Expand { block: usize, weight: bool },
    Project { block: usize, weight: bool },
    Head { weight: bool },
}

impl Site {
    fn is_weight(self) -> bool {
        match self {
            Site::Stem { weight }
            | Site::Dw { weight, .. }
            | Site::Expand { weight, .. }
            | Site::Project { weight, .. }
            | Site::Head { weight } => weight,
        }
    }
}

// Same order as the parameter tensors.
fn sites(blocks: usize) -> Vec<Site> {
    let mut s = vec![Site::Stem { weight: true }, Site::Stem { weight: false }];
    for block in 0..blocks {
        for weight in [true, false] {
            s.push(Site::Dw { block, weight });
        }
        for weight in [true, false] {
            s.push(Site::Expand { block, weight });
        }
        for weight in [true, false] {
            s.push(Site::Project { block, weight });
        }
    }
    s.push(Site::Head { weight: true });
    s.push(Site::Head { weight: false });
    s
}

struct Ctx<'a> {
    p: &'a EcnParams<f64>,
    trace: Trace<f64>,
    targets: Vec<u8>,
    count: usize,
    geo: Geometry,
    /// `head_w * proj_w` of the last block, `[classes][hidden]`.
    head_proj: Vec<f64>,
    stem_diff: GeluDiff,
    hidden_diff: Vec<GeluDiff>,
}

fn outer(u: &[f64], rows: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * rows.len());
    for &s in u {
        out.extend(rows.iter().map(|&r| s * r));
    }
    out
}

/// `out[r][..] += sum_i m[r][i] * x[i][..]` for a short, wide product.
fn small_matmul_acc(m: &[f64], rows: usize, x: &[f64], out: &mut [f64]) {
    let inner = m.len() / rows;
    let len = out.len() / rows;
    for (r, o) in out.chunks_exact_mut(len).enumerate() {
        for (i, xi) in x.chunks_exact(len).enumerate().take(inner) {
            let s = m[r * inner + i];
            if s != 0.0 {
                o.iter_mut().zip(xi).for_each(|(o, &v)| *o += s * v);
            }
        }
    }
}

/// Number of stored Taylor terms.
const TAYLOR_TERMS: usize = 14;
/// Bounds on `sup_x |gelu^(k)(x)| / k!` for `k = 1..=TAYLOR_TERMS + 2`.
const TAYLOR_SUP: [f64; TAYLOR_TERMS + 2] = [
    1.13, 0.399, 0.130, 0.0665, 0.0237, 0.00998, 0.00327, 0.00119, 3.56e-4, 1.16e-4, 3.20e-5, 9.45e-6, 2.45e-6,
    6.67e-7, 1.62e-7, 4.13e-8,
];

/// Whether `k` terms suffice for `|eps| <= m`: the remainder bound stays
/// below `1e-18 + 2e-17 * m`, under the round-off of the first-order term.
fn taylor_suffices(k: usize, m: f64) -> bool {
    let mut rem = 0.0;
    let mut pow = m.powi(k as i32);
    for sup in &TAYLOR_SUP[k..] {
        pow *= m;
        rem += sup * pow;
    }
    // Tail past the table decays faster than geometrically for m < 1.
    2.0 * rem <= 1e-18 + 2e-17 * m
}

/// Largest `m` for which `k` terms suffice, for `k = 1..=TAYLOR_TERMS`.
fn taylor_radii() -> [f64; TAYLOR_TERMS] {
    let mut radii = [0.0; TAYLOR_TERMS];
    for (i, r) in radii.iter_mut().enumerate() {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if taylor_suffices(i + 1, mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        *r = lo;
    }
    radii
}

/// Terms needed for `|eps| <= m`, or `None` when `m` exceeds every radius.
fn taylor_terms(radii: &[f64; TAYLOR_TERMS], m: f64) -> Option<usize> {
    radii.iter().position(|&r| m <= r).map(|i| i + 1)
}

/// Taylor coefficients `gelu^(k)(x) / k!`, `k = 1..=TAYLOR_TERMS`, at a set
/// of base points, so `gelu(x + eps) - gelu(x)` is evaluated without
/// cancellation. Stored term-major so rows of points evaluate in lockstep.
struct GeluDiff {
    points: Vec<f64>,
    coef: Vec<f64>,
    radii: [f64; TAYLOR_TERMS],
}

impl GeluDiff {
    fn new(points: &[f64]) -> Self {
        let n = points.len();
        let mut coef = vec![0.0; n * TAYLOR_TERMS];
        for (i, &x) in points.iter().enumerate() {
            for (k, c) in gelu_taylor(x).into_iter().enumerate() {
                coef[k * n + i] = c;
            }
        }
        Self {
            points: points.to_vec(),
            coef,
            radii: taylor_radii(),
        }
    }

    /// Replaces each `eps[q]` by `gelu(x + eps[q]) - gelu(x)` for
    /// `x = points[start + q]`.
    fn apply(&self, start: usize, eps: &mut [f64]) {
        let len = eps.len();
        let xs = &self.points[start..start + len];
        let m = eps.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let Some(terms) = taylor_terms(&self.radii, m) else {
            for (e, &x) in eps.iter_mut().zip(xs) {
                *e = gelu(x + *e) - gelu(x);
            }
            return;
        };
        let n = self.points.len();
        let mut acc = [0.0; 64];
        for piece in (0..len).step_by(acc.len()) {
            let w = acc.len().min(len - piece);
            let (acc, e) = (&mut acc[..w], &mut eps[piece..piece + w]);
            acc.fill(0.0);
            for k in (0..terms).rev() {
                let c = &self.coef[k * n + start + piece..k * n + start + piece + w];
                for ((a, &e), &ck) in acc.iter_mut().zip(e.iter()).zip(c) {
                    *a = *a * e + ck;
                }
            }
            e.iter_mut().zip(acc.iter()).for_each(|(e, &a)| *e *= a);
        }
    }
}

/// `gelu^(k)(x) / k!` for `k = 1..=TAYLOR_TERMS`.
fn gelu_taylor(x: f64) -> [f64; TAYLOR_TERMS] {
    let pdf = (-0.5 * x * x).exp() * 0.398_942_280_401_432_7;
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    // Probabilists' Hermite polynomials He_0 .. He_K at x.
    let mut he = [0.0; TAYLOR_TERMS + 1];
    he[0] = 1.0;
    he[1] = x;
    for m in 1..TAYLOR_TERMS {
        he[m + 1] = x * he[m] - m as f64 * he[m - 1];
    }
    // gelu = x * cdf, so gelu^(k) = x * cdf^(k) + k * cdf^(k-1), with
    // cdf^(m) = (-1)^(m-1) He_{m-1} pdf for m >= 1.
    let d = |m: usize| {
        if (m - 1).is_multiple_of(2) {
            he[m - 1] * pdf
        } else {
            -he[m - 1] * pdf
        }
    };
    let mut out = [0.0; TAYLOR_TERMS];
    let mut fact = 1.0;
    for k in 1..=TAYLOR_TERMS {
        fact *= k as f64;
        let prev = if k == 1 { cdf } else { d(k - 1) };
        out[k - 1] = (x * d(k) + k as f64 * prev) / fact;
    }
    out
}

/// An activation difference, dense `[channels][n * px]` or `u[c] * rows`.
enum Delta {
    Dense(Vec<f64>),
    Rank1 { u: Vec<f64>, rows: Vec<f64> },
}

impl Delta {
    fn dense(self) -> Vec<f64> {
        match self {
            Delta::Dense(v) => v,
            Delta::Rank1 { u, rows } => outer(&u, &rows),
        }
    }

    /// `m * self` for a `[rows][channels]` matrix `m`.
    fn project(&self, m: &[f64], rows: usize, big_n: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * big_n];
        match self {
            Delta::Dense(v) => small_matmul_acc(m, rows, v, &mut out),
            Delta::Rank1 { u, rows: r } => {
                let inner = u.len();
                for (i, o) in out.chunks_exact_mut(big_n).enumerate() {
                    let s: f64 = (0..inner).map(|c| m[i * inner + c] * u[c]).sum();
                    o.iter_mut().zip(r).for_each(|(o, &v)| *o = s * v);
                }
            }
        }
        out
    }
}

impl Ctx<'_> {
    fn px(&self) -> usize {
        self.geo.pixels()
    }

    fn geo_n(&self, n: usize) -> Geometry {
        Geometry { batch: n, ..self.geo }
    }

    /// Elements per weight row. Perturbations within a row share the
    /// direction of their rank-1 update.
    fn row_len(&self, site: Site) -> usize {
        let a = self.p.arch();
        if !site.is_weight() {
            return 1;
        }
        match site {
            Site::Stem { .. } => a.in_channels() * a.stem_kernel * a.stem_kernel,
            Site::Dw { .. } => a.dw_kernel * a.dw_kernel,
            Site::Expand { .. } | Site::Head { .. } => a.width,
            Site::Project { .. } => a.hidden(),
        }
    }

    fn site_len(&self, site: Site) -> usize {
        let a = self.p.arch();
        let rows = match site {
            Site::Stem { .. } | Site::Dw { .. } | Site::Project { .. } => a.width,
            Site::Expand { .. } => a.hidden(),
            Site::Head { .. } => a.classes,
        };
        rows * self.row_len(site)
    }

    /// Mean loss of each copy given logit differences `[classes][n * px]`.
    fn losses(&self, dlogits: &[f64], n: usize) -> Vec<f64> {
        let c = self.p.classes();
        let px = self.px();
        (0..n)
            .map(|k| {
                let mut one = Vec::with_capacity(c * px);
                for ch in 0..c {
                    let d = &dlogits[ch * n * px + k * px..ch * n * px + (k + 1) * px];
                    let base = &self.trace.logits[ch * px..(ch + 1) * px];
                    one.extend(base.iter().zip(d).map(|(b, d)| b + d));
                }
                cross_entropy(&one, &self.targets, c, 1.0).0 / self.count as f64
            })
            .collect()
    }

    /// Logit differences caused by a difference `da` of the input of block `k`.
    fn via_act(&self, k: usize, da: Delta, n: usize) -> Vec<f64> {
        let a = self.p.arch();
        let big_n = n * self.px();
        if k == a.blocks {
            return da.project(&self.p.head_w, a.classes, big_n);
        }
        let bp = &self.p.blocks[k];
        let kk = a.dw_kernel * a.dw_kernel;
        let dhp = match &da {
            Delta::Dense(v) => {
                let zero_bias = vec![0.0; a.width];
                let ddw = depthwise_forward(v, &bp.dw_w, &zero_bias, a.width, a.dw_kernel, self.geo_n(n));
                let mut dhp = vec![0.0; a.hidden() * big_n];
                gemm(a.hidden(), a.width, big_n, &bp.exp_w, Op::N, &ddw, Op::N, 0.0, &mut dhp);
                Delta::Dense(dhp)
            }
            Delta::Rank1 { u, rows } => {
                let mut nonzero = u.iter().enumerate().filter(|(_, v)| **v != 0.0);
                if let (Some((c, &scale)), None) = (nonzero.next(), nonzero.next()) {
                    // One channel: a single depthwise filter, then a column of exp_w.
                    let w: Vec<f64> = bp.dw_w[c * kk..(c + 1) * kk].iter().map(|v| v * scale).collect();
                    let mut conv = vec![0.0; big_n];
                    depthwise_channel_accumulate(rows, &w, a.dw_kernel, self.geo_n(n), &mut conv);
                    let col = (0..a.hidden()).map(|j| bp.exp_w[j * a.width + c]).collect();
                    Delta::Rank1 { u: col, rows: conv }
                } else {
                    // exp_w * diag(u) * dw_w: the combined kernel applied to `rows`.
                    let scaled: Vec<f64> = (0..a.width)
                        .flat_map(|c| bp.dw_w[c * kk..(c + 1) * kk].iter().map(move |&w| w * u[c]))
                        .collect();
                    let mut kernel = vec![0.0; a.hidden() * kk];
                    gemm(
                        a.hidden(),
                        a.width,
                        kk,
                        &bp.exp_w,
                        Op::N,
                        &scaled,
                        Op::N,
                        0.0,
                        &mut kernel,
                    );
                    let cols = im2col(rows, 1, a.dw_kernel, self.geo_n(n));
                    let mut dhp = vec![0.0; a.hidden() * big_n];
                    gemm(a.hidden(), kk, big_n, &kernel, Op::N, &cols, Op::N, 0.0, &mut dhp);
                    Delta::Dense(dhp)
                }
            }
        };
        self.via_hidden_pre(k, Some(da), dhp, n)
    }

    /// Logit differences from a hidden pre-activation difference `dhp` of
    /// block `k`, with `da` the difference of the block input (skip path).
    fn via_hidden_pre(&self, k: usize, da: Option<Delta>, dhp: Delta, n: usize) -> Vec<f64> {
        let a = self.p.arch();
        let px = self.px();
        let big_n = n * px;
        let diff = &self.hidden_diff[k];
        let last = k + 1 == a.blocks;
        let mut out = match (&da, last) {
            (Some(d), true) => d.project(&self.p.head_w, a.classes, big_n),
            _ => vec![0.0; a.classes * big_n],
        };
        let mut dense_dh = if last {
            Vec::new()
        } else {
            vec![0.0; a.hidden() * big_n]
        };
        let mut buf = vec![0.0; px];
        for j in 0..a.hidden() {
            for copy in 0..n {
                let span = copy * px..(copy + 1) * px;
                match &dhp {
                    Delta::Dense(v) => buf.copy_from_slice(&v[j * big_n + span.start..j * big_n + span.end]),
                    Delta::Rank1 { u, rows } => {
                        let s = u[j];
                        buf.iter_mut().zip(&rows[span.clone()]).for_each(|(b, &r)| *b = s * r);
                    }
                }
                diff.apply(j * px, &mut buf);
                if last {
                    // The last block feeds the head only: fold dh into logits now.
                    for c in 0..a.classes {
                        let m = self.head_proj[c * a.hidden() + j];
                        let o = &mut out[c * big_n + span.start..c * big_n + span.end];
                        o.iter_mut().zip(&buf).for_each(|(o, &v)| *o += m * v);
                    }
                } else {
                    dense_dh[j * big_n + span.start..j * big_n + span.end].copy_from_slice(&buf);
                }
            }
        }
        if last {
            return out;
        }
        let mut next = da.map(Delta::dense).unwrap_or_else(|| vec![0.0; a.width * big_n]);
        gemm(
            a.width,
            a.hidden(),
            big_n,
            &self.p.blocks[k].proj_w,
            Op::N,
            &dense_dh,
            Op::N,
            1.0,
            &mut next,
        );
        self.via_act(k + 1, Delta::Dense(next), n)
    }

    /// Logit differences when only hidden row `j` of block `k` changes, by `rows`.
    fn via_hidden_row(&self, k: usize, j: usize, rows: Vec<f64>, n: usize) -> Vec<f64> {
        let a = self.p.arch();
        if k + 1 == a.blocks {
            let m: Vec<f64> = (0..a.classes).map(|c| self.head_proj[c * a.hidden() + j]).collect();
            return outer(&m, &rows);
        }
        let proj = &self.p.blocks[k].proj_w;
        let u = (0..a.width).map(|o| proj[o * a.hidden() + j]).collect();
        self.via_act(k + 1, Delta::Rank1 { u, rows }, n)
    }

    /// Perturbed losses `(+h, -h)` for `elems`, which all lie in one weight row.
    fn eval_chunk(&self, site: Site, elems: &[usize], step: f64) -> Vec<(f64, f64)> {
        let a = self.p.arch();
        let px = self.px();
        let n = 2 * elems.len();
        let tr = &self.trace;
        let row_len = self.row_len(site);
        let row = elems[0] / row_len;
        debug_assert!(elems.iter().all(|e| e / row_len == row));
        let weight = site.is_weight();
        // Per copy: signed perturbation and column within the row.
        let copies: Vec<(f64, usize)> = elems
            .iter()
            .flat_map(|&e| [(step, e % row_len), (-step, e % row_len)])
            .collect();
        // `[n][px]`: the perturbation times the parameter's input, per copy.
        let rows_of = |input: &[f64]| -> Vec<f64> {
            let mut rows = Vec::with_capacity(n * px);
            for &(d, col) in &copies {
                if weight {
                    rows.extend(input[col * px..(col + 1) * px].iter().map(|&v| d * v));
                } else {
                    rows.extend(std::iter::repeat_n(d, px));
                }
            }
            rows
        };
        let unit = |i: usize| -> Vec<f64> { (0..a.width).map(|c| if c == i { 1.0 } else { 0.0 }).collect() };
        let dlogits = match site {
            Site::Head { .. } => {
                let rows = rows_of(tr.acts.last().expect("non-empty"));
                let mut out = vec![0.0; a.classes * n * px];
                out[row * n * px..(row + 1) * n * px].copy_from_slice(&rows);
                out
            }
            Site::Project { block, .. } => {
                let rows = rows_of(&tr.blocks[block].hidden);
                self.via_act(block + 1, Delta::Rank1 { u: unit(row), rows }, n)
            }
            Site::Expand { block, .. } => {
                let mut rows = rows_of(&tr.blocks[block].dw);
                for copy in rows.chunks_exact_mut(px) {
                    self.hidden_diff[block].apply(row * px, copy);
                }
                self.via_hidden_row(block, row, rows, n)
            }
            Site::Dw { block, .. } => {
                let src = &tr.acts[block][row * px..(row + 1) * px];
                let kk = a.dw_kernel * a.dw_kernel;
                let mut ddw = vec![0.0; n * px];
                for (i, &(d, col)) in copies.iter().enumerate() {
                    let out = &mut ddw[i * px..(i + 1) * px];
                    if weight {
                        let mut kernel = vec![0.0; kk];
                        kernel[col] = d;
                        depthwise_channel_accumulate(src, &kernel, a.dw_kernel, self.geo, out);
                    } else {
                        out.fill(d);
                    }
                }
                let exp = &self.p.blocks[block].exp_w;
                let u = (0..a.hidden()).map(|j| exp[j * a.width + row]).collect();
                self.via_hidden_pre(block, None, Delta::Rank1 { u, rows: ddw }, n)
            }
            Site::Stem { .. } => {
                let mut rows = rows_of(&tr.stem_cols);
                for copy in rows.chunks_exact_mut(px) {
                    self.stem_diff.apply(row * px, copy);
                }
                self.via_act(0, Delta::Rank1 { u: unit(row), rows }, n)
            }
        };
        let l = self.losses(&dlogits, n);
        (0..elems.len()).map(|i| (l[2 * i], l[2 * i + 1])).collect()
    }
}

/// Compares analytic gradients of the mean cross-entropy against central
/// differences for every parameter, in `f64`.
pub fn check_gradients(
    params: &EcnParams<f64>,
    lower: &ProbMap,
    upper: &ProbMap,
    target: &LabelMap,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let valid = target.data().iter().filter(|&&t| t != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::invalid("gradient check target has no labelled pixels"));
    }
    if !(opts.step > 0.0 && opts.rel_tol > 0.0) {
        return Err(Error::invalid("gradient check step and tolerance must be positive"));
    }
    let (loss_sum, count, grads) = sample_loss_and_grads(params, lower, upper, target, 1.0 / valid as f64)?;
    let a = params.arch();
    let geo = Geometry {
        batch: 1,
        height: lower.height(),
        width: lower.width(),
    };
    let input: Vec<f64> = concat_input(lower, upper);
    let last = params.blocks.last().expect("at least one block");
    let mut head_proj = vec![0.0; a.classes * a.hidden()];
    gemm(
        a.classes,
        a.width,
        a.hidden(),
        &params.head_w,
        Op::N,
        &last.proj_w,
        Op::N,
        0.0,
        &mut head_proj,
    );
    let trace = forward_trace(params, &input, geo);
    let ctx = Ctx {
        p: params,
        targets: target.data().to_vec(),
        count,
        geo,
        head_proj,
        stem_diff: GeluDiff::new(&trace.stem_pre),
        hidden_diff: trace.blocks.iter().map(|b| GeluDiff::new(&b.hidden_pre)).collect(),
        trace,
    };

    let names = params.tensor_names();
    let analytic = grads.tensors();
    let chunk = opts.chunk.max(1);
    let tensors = sites(a.blocks)
        .into_iter()
        .enumerate()
        .map(|(ti, site)| {
            let all: Vec<usize> = (0..ctx.site_len(site)).collect();
            let pieces: Vec<&[usize]> = all.chunks(ctx.row_len(site)).flat_map(|r| r.chunks(chunk)).collect();
            let numeric: Vec<f64> = pieces
                .par_iter()
                .flat_map_iter(|elems| {
                    ctx.eval_chunk(site, elems, opts.step)
                        .into_iter()
                        .map(|(lp, lm)| (lp - lm) / (2.0 * opts.step))
                })
                .collect();
            compare(&names[ti], analytic[ti], &numeric, opts.rel_tol)
        })
        .collect();
    Ok(GradCheckReport {
        step: opts.step,
        rel_tol: opts.rel_tol,
        loss: loss_sum / count as f64,
        tensors,
    })
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) -> TensorCheck {
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut t = TensorCheck {
        name: name.to_string(),
        count: analytic.len(),
        rel_err: 0.0,
        max_elem_rel_err: 0.0,
        max_abs_err: 0.0,
        max_grad: 0.0,
        elems_over_tol: 0,
        passed: false,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let d = (a - n).abs();
        diff2 += d * d;
        a2 += a * a;
        n2 += n * n;
        let rel = if d == 0.0 { 0.0 } else { d / a.abs().max(n.abs()) };
        t.max_elem_rel_err = t.max_elem_rel_err.max(rel);
        t.max_abs_err = t.max_abs_err.max(d);
        t.max_grad = t.max_grad.max(a.abs());
        if rel > tol {
            t.elems_over_tol += 1;
        }
    }
    t.rel_err = if diff2 == 0.0 {
        0.0
    } else {
        diff2.sqrt() / a2.max(n2).sqrt()
    };
    let finite = analytic.iter().chain(numeric).all(|v| v.is_finite());
    t.passed = finite && t.rel_err <= tol;
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::EcnArch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probmap(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMap {
        let n = h * w;
        let mut data = vec![0.0f32; c * n];
        for i in 0..n {
            let v: Vec<f32> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f32 = v.iter().sum();
            for k in 0..c {
                data[k * n + i] = v[k] / s;
            }
        }
        ProbMap::new(c, h, w, data).unwrap()
    }

    fn fixture(arch: EcnArch, seed: u64) -> (EcnParams<f64>, ProbMap, ProbMap, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EcnParams::<f64>::kaiming(arch, seed).unwrap();
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let (h, w) = (6, 5);
        let lower = random_probmap(&mut rng, arch.classes, h, w);
        let upper = random_probmap(&mut rng, arch.classes, h, w);
        let labels: Vec<u8> = (0..h * w)
            .map(|i| {
                if i % 7 == 0 {
                    IGNORE_LABEL
                } else {
                    (i % arch.classes) as u8
                }
            })
            .collect();
        (p, lower, upper, LabelMap::new(h, w, labels).unwrap())
    }

    /// Plain central differences with a full forward pass per evaluation.
    fn brute_force(
        p: &EcnParams<f64>,
        lower: &ProbMap,
        upper: &ProbMap,
        target: &LabelMap,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let loss = |q: &EcnParams<f64>| {
            let (l, c, _) = sample_loss_and_grads(q, lower, upper, target, 1.0).unwrap();
            l / c as f64
        };
        let mut q = p.clone();
        (0..p.tensors().len())
            .map(|ti| {
                (0..p.tensors()[ti].len())
                    .map(|e| {
                        let orig = q.tensors()[ti][e];
                        *q.tensors_mut()[ti].get_mut(e).unwrap() = orig + step;
                        let lp = loss(&q);
                        *q.tensors_mut()[ti].get_mut(e).unwrap() = orig - step;
                        let lm = loss(&q);
                        *q.tensors_mut()[ti].get_mut(e).unwrap() = orig;
                        (lp - lm) / (2.0 * step)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn propagated_differences_match_full_forward_passes() {
        for blocks in [1, 2, 3] {
            let arch = EcnArch {
                classes: 3,
                width: 4,
                blocks,
                stem_kernel: 3,
                dw_kernel: 3,
            };
            let (p, lower, upper, target) = fixture(arch, blocks as u64);
            let brute = brute_force(&p, &lower, &upper, &target, 1e-3);
            let (_, count, grads) = sample_loss_and_grads(&p, &lower, &upper, &target, 1.0).unwrap();
            let opts = GradCheckOptions {
                chunk: 3,
                ..GradCheckOptions::default()
            };
            let r = check_gradients(&p, &lower, &upper, &target, opts).unwrap();
            assert_eq!(r.checked(), arch.param_count());
            // Both routes evaluate the same perturbed losses, so their
            // differences to the analytic gradient agree to round-off.
            for (ti, t) in r.tensors.iter().enumerate() {
                let analytic: Vec<f64> = grads.tensors()[ti].iter().map(|g| g / count as f64).collect();
                let from_brute = compare(&t.name, &analytic, &brute[ti], 1e-4);
                assert!(
                    (from_brute.max_abs_err - t.max_abs_err).abs() < 1e-10,
                    "{}: {} vs {}",
                    t.name,
                    from_brute.max_abs_err,
                    t.max_abs_err
                );
            }
        }
    }

    #[test]
    fn small_networks_pass() {
        let arch = EcnArch {
            classes: 3,
            width: 6,
            blocks: 2,
            stem_kernel: 3,
            dw_kernel: 5,
        };
        for seed in 0..3 {
            let (p, lower, upper, target) = fixture(arch, seed);
            let r = check_gradients(&p, &lower, &upper, &target, GradCheckOptions::default()).unwrap();
            assert!(r.passed(), "{:#?}", r.tensors);
            assert!(r.max_abs_err() < 1e-5);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let arch = EcnArch {
            classes: 2,
            width: 3,
            blocks: 1,
            stem_kernel: 1,
            dw_kernel: 3,
        };
        let (p, lower, upper, target) = fixture(arch, 7);
        let (_, count, grads) = sample_loss_and_grads(&p, &lower, &upper, &target, 1.0).unwrap();
        let mut analytic: Vec<f64> = grads.tensors()[0].iter().map(|g| g / count as f64).collect();
        let brute = brute_force(&p, &lower, &upper, &target, 1e-3);
        assert!(compare("stem.weight", &analytic, &brute[0], 1e-4).passed);
        analytic[0] *= 1.01;
        assert!(!compare("stem.weight", &analytic, &brute[0], 1e-4).passed);
    }

    #[test]
    fn gelu_differences_match_direct_evaluation() {
        let xs: Vec<f64> = (0..161).map(|i| -8.0 + 0.1 * i as f64).collect();
        let diff = GeluDiff::new(&xs);
        for (i, &x) in xs.iter().enumerate() {
            for eps in [-0.3, -0.1, -0.0371, -1e-3, 1e-7, 2e-3, 0.05, 0.0999, 0.25] {
                let direct = gelu(x + eps) - gelu(x);
                let mut got = [eps];
                diff.apply(i, &mut got);
                let got = got[0];
                assert!(
                    (got - direct).abs() <= 4e-16 * (1.0 + x.abs()),
                    "x {x} eps {eps}: {got} vs {direct}"
                );
            }
        }
    }

    #[test]
    fn taylor_bound_table_covers_coefficients() {
        for i in 0..=4000 {
            let x = -20.0 + 0.01 * i as f64;
            for (k, c) in gelu_taylor(x).iter().enumerate() {
                assert!(c.abs() <= TAYLOR_SUP[k], "k {} x {x}: {c}", k + 1);
            }
        }
        let radii = taylor_radii();
        assert_eq!(taylor_terms(&radii, 0.0), Some(1));
        assert!(taylor_terms(&radii, 0.1).is_some());
        assert!(taylor_terms(&radii, 0.5).is_none());
        for (k, &r) in radii.iter().enumerate() {
            assert!(taylor_suffices(k + 1, r) && !taylor_suffices(k + 1, r * 1.01 + 1e-300));
        }
    }

    #[test]
    fn all_ignore_target_rejected() {
        let arch = EcnArch {
            classes: 2,
            width: 2,
            blocks: 1,
            stem_kernel: 1,
            dw_kernel: 1,
        };
        let p = EcnParams::<f64>::zeros(arch).unwrap();
        let m = ProbMap::uniform(2, 2, 2).unwrap();
        let t = LabelMap::filled(2, 2, IGNORE_LABEL).unwrap();
        assert!(check_gradients(&p, &m, &m, &t, GradCheckOptions::default()).is_err());
    }
}
