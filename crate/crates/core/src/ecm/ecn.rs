//! Error-correction network: a small fully-convolutional net mapping the
//! concatenation of two `C`-channel probability maps to `C` corrected class
//! probabilities at the same resolution.
//!
//! Layout: stem `k x k` conv (2C -> width) + GELU; `blocks` residual blocks of
//! depthwise conv, pointwise expansion (x4) + GELU and pointwise projection
//! with an identity skip; pointwise head (width -> C); per-pixel softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{
    add_bias, depthwise_backward, depthwise_forward, gelu, gelu_grad, gemm, im2col, row_sums_into, Geometry, Op, Scalar,
};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, ProbMap, IGNORE_LABEL};

/// Hidden expansion factor of the residual MLP.
pub const EXPANSION: usize = 4;

/// Shape hyper-parameters of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcnArch {
    pub classes: usize,
    pub width: usize,
    pub blocks: usize,
    pub stem_kernel: usize,
    pub dw_kernel: usize,
}

impl EcnArch {
    /// The standard network: width 96, two residual blocks, 3x3 stem, 7x7 depthwise.
    pub fn standard(classes: usize) -> Self {
        Self {
            classes,
            width: 96,
            blocks: 2,
            stem_kernel: 3,
            dw_kernel: 7,
        }
    }

    pub fn hidden(&self) -> usize {
        self.width * EXPANSION
    }

    pub fn in_channels(&self) -> usize {
        2 * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::invalid(format!(
                "ECN class count must be in [2, 255], got {}",
                self.classes
            )));
        }
        if self.width == 0 {
            return Err(Error::invalid("ECN width must be >= 1"));
        }
        for (name, k) in [("stem", self.stem_kernel), ("depthwise", self.dw_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::invalid(format!("{name} kernel size must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in serialization order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let (w, hd, k, kd) = (self.width, self.hidden(), self.stem_kernel, self.dw_kernel);
        let mut shapes = vec![vec![w, self.in_channels(), k, k], vec![w]];
        for _ in 0..self.blocks {
            shapes.extend([
                vec![w, 1, kd, kd],
                vec![w],
                vec![hd, w, 1, 1],
                vec![hd],
                vec![w, hd, 1, 1],
                vec![w],
            ]);
        }
        shapes.extend([vec![self.classes, w, 1, 1], vec![self.classes]]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Multiply-add Flops per output pixel (2 per MAC), convolutions only.
    pub fn flops_per_pixel(&self) -> f64 {
        let (w, hd) = (self.width as f64, self.hidden() as f64);
        let ks = (self.stem_kernel * self.stem_kernel) as f64;
        let kd = (self.dw_kernel * self.dw_kernel) as f64;
        let stem = 2.0 * ks * self.in_channels() as f64 * w;
        let block = 2.0 * kd * w + 2.0 * w * hd + 2.0 * hd * w;
        let head = 2.0 * w * self.classes as f64;
        stem + self.blocks as f64 * block + head
    }
}

/// Parameters of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub dw_w: Vec<T>,
    pub dw_b: Vec<T>,
    pub exp_w: Vec<T>,
    pub exp_b: Vec<T>,
    pub proj_w: Vec<T>,
    pub proj_b: Vec<T>,
}

/// All network parameters. [`EcnWeights`] is the `f32` production form.
#[derive(Debug, Clone, PartialEq)]
pub struct EcnParams<T> {
    arch: EcnArch,
    pub stem_w: Vec<T>,
    pub stem_b: Vec<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

pub type EcnWeights = EcnParams<f32>;

impl<T: Scalar> EcnParams<T> {
    pub fn zeros(arch: EcnArch) -> Result<Self> {
        arch.validate()?;
        let mut tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|s| vec![T::zero(); s.iter().product()]);
        Ok(Self::assemble(arch, &mut tensors))
    }

    fn assemble(arch: EcnArch, it: &mut impl Iterator<Item = Vec<T>>) -> Self {
        let mut next = || it.next().expect("tensor count matches arch");
        let stem_w = next();
        let stem_b = next();
        let blocks = (0..arch.blocks)
            .map(|_| BlockParams {
                dw_w: next(),
                dw_b: next(),
                exp_w: next(),
                exp_b: next(),
                proj_w: next(),
                proj_b: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        Self {
            arch,
            stem_w,
            stem_b,
            blocks,
            head_w,
            head_b,
        }
    }

    /// Builds parameters from tensors in serialization order, checking sizes.
    pub fn from_tensors(arch: EcnArch, tensors: Vec<Vec<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.tensor_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            let n: usize = s.iter().product();
            if t.len() != n {
                return Err(Error::invalid(format!(
                    "parameter tensor {i} has {} values, expected {n}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "parameter tensor {i} contains non-finite values"
                )));
            }
        }
        Ok(Self::assemble(arch, &mut tensors.into_iter()))
    }

    /// Kaiming-uniform (fan-in, gain sqrt 2) kernels and zero biases.
    pub fn kaiming(arch: EcnArch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.tensor_shapes();
        for (t, shape) in p.tensors_mut().into_iter().zip(shapes) {
            if shape.len() < 4 {
                continue;
            }
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in t.iter_mut() {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> EcnArch {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    /// Parameter tensors in serialization order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.stem_w, &self.stem_b];
        for b in &self.blocks {
            out.extend([b.dw_w.as_slice(), &b.dw_b, &b.exp_w, &b.exp_b, &b.proj_w, &b.proj_b]);
        }
        out.extend([self.head_w.as_slice(), &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.stem_w, &mut self.stem_b];
        for b in &mut self.blocks {
            out.extend([
                &mut b.dw_w,
                &mut b.dw_b,
                &mut b.exp_w,
                &mut b.exp_b,
                &mut b.proj_w,
                &mut b.proj_b,
            ]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    /// Human-readable tensor names in serialization order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["stem.weight".to_string(), "stem.bias".to_string()];
        for i in 0..self.blocks.len() {
            for part in [
                "dw.weight",
                "dw.bias",
                "expand.weight",
                "expand.bias",
                "project.weight",
                "project.bias",
            ] {
                names.push(format!("block{i}.{part}"));
            }
        }
        names.extend(["head.weight".to_string(), "head.bias".to_string()]);
        names
    }

    pub fn cast<U: Scalar>(&self) -> EcnParams<U> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| t.iter().map(|v| U::lit(v.to_f64().unwrap_or(0.0))).collect())
            .collect::<Vec<Vec<U>>>();
        EcnParams::assemble(self.arch, &mut tensors.into_iter())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate activations of one residual block.
#[derive(Debug, Clone)]
pub struct BlockTrace<T> {
    pub dw: Vec<T>,
    pub hidden_pre: Vec<T>,
    pub hidden: Vec<T>,
}

/// Every activation of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub geo: Geometry,
    pub stem_cols: Vec<T>,
    pub stem_pre: Vec<T>,
    /// Block inputs `a_0 .. a_blocks`; the last entry feeds the head.
    pub acts: Vec<Vec<T>>,
    pub blocks: Vec<BlockTrace<T>>,
    pub logits: Vec<T>,
}

fn gelu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| gelu(v)).collect()
}

pub(crate) fn stem_forward<T: Scalar>(p: &EcnParams<T>, input: &[T], geo: Geometry) -> (Vec<T>, Vec<T>) {
    let a = p.arch;
    let px = geo.pixels();
    let kk = a.in_channels() * a.stem_kernel * a.stem_kernel;
    let cols = im2col(input, a.in_channels(), a.stem_kernel, geo);
    let mut pre = vec![T::zero(); a.width * px];
    gemm(a.width, kk, px, &p.stem_w, Op::N, &cols, Op::N, T::zero(), &mut pre);
    add_bias(&mut pre, &p.stem_b, px);
    (cols, pre)
}

/// Tail of a residual block once the depthwise output is known.
pub(crate) fn block_after_dw<T: Scalar>(
    p: &EcnParams<T>,
    k: usize,
    input: &[T],
    dw: &[T],
    geo: Geometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let a = p.arch;
    let bp = &p.blocks[k];
    let px = geo.pixels();
    let mut hidden_pre = vec![T::zero(); a.hidden() * px];
    gemm(
        a.hidden(),
        a.width,
        px,
        &bp.exp_w,
        Op::N,
        dw,
        Op::N,
        T::zero(),
        &mut hidden_pre,
    );
    add_bias(&mut hidden_pre, &bp.exp_b, px);
    let hidden = gelu_vec(&hidden_pre);
    let mut out = input.to_vec();
    gemm(
        a.width,
        a.hidden(),
        px,
        &bp.proj_w,
        Op::N,
        &hidden,
        Op::N,
        T::one(),
        &mut out,
    );
    add_bias(&mut out, &bp.proj_b, px);
    (hidden_pre, hidden, out)
}

pub(crate) fn block_forward<T: Scalar>(
    p: &EcnParams<T>,
    k: usize,
    input: &[T],
    geo: Geometry,
) -> (BlockTrace<T>, Vec<T>) {
    let a = p.arch;
    let bp = &p.blocks[k];
    let dw = depthwise_forward(input, &bp.dw_w, &bp.dw_b, a.width, a.dw_kernel, geo);
    let (hidden_pre, hidden, out) = block_after_dw(p, k, input, &dw, geo);
    (BlockTrace { dw, hidden_pre, hidden }, out)
}

pub(crate) fn head_forward<T: Scalar>(p: &EcnParams<T>, input: &[T], geo: Geometry) -> Vec<T> {
    let a = p.arch;
    let px = geo.pixels();
    let mut logits = vec![T::zero(); a.classes * px];
    gemm(
        a.classes,
        a.width,
        px,
        &p.head_w,
        Op::N,
        input,
        Op::N,
        T::zero(),
        &mut logits,
    );
    add_bias(&mut logits, &p.head_b, px);
    logits
}

/// Runs residual blocks `from..` and the head on block input `a_from`.
pub(crate) fn forward_from_block<T: Scalar>(p: &EcnParams<T>, from: usize, mut act: Vec<T>, geo: Geometry) -> Vec<T> {
    for k in from..p.arch.blocks {
        act = block_forward(p, k, &act, geo).1;
    }
    head_forward(p, &act, geo)
}

/// Full forward pass on a batch input `[2C][batch*h*w]`, keeping activations.
pub fn forward_trace<T: Scalar>(p: &EcnParams<T>, input: &[T], geo: Geometry) -> Trace<T> {
    let (stem_cols, stem_pre) = stem_forward(p, input, geo);
    let mut acts = vec![gelu_vec(&stem_pre)];
    let mut blocks = Vec::with_capacity(p.arch.blocks);
    for k in 0..p.arch.blocks {
        let (bt, out) = block_forward(p, k, acts.last().expect("non-empty"), geo);
        blocks.push(bt);
        acts.push(out);
    }
    let logits = head_forward(p, acts.last().expect("non-empty"), geo);
    Trace {
        geo,
        stem_cols,
        stem_pre,
        acts,
        blocks,
        logits,
    }
}

/// Forward pass returning logits only, without retaining activations.
pub fn forward_logits<T: Scalar>(p: &EcnParams<T>, input: &[T], geo: Geometry) -> Vec<T> {
    let (_, stem_pre) = stem_forward(p, input, geo);
    forward_from_block(p, 0, gelu_vec(&stem_pre), geo)
}

/// Per-pixel softmax over `classes` channel-major logits.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for i in 0..pixels {
        let mut m = logits[i];
        for c in 1..classes {
            m = m.max(logits[c * pixels + i]);
        }
        let mut s = T::zero();
        for c in 0..classes {
            let e = (logits[c * pixels + i] - m).exp();
            out[c * pixels + i] = e;
            s = s + e;
        }
        for c in 0..classes {
            out[c * pixels + i] = out[c * pixels + i] / s;
        }
    }
    out
}

/// Summed cross-entropy over non-ignore pixels, and `d(sum)/d logits * scale`.
pub fn cross_entropy<T: Scalar>(logits: &[T], targets: &[u8], classes: usize, scale: T) -> (T, usize, Vec<T>) {
    let px = targets.len();
    let probs = softmax(logits, classes, px);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == IGNORE_LABEL {
            continue;
        }
        let t = t as usize;
        let mut m = logits[i];
        for c in 1..classes {
            m = m.max(logits[c * px + i]);
        }
        let lse = m + (0..classes).map(|c| (logits[c * px + i] - m).exp()).sum::<T>().ln();
        loss = loss + lse - logits[t * px + i];
        count += 1;
        for c in 0..classes {
            let y = if c == t { T::one() } else { T::zero() };
            grad[c * px + i] = (probs[c * px + i] - y) * scale;
        }
    }
    (loss, count, grad)
}

/// Backpropagates `grad_logits` through a trace, accumulating into `grads`.
pub fn backward<T: Scalar>(p: &EcnParams<T>, trace: &Trace<T>, grad_logits: &[T], grads: &mut EcnParams<T>) {
    let a = p.arch;
    let geo = trace.geo;
    let px = geo.pixels();
    let last = trace.acts.last().expect("non-empty");

    gemm(
        a.classes,
        px,
        a.width,
        grad_logits,
        Op::N,
        last,
        Op::T,
        T::one(),
        &mut grads.head_w,
    );
    row_sums_into(grad_logits, px, &mut grads.head_b);
    let mut g_act = vec![T::zero(); a.width * px];
    gemm(
        a.width,
        a.classes,
        px,
        &p.head_w,
        Op::T,
        grad_logits,
        Op::N,
        T::zero(),
        &mut g_act,
    );

    for k in (0..a.blocks).rev() {
        let bp = &p.blocks[k];
        let bt = &trace.blocks[k];
        let gb = &mut grads.blocks[k];
        let input = &trace.acts[k];

        gemm(
            a.width,
            px,
            a.hidden(),
            &g_act,
            Op::N,
            &bt.hidden,
            Op::T,
            T::one(),
            &mut gb.proj_w,
        );
        row_sums_into(&g_act, px, &mut gb.proj_b);
        let mut g_hidden = vec![T::zero(); a.hidden() * px];
        gemm(
            a.hidden(),
            a.width,
            px,
            &bp.proj_w,
            Op::T,
            &g_act,
            Op::N,
            T::zero(),
            &mut g_hidden,
        );
        for (g, &x) in g_hidden.iter_mut().zip(&bt.hidden_pre) {
            *g = *g * gelu_grad(x);
        }

        gemm(
            a.hidden(),
            px,
            a.width,
            &g_hidden,
            Op::N,
            &bt.dw,
            Op::T,
            T::one(),
            &mut gb.exp_w,
        );
        row_sums_into(&g_hidden, px, &mut gb.exp_b);
        let mut g_dw = vec![T::zero(); a.width * px];
        gemm(
            a.width,
            a.hidden(),
            px,
            &bp.exp_w,
            Op::T,
            &g_hidden,
            Op::N,
            T::zero(),
            &mut g_dw,
        );

        let g_in = depthwise_backward(
            input,
            &bp.dw_w,
            &g_dw,
            a.width,
            a.dw_kernel,
            geo,
            &mut gb.dw_w,
            &mut gb.dw_b,
        );
        for (g, d) in g_act.iter_mut().zip(g_in) {
            *g = *g + d;
        }
    }

    for (g, &x) in g_act.iter_mut().zip(&trace.stem_pre) {
        *g = *g * gelu_grad(x);
    }
    let kk = a.in_channels() * a.stem_kernel * a.stem_kernel;
    gemm(
        a.width,
        px,
        kk,
        &g_act,
        Op::N,
        &trace.stem_cols,
        Op::T,
        T::one(),
        &mut grads.stem_w,
    );
    row_sums_into(&g_act, px, &mut grads.stem_b);
}

/// Channel-major network input: lower-scale channels first, then upper-scale.
pub fn concat_input<T: Scalar>(lower: &ProbMap, upper: &ProbMap) -> Vec<T> {
    lower
        .data()
        .iter()
        .chain(upper.data())
        .map(|&v| T::lit(v as f64))
        .collect()
}

fn check_pair(classes: usize, lower: &ProbMap, upper: &ProbMap) -> Result<()> {
    if lower.channels() != upper.channels() {
        return Err(Error::invalid(format!(
            "lower map has {} channels but upper map has {}",
            lower.channels(),
            upper.channels()
        )));
    }
    if lower.dims() != upper.dims() {
        return Err(Error::invalid(format!(
            "lower map is {}x{} but upper map is {}x{}",
            lower.height(),
            lower.width(),
            upper.height(),
            upper.width()
        )));
    }
    if lower.channels() != classes {
        return Err(Error::invalid(format!(
            "weights expect {classes} classes, maps have {}",
            lower.channels()
        )));
    }
    Ok(())
}

/// Initial corrected map from a resized lower-scale map and an upper-scale map.
pub fn ecn_forward(weights: &EcnWeights, lower: &ProbMap, upper: &ProbMap) -> Result<ProbMap> {
    check_pair(weights.classes(), lower, upper)?;
    let geo = Geometry {
        batch: 1,
        height: lower.height(),
        width: lower.width(),
    };
    let input: Vec<f32> = concat_input(lower, upper);
    let logits = forward_logits(weights, &input, geo);
    let probs = softmax(&logits, weights.classes(), geo.pixels());
    ProbMap::new(weights.classes(), geo.height, geo.width, probs)
}

/// Summed cross-entropy and valid-pixel count of one sample, forward pass only.
pub fn sample_loss<T: Scalar>(
    p: &EcnParams<T>,
    lower: &ProbMap,
    upper: &ProbMap,
    target: &LabelMap,
) -> Result<(T, usize)> {
    check_pair(p.classes(), lower, upper)?;
    if target.dims() != lower.dims() {
        return Err(Error::invalid("target geometry differs from input maps"));
    }
    let geo = Geometry {
        batch: 1,
        height: lower.height(),
        width: lower.width(),
    };
    let input: Vec<T> = concat_input(lower, upper);
    let logits = forward_logits(p, &input, geo);
    let (loss, count, _) = cross_entropy(&logits, target.data(), p.classes(), T::zero());
    Ok((loss, count))
}

/// Summed loss, valid-pixel count and gradients of one sample, with the
/// logit gradient scaled by `scale` (typically `1 / total valid pixels`).
pub fn sample_loss_and_grads<T: Scalar>(
    p: &EcnParams<T>,
    lower: &ProbMap,
    upper: &ProbMap,
    target: &LabelMap,
    scale: T,
) -> Result<(T, usize, EcnParams<T>)> {
    check_pair(p.classes(), lower, upper)?;
    if target.dims() != lower.dims() {
        return Err(Error::invalid("target geometry differs from input maps"));
    }
    let geo = Geometry {
        batch: 1,
        height: lower.height(),
        width: lower.width(),
    };
    let input: Vec<T> = concat_input(lower, upper);
    let trace = forward_trace(p, &input, geo);
    let (loss, count, g_logits) = cross_entropy(&trace.logits, target.data(), p.classes(), scale);
    let mut grads = EcnParams::zeros(p.arch)?;
    backward(p, &trace, &g_logits, &mut grads);
    Ok((loss, count, grads))
}
