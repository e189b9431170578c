//! Slice-level kernels shared by inference and training.
//!
//! Convolutions run on planes padded by one on every side. Outputs are
//! accumulated in a "padded-width" layout (row stride `w + 2`), which turns
//! each 3×3 tap into one contiguous multiply-add over the whole plane.

use super::tensor::Scalar;

pub(crate) fn padded_len(h: usize, w: usize) -> usize {
    (h + 2) * (w + 2)
}

/// Copies `c` planes of `h × w` into zero-bordered `(h+2) × (w+2)` planes.
pub fn pad_planes<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let wp = w + 2;
    let mut out = vec![T::zero(); c * padded_len(h, w)];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * padded_len(h, w)..(ch + 1) * padded_len(h, w)];
        for y in 0..h {
            dst[(y + 1) * wp + 1..(y + 1) * wp + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (ca, cb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// 3×3, stride 1, pad 1, no bias. `xp` holds `cin` padded planes; the result is dense `cout × h × w`.
pub fn conv3x3<T: Scalar>(
    xp: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
) -> Vec<T> {
    let wp = w + 2;
    let plane = padded_len(h, w);
    let span = h * wp - 2;
    let mut acc = vec![T::zero(); h * wp];
    let mut out = vec![T::zero(); cout * h * w];
    for o in 0..cout {
        acc.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..cin {
            let src = &xp[i * plane..(i + 1) * plane];
            let taps = &weight[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for (t, &wv) in taps.iter().enumerate() {
                let off = (t / 3) * wp + t % 3;
                axpy(wv, &src[off..off + span], &mut acc[..span]);
            }
        }
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&acc[y * wp..y * wp + w]);
        }
    }
    out
}

/// Gradients of [`conv3x3`]: returns `(d input, d weight)`; the input gradient is skipped when not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Scalar>(
    xp: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    dy: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let wp = w + 2;
    let plane = padded_len(h, w);
    let span = h * wp - 2;
    // dy in padded-width layout, zero in the two spare columns
    let mut dyp = vec![T::zero(); cout * h * wp];
    for o in 0..cout {
        for y in 0..h {
            let row = &dy[(o * h + y) * w..(o * h + y + 1) * w];
            dyp[(o * h + y) * wp..(o * h + y) * wp + w].copy_from_slice(row);
        }
    }
    let mut dw = vec![T::zero(); cout * cin * 9];
    let mut dxp = need_input_grad.then(|| vec![T::zero(); cin * plane]);
    for o in 0..cout {
        let g = &dyp[o * h * wp..o * h * wp + span];
        for i in 0..cin {
            let src = &xp[i * plane..(i + 1) * plane];
            let base = (o * cin + i) * 9;
            for t in 0..9 {
                let off = (t / 3) * wp + t % 3;
                dw[base + t] = dot(g, &src[off..off + span]);
                if let Some(dxp) = dxp.as_mut() {
                    let dst = &mut dxp[i * plane + off..i * plane + off + span];
                    axpy(weight[base + t], g, dst);
                }
            }
        }
    }
    let dx = dxp.map(|dxp| {
        let mut dx = vec![T::zero(); cin * h * w];
        for i in 0..cin {
            for y in 0..h {
                let s = i * plane + (y + 1) * wp + 1;
                dx[(i * h + y) * w..(i * h + y + 1) * w].copy_from_slice(&dxp[s..s + w]);
            }
        }
        dx
    });
    (dx, dw)
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Per-channel `γ (x − μ) / sqrt(var + eps)` with γ = 1 when absent; no shift term.
pub fn batchnorm_infer_inplace<T: Scalar>(
    x: &mut [T],
    plane: usize,
    mean: &[T],
    var: &[T],
    gamma: Option<&[T]>,
    eps: T,
) {
    for (c, chunk) in x.chunks_mut(plane).enumerate() {
        let mut scale = T::one() / (var[c] + eps).sqrt();
        if let Some(g) = gamma {
            scale *= g[c];
        }
        let mu = mean[c];
        for v in chunk {
            *v = (*v - mu) * scale;
        }
    }
}

/// Non-overlapping average pooling with kernel = stride; trailing rows/cols are dropped.
pub fn avg_pool<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> (Vec<T>, usize, usize) {
    let (oh, ow) = (h / kh, w / kw);
    let norm = T::one() / T::of((kh * kw) as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..kh {
                    let row = &src[(oy * kh + dy) * w + ox * kw..];
                    for v in &row[..kw] {
                        s += *v;
                    }
                }
                out[(ch * oh + oy) * ow + ox] = s * norm;
            }
        }
    }
    (out, oh, ow)
}

pub fn avg_pool_backward<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = T::one() / T::of((kh * kw) as f64);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh * kh {
            for x in 0..ow * kw {
                dx[(ch * h + y) * w + x] = dy[(ch * oh + y / kh) * ow + x / kw] * norm;
            }
        }
    }
    dx
}

pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
