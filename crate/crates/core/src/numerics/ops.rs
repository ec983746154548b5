//! Forward kernels and the hand-written backward kernels they need.
//!
//! Everything here is a pure function of its inputs. The tape in
//! [`super::tape`] records these and wires up the vector-Jacobian products.

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Row norms below this are treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Variance epsilon for group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn expect_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn elementwise<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    // scalar-tensor is the only broadcast allowed
    if b.shape().is_empty() {
        let y = b.data()[0];
        return Tensor::new(a.shape(), a.data().iter().map(|&x| f(x, y)).collect());
    }
    if a.shape().is_empty() {
        let x = a.data()[0];
        return Tensor::new(b.shape(), b.data().iter().map(|&y| f(x, y)).collect());
    }
    Err(mismatch(op, a, b))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise("add", a, b, |x, y| x + y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Real>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub fn relu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul_nt", a, 2)?;
    expect_rank("matmul_nt", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k as isize, 1),
        b.data(),
        (1, k as isize),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul_tn", a, 2)?;
    expect_rank("matmul_tn", b, 2)?;
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (1, m as isize),
        b.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    Tensor::new(&[m, n], out)
}

/// `x · w + bias` with x `[B×in]`, w `[in×out]`, bias `[out]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("linear", bias, 1)?;
    let mut out = matmul(x, w)?;
    let n = w.shape()[1];
    if bias.len() != n {
        return Err(mismatch("linear", w, bias));
    }
    for row in out.data_mut().chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Geometry of a 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        expect_rank("conv2d", input, 4)?;
        expect_rank("conv2d", kernel, 4)?;
        let s = input.shape();
        let k = kernel.shape();
        if k[2] != 3 || k[3] != 3 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel must be O×C×3×3, got {k:?}"),
            });
        }
        if k[1] != s[1] {
            return Err(mismatch("conv2d", input, kernel));
        }
        if !(1..=2).contains(&stride) || padding > 1 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("stride must be 1 or 2 and padding 0 or 1, got {stride}/{padding}"),
            });
        }
        if s[2] < 3 || s[3] < 3 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("spatial size must be at least 3×3, got {:?}", &s[2..]),
            });
        }
        Ok(ConvGeom {
            batch: s[0],
            in_channels: s[1],
            out_channels: k[0],
            height: s[2],
            width: s[3],
            stride,
            padding,
            out_height: (s[2] + 2 * padding - 3) / stride + 1,
            out_width: (s[3] + 2 * padding - 3) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * 9
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Unfold one sample into a `[C·9 × H'·W']` column matrix.
    fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            let plane = &sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut row[oy * self.out_width..(oy + 1) * self.out_width];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..][..self.width];
                        if self.stride == 1 {
                            // in-bounds outputs form one contiguous run
                            let lo = self.padding.saturating_sub(kx);
                            let hi = (self.width + self.padding).saturating_sub(kx).min(self.out_width);
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            let shift = lo + kx - self.padding;
                            dst[lo..hi].copy_from_slice(&src[shift..shift + hi - lo]);
                            continue;
                        }
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back onto one sample's input gradient.
    fn col2im<T: Real>(&self, cols: &[T], sample_grad: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            let plane =
                &mut sample_grad[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..self.out_height {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..][..self.width];
                        let src = &row[oy * self.out_width..(oy + 1) * self.out_width];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 cross-correlation, `[B×C×H×W] ⋆ [O×C×3×3] → [B×O×H'×W']`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let (kr, p) = (g.patch_rows(), g.positions());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * p;
    let mut cols = vec![T::zero(); kr * p];
    let mut out = vec![T::zero(); g.batch * out_len];
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        T::gemm(
            g.out_channels,
            kr,
            p,
            T::one(),
            kernel.data(),
            (kr as isize, 1),
            &cols,
            (p as isize, 1),
            T::zero(),
            &mut out[b * out_len..(b + 1) * out_len],
            (p as isize, 1),
        );
    }
    Tensor::new(&[g.batch, g.out_channels, g.out_height, g.out_width], out)
}

/// Gradients of [`conv2d`] w.r.t. input and kernel. Either may be skipped.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let (kr, p) = (g.patch_rows(), g.positions());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * p;
    let mut cols = vec![T::zero(); kr * p];
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); g.out_channels * kr]);
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    for b in 0..g.batch {
        let dout = &grad_out.data()[b * out_len..(b + 1) * out_len];
        if let Some(dk) = d_kernel.as_mut() {
            g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
            // dK += dOut · colsᵀ
            T::gemm(
                g.out_channels,
                p,
                kr,
                T::one(),
                dout,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                dk,
                (kr as isize, 1),
            );
        }
        if let Some(di) = d_input.as_mut() {
            // dCols = Kᵀ · dOut
            T::gemm(
                kr,
                g.out_channels,
                p,
                T::one(),
                kernel.data(),
                (1, kr as isize),
                dout,
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            g.col2im(&cols, &mut di[b * in_len..(b + 1) * in_len]);
        }
    }
    let d_input = d_input.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    let d_kernel = d_kernel.map(|d| Tensor::new(kernel.shape(), d)).transpose()?;
    Ok((d_input, d_kernel))
}

/// 2×2 max pooling with stride 2. Returns the output and, for every output
/// element, the flat input index that won.
pub fn max_pool_2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    expect_rank("max_pool_2x2", input, 4)?;
    let s = input.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "max_pool_2x2",
            msg: format!("spatial size must be even, got {h}×{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let x = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, arg))
}

/// Mean over the spatial axes, `[B×C×H×W] → [B×C]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("global_avg_pool", input, 4)?;
    let s = input.shape();
    let hw = s[2] * s[3];
    let inv = T::of(1.0 / hw as f64);
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[s[0], s[1]], data)
}

/// `[B×...] → [B×rest]`.
pub fn flatten<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let b = input.rows();
    input.clone().reshape(&[b, input.len() / b])
}

/// Saved statistics of a group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormStats<T: Real> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Sum with eight independent accumulators so the loop vectorizes.
pub(crate) fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    let tail: T = chunks.remainder().iter().copied().sum();
    acc.iter().copied().sum::<T>() + tail
}

/// `Σ a·b` with the same accumulation scheme as [`lane_sum`].
pub(crate) fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    acc.iter().copied().sum::<T>() + tail
}

/// Per-sample group normalization with per-channel affine `gamma`, `beta`.
pub fn group_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, GroupNormStats<T>)> {
    expect_rank("group_norm", input, 4)?;
    let s = input.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidShape {
            op: "group_norm",
            msg: format!("{c} channels cannot be split into {groups} groups"),
        });
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("group_norm", gamma, beta));
    }
    let per_group = c / groups;
    let group_len = per_group * hw;
    let n = T::of(group_len as f64);
    let eps = T::of(GROUP_NORM_EPS);
    let mut normalized = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(b * groups);
    let mut out = vec![T::zero(); input.len()];
    let mut centered = vec![T::zero(); group_len];
    for (gi, chunk) in input.data().chunks(group_len).enumerate() {
        let mean = lane_sum(chunk) / n;
        for (d, &x) in centered.iter_mut().zip(chunk) {
            *d = x - mean;
        }
        let var = lane_dot(&centered, &centered) / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let base = gi * group_len;
        let channel0 = (gi % groups) * per_group;
        for k in 0..per_group {
            let (ga, be) = (gamma.data()[channel0 + k], beta.data()[channel0 + k]);
            let range = base + k * hw..base + (k + 1) * hw;
            let src = &centered[k * hw..(k + 1) * hw];
            for ((nv, o), &x) in normalized[range.clone()].iter_mut().zip(&mut out[range]).zip(src) {
                let xh = x * is;
                *nv = xh;
                *o = xh * ga + be;
            }
        }
    }
    Ok((
        Tensor::new(s, out)?,
        GroupNormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Returns (d_input, d_gamma, d_beta).
pub fn group_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    groups: usize,
    stats: &GroupNormStats<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let per_group = c / groups;
    let group_len = per_group * hw;
    let n = T::of(group_len as f64);
    let mut d_in = vec![T::zero(); grad_out.len()];
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); group_len];
    for (gi, dy) in grad_out.data().chunks(group_len).enumerate() {
        let base = gi * group_len;
        let channel0 = (gi % groups) * per_group;
        let xh = &stats.normalized[base..base + group_len];
        for k in 0..per_group {
            let ch = channel0 + k;
            let (dyc, xhc) = (&dy[k * hw..(k + 1) * hw], &xh[k * hw..(k + 1) * hw]);
            d_gamma[ch] += lane_dot(dyc, xhc);
            d_beta[ch] += lane_sum(dyc);
            let ga = gamma.data()[ch];
            for (d, &g) in dxhat[k * hw..(k + 1) * hw].iter_mut().zip(dyc) {
                *d = g * ga;
            }
        }
        let mean_d = lane_sum(&dxhat) / n;
        let mean_dx = lane_dot(&dxhat, xh) / n;
        let is = stats.inv_std[gi];
        for ((o, &d), &x) in d_in[base..base + group_len].iter_mut().zip(&dxhat).zip(xh) {
            *o = is * (d - mean_d - x * mean_dx);
        }
    }
    Ok((
        Tensor::new(shape, d_in)?,
        Tensor::new(&[c], d_gamma)?,
        Tensor::new(&[c], d_beta)?,
    ))
}

/// Scales every row of a `[Z×D]` tensor to unit Euclidean norm. Returns the
/// original row norms alongside.
pub fn l2_normalize<T: Real>(v: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    expect_rank("l2_normalize", v, 2)?;
    let d = v.shape()[1];
    let mut out = Vec::with_capacity(v.len());
    let mut norms = Vec::with_capacity(v.rows());
    for (row, chunk) in v.data().chunks(d).enumerate() {
        let norm = chunk.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm.as_f64() >= NORM_EPS) {
            return Err(Error::DegenerateRow {
                op: "l2_normalize",
                row,
                norm: norm.as_f64(),
            });
        }
        out.extend(chunk.iter().map(|&x| x / norm));
        norms.push(norm);
    }
    Ok((Tensor::new(v.shape(), out)?, norms))
}

/// Row-wise inner products of two `[Z×D]` tensors, giving `[Z×1]`.
pub fn row_dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("row_dot", a, 2)?;
    if a.shape() != b.shape() {
        return Err(mismatch("row_dot", a, b));
    }
    let d = a.shape()[1];
    let data = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
        .collect();
    Tensor::new(&[a.rows(), 1], data)
}

/// `[Z×p] ++ [Z×q] → [Z×(p+q)]`.
pub fn concat_cols<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("concat_cols", a, 2)?;
    expect_rank("concat_cols", b, 2)?;
    if a.rows() != b.rows() {
        return Err(mismatch("concat_cols", a, b));
    }
    let (p, q) = (a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (x, y) in a.data().chunks(p).zip(b.data().chunks(q)) {
        data.extend_from_slice(x);
        data.extend_from_slice(y);
    }
    Tensor::new(&[a.rows(), p + q], data)
}

/// Rows `start..start + len` of a `[Z×D]` tensor.
pub fn slice_rows<T: Real>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    expect_rank("slice_rows", t, 2)?;
    if len == 0 || start + len > t.rows() {
        return Err(Error::InvalidShape {
            op: "slice_rows",
            msg: format!("rows {start}..{} out of {}", start + len, t.rows()),
        });
    }
    let d = t.shape()[1];
    Tensor::new(&[len, d], t.data()[start * d..(start + len) * d].to_vec())
}

/// Cross-entropy of row-wise softmax against integer targets. Returns the
/// reduced loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<(T, Vec<T>)> {
    expect_rank("softmax_cross_entropy", logits, 2)?;
    let (z, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != z {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            msg: format!("{z} rows but {} targets", targets.len()),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidShape {
            op: "softmax_cross_entropy",
            msg: format!("target {t} out of range for {k} classes"),
        });
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[t];
        probs.extend(row.iter().map(|&x| (x - log_sum).exp()));
    }
    if reduction == Reduction::Mean {
        total = total / T::of(z as f64);
    }
    Ok((total, probs))
}

/// Binary cross-entropy on logits against 0/1 targets of the same shape.
pub fn bce_with_logits<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    reduction: Reduction,
) -> Result<T> {
    if logits.shape() != targets.shape() {
        return Err(mismatch("bce_with_logits", logits, targets));
    }
    let mut total = T::zero();
    for (&x, &t) in logits.data().iter().zip(targets.data()) {
        total += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
    }
    if reduction == Reduction::Mean {
        total = total / T::of(logits.len() as f64);
    }
    Ok(total)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
