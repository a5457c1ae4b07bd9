//! Forward kernels and the raw gradient rules they need.
//!
//! Everything here works on plain [`Tensor`] values. The [`Graph`](super::Graph)
//! wires these into the tape; inference code may call them directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::instrument::{self, MacKind};
use super::{broadcast_shapes, broadcast_strides, numel, strides_of, Tensor};

/// Visits every element of `shape` in row-major order, passing the linear
/// output index and the matching offsets under two stride sets.
pub(crate) fn walk2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut lin = 0usize;
    loop {
        let (mut oa, mut ob) = (base_a, base_b);
        for _ in 0..inner {
            f(lin, oa, ob);
            lin += 1;
            oa += ia;
            ob += ib;
        }
        // advance the outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with numpy broadcasting.
pub fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    // trailing-suffix fast path, e.g. a bias row added to every token
    if out_shape == a.shape() && a.shape().ends_with(b.shape()) && !b.is_empty() {
        let bd = b.data();
        let mut data = Vec::with_capacity(a.len());
        for chunk in a.data().chunks(bd.len()) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![T::zero(); numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    walk2(&out_shape, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums a gradient of broadcast shape `from` down to `to`.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); numel(to)];
    let st = broadcast_strides(to, from);
    let zero = vec![0; from.len()];
    walk2(from, &st, &zero, |i, o, _| out[o] = out[o] + grad[i]);
    out
}

/// Batched matrix product `op(a) · op(b)` where `op` optionally transposes
/// the last two axes. Batch axes broadcast.
pub fn matmul_t<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<Tensor<T>> {
    matmul_impl(a, ta, b, tb, true)
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_impl(a, false, b, false, true)
}

pub(crate) fn matmul_impl<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    count: bool,
) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be at least 2-d, got {:?} and {:?}", ash, bsh),
        ));
    }
    let (ar, br) = (ash.len(), bsh.len());
    let (m, k) = if ta { (ash[ar - 1], ash[ar - 2]) } else { (ash[ar - 2], ash[ar - 1]) };
    let (k2, n) = if tb { (bsh[br - 1], bsh[br - 2]) } else { (bsh[br - 2], bsh[br - 1]) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} vs {:?}{}",
                ash,
                if ta { "ᵀ" } else { "" },
                bsh,
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    let a_batch = &ash[..ar - 2];
    let b_batch = &bsh[..br - 2];
    let batch = broadcast_shapes(a_batch, b_batch).ok_or_else(|| {
        Error::shape(
            "matmul",
            format!("batch dimensions of {:?} and {:?} do not broadcast", ash, bsh),
        )
    })?;
    let nb = numel(&batch);
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); nb * m * n];
    if count && instrument::is_enabled() {
        instrument::record(MacKind::Matmul, (nb * m * n * k) as u64);
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };

    // a plain weight matrix on the right: fold the batch into the rows
    if b_batch.is_empty() && !ta {
        T::gemm(nb * m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, &mut out, false);
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let sa = broadcast_strides(a_batch, &batch);
    let sb = broadcast_strides(b_batch, &batch);
    let zero = vec![0; batch.len()];
    let mut offsets = Vec::with_capacity(nb);
    if batch.is_empty() {
        offsets.push((0, 0));
    } else {
        walk2(&batch, &sa, &sb, |_, oa, ob| offsets.push((oa, ob)));
    }
    let _ = zero;
    let (asz, bsz) = (m * k, k * n);
    for (i, (oa, ob)) in offsets.into_iter().enumerate() {
        T::gemm(
            m,
            k,
            n,
            &a.data()[oa * asz..(oa + 1) * asz],
            rsa,
            csa,
            &b.data()[ob * bsz..(ob + 1) * bsz],
            rsb,
            csb,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            format!("{:?} is not a permutation of {} axes", perm, r),
        ));
    }
    let st = strides_of(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let ps: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; r];
    let mut data = vec![T::zero(); x.len()];
    let xd = x.data();
    walk2(&out_shape, &ps, &zero, |i, o, _| data[i] = xd[o]);
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {} out of range for {:?}", axis, shape)));
    }
    Ok(())
}

/// Sum along one axis; the axis is kept with length 1.
pub fn sum_axis_keep<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("sum", x.shape(), axis)?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

/// Contiguous range `[start, start+len)` along `axis`.
pub fn slice_axis<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    check_axis("slice", x.shape(), axis)?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if start + len > n {
        return Err(Error::shape(
            "slice",
            format!("range {}..{} exceeds axis {} of {:?}", start, start + len, axis, x.shape()),
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} along axis {}", p.shape(), first.shape(), axis),
            ));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis];
            data.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn last_axis(x: &Tensor<impl Scalar>) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::shape("row op", format!("needs a non-empty last axis, got {:?}", x.shape())))
}

/// Softmax over the last axis (max-subtracted).
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = last_axis(x)?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Affine-free layer normalization over the last axis. Also returns the
/// per-row reciprocal standard deviation needed for the backward pass.
pub fn layernorm_last<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
    }
    let n = last_axis(x)?;
    let nf = T::lit(n as f64);
    let mut data = x.data().to_vec();
    let mut rstds = Vec::with_capacity(x.len() / n);
    for row in data.chunks_mut(n) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + T::lit(eps)).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        rstds.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), data), rstds))
}

pub(crate) fn layernorm_backward<T: Scalar>(y: &[T], rstd: &[T], dy: &[T], n: usize) -> Vec<T> {
    let nf = T::lit(n as f64);
    let mut dx = vec![T::zero(); y.len()];
    for (((yr, dyr), dxr), &r) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)).zip(rstd) {
        let mean_dy = dyr.iter().copied().sum::<T>() / nf;
        let mean_dyy = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = r * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

/// Per-channel ("depthwise") 2-d cross-correlation with same-size zero padding.
///
/// `x`: `[b, c, h, w]`, `weight`: `[c, 1, k, k]`, `bias`: `[c]`.
pub fn conv2d_depthwise<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, c, h, w, k) = conv_dims(x, weight, bias)?;
    if instrument::is_enabled() {
        instrument::record(MacKind::DepthwiseConv, (b * c * h * w * k * k) as u64);
    }
    let pad = (k / 2) as isize;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            let kern = &wd[ci * k * k..(ci + 1) * k * k];
            let b0 = bias.map_or(T::zero(), |t| t.data()[ci]);
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = b0;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xo as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + kern[ky * k + kx] * xd[plane + iy as usize * w + ix as usize];
                        }
                    }
                    out[plane + y * w + xo] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv2d_depthwise",
            format!("expected x [b,c,h,w] and weight [c,1,k,k], got {:?} and {:?}", xs, ws),
        ));
    }
    let k = ws[2];
    if ws[3] != k || ws[1] != 1 || ws[0] != xs[1] {
        return Err(Error::shape(
            "conv2d_depthwise",
            format!("weight {:?} does not match input {:?}", ws, xs),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
    }
    if let Some(bt) = bias {
        if bt.shape() != [xs[1]] {
            return Err(Error::shape(
                "conv2d_depthwise",
                format!("bias {:?} for {} channels", bt.shape(), xs[1]),
            ));
        }
    }
    Ok((xs[0], xs[1], xs[2], xs[3], k))
}

/// Gradients of [`conv2d_depthwise`] with respect to input, weight and bias.
pub(crate) fn conv2d_depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let k = weight.shape()[2];
    let pad = (k / 2) as isize;
    let (xd, wd) = (x.data(), weight.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            for y in 0..h {
                for xo in 0..w {
                    let g = dy[plane + y * w + xo];
                    db[ci] = db[ci] + g;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xo as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = plane + iy as usize * w + ix as usize;
                            let wi = ci * k * k + ky * k + kx;
                            dw[wi] = dw[wi] + g * xd[xi];
                            dx[xi] = dx[xi] + g * wd[wi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Norm-preserving power map over the last axis:
/// `f(x) = ‖x‖ · x^p / ‖x^p‖`. Zero-norm rows pass through unchanged.
pub fn focused<T: Scalar>(x: &Tensor<T>, p: u32) -> Result<Tensor<T>> {
    let n = last_axis(x)?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        let nx = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let pw: Vec<T> = row.iter().map(|&v| v.powi(p as i32)).collect();
        let np = pw.iter().map(|&v| v * v).sum::<T>().sqrt();
        if nx == T::zero() || np == T::zero() || !np.is_finite() {
            continue;
        }
        let s = nx / np;
        row.iter_mut().zip(&pw).for_each(|(v, &u)| *v = s * u);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn focused_backward<T: Scalar>(x: &[T], dy: &[T], n: usize, p: u32) -> Vec<T> {
    let pf = T::lit(p as f64);
    let mut dx = vec![T::zero(); x.len()];
    for ((xr, gr), dr) in x.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let nx = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
        let u: Vec<T> = xr.iter().map(|&v| v.powi(p as i32)).collect();
        let nu = u.iter().map(|&v| v * v).sum::<T>().sqrt();
        if nx == T::zero() || nu == T::zero() || !nu.is_finite() {
            dr.copy_from_slice(gr);
            continue;
        }
        let gu: T = gr.iter().zip(&u).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            let du = pf * xr[j].powi(p as i32 - 1);
            dr[j] = xr[j] / nx * gu / nu + nx * du * gr[j] / nu
                - nx * du * u[j] * gu / (nu * nu * nu);
        }
    }
    dx
}

/// Rows of a `[rows, dim]` table.
pub fn index_select<T: Scalar>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::shape("index_select", format!("table must be 2-d, got {:?}", table.shape())));
    }
    let (rows, dim) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        if i >= rows {
            return Err(Error::Contract(format!("index {i} out of range for {rows} rows")));
        }
        data.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
    }
    Ok(Tensor::from_parts(vec![idx.len(), dim], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1.5, -2., 3., 4.]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let e = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::<f32>::zeros([2, 3])).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_matmul_matches_explicit_transpose() {
        let a = t(&[2, 3, 4], &(0..24).map(|v| v as f64 * 0.1).collect::<Vec<_>>());
        let b = t(&[2, 3, 5], &(0..30).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        let at = permute(&a, &[0, 2, 1]).unwrap();
        let direct = matmul(&at, &b).unwrap();
        let fused = matmul_t(&a, true, &b, false).unwrap();
        assert!(direct.max_abs_diff(&fused).unwrap() < 1e-12);
    }

    #[test]
    fn broadcast_bias_and_general() {
        let x = t(&[2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let bias = t(&[3], &[1., 2., 3.]);
        let y = broadcast_binary("add", &x, &bias, |a, b| a + b).unwrap();
        assert_eq!(&y.data()[3..6], &[4., 6., 8.]);
        let col = t(&[2, 1, 1], &[10., 20.]);
        let z = broadcast_binary("mul", &x, &col, |a, b| a * b).unwrap();
        assert_eq!(z.data()[0], 0.0);
        assert_eq!(z.data()[11], 220.0);
        let g = reduce_to_shape(z.data(), &[2, 2, 3], &[2, 1, 1]);
        assert_eq!(g.len(), 2);
        assert!(broadcast_binary("add", &x, &t(&[2], &[1., 1.]), |a, b| a + b).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let p = [2, 0, 1];
        let y = permute(&x, &p).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(permute(&y, &inverse_perm(&p)).unwrap(), x);
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_last(&t(&[3], &[0., 0., 0.])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn depthwise_identity_and_constant_field() {
        let x = t(&[1, 1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let w = t(&[1, 1, 3, 3], &delta);
        assert_eq!(conv2d_depthwise(&x, &w, None).unwrap(), x);

        let ones = Tensor::<f64>::ones([1, 1, 4, 4]);
        let k = Tensor::<f64>::ones([1, 1, 3, 3]);
        let y = conv2d_depthwise(&ones, &k, Some(&Tensor::zeros([1]))).unwrap();
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn depthwise_rejects_even_kernel() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(matches!(conv2d_depthwise(&x, &w, None), Err(Error::Config(_))));
    }

    #[test]
    fn focused_fixed_points() {
        let x = t(&[2, 3], &[0.3, 0.1, 0.9, 1.0, 1.0, 1.0]);
        assert!(focused(&x, 1).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
        let y = focused(&x, 3).unwrap();
        assert!((y.data()[3] - 1.0).abs() < 1e-15);
        let zero = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(focused(&zero, 3).unwrap(), zero);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_8).abs() < 1e-9);
        assert_eq!(relu(-1.0f64), 0.0);
    }
}
