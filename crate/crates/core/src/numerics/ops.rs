//! Eager forward kernels on plain tensors. The tape records these and
//! supplies the matching backward rules.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

/// `c (+)= op(a) · op(b)` on row-major storage. `a_dims`/`b_dims` are the
/// stored `(rows, cols)`; transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Float>(
    a: &[T],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[T],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (m, k, rsa, csa) = if trans_a {
        (a_dims.1, a_dims.0, 1, a_dims.1 as isize)
    } else {
        (a_dims.0, a_dims.1, a_dims.1 as isize, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b_dims.1, b_dims.0, 1, b_dims.1 as isize)
    } else {
        (b_dims.0, b_dims.1, b_dims.1 as isize, 1)
    };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.expect_matrix("matmul")?;
    let (q2, r) = b.expect_matrix("matmul")?;
    if q != q2 {
        return Err(Error::shape("matmul", format!("[{p}, {q}] x [{q2}, {r}]")));
    }
    let mut out = Tensor::zeros([p, r]);
    gemm_into(a.data(), (p, q), false, b.data(), (q, r), false, out.data_mut(), false);
    Ok(out)
}

/// `a · bᵀ` for `a: [p, q]`, `b: [r, q]`.
pub fn matmul_nt<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.expect_matrix("matmul_nt")?;
    let (r, q2) = b.expect_matrix("matmul_nt")?;
    if q != q2 {
        return Err(Error::shape("matmul_nt", format!("[{p}, {q}] x [{r}, {q2}]^T")));
    }
    let mut out = Tensor::zeros([p, r]);
    gemm_into(a.data(), (p, q), false, b.data(), (r, q), true, out.data_mut(), false);
    Ok(out)
}

/// Affine map `x · Wᵀ + b` with `W: [out, in]`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d_in) = x.expect_matrix("linear")?;
    let (d_out, w_in) = w.expect_matrix("linear")?;
    let b_len = b.expect_vector("linear")?;
    if d_in != w_in || b_len != d_out {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros([n, d_out]);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(b.data());
    }
    gemm_into(x.data(), (n, d_in), false, w.data(), (d_out, d_in), true, out.data_mut(), true);
    Ok(out)
}

fn check_segments(op: &'static str, rows: usize, seg_len: usize) -> Result<usize> {
    if seg_len == 0 || rows % seg_len != 0 {
        return Err(Error::shape(op, format!("{rows} rows do not split into segments of {seg_len}")));
    }
    Ok(rows / seg_len)
}

/// Validates kernel geometry and returns `(d_out, d_in, k_s, pad)`.
pub(crate) fn conv_geometry<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (_, d_in) = input.expect_matrix("conv1d_dilated")?;
    let (d_out, k_in, k_s) = match kernel.shape()[..] {
        [o, i, k] => (o, i, k),
        _ => {
            return Err(Error::shape(
                "conv1d_dilated",
                format!("kernel must be [d_out, d_in, k_s], got {:?}", kernel.shape()),
            ))
        }
    };
    if k_s % 2 == 0 {
        return Err(Error::InvalidArgument(format!("conv kernel size must be odd, got {k_s}")));
    }
    if dilation < 1 {
        return Err(Error::InvalidArgument("dilation must be at least 1".into()));
    }
    if k_in != d_in || bias.shape() != [d_out] {
        return Err(Error::shape(
            "conv1d_dilated",
            format!("input {:?}, kernel {:?}, bias {:?}", input.shape(), kernel.shape(), bias.shape()),
        ));
    }
    Ok((d_out, d_in, k_s, dilation * (k_s - 1) / 2))
}

/// Unfolds `input` (stacked segments of `seg_len` rows) into `[rows, d_in * k_s]`
/// with column `c * k_s + j` holding tap `j` of channel `c`. Taps falling
/// outside their own segment read zero.
pub(crate) fn im2col<T: Float>(
    input: &[T],
    rows: usize,
    d_in: usize,
    seg_len: usize,
    k_s: usize,
    dilation: usize,
    pad: usize,
) -> Vec<T> {
    let width = d_in * k_s;
    let mut cols = vec![T::zero(); rows * width];
    for r in 0..rows {
        let base = r - r % seg_len;
        let t = r % seg_len;
        let out = &mut cols[r * width..(r + 1) * width];
        for j in 0..k_s {
            let src = t + j * dilation;
            if src < pad || src - pad >= seg_len {
                continue;
            }
            let in_row = &input[(base + src - pad) * d_in..(base + src - pad + 1) * d_in];
            for (c, &v) in in_row.iter().enumerate() {
                out[c * k_s + j] = v;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto input rows.
pub(crate) fn col2im<T: Float>(
    cols: &[T],
    grad_input: &mut [T],
    rows: usize,
    d_in: usize,
    seg_len: usize,
    k_s: usize,
    dilation: usize,
    pad: usize,
) {
    let width = d_in * k_s;
    for r in 0..rows {
        let base = r - r % seg_len;
        let t = r % seg_len;
        let g = &cols[r * width..(r + 1) * width];
        for j in 0..k_s {
            let src = t + j * dilation;
            if src < pad || src - pad >= seg_len {
                continue;
            }
            let in_row = &mut grad_input[(base + src - pad) * d_in..(base + src - pad + 1) * d_in];
            for (c, v) in in_row.iter_mut().enumerate() {
                *v += g[c * k_s + j];
            }
        }
    }
}

/// Same-length dilated convolution over one sequence `[n, d_in]`.
pub fn conv1d_dilated<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let n = input.rows();
    conv1d_dilated_segments(input, n.max(1), kernel, bias, dilation)
}

/// Dilated convolution over `rows / seg_len` stacked sequences, each
/// zero-padded independently so no tap crosses a sequence boundary.
pub fn conv1d_dilated_segments<T: Float>(
    input: &Tensor<T>,
    seg_len: usize,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (d_out, d_in, k_s, pad) = conv_geometry(input, kernel, bias, dilation)?;
    let rows = input.rows();
    if rows == 0 {
        return Err(Error::shape("conv1d_dilated", "empty input"));
    }
    check_segments("conv1d_dilated", rows, seg_len)?;
    let mut out = Tensor::zeros([rows, d_out]);
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(bias.data());
    }
    // one product per tap: the input shifted by the tap offset within each
    // segment, times kernel[:, :, j] read through strides
    let x = input.data();
    let k = kernel.data();
    let tap = |a: &[T], j: usize, out: &mut [T]| {
        T::gemm(
            rows,
            d_in,
            d_out,
            T::one(),
            a,
            d_in as isize,
            1,
            &k[j..],
            k_s as isize,
            (d_in * k_s) as isize,
            T::one(),
            out,
            d_out as isize,
            1,
        )
    };
    T::with_scratch(rows * d_in, |shifted| {
        for j in 0..k_s {
            let offset = j * dilation;
            if offset == pad {
                tap(x, j, out.data_mut());
                continue;
            }
            shifted.fill(T::zero());
            for r in 0..rows {
                let src = r % seg_len + offset;
                if src < pad || src - pad >= seg_len {
                    continue;
                }
                let from = r - r % seg_len + src - pad;
                shifted[r * d_in..(r + 1) * d_in].copy_from_slice(&x[from * d_in..(from + 1) * d_in]);
            }
            tap(shifted, j, out.data_mut());
        }
    });
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.expect_matrix("softmax_rows")?;
    Ok(softmax_rows_masked(x, r.max(1), None, c))
}

/// Row softmax where, for rows of segment `s`, only the first `lens[s]`
/// columns take part; the rest get probability zero.
pub(crate) fn softmax_rows_masked<T: Float>(
    x: &Tensor<T>,
    seg_len: usize,
    lens: Option<&[usize]>,
    cols: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.rows() {
        let valid = lens.map_or(cols, |l| l[i / seg_len].min(cols));
        let src = &x.row(i)[..valid];
        let dst = &mut out.row_mut(i)[..valid];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn elementwise_mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("elementwise_mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Joins matrices with equal row counts along the column axis.
pub fn concat_last_dim<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts.first().map_or(0, |p| p.rows());
    let mut width = 0;
    for p in parts {
        let (r, c) = p.expect_matrix("concat_last_dim")?;
        if r != rows {
            return Err(Error::shape("concat_last_dim", format!("row counts {rows} vs {r}")));
        }
        width += c;
    }
    let mut out = Tensor::zeros([rows, width]);
    for i in 0..rows {
        let mut off = 0;
        let dst = out.row_mut(i);
        for p in parts {
            let src = p.row(i);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    Ok(out)
}

/// Gathers rows of `table: [V, d]` by index.
pub fn embedding_lookup<T: Float>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = table.expect_matrix("embedding_lookup")?;
    let mut out = Tensor::zeros([ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::shape("embedding_lookup", format!("id {id} out of range for {v} rows")));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Inverted-dropout multiplier: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<T: Float, R: Rng + ?Sized>(numel: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    check_rate(rate)?;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok((0..numel)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect())
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

pub fn dropout<T: Float, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.numel(), rate, rng)?;
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (p, q, r) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros([p, r]);
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, dil: usize) -> Tensor<f64> {
        let (n, d_in) = (x.rows(), x.cols());
        let (d_out, k_s) = (k.shape()[0], k.shape()[2]);
        let pad = (dil * (k_s - 1) / 2) as isize;
        let mut out = Tensor::zeros([n, d_out]);
        for i in 0..n {
            for o in 0..d_out {
                let mut s = b.data()[o];
                for j in 0..k_s {
                    let src = i as isize + (j * dil) as isize - pad;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    for c in 0..d_in {
                        s += k.data()[(o * d_in + c) * k_s + j] * x.at(src as usize, c);
                    }
                }
                out.set(i, o, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let mut eye = Tensor::zeros([4, 4]);
        for i in 0..4 {
            eye.set(i, i, 1.0);
        }
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let two = Tensor::new([1, 1], vec![2.0f32]).unwrap();
        let three = Tensor::new([1, 1], vec![3.0f32]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-6);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros([4, 2]);
        let k = Tensor::full([3, 2, 3], 0.7f32);
        let b = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = conv1d_dilated(&x, &k, &b, 2).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), b.data());
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 3], &mut rng);
        let mut k = Tensor::zeros([3, 3, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv1d_dilated(&x, &k, &Tensor::zeros([3]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[5, 2], &mut rng);
        let k = random(&[3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        for dil in [1, 2, 4] {
            let fast = conv1d_dilated(&x, &k, &b, dil).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &k, &b, dil)) < 1e-6, "dilation {dil}");
        }
    }

    #[test]
    fn conv_segments_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[4, 2], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let k = random(&[2, 2, 3], &mut rng);
        let bias = random(&[2], &mut rng);
        let stacked = concat_rows(&a, &b);
        let y = conv1d_dilated_segments(&stacked, 4, &k, &bias, 2).unwrap();
        let ya = conv1d_dilated(&a, &k, &bias, 2).unwrap();
        let yb = conv1d_dilated(&b, &k, &bias, 2).unwrap();
        assert_eq!(y, concat_rows(&ya, &yb));
    }

    fn concat_rows(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::new([a.rows() + b.rows(), a.cols()], data).unwrap()
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros([4, 2]);
        let even = Tensor::zeros([2, 2, 2]);
        assert!(conv1d_dilated(&x, &even, &Tensor::zeros([2]), 1).is_err());
        let k = Tensor::zeros([2, 2, 3]);
        assert!(conv1d_dilated(&x, &k, &Tensor::zeros([2]), 0).is_err());
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0f32)).item(), 0.5);
        let col = Tensor::new([3, 1], vec![5.0f32, -2.0, 0.0]).unwrap();
        assert!(softmax_rows(&col).unwrap().data().iter().all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4, 4], &mut rng);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::full([100, 10], 1.0f64);
        let y = dropout(&x, 0.25, true, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros), "{zeros}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = softmax_rows(&random(&[5, 7], &mut rng)).unwrap();
        for i in 0..5 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
