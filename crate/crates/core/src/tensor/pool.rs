use super::{window_extent, Padding, Result, Scalar, Shape4, Tensor4, TensorError};

/// Per-output argmax positions of a max pool, as flat offsets into the
/// matching input channel (`t * h * w` plane).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices(pub Vec<u32>);

pub(crate) fn pool_output(
    input: Shape4,
    window: [usize; 3],
    stride: [usize; 3],
    padding: Padding,
) -> Result<(Shape4, [usize; 3])> {
    let dims = [input.t, input.h, input.w];
    let mut out = [0usize; 3];
    let mut pad = [0usize; 3];
    for a in 0..3 {
        let (o, p) = window_extent(dims[a], window[a], stride[a], padding).ok_or_else(|| {
            TensorError::EmptyOutput(format!(
                "pool window {window:?} stride {stride:?} ({padding:?} padding) on input {input}"
            ))
        })?;
        out[a] = o;
        pad[a] = p;
    }
    Ok((Shape4::new(input.c, out[0], out[1], out[2]), pad))
}

/// Output shape of a same-padded max pool.
pub fn maxpool_output(input: Shape4, window: [usize; 3], stride: [usize; 3]) -> Result<Shape4> {
    Ok(pool_output(input, window, stride, Padding::Same)?.0)
}

/// Output shape of a valid-padded average pool.
pub fn avgpool_output(input: Shape4, window: [usize; 3], stride: [usize; 3]) -> Result<Shape4> {
    Ok(pool_output(input, window, stride, Padding::Valid)?.0)
}

/// One separable max pass over axis `n` of a `(outer, n, inner)` block,
/// carrying source indices. Strict comparison keeps the lowest index on ties.
#[allow(clippy::too_many_arguments)]
fn max_pass<T: Scalar>(
    vals: &[T],
    idx: &[u32],
    outer: usize,
    n: usize,
    inner: usize,
    (k, s, pad, o): (usize, usize, usize, usize),
    out_v: &mut Vec<T>,
    out_i: &mut Vec<u32>,
) {
    out_v.clear();
    out_i.clear();
    out_v.resize(outer * o * inner, T::zero());
    out_i.resize(outer * o * inner, 0);
    let span = |q: usize| {
        let start = (q * s) as isize - pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + k as isize).min(n as isize)) as usize;
        (lo, hi)
    };
    if inner == 1 {
        for ((src_v, src_i), (dst_v, dst_i)) in vals
            .chunks_exact(n)
            .zip(idx.chunks_exact(n))
            .zip(out_v.chunks_exact_mut(o).zip(out_i.chunks_exact_mut(o)))
        {
            for q in 0..o {
                let (lo, hi) = span(q);
                let (mut bv, mut bi) = (src_v[lo], src_i[lo]);
                for p in lo + 1..hi {
                    if src_v[p] > bv {
                        bv = src_v[p];
                        bi = src_i[p];
                    }
                }
                dst_v[q] = bv;
                dst_i[q] = bi;
            }
        }
        return;
    }
    for a in 0..outer {
        for q in 0..o {
            let (lo, hi) = span(q);
            let dst = (a * o + q) * inner;
            let first = (a * n + lo) * inner;
            let (dv, di) = (&mut out_v[dst..dst + inner], &mut out_i[dst..dst + inner]);
            dv.copy_from_slice(&vals[first..first + inner]);
            di.copy_from_slice(&idx[first..first + inner]);
            for p in lo + 1..hi {
                let src = (a * n + p) * inner;
                for ((bv, bi), (&v, &i)) in dv
                    .iter_mut()
                    .zip(di.iter_mut())
                    .zip(vals[src..src + inner].iter().zip(&idx[src..src + inner]))
                {
                    if v > *bv {
                        *bv = v;
                        *bi = i;
                    }
                }
            }
        }
    }
}

/// Same-padded max pool of one sample; padding never wins. The window max is
/// taken as three 1-D passes (w, then h, then t), which also picks the lowest
/// flat index among tied maxima. Returns the output shape.
pub(crate) fn maxpool_forward_into<T: Scalar>(
    x: &[T],
    input: Shape4,
    window: [usize; 3],
    stride: [usize; 3],
    out: &mut [T],
    argmax: &mut [u32],
) -> Result<Shape4> {
    let (o, pad) = pool_output(input, window, stride, Padding::Same)?;
    let ip = input.plane();
    let op = o.plane();
    let iota: Vec<u32> = (0..ip as u32).collect();
    let (mut v1, mut i1, mut v2, mut i2, mut v3, mut i3) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for c in 0..input.c {
        let xc = &x[c * ip..(c + 1) * ip];
        let axis = |a: usize| (window[a], stride[a], pad[a], [o.t, o.h, o.w][a]);
        max_pass(xc, &iota, input.t * input.h, input.w, 1, axis(2), &mut v1, &mut i1);
        max_pass(&v1, &i1, input.t, input.h, o.w, axis(1), &mut v2, &mut i2);
        max_pass(&v2, &i2, 1, input.t, o.h * o.w, axis(0), &mut v3, &mut i3);
        out[c * op..(c + 1) * op].copy_from_slice(&v3);
        argmax[c * op..(c + 1) * op].copy_from_slice(&i3);
    }
    Ok(o)
}

pub(crate) fn maxpool_backward_into<T: Scalar>(
    dy: &[T],
    input: Shape4,
    output: Shape4,
    argmax: &[u32],
    dx: &mut [T],
) {
    dx.iter_mut().for_each(|v| *v = T::zero());
    let ip = input.plane();
    let op = output.plane();
    for c in 0..input.c {
        let dxc = &mut dx[c * ip..(c + 1) * ip];
        for q in 0..op {
            let i = c * op + q;
            dxc[argmax[i] as usize] += dy[i];
        }
    }
}

/// Max pool with same padding (`-inf` fill).
pub fn maxpool3d<T: Scalar>(
    x: &Tensor4<T>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor4<T>, PoolIndices)> {
    let (o, _) = pool_output(x.shape(), window, stride, Padding::Same)?;
    let mut out = Tensor4::zeros(o);
    let mut idx = vec![0u32; o.len()];
    maxpool_forward_into(x.data(), x.shape(), window, stride, out.data_mut(), &mut idx)?;
    Ok((out, PoolIndices(idx)))
}

/// Routes `upstream` back to the recorded argmax positions.
pub fn maxpool3d_grad<T: Scalar>(
    input: Shape4,
    upstream: &Tensor4<T>,
    indices: &PoolIndices,
) -> Result<Tensor4<T>> {
    if indices.0.len() != upstream.shape().len() || upstream.shape().c != input.c {
        return Err(TensorError::Shape(format!(
            "max-pool gradient: upstream {} does not match {} recorded indices for input {input}",
            upstream.shape(),
            indices.0.len()
        )));
    }
    let mut dx = Tensor4::zeros(input);
    maxpool_backward_into(upstream.data(), input, upstream.shape(), &indices.0, dx.data_mut());
    Ok(dx)
}

/// Valid-padded average pool; the divisor is always the full window volume.
pub(crate) fn avgpool_forward_into<T: Scalar>(
    x: &[T],
    input: Shape4,
    window: [usize; 3],
    stride: [usize; 3],
    out: &mut [T],
) -> Result<Shape4> {
    let (o, _) = pool_output(input, window, stride, Padding::Valid)?;
    let volume = T::from_f64(window.iter().product::<usize>() as f64);
    let ip = input.plane();
    let op = o.plane();
    for c in 0..input.c {
        let xc = &x[c * ip..(c + 1) * ip];
        for ot in 0..o.t {
            for oh in 0..o.h {
                for ow in 0..o.w {
                    let mut acc = T::zero();
                    for t in ot * stride[0]..ot * stride[0] + window[0] {
                        for h in oh * stride[1]..oh * stride[1] + window[1] {
                            let row = (t * input.h + h) * input.w;
                            for w in ow * stride[2]..ow * stride[2] + window[2] {
                                acc += xc[row + w];
                            }
                        }
                    }
                    out[c * op + (ot * o.h + oh) * o.w + ow] = acc / volume;
                }
            }
        }
    }
    Ok(o)
}

pub(crate) fn avgpool_backward_into<T: Scalar>(
    dy: &[T],
    input: Shape4,
    output: Shape4,
    window: [usize; 3],
    stride: [usize; 3],
    dx: &mut [T],
) {
    dx.iter_mut().for_each(|v| *v = T::zero());
    let scale = T::one() / T::from_f64(window.iter().product::<usize>() as f64);
    let ip = input.plane();
    let op = output.plane();
    for c in 0..input.c {
        let dxc = &mut dx[c * ip..(c + 1) * ip];
        for ot in 0..output.t {
            for oh in 0..output.h {
                for ow in 0..output.w {
                    let g = dy[c * op + (ot * output.h + oh) * output.w + ow] * scale;
                    for t in ot * stride[0]..ot * stride[0] + window[0] {
                        for h in oh * stride[1]..oh * stride[1] + window[1] {
                            let row = (t * input.h + h) * input.w;
                            for w in ow * stride[2]..ow * stride[2] + window[2] {
                                dxc[row + w] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Average pool without padding. Rejects windows larger than the input.
pub fn avgpool3d<T: Scalar>(x: &Tensor4<T>, window: [usize; 3], stride: [usize; 3]) -> Result<Tensor4<T>> {
    let (o, _) = pool_output(x.shape(), window, stride, Padding::Valid)?;
    let mut out = Tensor4::zeros(o);
    avgpool_forward_into(x.data(), x.shape(), window, stride, out.data_mut())?;
    Ok(out)
}

pub fn avgpool3d_grad<T: Scalar>(
    input: Shape4,
    upstream: &Tensor4<T>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor4<T>> {
    let (o, _) = pool_output(input, window, stride, Padding::Valid)?;
    if o != upstream.shape() {
        return Err(TensorError::Shape(format!(
            "avg-pool gradient: upstream {} but forward output is {o}",
            upstream.shape()
        )));
    }
    let mut dx = Tensor4::zeros(input);
    avgpool_backward_into(upstream.data(), input, o, window, stride, dx.data_mut());
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct window scan in (t, h, w) order; first maximum wins.
    fn naive_maxpool(x: &Tensor4<f64>, window: [usize; 3], stride: [usize; 3]) -> (Vec<f64>, Vec<u32>) {
        let s = x.shape();
        let (o, pad) = pool_output(s, window, stride, Padding::Same).unwrap();
        let (mut vals, mut idx) = (vec![], vec![]);
        for c in 0..s.c {
            for ot in 0..o.t {
                for oh in 0..o.h {
                    for ow in 0..o.w {
                        let mut best = (f64::NEG_INFINITY, u32::MAX);
                        for dt in 0..window[0] {
                            for dh in 0..window[1] {
                                for dw in 0..window[2] {
                                    let t = (ot * stride[0] + dt) as isize - pad[0] as isize;
                                    let h = (oh * stride[1] + dh) as isize - pad[1] as isize;
                                    let w = (ow * stride[2] + dw) as isize - pad[2] as isize;
                                    if t < 0 || h < 0 || w < 0 || t >= s.t as isize || h >= s.h as isize || w >= s.w as isize {
                                        continue;
                                    }
                                    let (t, h, w) = (t as usize, h as usize, w as usize);
                                    let v = x.get(c, t, h, w);
                                    if best.1 == u32::MAX || v > best.0 {
                                        best = (v, ((t * s.h + h) * s.w + w) as u32);
                                    }
                                }
                            }
                        }
                        vals.push(best.0);
                        idx.push(best.1);
                    }
                }
            }
        }
        (vals, idx)
    }

    proptest! {
        #[test]
        fn separable_max_pool_matches_direct_scan(
            dims in (1usize..3, 1usize..7, 1usize..7, 1usize..7),
            window in (1usize..4, 1usize..4, 1usize..4),
            stride in (1usize..3, 1usize..3, 1usize..3),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let x = Tensor4::<f64>::from_fn(dims, |_, _, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 60) % 4) as f64
            });
            let window = [window.0, window.1, window.2];
            let stride = [stride.0, stride.1, stride.2];
            let (want_v, want_i) = naive_maxpool(&x, window, stride);
            let (got, idx) = maxpool3d(&x, window, stride).unwrap();
            prop_assert_eq!(got.data(), &want_v[..]);
            prop_assert_eq!(idx.0, want_i);
        }
    }

    #[test]
    fn constant_input_max_pool() {
        let x = Tensor4::<f32>::full((2, 5, 4, 3), 0.25);
        let (y, _) = maxpool3d(&x, [3, 3, 3], [2, 2, 2]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn max_pool_halves_extent() {
        let x = Tensor4::<f32>::zeros((3, 8, 16, 12));
        let (y, _) = maxpool3d(&x, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(y.shape(), Shape4::new(3, 4, 8, 6));
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let x = Tensor4::<f32>::full((1, 2, 2, 2), 1.0);
        let (_, idx) = maxpool3d(&x, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(idx.0, vec![0]);
    }

    #[test]
    fn max_pool_grad_routes_to_argmax() {
        let x = Tensor4::<f32>::from_vec((1, 1, 2, 2), vec![0.0, 3.0, 1.0, 2.0]).unwrap();
        let (y, idx) = maxpool3d(&x, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let up = Tensor4::from_vec((1, 1, 1, 1), vec![5.0]).unwrap();
        let dx = maxpool3d_grad(x.shape(), &up, &idx).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn head_window_collapses_space() {
        let x = Tensor4::<f32>::zeros((5, 4, 8, 6));
        let y = avgpool3d(&x, [2, 8, 6], [1, 1, 1]).unwrap();
        assert_eq!(y.shape(), Shape4::new(5, 3, 1, 1));
    }

    #[test]
    fn avg_pool_of_ones() {
        let x = Tensor4::<f32>::full((2, 4, 8, 6), 1.0);
        let y = avgpool3d(&x, [2, 8, 6], [1, 1, 1]).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn avg_pool_rejects_oversized_window() {
        let x = Tensor4::<f32>::zeros((1, 1, 8, 6));
        assert!(matches!(
            avgpool3d(&x, [2, 8, 6], [1, 1, 1]),
            Err(TensorError::EmptyOutput(_))
        ));
    }
}
