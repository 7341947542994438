//! Hot numeric kernels shared by the tape.
//!
//! Every kernel computes each output element with a fixed sequential
//! reduction order, so results are identical no matter how work is split
//! across threads. Parallelism only ever partitions independent outputs.

use super::tensor::Real;
use rayon::prelude::*;

/// Below this many multiply-adds a parallel dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

/// Dot product with eight independent accumulators so the reduction
/// vectorizes while keeping a deterministic summation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..i * LANES + LANES];
        let pb = &b[i * LANES..i * LANES + LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + pa[l] * pb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    let mut total = tail;
    for l in 0..LANES {
        total = total + acc[l];
    }
    total
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * xi;
    }
}

/// One output row: out_row += sum_kk a_row[kk] * b_row(kk), with the k loop
/// unrolled four ways so each pass over the output does four fused
/// multiply-adds per element.
fn matmul_row<T: Real>(arow: &[T], b: &[T], n: usize, orow: &mut [T]) {
    let k = arow.len();
    let mut kk = 0;
    while kk + 4 <= k {
        let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
        if a0 != T::zero() || a1 != T::zero() || a2 != T::zero() || a3 != T::zero() {
            let b0 = &b[kk * n..kk * n + n];
            let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
            let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
            let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
            for j in 0..n {
                orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        kk += 4;
    }
    while kk < k {
        let av = arow[kk];
        if av != T::zero() {
            axpy(av, &b[kk * n..kk * n + n], orow);
        }
        kk += 1;
    }
}

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let body = |(orow, arow): (&mut [T], &[T])| matmul_row(arow, b, n, orow);
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| body((orow, arow)));
    } else {
        out.chunks_mut(n)
            .zip(a.chunks(k))
            .for_each(|(orow, arow)| body((orow, arow)));
    }
    out
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ  (rows of A dotted with rows of B)
pub fn matmul_abt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * k];
    let body = |(orow, arow): (&mut [T], &[T])| {
        for (kk, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[kk * n..kk * n + n]);
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(k)
            .zip(a.par_chunks(n))
            .for_each(body);
    } else {
        out.chunks_mut(k).zip(a.chunks(n)).for_each(body);
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]  (accumulated over rows of A and B)
pub fn matmul_atb<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    // Each output row kk accumulates a[i, kk] * b_row(i) over i, unrolled
    // four ways over i.
    let body = |(kk_base, ochunk): (usize, &mut [T])| {
        let rows = ochunk.len() / n;
        for r in 0..rows {
            let kk = kk_base + r;
            let orow = &mut ochunk[r * n..r * n + n];
            let mut i = 0;
            while i + 4 <= m {
                let a0 = a[i * k + kk];
                let a1 = a[(i + 1) * k + kk];
                let a2 = a[(i + 2) * k + kk];
                let a3 = a[(i + 3) * k + kk];
                if a0 != T::zero() || a1 != T::zero() || a2 != T::zero() || a3 != T::zero() {
                    let b0 = &b[i * n..i * n + n];
                    let b1 = &b[(i + 1) * n..(i + 1) * n + n];
                    let b2 = &b[(i + 2) * n..(i + 2) * n + n];
                    let b3 = &b[(i + 3) * n..(i + 3) * n + n];
                    for j in 0..n {
                        orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                    }
                }
                i += 4;
            }
            while i < m {
                let av = a[i * k + kk];
                if av != T::zero() {
                    axpy(av, &b[i * n..i * n + n], orow);
                }
                i += 1;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        // Chunk output rows (the k axis); each chunk scans all m rows.
        let threads = rayon::current_num_threads().max(1);
        let chunk_rows = k.div_ceil(4 * threads).max(1);
        out.par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(ci, ochunk)| body((ci * chunk_rows, ochunk)));
    } else {
        body((0, &mut out[..]));
    }
    out
}

/// Copy channel planes into a zero-padded buffer with a one-pixel border,
/// so every 3x3 tap becomes an unconditional read.
fn pad_planes<T: Real>(src: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); channels * ph * pw];
    for c in 0..channels {
        for y in 0..h {
            let s = &src[c * h * w + y * w..c * h * w + (y + 1) * w];
            out[c * ph * pw + (y + 1) * pw + 1..c * ph * pw + (y + 1) * pw + 1 + w]
                .copy_from_slice(s);
        }
    }
    out
}

/// acc_row[x] += sum of the nine taps of one padded input channel.
#[inline]
fn row_taps9<T: Real>(acc: &mut [T], w9: &[T], r0: &[T], r1: &[T], r2: &[T]) {
    let n = acc.len();
    for x in 0..n {
        acc[x] = acc[x]
            + w9[0] * r0[x]
            + w9[1] * r0[x + 1]
            + w9[2] * r0[x + 2]
            + w9[3] * r1[x]
            + w9[4] * r1[x + 1]
            + w9[5] * r1[x + 2]
            + w9[6] * r2[x]
            + w9[7] * r2[x + 1]
            + w9[8] * r2[x + 2];
    }
}

/// Accumulate one full output plane from padded input planes.
fn conv_plane_acc<T: Real>(
    out_plane: &mut [T],
    padded: &[T],
    weights: &[T], // cin * 9, kernel for this output channel
    cin: usize,
    h: usize,
    w: usize,
) {
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    for ci in 0..cin {
        let w9 = &weights[ci * 9..ci * 9 + 9];
        if w9.iter().all(|&v| v == T::zero()) {
            continue;
        }
        let base = ci * pplane;
        for y in 0..h {
            let r0 = &padded[base + y * pw..base + y * pw + pw];
            let r1 = &padded[base + (y + 1) * pw..base + (y + 1) * pw + pw];
            let r2 = &padded[base + (y + 2) * pw..base + (y + 2) * pw + pw];
            row_taps9(&mut out_plane[y * w..(y + 1) * w], w9, r0, r1, r2);
        }
    }
}

/// 3x3 same-padding convolution, stride 1.
///
/// x: [b, cin, h, w], w: [cout, cin, 3, 3], bias: [cout] -> [b, cout, h, w]
pub fn conv3x3<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
) -> Vec<T> {
    let plane = h * wd;
    let mut out = vec![T::zero(); b * cout * plane];
    let one_sample = |(ox, xs): (&mut [T], &[T])| {
        let padded = pad_planes(xs, cin, h, wd);
        for co in 0..cout {
            let oplane = &mut ox[co * plane..(co + 1) * plane];
            oplane.fill(bias[co]);
            conv_plane_acc(
                oplane,
                &padded,
                &w[co * cin * 9..(co + 1) * cin * 9],
                cin,
                h,
                wd,
            );
        }
    };
    if b > 1 {
        out.par_chunks_mut(cout * plane)
            .zip(x.par_chunks(cin * plane))
            .for_each(one_sample);
    } else {
        out.chunks_mut(cout * plane)
            .zip(x.chunks(cin * plane))
            .for_each(one_sample);
    }
    out
}

/// Gradients of [`conv3x3`] with respect to input, weights, and bias.
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * wd;
    // dx: correlate dout with the flipped kernel, channels swapped. Flip and
    // transpose the kernel once so the forward plane kernel applies as-is.
    let mut wflip = vec![T::zero(); cin * cout * 9];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..9 {
                wflip[(ci * cout + co) * 9 + t] = w[(co * cin + ci) * 9 + (8 - t)];
            }
        }
    }
    let mut dx = vec![T::zero(); b * cin * plane];
    let one_sample = |(dxs, douts): (&mut [T], &[T])| {
        let padded = pad_planes(douts, cout, h, wd);
        for ci in 0..cin {
            conv_plane_acc(
                &mut dxs[ci * plane..(ci + 1) * plane],
                &padded,
                &wflip[ci * cout * 9..(ci + 1) * cout * 9],
                cout,
                h,
                wd,
            );
        }
    };
    if b > 1 {
        dx.par_chunks_mut(cin * plane)
            .zip(dout.par_chunks(cout * plane))
            .for_each(one_sample);
    } else {
        dx.chunks_mut(cin * plane)
            .zip(dout.chunks(cout * plane))
            .for_each(one_sample);
    }

    // dw and dbias accumulate over the batch sequentially per output channel
    // so the reduction order is fixed regardless of the thread count.
    let mut dw = vec![T::zero(); cout * cin * 9];
    let mut dbias = vec![T::zero(); cout];
    dw.par_chunks_mut(cin * 9)
        .zip(dbias.par_iter_mut())
        .enumerate()
        .for_each(|(co, (dwc, dbv))| {
            let pw = wd + 2;
            let pplane = (h + 2) * pw;
            let mut acc_b = T::zero();
            for s in 0..b {
                let g = &dout[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                acc_b = acc_b + g.iter().copied().sum();
                let padded = pad_planes(
                    &x[s * cin * plane..(s + 1) * cin * plane],
                    cin,
                    h,
                    wd,
                );
                for ci in 0..cin {
                    let base = ci * pplane;
                    let mut acc = [T::zero(); 9];
                    for y in 0..h {
                        let grow = &g[y * wd..(y + 1) * wd];
                        for (dy, a3) in acc.chunks_mut(3).enumerate() {
                            let r = &padded[base + (y + dy) * pw..base + (y + dy) * pw + pw];
                            a3[0] = a3[0] + dot(grow, &r[..wd]);
                            a3[1] = a3[1] + dot(grow, &r[1..1 + wd]);
                            a3[2] = a3[2] + dot(grow, &r[2..2 + wd]);
                        }
                    }
                    for t in 0..9 {
                        dwc[ci * 9 + t] = dwc[ci * 9 + t] + acc[t];
                    }
                }
            }
            *dbv = acc_b;
        });
    (dx, dw, dbias)
}
