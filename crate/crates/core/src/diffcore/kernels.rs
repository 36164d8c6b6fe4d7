//! Dense numeric kernels behind the differentiable ops.
//!
//! Convolutions are evaluated as one small GEMM per kernel tap on a
//! zero-padded copy of the input, so no im2col buffer is materialised.
//! Every kernel works on one batch element at a time; batch elements are
//! processed in parallel and any cross-batch reduction is summed in batch
//! order, which keeps results bit-identical for any thread count.

use rayon::prelude::*;

/// Left/right zero padding for a "same" stride-1 convolution with kernel `k`.
pub fn same_padding(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k / 2)
}

/// Geometry of a single convolution: `cin` input channels, `cout` output
/// channels, kernel width `k`, sequence length `len`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub len: usize,
}

impl ConvGeom {
    fn padded_len(&self) -> usize {
        self.len + self.k - 1
    }
}

/// Copy `x` (`c × len`) into a zeroed `c × (len + k - 1)` buffer at offset `pad_left`.
fn pad_rows(x: &[f64], channels: usize, len: usize, k: usize) -> Vec<f64> {
    let (pl, _) = same_padding(k);
    let lp = len + k - 1;
    let mut out = vec![0.0; channels * lp];
    for c in 0..channels {
        out[c * lp + pl..c * lp + pl + len].copy_from_slice(&x[c * len..(c + 1) * len]);
    }
    out
}

/// `C(m×n) = alpha·A(m×kk)·B(kk×n) + beta·C` with explicit strides.
///
/// The caller guarantees that every strided access stays inside the slices;
/// this is checked here against the furthest element touched.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    kk: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsa + kk.saturating_sub(1) * csa < a.len());
    assert!(kk.saturating_sub(1) * rsb + (n - 1) * csb < b.len() || kk == 0);
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the GEMM reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            kk,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Cross-correlation `y[o][i] = bias[o] + Σ_{c,j} w[o][c][j]·x̂[c][i+j-pl]`
/// for a single batch element. `w` is laid out `[cout][cin][k]`.
fn conv_single(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeom, y: &mut [f64]) {
    let ConvGeom { cin, cout, k, len } = g;
    let lp = g.padded_len();
    let xp = pad_rows(x, cin, len, k);
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b[o]);
        y[o * len..(o + 1) * len].iter_mut().for_each(|v| *v = b);
    }
    for j in 0..k {
        gemm(cout, cin, len, &w[j..], cin * k, k, &xp[j..], lp, 1, 1.0, y, len, 1);
    }
}

/// Adjoint of [`conv_single`] in `x`: `gx[c][m] = Σ_{o,j} w[o][c][j]·gy[o][m-j+pl]`.
fn conv_adjoint_single(gy: &[f64], w: &[f64], g: ConvGeom, gx: &mut [f64]) {
    let ConvGeom { cin, cout, k, len } = g;
    let (pl, _) = same_padding(k);
    let lp = g.padded_len();
    let mut gxp = vec![0.0; cin * lp];
    for j in 0..k {
        gemm(cin, cout, len, &w[j..], k, cin * k, gy, len, 1, 1.0, &mut gxp[j..], lp, 1);
    }
    for c in 0..cin {
        gx[c * len..(c + 1) * len].copy_from_slice(&gxp[c * lp + pl..c * lp + pl + len]);
    }
}

/// Weight gradient for one batch element, accumulated into `gw` (`[cout][cin][k]`):
/// `gw[o][c][j] += Σ_i gy[o][i]·x̂[c][i+j-pl]`.
fn conv_weight_grad_single(x: &[f64], gy: &[f64], g: ConvGeom, gw: &mut [f64]) {
    let ConvGeom { cin, cout, k, len } = g;
    let lp = g.padded_len();
    let xp = pad_rows(x, cin, len, k);
    for j in 0..k {
        gemm(cout, len, cin, gy, len, 1, &xp[j..], 1, lp, 1.0, &mut gw[j..], cin * k, k);
    }
}

/// Batched convolution forward. `x` is `batch × cin × len`.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, batch: usize, g: ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; batch * g.cout * g.len];
    y.par_chunks_mut(g.cout * g.len)
        .zip(x.par_chunks(g.cin * g.len))
        .for_each(|(yb, xb)| conv_single(xb, w, bias, g, yb));
    y
}

/// Batched adjoint of the convolution in its input (bias excluded).
/// Input `gy` is `batch × cout × len`, output is `batch × cin × len`.
pub fn conv1d_adjoint(gy: &[f64], w: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; batch * g.cin * g.len];
    gx.par_chunks_mut(g.cin * g.len)
        .zip(gy.par_chunks(g.cout * g.len))
        .for_each(|(gxb, gyb)| conv_adjoint_single(gyb, w, g, gxb));
    gx
}

/// Batched weight gradient, summed over the batch in index order.
pub fn conv1d_weight_grad(x: &[f64], gy: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let wlen = g.cout * g.cin * g.k;
    let partials: Vec<Vec<f64>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut gw = vec![0.0; wlen];
            conv_weight_grad_single(
                &x[b * g.cin * g.len..(b + 1) * g.cin * g.len],
                &gy[b * g.cout * g.len..(b + 1) * g.cout * g.len],
                g,
                &mut gw,
            );
            gw
        })
        .collect();
    let mut total = vec![0.0; wlen];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Per-channel sums of `t` (`batch × channels × len`), accumulated in batch order.
pub fn channel_sums(t: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * len;
            *o += t[start..start + len].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
        let (pl, _) = same_padding(g.k);
        let mut y = vec![0.0; g.cout * g.len];
        for o in 0..g.cout {
            for i in 0..g.len {
                let mut acc = 0.0;
                for c in 0..g.cin {
                    for j in 0..g.k {
                        let src = i as isize + j as isize - pl as isize;
                        if src >= 0 && (src as usize) < g.len {
                            acc += w[(o * g.cin + c) * g.k + j] * x[c * g.len + src as usize];
                        }
                    }
                }
                y[o * g.len + i] = acc;
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for &k in &[1usize, 2, 3, 4, 8] {
            let g = ConvGeom { cin: 3, cout: 2, k, len: 11 };
            let x: Vec<f64> = (0..g.cin * g.len).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let w: Vec<f64> = (0..g.cout * g.cin * k).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
            let fast = conv1d_forward(&x, &w, None, 1, g);
            let slow = naive_conv(&x, &w, g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn padding_split_is_floor_ceil() {
        assert_eq!(same_padding(1), (0, 0));
        assert_eq!(same_padding(2), (0, 1));
        assert_eq!(same_padding(4), (1, 2));
        assert_eq!(same_padding(64), (31, 32));
    }
}
