//! Dense vector kernels shared by the forward and backward passes.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators so the loop vectorizes; summation order
    // is fixed, which keeps results bit-reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// `out[t, j] = x[t, :] . w[j, :]` for `x: n x d_in`, `w: d_out x d_in`.
pub fn matmul_rows(x: &[f64], w: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d_out];
    for t in 0..n {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let row = &mut out[t * d_out..(t + 1) * d_out];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(xt, &w[j * d_in..(j + 1) * d_in]);
        }
    }
    out
}

/// Backward of [`matmul_rows`]: accumulates `dx += dout . w` and, when
/// requested, `dw += dout^T . x`.
pub fn matmul_rows_backward(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [f64],
    mut dw: Option<&mut [f64]>,
) {
    for t in 0..n {
        let xt = &x[t * d_in..(t + 1) * d_in];
        for j in 0..d_out {
            let g = dout[t * d_out + j];
            if g == 0.0 {
                continue;
            }
            axpy(&mut dx[t * d_in..(t + 1) * d_in], g, &w[j * d_in..(j + 1) * d_in]);
            if let Some(dw) = dw.as_deref_mut() {
                axpy(&mut dw[j * d_in..(j + 1) * d_in], g, xt);
            }
        }
    }
}

pub const RMS_EPS: f64 = 1e-5;

/// Row-wise RMS normalization with gain. Returns outputs and per-row rms.
pub fn rmsnorm(x: &[f64], gain: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * d];
    let mut rms = vec![0.0; n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let r = (dot(row, row) / d as f64 + RMS_EPS).sqrt();
        rms[t] = r;
        for j in 0..d {
            out[t * d + j] = row[j] / r * gain[j];
        }
    }
    (out, rms)
}

pub fn rmsnorm_backward(
    dout: &[f64],
    x: &[f64],
    rms: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    dx: &mut [f64],
    mut dgain: Option<&mut [f64]>,
) {
    let mut dxhat = vec![0.0; d];
    for t in 0..n {
        let r = rms[t];
        let row = &x[t * d..(t + 1) * d];
        let drow = &dout[t * d..(t + 1) * d];
        let mut m = 0.0;
        for j in 0..d {
            let xhat = row[j] / r;
            dxhat[j] = drow[j] * gain[j];
            m += dxhat[j] * xhat;
            if let Some(dg) = dgain.as_deref_mut() {
                dg[j] += drow[j] * xhat;
            }
        }
        m /= d as f64;
        for j in 0..d {
            let xhat = row[j] / r;
            dx[t * d + j] += (dxhat[j] - xhat * m) / r;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&z| z - lse).collect()
}
