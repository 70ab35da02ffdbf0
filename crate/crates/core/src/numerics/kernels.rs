//! Forward/backward kernels shared by the tape and by direct (tape-free) callers.

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;

/// `c (+)= op(a) · op(b)` for row-major buffers.
///
/// `a` is `m×k` (or `k×m` stored when `a_t`), `b` is `k×n` (or `n×k` stored
/// when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer lengths were checked above against the strides we pass.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over each contiguous row of length `width`.
pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(width) {
        softmax_in_place(row);
    }
    out
}

/// Given softmax output `y` and upstream `dy`, accumulate `dx`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], dx: &mut [f64], width: usize) {
    for ((yr, gr), xr) in y
        .chunks(width)
        .zip(dy.chunks(width))
        .zip(dx.chunks_mut(width))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
            *o += yv * (gv - dot);
        }
    }
}

/// Layer norm over groups of `gain.len()` values. Returns `(y, xhat, rstd)`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(x.len() / d);
    for (r, xr) in x.chunks(d).enumerate() {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstds.push(rstd);
        for j in 0..d {
            let h = (xr[j] - mean) * rstd;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstds)
}

/// Accumulates into `dx`, `dgain`, `dbias` (any may be `None`).
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let d = gain.len();
    let mut dxhat = vec![0.0; d];
    for (r, (gr, hr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += gr[j] * hr[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..d {
                db[j] += gr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut mean_d = 0.0;
            let mut mean_dh = 0.0;
            for j in 0..d {
                dxhat[j] = gr[j] * gain[j];
                mean_d += dxhat[j];
                mean_dh += dxhat[j] * hr[j];
            }
            mean_d /= d as f64;
            mean_dh /= d as f64;
            let out = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
            }
        }
    }
}

/// RMS norm over groups of `gain.len()` values. Returns `(y, rstd)`.
pub fn rms_norm(x: &[f64], gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(x.len() / d);
    for (r, xr) in x.chunks(d).enumerate() {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let rstd = 1.0 / (ms + RMS_NORM_EPS).sqrt();
        rstds.push(rstd);
        for j in 0..d {
            y[r * d + j] = xr[j] * rstd * gain[j];
        }
    }
    (y, rstds)
}

pub fn rms_norm_backward(
    dy: &[f64],
    x: &[f64],
    rstd: &[f64],
    gain: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgain: Option<&mut [f64]>,
) {
    let d = gain.len();
    for (r, (gr, xr)) in dy.chunks(d).zip(x.chunks(d)).enumerate() {
        let s = rstd[r];
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += gr[j] * xr[j] * s;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut dot = 0.0;
            for j in 0..d {
                dot += gr[j] * gain[j] * xr[j];
            }
            let coef = s * s * s * dot / d as f64;
            let out = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] += s * gr[j] * gain[j] - coef * xr[j];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
