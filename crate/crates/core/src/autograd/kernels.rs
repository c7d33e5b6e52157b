//! Raw numeric kernels over flat `f64` buffers. Shape validation happens in
//! the tape layer; these functions assume consistent extents.

#[inline]
pub(crate) fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

/// `c = a · b` for row-major `a: [m, k]`, `b: [k, n]`. Every output starts
/// at zero and accumulates its `k` products in ascending order, so the
/// result matches a naive triple loop bit for bit.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const MR: usize = 4;
    const NR: usize = 8;
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile");
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + ii) * k + p];
                    for jj in 0..NR {
                        row[jj] += av * brow[jj];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                c[(i + ii) * n + j..(i + ii) * n + j + NR].copy_from_slice(row);
            }
        }
        if n_main < n {
            gemm_edge(i..i + MR, n_main..n, k, n, a, b, c);
        }
    }
    if m_main < m {
        gemm_edge(m_main..m, 0..n, k, n, a, b, c);
    }
}

fn gemm_edge(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    for i in rows {
        let crow = &mut c[i * n + cols.start..i * n + cols.end];
        crow.fill(0.0);
        for p in 0..k {
            axpy(crow, a[i * k + p], &b[p * n + cols.start..p * n + cols.end]);
        }
    }
}

fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unrolls one sample into `[taps][out pixels]`, zero outside the image.
    fn im2col(&self, xn: &[f64], col: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let plane = ho * wo;
        for ci in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[r * plane..(r + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * wo + ox] = if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                0.0
                            } else {
                                xn[(ci * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto the image.
    fn col2im(&self, col: &[f64], dxn: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let plane = ho * wo;
        for ci in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let src = &col[r * plane..(r + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dxn[(ci * self.h + iy as usize) * self.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation without bias. Each output element accumulates its
/// products in `ci, ky, kx` order starting from zero, which makes the
/// result bit-identical to a direct nested-loop evaluation.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let taps = g.taps();
    let in_size = g.ci * g.h * g.w;
    let mut out = vec![0.0; g.n * g.co * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; taps * plane] };
    for n in 0..g.n {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let on = &mut out[n * g.co * plane..(n + 1) * g.co * plane];
        if g.is_pointwise() {
            gemm(g.co, taps, plane, w, xn, on);
        } else {
            g.im2col(xn, &mut col);
            gemm(g.co, taps, plane, w, &col, on);
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt kernel).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let taps = g.taps();
    let in_size = g.ci * g.h * g.w;
    let wt = transpose(g.co, taps, w);
    let mut dx = vec![0.0; g.n * in_size];
    let mut dw = vec![0.0; g.co * taps];
    let mut dw_n = vec![0.0; g.co * taps];
    let mut col = vec![0.0; taps * plane];
    let mut dcol = vec![0.0; taps * plane];
    for n in 0..g.n {
        let gn = &grad_out[n * g.co * plane..(n + 1) * g.co * plane];
        let xn = &x[n * in_size..(n + 1) * in_size];
        let dxn = &mut dx[n * in_size..(n + 1) * in_size];
        if g.is_pointwise() {
            gemm(taps, g.co, plane, &wt, gn, dxn);
            let xt = transpose(taps, plane, xn);
            gemm(g.co, plane, taps, gn, &xt, &mut dw_n);
        } else {
            gemm(taps, g.co, plane, &wt, gn, &mut dcol);
            g.col2im(&dcol, dxn);
            g.im2col(xn, &mut col);
            let colt = transpose(taps, plane, &col);
            gemm(g.co, plane, taps, gn, &colt, &mut dw_n);
        }
        for (d, v) in dw.iter_mut().zip(&dw_n) {
            *d += v;
        }
    }
    (dx, dw)
}

/// `out[b] = a[b] · op(b_mat[b])` for a batch of row-major matrices, where
/// `op` is identity or transpose. `a` is `[m, k]`; `b_mat` is `[k, n]`
/// (plain) or `[n, k]` (transposed). A shared right operand has
/// `b_stride == 0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul(
    batch: usize,
    a: &[f64],
    b: &[f64],
    b_stride: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * b_stride..bi * b_stride + k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            let arow = &ab[i * k..(i + 1) * k];
            if trans_b {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(arow, &bb[j * k..(j + 1) * k]);
                }
            } else {
                for (p, &aip) in arow.iter().enumerate() {
                    axpy(orow, aip, &bb[p * n..(p + 1) * n]);
                }
            }
        }
    }
    out
}

/// Gradients of [`batched_matmul`]. The right-operand gradient is summed
/// over the batch when the operand is shared.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul_backward(
    batch: usize,
    a: &[f64],
    b: &[f64],
    b_stride: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; batch * m * k];
    let b_len = if b_stride == 0 { k * n } else { batch * k * n };
    let mut db = vec![0.0; b_len];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * b_stride..bi * b_stride + k * n];
        let gb = &grad[bi * m * n..(bi + 1) * m * n];
        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
        let dbb = &mut db[bi * b_stride..bi * b_stride + k * n];
        for i in 0..m {
            let grow = &gb[i * n..(i + 1) * n];
            let arow = &ab[i * k..(i + 1) * k];
            let darow = &mut dab[i * k..(i + 1) * k];
            if trans_b {
                // out[i][j] = sum_p a[i][p] b[j][p]
                for (j, &gij) in grow.iter().enumerate() {
                    axpy(darow, gij, &bb[j * k..(j + 1) * k]);
                    axpy(&mut dbb[j * k..(j + 1) * k], gij, arow);
                }
            } else {
                for p in 0..k {
                    darow[p] += dot(grow, &bb[p * n..(p + 1) * n]);
                    axpy(&mut dbb[p * n..(p + 1) * n], arow[p], grow);
                }
            }
        }
    }
    (da, db)
}

/// Numerically stable softmax over contiguous rows of length `len`.
pub(crate) fn softmax_rows(x: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(len).zip(out.chunks_mut(len)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], grad: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), orow) in y.chunks(len).zip(grad.chunks(len)).zip(out.chunks_mut(len)) {
        let inner = dot(yr, gr);
        for ((o, &yv), &gv) in orow.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    out
}

/// Source taps for one output coordinate of bilinear upsampling by an
/// integer factor (half-pixel centres, edge clamped).
pub(crate) fn bilinear_taps(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let frac = src - lo as f64;
    (lo, hi, frac)
}

/// Recurrence state emitted by [`wkv_forward`], kept for the reverse pass.
pub(crate) struct WkvTrace {
    pub out: Vec<f64>,
    pub num_state: Vec<f64>,
    pub den_state: Vec<f64>,
    pub denom: Vec<f64>,
}

/// Runs the weighted key-value recurrence over `batch` sequences of
/// length `len` and width `c`. `decay` has per-step rows when
/// `decay_len == len` or a single shared row when `decay_len == 1`.
/// `bonus` is `exp(u)` per channel.
///
/// Returns the offending `(batch, step, channel)` when a denominator is
/// smaller than `eps` in magnitude.
#[allow(clippy::too_many_arguments)]
pub(crate) fn wkv_forward(
    batch: usize,
    len: usize,
    c: usize,
    keys: &[f64],
    values: &[f64],
    decay: &[f64],
    decay_len: usize,
    bonus: &[f64],
    eps: f64,
) -> Result<WkvTrace, (usize, usize, usize, f64)> {
    let total = batch * len * c;
    let mut trace = WkvTrace {
        out: vec![0.0; total],
        num_state: vec![0.0; total],
        den_state: vec![0.0; total],
        denom: vec![0.0; total],
    };
    for b in 0..batch {
        for i in 0..len {
            let row = (b * len + i) * c;
            let drow = (b * decay_len + if decay_len == 1 { 0 } else { i }) * c;
            for ch in 0..c {
                let k = keys[row + ch];
                let v = values[row + ch];
                let (n_prev, d_prev) = if i == 0 {
                    (0.0, 0.0)
                } else {
                    (trace.num_state[row - c + ch], trace.den_state[row - c + ch])
                };
                let e = (-decay[drow + ch]).exp();
                let num = n_prev * e + k * v;
                let den = d_prev * e + k;
                let bk = bonus[ch] * k;
                let denom = den + bk;
                if denom.abs() < eps || !denom.is_finite() {
                    return Err((b, i, ch, denom));
                }
                trace.num_state[row + ch] = num;
                trace.den_state[row + ch] = den;
                trace.denom[row + ch] = denom;
                trace.out[row + ch] = (num + bk * v) / denom;
            }
        }
    }
    Ok(trace)
}

pub(crate) struct WkvGrads {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub decay: Vec<f64>,
    pub bonus: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn wkv_backward(
    batch: usize,
    len: usize,
    c: usize,
    keys: &[f64],
    values: &[f64],
    decay: &[f64],
    decay_len: usize,
    bonus: &[f64],
    trace: &WkvTrace,
    grad: &[f64],
) -> WkvGrads {
    let total = batch * len * c;
    let mut g = WkvGrads {
        keys: vec![0.0; total],
        values: vec![0.0; total],
        decay: vec![0.0; batch * decay_len * c],
        bonus: vec![0.0; c],
    };
    let mut gn = vec![0.0; c];
    let mut gd = vec![0.0; c];
    for b in 0..batch {
        gn.fill(0.0);
        gd.fill(0.0);
        for i in (0..len).rev() {
            let row = (b * len + i) * c;
            for ch in 0..c {
                let idx = row + ch;
                let k = keys[idx];
                let v = values[idx];
                let a = bonus[ch];
                let denom = trace.denom[idx];
                let out = trace.out[idx];
                let go = grad[idx];
                let g_num = go / denom;
                let g_den = -go * out / denom;
                // carried adjoints already hold the contribution of step i+1
                let gn_i = gn[ch] + g_num;
                let gd_i = gd[ch] + g_den;
                g.keys[idx] += gn_i * v + gd_i + g_num * a * v + g_den * a;
                g.values[idx] += gn_i * k + g_num * a * k;
                g.bonus[ch] += g_num * k * v + g_den * k;
                if i > 0 {
                    let drow = (b * decay_len + if decay_len == 1 { 0 } else { i }) * c;
                    let e = (-decay[drow + ch]).exp();
                    let de = gn_i * trace.num_state[idx - c] + gd_i * trace.den_state[idx - c];
                    g.decay[drow + ch] += -e * de;
                    gn[ch] = gn_i * e;
                    gd[ch] = gd_i * e;
                } else {
                    gn[ch] = 0.0;
                    gd[ch] = 0.0;
                }
            }
        }
    }
    g
}
