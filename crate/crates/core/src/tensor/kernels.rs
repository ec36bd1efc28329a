use super::Scalar;

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `a` is
/// logically `[m, k]` and `b` is logically `[k, n]`. With `a_t`, `a` is
/// stored as `[k, m]`; with `b_t`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    c: &mut [S],
    beta: S,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every strided access above.
    unsafe {
        S::gemm_strided(
            m,
            k,
            n,
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col<S: Scalar>(x: &[S], g: ConvGeom) -> Vec<S> {
    let mut cols = vec![S::zero(); g.rows() * g.cols()];
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let src = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox + kx;
                        if ix >= g.pad && ix - g.pad < g.w {
                            *d = src[ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add<S: Scalar>(cols: &[S], g: ConvGeom, dx: &mut [S]) {
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let drow = &mut dx[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox + kx;
                        if ix >= g.pad && ix - g.pad < g.w {
                            drow[ix - g.pad] = drow[ix - g.pad] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns pooled values and the flat argmax index of each output cell.
pub(crate) fn max_pool2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> (Vec<S>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(ch * ho + oy) * wo + ox] = x[(ch * h + oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<S: Scalar>(g: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let d = &mut out[(ch * h + oy / 2) * w + ox / 2];
                *d = *d + g[(ch * ho + oy) * wo + ox];
            }
        }
    }
    out
}

/// Softmax over axis 0 of a `[c, n]` buffer.
pub(crate) fn softmax_channels<S: Scalar>(x: &[S], c: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c * n];
    for i in 0..n {
        let mut mx = S::neg_infinity();
        for ch in 0..c {
            mx = mx.max(x[ch * n + i]);
        }
        let mut total = S::zero();
        for ch in 0..c {
            let e = (x[ch * n + i] - mx).exp();
            out[ch * n + i] = e;
            total = total + e;
        }
        for ch in 0..c {
            out[ch * n + i] = out[ch * n + i] / total;
        }
    }
    out
}

/// Normalised output and per-channel inverse standard deviation.
pub(crate) fn instance_norm<S: Scalar>(x: &[S], c: usize, n: usize, eps: S) -> (Vec<S>, Vec<S>) {
    let mut out = vec![S::zero(); c * n];
    let mut inv_std = Vec::with_capacity(c);
    let nf = S::from_usize(n).expect("spatial size");
    for ch in 0..c {
        let xs = &x[ch * n..(ch + 1) * n];
        let mean = xs.iter().copied().sum::<S>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
        let is = S::one() / (var + eps).sqrt();
        for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward<S: Scalar>(
    g: &[S],
    y: &[S],
    inv_std: &[S],
    c: usize,
    n: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); c * n];
    let nf = S::from_usize(n).expect("spatial size");
    for ch in 0..c {
        let gs = &g[ch * n..(ch + 1) * n];
        let ys = &y[ch * n..(ch + 1) * n];
        let sum_g = gs.iter().copied().sum::<S>();
        let sum_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<S>();
        let k = inv_std[ch] / nf;
        for ((o, &gv), &yv) in out[ch * n..(ch + 1) * n].iter_mut().zip(gs).zip(ys) {
            *o = k * (nf * gv - sum_g - yv * sum_gy);
        }
    }
    out
}
