// Dense loops behind the tape primitives. Slices are row-major.

use crate::scalar::Scalar;

/// out[m,n] = a[m,k] · b[k,n]
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// out[k,n] = a[m,k]ᵀ · g[m,n]
pub(crate) fn matmul_at_b<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

/// out[m,k] = g[m,n] · b[k,n]ᵀ
pub(crate) fn matmul_a_bt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn oh(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn ow(&self) -> usize {
        self.w - self.kw + 1
    }
}

/// Stride-1 valid cross-correlation: x[n,c,h,w] ⋆ k[o,c,kh,kw] → y[n,o,oh,ow].
pub(crate) fn conv2d<S: Scalar>(x: &[S], k: &[S], d: ConvDims) -> Vec<S> {
    let (oh, ow) = (d.oh(), d.ow());
    let mut y = vec![S::zero(); d.n * d.o * oh * ow];
    for n in 0..d.n {
        for o in 0..d.o {
            let ybase = (n * d.o + o) * oh * ow;
            for c in 0..d.c {
                let xbase = (n * d.c + c) * d.h * d.w;
                let kbase = (o * d.c + c) * d.kh * d.kw;
                for p in 0..d.kh {
                    for q in 0..d.kw {
                        let kv = k[kbase + p * d.kw + q];
                        for i in 0..oh {
                            let xrow = &x[xbase + (i + p) * d.w + q..][..ow];
                            let yrow = &mut y[ybase + i * ow..][..ow];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    k: &[S],
    g: &[S],
    d: ConvDims,
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (oh, ow) = (d.oh(), d.ow());
    let mut dx = want_x.then(|| vec![S::zero(); x.len()]);
    let mut dk = want_k.then(|| vec![S::zero(); k.len()]);
    for n in 0..d.n {
        for o in 0..d.o {
            let gbase = (n * d.o + o) * oh * ow;
            for c in 0..d.c {
                let xbase = (n * d.c + c) * d.h * d.w;
                let kbase = (o * d.c + c) * d.kh * d.kw;
                for p in 0..d.kh {
                    for q in 0..d.kw {
                        let kidx = kbase + p * d.kw + q;
                        let mut acc = S::zero();
                        for i in 0..oh {
                            let grow = &g[gbase + i * ow..][..ow];
                            let xoff = xbase + (i + p) * d.w + q;
                            if let Some(dx) = dx.as_mut() {
                                let kv = k[kidx];
                                for (dxv, &gv) in dx[xoff..xoff + ow].iter_mut().zip(grow) {
                                    *dxv += kv * gv;
                                }
                            }
                            if dk.is_some() {
                                for (&xv, &gv) in x[xoff..xoff + ow].iter().zip(grow) {
                                    acc += xv * gv;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// 2×2 max pooling with stride 2 over [planes, h, w]; trailing odd rows and
/// columns are dropped. Returns values and the flat input index of each max
/// (first occurrence wins on ties).
pub(crate) fn maxpool2x2<S: Scalar>(
    x: &[S],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<S>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ph * pw);
    let mut arg = Vec::with_capacity(planes * ph * pw);
    for pl in 0..planes {
        let base = pl * h * w;
        for i in 0..ph {
            for j in 0..pw {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
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
