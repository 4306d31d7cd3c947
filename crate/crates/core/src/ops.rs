//! Raw numeric kernels shared by the graph and by the weight-collapse path.
//!
//! Everything here works on flat row-major slices. The graph wraps these with
//! shape checks and gradient bookkeeping; code that needs bitwise agreement
//! with the graph (collapsing temporal-ensemble gates into a plain weight)
//! calls the same functions so the arithmetic order is shared.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// Output length of a convolution along one axis, `None` if it would be < 1.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch()
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.positions() * self.weight_len()) as u64
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix as usize >= g.w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. With `per_sample`, `weight` holds one kernel per batch
/// item (`[N, C_out, C_in, K, K]`) and `bias` one row per item.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    per_sample: bool,
) -> Vec<T> {
    let (pk, p, wl) = (g.patch(), g.positions(), g.weight_len());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); pk * p] };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let w = if per_sample { &weight[n * wl..(n + 1) * wl] } else { weight };
        let on = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        for co in 0..g.c_out {
            let orow = &mut on[co * p..(co + 1) * p];
            if let Some(b) = bias {
                let bv = if per_sample { b[n * g.c_out + co] } else { b[co] };
                orow.iter_mut().for_each(|v| *v = bv);
            }
            let wrow = &w[co * pk..(co + 1) * pk];
            for (kk, &wv) in wrow.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let crow = &cols[kk * p..(kk + 1) * p];
                for (o, &c) in orow.iter_mut().zip(crow) {
                    *o += wv * c;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    per_sample: bool,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (pk, p, wl) = (g.patch(), g.positions(), g.weight_len());
    let in_len = g.c_in * g.h * g.w;
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_db.then(|| vec![T::zero(); if per_sample { g.batch * g.c_out } else { g.c_out }]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); pk * p] };
    let mut dcol = vec![T::zero(); if need_dx { pk * p } else { 0 }];
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let don = &dout[n * g.c_out * p..(n + 1) * g.c_out * p];
        let w = if per_sample { &weight[n * wl..(n + 1) * wl] } else { weight };
        if let Some(db) = db.as_mut() {
            for co in 0..g.c_out {
                let s: T = don[co * p..(co + 1) * p].iter().copied().sum();
                let idx = if per_sample { n * g.c_out + co } else { co };
                db[idx] += s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            let dwn = if per_sample { &mut dw[n * wl..(n + 1) * wl] } else { &mut dw[..] };
            for co in 0..g.c_out {
                let drow = &don[co * p..(co + 1) * p];
                for kk in 0..pk {
                    let crow = &cols[kk * p..(kk + 1) * p];
                    let mut acc = T::zero();
                    for (&d, &c) in drow.iter().zip(crow) {
                        acc += d * c;
                    }
                    dwn[co * pk + kk] += acc;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            let target: &mut [T] = if g.is_pointwise() { dxn } else {
                dcol.iter_mut().for_each(|v| *v = T::zero());
                &mut dcol
            };
            for co in 0..g.c_out {
                let drow = &don[co * p..(co + 1) * p];
                for kk in 0..pk {
                    let wv = w[co * pk + kk];
                    if wv == T::zero() {
                        continue;
                    }
                    let trow = &mut target[kk * p..(kk + 1) * p];
                    for (t, &d) in trow.iter_mut().zip(drow) {
                        *t += wv * d;
                    }
                }
            }
            if !g.is_pointwise() {
                col2im_add(&dcol, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// `out[i, ..] = sum_j a[i, j] * b[j, ..]` with `a: [p, q]`, `b: [q, r]`.
pub fn matmul_lead<T: Real>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for j in 0..q {
            let av = a[i * q + j];
            for (o, &bv) in orow.iter_mut().zip(&b[j * r..(j + 1) * r]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of [`matmul_lead`] with respect to `a` and `b`.
pub fn matmul_lead_backward<T: Real>(
    a: &[T],
    b: &[T],
    dout: &[T],
    p: usize,
    q: usize,
    r: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); p * q];
    let mut db = vec![T::zero(); q * r];
    for i in 0..p {
        let drow = &dout[i * r..(i + 1) * r];
        for j in 0..q {
            let brow = &b[j * r..(j + 1) * r];
            let mut acc = T::zero();
            for (&d, &bv) in drow.iter().zip(brow) {
                acc += d * bv;
            }
            da[i * q + j] = acc;
            let av = a[i * q + j];
            for (o, &d) in db[j * r..(j + 1) * r].iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
    (da, db)
}

/// Weighted sum of equally sized sources, accumulated in source order:
/// `out = ((0 + c_0 s_0) + c_1 s_1) + ...`.
pub fn mix<T: Real>(coeffs: &[T], sources: &[&[T]]) -> Vec<T> {
    let len = sources.first().map_or(0, |s| s.len());
    let mut out = vec![T::zero(); len];
    for (&c, src) in coeffs.iter().zip(sources) {
        for (o, &s) in out.iter_mut().zip(src.iter()) {
            *o += c * s;
        }
    }
    out
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-channel statistics of an `[N, C, H, W]` activation: mean and biased variance.
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            for &xv in &x[(b * c + ch) * hw..][..hw] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
