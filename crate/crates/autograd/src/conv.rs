//! Image-shaped ops: 2-D convolution, padding, upsampling, pooling, and
//! the per-channel broadcasts batch normalization is assembled from.
//!
//! All 4-D arrays are `(n, channels, height, width)` in standard layout.
//! Convolution uses im2col + GEMM; the column matrix is rebuilt in the
//! backward pass instead of saved, which keeps per-step memory flat.
//! The broadcast ops walk flat slices per `(n, c)` plane, which is the
//! hot path for batch-norm-heavy networks.

use crate::tape::{Arr, Var};
use ndarray::{Array2, ArrayView4, Ix1, Ix4, IxDyn};
use std::rc::Rc;

fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected a 4-D array")
}

fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    as4(a).dim()
}

fn flat(a: &Arr) -> &[f64] {
    a.as_slice().expect("expected standard layout")
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col(x: &Arr, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad));
    let cols = n * ho * wo;
    let mut col = Array2::<f64>::zeros((c * kh * kw, cols));
    let xs = flat(x);
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * cols;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ii as usize * w;
                        let c_row = row_base + (ni * ho + oi) * wo;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[c_row + oj] = xs[x_row + jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Arr {
    let (n, c, h, w) = shape;
    let (ho, wo) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad));
    let cols = n * ho * wo;
    let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
    let ds = dcol.as_slice().expect("col2im input must be standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * cols;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ii as usize * w;
                        let c_row = row_base + (ni * ho + oi) * wo;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            xs[x_row + jj as usize] += ds[c_row + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Columns for a 1x1 stride-1 kernel are the input itself reordered;
/// build them with plane copies instead of the generic gather.
fn im2col_1x1(x: &Arr) -> Array2<f64> {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let mut col = Array2::<f64>::zeros((c, n * hw));
    let xs = flat(x);
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let src = (ni * c + ci) * hw;
            let dst = ci * (n * hw) + ni * hw;
            cs[dst..dst + hw].copy_from_slice(&xs[src..src + hw]);
        }
    }
    col
}

fn col2im_1x1(dcol: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Arr {
    let (n, c, h, w) = shape;
    let hw = h * w;
    let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let dst = (ni * c + ci) * hw;
            let src = ci * (n * hw) + ni * hw;
            xs[dst..dst + hw].copy_from_slice(&ds[src..src + hw]);
        }
    }
    dx
}

fn build_col(x: &Arr, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        im2col_1x1(x)
    } else {
        im2col(x, kh, kw, stride, pad)
    }
}

/// Direct shift-accumulate 3x3 stride-1 same-padding convolution; avoids
/// the large column buffers that dominate this shape's im2col cost.
fn conv3x3_same(x: &Arr, w: &Arr) -> Arr {
    let (n, cin, h, wd) = dims4(x);
    let (cout, wcin, _, _) = dims4(w);
    debug_assert_eq!(cin, wcin);
    let mut out = Arr::zeros(IxDyn(&[n, cout, h, wd]));
    let xs = flat(x);
    let ws = flat(w);
    let os = out.as_slice_mut().unwrap();
    let plane = h * wd;
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * plane;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * plane;
                let wbase = (co * cin + ci) * 9;
                for ki in 0..3usize {
                    let di = ki as isize - 1;
                    let (i0, i1) = match di {
                        -1 => (1, h),
                        1 => (0, h - 1),
                        _ => (0, h),
                    };
                    for kj in 0..3usize {
                        let dj = kj as isize - 1;
                        let wv = ws[wbase + ki * 3 + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (j0, j1) = match dj {
                            -1 => (1, wd),
                            1 => (0, wd - 1),
                            _ => (0, wd),
                        };
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let orow = obase + i * wd + j0;
                            let xrow =
                                (xbase as isize + (si * wd) as isize + dj + j0 as isize) as usize;
                            let (dst, src) =
                                (&mut os[orow..orow + (j1 - j0)], &xs[xrow..xrow + (j1 - j0)]);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient for the direct 3x3 path: correlate input with the
/// upstream gradient over the valid overlap of each tap.
fn conv3x3_same_dw(x: &Arr, g: &Arr) -> Arr {
    let (n, cin, h, wd) = dims4(x);
    let (_, cout, _, _) = {
        let d = dims4(g);
        (d.0, d.1, d.2, d.3)
    };
    let mut dw = Arr::zeros(IxDyn(&[cout, cin, 3, 3]));
    let xs = flat(x);
    let gs = flat(g);
    let ds = dw.as_slice_mut().unwrap();
    let plane = h * wd;
    for ni in 0..n {
        for co in 0..cout {
            let gbase = (ni * cout + co) * plane;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * plane;
                let wbase = (co * cin + ci) * 9;
                for ki in 0..3usize {
                    let di = ki as isize - 1;
                    let (i0, i1) = match di {
                        -1 => (1, h),
                        1 => (0, h - 1),
                        _ => (0, h),
                    };
                    for kj in 0..3usize {
                        let dj = kj as isize - 1;
                        let (j0, j1) = match dj {
                            -1 => (1, wd),
                            1 => (0, wd - 1),
                            _ => (0, wd),
                        };
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let grow = gbase + i * wd + j0;
                            let xrow =
                                (xbase as isize + (si * wd) as isize + dj + j0 as isize) as usize;
                            let (gseg, xseg) =
                                (&gs[grow..grow + (j1 - j0)], &xs[xrow..xrow + (j1 - j0)]);
                            for (gv, xv) in gseg.iter().zip(xseg) {
                                acc += gv * xv;
                            }
                        }
                        ds[wbase + ki * 3 + kj] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Input gradient for the direct 3x3 path: convolve the upstream
/// gradient with the channel-transposed, spatially flipped kernel.
fn conv3x3_same_dx(g: &Arr, w: &Arr) -> Arr {
    let (cout, cin, _, _) = dims4(w);
    let ws = flat(w);
    let mut wt = Arr::zeros(IxDyn(&[cin, cout, 3, 3]));
    {
        let ts = wt.as_slice_mut().unwrap();
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..3 {
                    for kj in 0..3 {
                        ts[(ci * cout + co) * 9 + ki * 3 + kj] =
                            ws[(co * cin + ci) * 9 + (2 - ki) * 3 + (2 - kj)];
                    }
                }
            }
        }
    }
    conv3x3_same(g, &wt)
}

/// 2-D convolution: `x (n, cin, h, w)` with `w (cout, cin, kh, kw)`.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    let xv = x.value();
    let wv = weight.value();
    let (n, cin, h, w) = dims4(&xv);
    let (cout, wcin, kh, kw) = dims4(&wv);
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    let (ho, wo) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad));
    assert!(ho > 0 && wo > 0, "conv2d: kernel larger than padded input");

    // the direct path wins on large planes; im2col+GEMM wins on small ones
    if kh == 3 && kw == 3 && stride == 1 && pad == 1 && h * w >= 256 {
        let out = conv3x3_same(&xv, &wv);
        let (xid, wid) = (x.id, weight.id);
        let (need_x, need_w) = (x.requires_grad(), weight.requires_grad());
        let (xv, wv): (Rc<Arr>, Rc<Arr>) = (xv, wv);
        return x.tape.push_op(
            out,
            Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
                if need_w {
                    sink(wid, conv3x3_same_dw(&xv, g));
                }
                if need_x {
                    sink(xid, conv3x3_same_dx(g, &wv));
                }
            })),
            need_x || need_w,
        );
    }

    let col = build_col(&xv, kh, kw, stride, pad);
    let w2 = wv
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let out2 = w2.dot(&col);
    let out = out2
        .into_shape_with_order((cout, n, ho, wo))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_dyn();

    let (xid, wid) = (x.id, weight.id);
    let (need_x, need_w) = (x.requires_grad(), weight.requires_grad());
    let (xv, wv): (Rc<Arr>, Rc<Arr>) = (xv, wv);
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let g2 = g
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((cout, n * ho * wo))
                .unwrap();
            let one_by_one = kh == 1 && kw == 1 && stride == 1 && pad == 0;
            if need_w {
                let col = build_col(&xv, kh, kw, stride, pad);
                let dw2 = g2.dot(&col.t());
                sink(
                    wid,
                    dw2.into_shape_with_order((cout, cin, kh, kw))
                        .unwrap()
                        .into_dyn(),
                );
            }
            if need_x {
                let w2 = wv
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                let dcol = w2.t().dot(&g2);
                let dx = if one_by_one {
                    col2im_1x1(&dcol, (n, cin, h, w))
                } else {
                    col2im(&dcol, (n, cin, h, w), kh, kw, stride, pad)
                };
                sink(xid, dx);
            }
        })),
        need_x || need_w,
    )
}

/// Per-channel mean over `(n, h, w)`: `(n, c, h, w) -> (c)`.
pub fn channel_mean(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut out = Arr::zeros(IxDyn(&[c]));
    {
        let xs = flat(&xv);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                out[ci] += xs[base..base + hw].iter().sum::<f64>();
            }
        }
        out.mapv_inplace(|s| s / count);
    }
    let xid = x.id;
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let gc = gv[ci] / count;
                    ds[base..base + hw].iter_mut().for_each(|d| *d = gc);
                }
            }
            sink(xid, dx);
        })),
        x.requires_grad(),
    )
}

#[derive(Clone, Copy)]
enum ChanOp {
    Add,
    Sub,
    Mul,
}

fn chan_op<'t>(x: Var<'t>, v: Var<'t>, op: ChanOp) -> Var<'t> {
    let xv = x.value();
    let vv = v.value();
    let (n, c, h, w) = dims4(&xv);
    let hw = h * w;
    assert_eq!(vv.shape(), [c], "channel op: vector length must match channels");
    let mut out = xv.as_ref().clone();
    {
        let os = out.as_slice_mut().unwrap();
        let vs = flat(&vv);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let s = vs[ci];
                let lane = &mut os[base..base + hw];
                match op {
                    ChanOp::Add => lane.iter_mut().for_each(|o| *o += s),
                    ChanOp::Sub => lane.iter_mut().for_each(|o| *o -= s),
                    ChanOp::Mul => lane.iter_mut().for_each(|o| *o *= s),
                }
            }
        }
    }
    let (xid, vid) = (x.id, v.id);
    let (need_x, need_v) = (x.requires_grad(), v.requires_grad());
    let is_mul = matches!(op, ChanOp::Mul);
    let is_sub = matches!(op, ChanOp::Sub);
    let (xv, vv): (Rc<Arr>, Rc<Arr>) = (xv, vv);
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let gs = flat(g);
            if need_x {
                if is_mul {
                    let vs = flat(&vv);
                    let mut dx = g.clone();
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let s = vs[ci];
                            ds[base..base + hw].iter_mut().for_each(|d| *d *= s);
                        }
                    }
                    sink(xid, dx);
                } else {
                    sink(xid, g.clone());
                }
            }
            if need_v {
                let mut dv = Arr::zeros(IxDyn(&[c]));
                let xs = flat(&xv);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let s: f64 = if is_mul {
                            gs[base..base + hw]
                                .iter()
                                .zip(&xs[base..base + hw])
                                .map(|(&g, &x)| g * x)
                                .sum()
                        } else {
                            gs[base..base + hw].iter().sum()
                        };
                        dv[ci] += if is_sub { -s } else { s };
                    }
                }
                sink(vid, dv);
            }
        })),
        need_x || need_v,
    )
}

/// `x + v[c]` broadcast over `(n, h, w)`.
pub fn add_chan<'t>(x: Var<'t>, v: Var<'t>) -> Var<'t> {
    chan_op(x, v, ChanOp::Add)
}

/// `x - v[c]` broadcast over `(n, h, w)`.
pub fn sub_chan<'t>(x: Var<'t>, v: Var<'t>) -> Var<'t> {
    chan_op(x, v, ChanOp::Sub)
}

/// `x * v[c]` broadcast over `(n, h, w)`.
pub fn mul_chan<'t>(x: Var<'t>, v: Var<'t>) -> Var<'t> {
    chan_op(x, v, ChanOp::Mul)
}

#[derive(Clone, Copy)]
enum NcOp {
    Add,
    Mul,
}

fn nc_op<'t>(x: Var<'t>, s: Var<'t>, op: NcOp) -> Var<'t> {
    let xv = x.value();
    let sv = s.value();
    let (n, c, h, w) = dims4(&xv);
    let hw = h * w;
    assert_eq!(sv.shape(), [n, c], "per-sample channel op: shape mismatch");
    let mut out = xv.as_ref().clone();
    {
        let os = out.as_slice_mut().unwrap();
        let ss = flat(&sv);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let val = ss[ni * c + ci];
                let lane = &mut os[base..base + hw];
                match op {
                    NcOp::Add => lane.iter_mut().for_each(|o| *o += val),
                    NcOp::Mul => lane.iter_mut().for_each(|o| *o *= val),
                }
            }
        }
    }
    let (xid, sid) = (x.id, s.id);
    let (need_x, need_s) = (x.requires_grad(), s.requires_grad());
    let is_mul = matches!(op, NcOp::Mul);
    let (xv, sv): (Rc<Arr>, Rc<Arr>) = (xv, sv);
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let gs = flat(g);
            if need_x {
                if is_mul {
                    let ss = flat(&sv);
                    let mut dx = g.clone();
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let val = ss[ni * c + ci];
                            ds[base..base + hw].iter_mut().for_each(|d| *d *= val);
                        }
                    }
                    sink(xid, dx);
                } else {
                    sink(xid, g.clone());
                }
            }
            if need_s {
                let xs = flat(&xv);
                let mut ds = Arr::zeros(IxDyn(&[n, c]));
                let dss = ds.as_slice_mut().unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        dss[ni * c + ci] = if is_mul {
                            gs[base..base + hw]
                                .iter()
                                .zip(&xs[base..base + hw])
                                .map(|(&g, &x)| g * x)
                                .sum()
                        } else {
                            gs[base..base + hw].iter().sum()
                        };
                    }
                }
                sink(sid, ds);
            }
        })),
        need_x || need_s,
    )
}

/// `x + s[n, c]` broadcast over `(h, w)`.
pub fn add_nc<'t>(x: Var<'t>, s: Var<'t>) -> Var<'t> {
    nc_op(x, s, NcOp::Add)
}

/// `x * s[n, c]` broadcast over `(h, w)`.
pub fn mul_nc<'t>(x: Var<'t>, s: Var<'t>) -> Var<'t> {
    nc_op(x, s, NcOp::Mul)
}

/// Global average pool: `(n, c, h, w) -> (n, c)`.
pub fn pool_mean_hw(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let hw = h * w;
    let count = hw as f64;
    let mut out = Arr::zeros(IxDyn(&[n, c]));
    {
        let xs = flat(&xv);
        let os = out.as_slice_mut().unwrap();
        for i in 0..n * c {
            os[i] = xs[i * hw..(i + 1) * hw].iter().sum::<f64>() / count;
        }
    }
    let xid = x.id;
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let gs = flat(g);
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for i in 0..n * c {
                let gv = gs[i] / count;
                ds[i * hw..(i + 1) * hw].iter_mut().for_each(|d| *d = gv);
            }
            sink(xid, dx);
        })),
        x.requires_grad(),
    )
}

/// Nearest-neighbor 2x upsample: `(n, c, h, w) -> (n, c, 2h, 2w)`.
pub fn upsample2x(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Arr::zeros(IxDyn(&[n, c, h2, w2]));
    {
        let xs = flat(&xv);
        let os = out.as_slice_mut().unwrap();
        for p in 0..n * c {
            let ibase = p * h * w;
            let obase = p * h2 * w2;
            for hi in 0..h {
                let irow = ibase + hi * w;
                for sub in 0..2 {
                    let orow = obase + (2 * hi + sub) * w2;
                    for wi in 0..w {
                        let v = xs[irow + wi];
                        os[orow + 2 * wi] = v;
                        os[orow + 2 * wi + 1] = v;
                    }
                }
            }
        }
    }
    let xid = x.id;
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let gs = flat(g);
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for p in 0..n * c {
                let ibase = p * h * w;
                let obase = p * h2 * w2;
                for hi in 0..h {
                    let irow = ibase + hi * w;
                    for sub in 0..2 {
                        let orow = obase + (2 * hi + sub) * w2;
                        for wi in 0..w {
                            ds[irow + wi] += gs[orow + 2 * wi] + gs[orow + 2 * wi + 1];
                        }
                    }
                }
            }
            sink(xid, dx);
        })),
        x.requires_grad(),
    )
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * len - 2 - i;
    }
    i as usize
}

/// Reflect-pad by `p` pixels on every side (edge pixel not repeated).
pub fn pad_reflect(x: Var<'_>, p: usize) -> Var<'_> {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    assert!(p < h && p < w, "pad_reflect: padding too large");
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Arr::zeros(IxDyn(&[n, c, hp, wp]));
    {
        let xs = flat(&xv);
        let os = out.as_slice_mut().unwrap();
        for pl in 0..n * c {
            let ibase = pl * h * w;
            let obase = pl * hp * wp;
            for hi in 0..hp {
                let si = reflect(hi as isize - p as isize, h);
                let irow = ibase + si * w;
                let orow = obase + hi * wp;
                for wi in 0..wp {
                    let sj = reflect(wi as isize - p as isize, w);
                    os[orow + wi] = xs[irow + sj];
                }
            }
        }
    }
    let xid = x.id;
    x.tape.push_op(
        out,
        Some(Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let gs = flat(g);
            let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
            let ds = dx.as_slice_mut().unwrap();
            for pl in 0..n * c {
                let ibase = pl * h * w;
                let obase = pl * hp * wp;
                for hi in 0..hp {
                    let si = reflect(hi as isize - p as isize, h);
                    let irow = ibase + si * w;
                    let orow = obase + hi * wp;
                    for wi in 0..wp {
                        let sj = reflect(wi as isize - p as isize, w);
                        ds[irow + sj] += gs[orow + wi];
                    }
                }
            }
            sink(xid, dx);
        })),
        x.requires_grad(),
    )
}
