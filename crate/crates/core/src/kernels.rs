//! Raw numeric kernels on flat row-major buffers.
//!
//! The tape in [`crate::autodiff`] owns shape checking; these functions
//! assume their buffers are consistent with the extents passed in.

/// `c = op(a) · op(b) + beta · c` where `op` optionally transposes.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three slices, whose lengths are asserted in debug.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let sp = g.spatial_out();
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * sp..(row + 1) * sp];
                for oi in 0..g.oh {
                    let iy = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (oj, out) in line.iter_mut().enumerate() {
                        let ix = (oj * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let sp = g.spatial_out();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * sp..(row + 1) * sp];
                for oi in 0..g.oh {
                    let iy = (oi * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let ix = (oj * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let sp = g.spatial_out();
    let mut out = vec![0.0; g.batch * g.out_ch * sp];
    let mut cols = vec![0.0; g.patch() * sp];
    let in_sz = g.in_ch * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        let dst = &mut out[b * g.out_ch * sp..(b + 1) * g.out_ch * sp];
        gemm(g.out_ch, g.patch(), sp, w, false, &cols, false, 0.0, dst);
    }
    out
}

/// Returns `(dx, dw)`; either is skipped (empty) when not requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let sp = g.spatial_out();
    let in_sz = g.in_ch * g.h * g.w;
    let mut dx = if want_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0; g.patch() * sp];
    for b in 0..g.batch {
        let gb = &gout[b * g.out_ch * sp..(b + 1) * g.out_ch * sp];
        if want_dw {
            im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm(
                g.out_ch,
                sp,
                g.patch(),
                gb,
                false,
                &cols,
                true,
                1.0,
                &mut dw,
            );
        }
        if want_dx {
            gemm(g.patch(), g.out_ch, sp, w, true, gb, false, 0.0, &mut cols);
            col2im_add(g, &cols, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dw)
}

/// Window maxima and, per output, the flat input index of the first
/// (row-major) maximal element.
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * k * w + oj * k;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (oi * k + di) * w + oj * k + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[(p * oh + i / k) * ow + j / k] += x[(p * h + i) * w + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub(crate) fn avgpool_backward(g: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[(p * h + i) * w + j] = g[(p * oh + i / k) * ow + j / k] * inv;
            }
        }
    }
    dx
}

/// One bilinear tap: the four neighbours of a continuous pixel position
/// together with their interpolation weights.
struct Taps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

/// Maps normalized `(u, v)` in `[-1, 1]` to pixel space with the
/// align-corners convention. `None` when no neighbour can be in range.
fn taps(u: f64, v: f64, h: usize, w: usize) -> Option<Taps> {
    let px = (u + 1.0) * 0.5 * (w as f64 - 1.0);
    let py = (v + 1.0) * 0.5 * (h as f64 - 1.0);
    if !(px > -1.0 && px < w as f64 && py > -1.0 && py < h as f64) {
        return None;
    }
    let (fx0, fy0) = (px.floor(), py.floor());
    Some(Taps {
        x0: fx0 as isize,
        y0: fy0 as isize,
        fx: px - fx0,
        fy: py - fy0,
    })
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    coords: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; batch * ch * hw];
    for b in 0..batch {
        for p in 0..hw {
            let ci = (b * hw + p) * 2;
            let Some(t) = taps(coords[ci], coords[ci + 1], h, w) else {
                continue;
            };
            for c in 0..ch {
                let plane = &x[(b * ch + c) * hw..(b * ch + c + 1) * hw];
                let v00 = pixel(plane, h, w, t.y0, t.x0);
                let v01 = pixel(plane, h, w, t.y0, t.x0 + 1);
                let v10 = pixel(plane, h, w, t.y0 + 1, t.x0);
                let v11 = pixel(plane, h, w, t.y0 + 1, t.x0 + 1);
                out[(b * ch + c) * hw + p] = (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01)
                    + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
            }
        }
    }
    out
}

/// Returns `(dx, dcoords)`.
pub(crate) fn bilinear_backward(
    x: &[f64],
    coords: &[f64],
    gout: &[f64],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dc = vec![0.0; coords.len()];
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    for b in 0..batch {
        for p in 0..hw {
            let ci = (b * hw + p) * 2;
            let Some(t) = taps(coords[ci], coords[ci + 1], h, w) else {
                continue;
            };
            let corners = [
                (t.y0, t.x0, (1.0 - t.fy) * (1.0 - t.fx)),
                (t.y0, t.x0 + 1, (1.0 - t.fy) * t.fx),
                (t.y0 + 1, t.x0, t.fy * (1.0 - t.fx)),
                (t.y0 + 1, t.x0 + 1, t.fy * t.fx),
            ];
            let (mut dfx, mut dfy) = (0.0, 0.0);
            for c in 0..ch {
                let off = (b * ch + c) * hw;
                let g = gout[off + p];
                if g == 0.0 {
                    continue;
                }
                let plane = &x[off..off + hw];
                let v00 = pixel(plane, h, w, t.y0, t.x0);
                let v01 = pixel(plane, h, w, t.y0, t.x0 + 1);
                let v10 = pixel(plane, h, w, t.y0 + 1, t.x0);
                let v11 = pixel(plane, h, w, t.y0 + 1, t.x0 + 1);
                dfx += g * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                dfy += g * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                for &(y, xx, wt) in &corners {
                    if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                        dx[off + y as usize * w + xx as usize] += g * wt;
                    }
                }
            }
            dc[ci] += dfx * sx;
            dc[ci + 1] += dfy * sy;
        }
    }
    (dx, dc)
}
