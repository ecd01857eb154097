//! Convolution kernels: dense (im2col + GEMM), 2×2 stride-2 transposed,
//! and 3×3 depthwise. All use zero padding and NCHW layout.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Shape, Tensor};

/// `c = alpha·a·b + beta·c` for row-major views given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched by the kernel lies inside the given slices:
    // a spans (m-1)*rsa + (k-1)*csa, b spans (k-1)*rsb + (n-1)*csb, c is m×n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
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
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], geo: &Geometry, col: &mut [f64]) {
    let Geometry { cin, h, w, k, stride, pad, ho, wo } = *geo;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], geo: &Geometry, dx: &mut [f64]) {
    let Geometry { cin, h, w, k, stride, pad, ho, wo } = *geo;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Dense convolution. `weight` is `(cout, cin, k, k)`, `bias` is `(1, cout, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if ws.c != xs.c || ws.h != ws.w {
            return Err(Error::Shape(format!("conv2d: weight {ws} for input {xs}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::Shape(format!("conv2d: bias {} for {} outputs", self.shape(b), ws.n)));
            }
        }
        let k = ws.h;
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d: {k}x{k} kernel larger than padded input {xs}")));
        }
        let geo = Geometry {
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            k,
            stride,
            pad,
            ho: (xs.h + 2 * pad - k) / stride + 1,
            wo: (xs.w + 2 * pad - k) / stride + 1,
        };
        let cout = ws.n;
        let out_shape = Shape::new(xs.n, cout, geo.ho, geo.wo);
        let mut out = Tensor::zeros(out_shape);
        let (rows, cols) = (geo.rows(), geo.cols());
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        {
            let xv = self.value(x);
            let wv = self.value(weight).data();
            for n in 0..xs.n {
                let b: &[f64] = if geo.is_pointwise() {
                    xv.item(n)
                } else {
                    im2col(xv.item(n), &geo, &mut col);
                    &col
                };
                gemm(cout, rows, cols, wv, rows, 1, b, cols, 1, 0.0, out.item_mut(n));
            }
            if let Some(b) = bias {
                let bv = self.value(b).data().to_vec();
                for n in 0..xs.n {
                    for (o, &bo) in bv.iter().enumerate() {
                        out.plane_mut(n, o).iter_mut().for_each(|v| *v += bo);
                    }
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad);
            let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
            let mut dcol = vec![0.0; rows * cols];
            let mut dx = ctx.needs[0].then(|| Tensor::zeros(xs));
            let mut dw = ctx.needs[1].then(|| Tensor::zeros(ws));
            for n in 0..xs.n {
                let gn = g.item(n);
                if let Some(dw) = dw.as_mut() {
                    let b: &[f64] = if geo.is_pointwise() {
                        xv.item(n)
                    } else {
                        im2col(xv.item(n), &geo, &mut col);
                        &col
                    };
                    gemm(cout, cols, rows, gn, cols, 1, b, 1, cols, 1.0, dw.data_mut());
                }
                if let Some(dx) = dx.as_mut() {
                    if geo.is_pointwise() {
                        gemm(rows, cout, cols, wv, 1, rows, gn, cols, 1, 0.0, dx.item_mut(n));
                    } else {
                        gemm(rows, cout, cols, wv, 1, rows, gn, cols, 1, 0.0, &mut dcol);
                        col2im(&dcol, &geo, dx.item_mut(n));
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let data = (0..cout)
                        .map(|o| (0..xs.n).map(|n| g.plane(n, o).iter().sum::<f64>()).sum())
                        .collect();
                    Tensor::from_vec(Shape::new(1, cout, 1, 1), data).unwrap()
                }));
            }
            grads
        }))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
    /// `weight` is `(cin, cout, 2, 2)`.
    pub fn conv_transpose2x2(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if ws.n != xs.c || ws.h != 2 || ws.w != 2 {
            return Err(Error::Shape(format!("conv_transpose2x2: weight {ws} for input {xs}")));
        }
        let cout = ws.c;
        let (p, r) = (xs.plane(), cout * 4);
        let out_shape = Shape::new(xs.n, cout, xs.h * 2, xs.w * 2);
        let mut out = Tensor::zeros(out_shape);
        let mut t = vec![0.0; r * p];
        {
            let xv = self.value(x);
            let wv = self.value(weight).data();
            let bv = bias.map(|b| self.value(b).data().to_vec());
            for n in 0..xs.n {
                gemm(r, xs.c, p, wv, 1, r, xv.item(n), p, 1, 0.0, &mut t);
                let dst = out.item_mut(n);
                for o in 0..cout {
                    let b0 = bv.as_ref().map_or(0.0, |b| b[o]);
                    for a in 0..2 {
                        for bb in 0..2 {
                            let row = &t[(o * 4 + a * 2 + bb) * p..(o * 4 + a * 2 + bb + 1) * p];
                            for y in 0..xs.h {
                                for xx in 0..xs.w {
                                    let oy = 2 * y + a;
                                    let ox = 2 * xx + bb;
                                    dst[(o * 2 * xs.h + oy) * 2 * xs.w + ox] = row[y * xs.w + xx] + b0;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad);
            let mut dt = vec![0.0; r * p];
            let mut dx = ctx.needs[0].then(|| Tensor::zeros(xs));
            let mut dw = ctx.needs[1].then(|| Tensor::zeros(ws));
            for n in 0..xs.n {
                let gn = g.item(n);
                for o in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let row = &mut dt[(o * 4 + a * 2 + bb) * p..(o * 4 + a * 2 + bb + 1) * p];
                            for y in 0..xs.h {
                                for xx in 0..xs.w {
                                    row[y * xs.w + xx] = gn[(o * 2 * xs.h + 2 * y + a) * 2 * xs.w + 2 * xx + bb];
                                }
                            }
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(xs.c, p, r, xv.item(n), p, 1, &dt, 1, p, 1.0, dw.data_mut());
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(xs.c, r, p, wv, r, 1, &dt, p, 1, 0.0, dx.item_mut(n));
                }
            }
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let data = (0..cout)
                        .map(|o| (0..xs.n).map(|n| g.plane(n, o).iter().sum::<f64>()).sum())
                        .collect();
                    Tensor::from_vec(Shape::new(1, cout, 1, 1), data).unwrap()
                }));
            }
            grads
        }))
    }

    /// 3×3 depthwise convolution, zero padding 1. `weight` is `(c, 1, 3, 3)`.
    pub fn depthwise3x3(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if ws != Shape::new(xs.c, 1, 3, 3) {
            return Err(Error::Shape(format!("depthwise3x3: weight {ws} for input {xs}")));
        }
        let (h, w) = (xs.h as isize, xs.w as isize);
        let mut out = Tensor::zeros(xs);
        {
            let xv = self.value(x);
            let wv = self.value(weight).data();
            let bv = bias.map(|b| self.value(b).data().to_vec());
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let src = xv.plane(n, c);
                    let k = &wv[c * 9..c * 9 + 9];
                    let b0 = bv.as_ref().map_or(0.0, |b| b[c]);
                    let dst = out.plane_mut(n, c);
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = b0;
                            for ky in 0..3 {
                                let iy = y + ky - 1;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx + kx - 1;
                                    if ix >= 0 && ix < w {
                                        acc += k[(ky * 3 + kx) as usize] * src[(iy * w + ix) as usize];
                                    }
                                }
                            }
                            dst[(y * w + xx) as usize] = acc;
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad);
            let mut dx = Tensor::zeros(xs);
            let mut dw = Tensor::zeros(ws);
            let mut db = vec![0.0; xs.c];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let src = xv.plane(n, c);
                    let gp = g.plane(n, c);
                    let k = &wv[c * 9..c * 9 + 9];
                    db[c] += gp.iter().sum::<f64>();
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = gp[(y * w + xx) as usize];
                            for ky in 0..3 {
                                let iy = y + ky - 1;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx + kx - 1;
                                    if ix >= 0 && ix < w {
                                        let si = (iy * w + ix) as usize;
                                        let ti = (ky * 3 + kx) as usize;
                                        dw.data_mut()[c * 9 + ti] += gv * src[si];
                                        dx.plane_mut(n, c)[si] += gv * k[ti];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if ctx.inputs.len() == 3 {
                grads.push(Some(Tensor::from_vec(Shape::new(1, xs.c, 1, 1), db).unwrap()));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: Shape, seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let ho = (xs.h + 2 * pad - k) / stride + 1;
        let wo = (xs.w + 2 * pad - k) / stride + 1;
        Tensor::from_fn(Shape::new(xs.n, ws.n, ho, wo), |n, o, y, xx| {
            let mut acc = b[o];
            for c in 0..xs.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (xx * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = rand(Shape::new(2, 3, 6, 8), 1);
            let w = rand(Shape::new(4, 3, k, k), 2);
            let b = rand(Shape::new(1, 4, 1, 1), 3);
            let mut g = Graph::inference();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let expect = naive_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(g.shape(y), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "k={k} s={stride}");
        }
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let x = rand(Shape::new(1, 4, 3, 5), 4);
        let w = rand(Shape::new(4, 2, 2, 2), 5);
        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv_transpose2x2(xv, wv, None).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 2, 6, 10));
        // y[o, 2i+a, 2j+b] = Σ_c x[c,i,j]·w[c,o,a,b]
        let v = (0..4).map(|c| x.at(0, c, 2, 3) * w.at(c, 1, 1, 0)).sum::<f64>();
        assert!((g.value(y).at(0, 1, 5, 6) - v).abs() < 1e-12);
    }

    #[test]
    fn convolution_gradients() {
        let x = rand(Shape::new(2, 3, 6, 6), 6);
        let w = rand(Shape::new(4, 3, 3, 3), 7);
        let b = rand(Shape::new(1, 4, 1, 1), 8);
        let wt = rand(Shape::new(4, 2, 2, 2), 9);
        let wd = rand(Shape::new(4, 1, 3, 3), 10);
        let w1 = rand(Shape::new(4, 3, 1, 1), 11);
        let r = check_gradient(&[x, w, b, wt, wd, w1], 30, 12, |g, v| {
            let a = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let p = g.conv2d(v[0], v[5], None, 1, 0)?;
            let d = g.depthwise3x3(p, v[4], Some(v[2]))?;
            let u = g.conv_transpose2x2(a, v[3], None)?;
            let s = g.concat_channels(&[u, d])?;
            let sq = g.mul(s, s)?;
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
