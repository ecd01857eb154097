//! Differentiable operations on [`Graph`] values: elementwise maps,
//! reductions, channel plumbing, resizing and the Fourier pair.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::spectral;
use crate::tensor::{Shape, Tensor};

/// Floor under the squared modulus in amplitude and phase derivatives.
pub const SPECTRAL_EPS: f64 = 1e-8;

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa} vs {sb}")));
    }
    Ok(())
}

impl Graph {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], move |ctx| {
            let (xv, yv, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
            let data = g
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(ctx.grad.shape(), data).unwrap())]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, &[a, b], |ctx| {
            let gb = ctx.needs[1].then(|| ctx.grad.scale(-1.0));
            vec![Some(ctx.grad.clone()), gb]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, &[a, b], |ctx| {
            let ga = ctx.needs[0].then(|| ctx.grad.mul(ctx.inputs[1]).unwrap());
            let gb = ctx.needs[1].then(|| ctx.grad.mul(ctx.inputs[0]).unwrap());
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, move |_, _| k)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |x, _| -x.sin())
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, |x, _| x.cos())
    }

    /// `ln(max(x, floor))`.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        self.unary(
            x,
            move |v| v.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    /// Modulus `√(re² + im²)`; the derivative uses a floored modulus so it
    /// stays finite at the origin.
    pub fn hypot(&mut self, re: Var, im: Var) -> Result<Var> {
        same_shape(self, re, im, "hypot")?;
        let value = self.value(re).zip_map(self.value(im), f64::hypot)?;
        Ok(self.push(value, &[re, im], |ctx| {
            let (r, i, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let denom: Vec<f64> = r
                .iter()
                .zip(i)
                .map(|(r, i)| (r * r + i * i + SPECTRAL_EPS).sqrt())
                .collect();
            let shape = ctx.grad.shape();
            let gr = (0..g.len()).map(|k| g[k] * r[k] / denom[k]).collect();
            let gi = (0..g.len()).map(|k| g[k] * i[k] / denom[k]).collect();
            vec![
                Some(Tensor::from_vec(shape, gr).unwrap()),
                Some(Tensor::from_vec(shape, gi).unwrap()),
            ]
        }))
    }

    /// Argument of `re + i·im` in `(-π, π]`, zero at the origin.
    pub fn atan2(&mut self, im: Var, re: Var) -> Result<Var> {
        same_shape(self, re, im, "atan2")?;
        let value = self.value(re).zip_map(self.value(im), spectral::phase_of)?;
        Ok(self.push(value, &[im, re], |ctx| {
            let (i, r, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let shape = ctx.grad.shape();
            let m2: Vec<f64> = r.iter().zip(i).map(|(r, i)| r * r + i * i + SPECTRAL_EPS).collect();
            let gi = (0..g.len()).map(|k| g[k] * r[k] / m2[k]).collect();
            let gr = (0..g.len()).map(|k| -g[k] * i[k] / m2[k]).collect();
            vec![
                Some(Tensor::from_vec(shape, gi).unwrap()),
                Some(Tensor::from_vec(shape, gr).unwrap()),
            ]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x);
        self.push(value, &[x], move |ctx| {
            vec![Some(Tensor::full(shape, ctx.grad.data()[0]))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute error over all elements.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Sum over channels: `(n, c, h, w) -> (n, 1, h, w)`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(s.with_c(1));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c).to_vec();
                for (o, v) in out.plane_mut(n, 0).iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        self.push(out, &[x], move |ctx| {
            let mut gx = Tensor::zeros(s);
            for n in 0..s.n {
                let g = ctx.grad.plane(n, 0);
                for c in 0..s.c {
                    gx.plane_mut(n, c).copy_from_slice(g);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax across channels at every `(n, h, w)`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for p in 0..s.plane() {
                let idx = |c: usize| (n * s.c + c) * s.plane() + p;
                let m = (0..s.c).map(|c| xv.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..s.c {
                    let e = (xv.data()[idx(c)] - m).exp();
                    out.data_mut()[idx(c)] = e;
                    z += e;
                }
                for c in 0..s.c {
                    out.data_mut()[idx(c)] /= z;
                }
            }
        }
        self.push(out, &[x], move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut gx = Tensor::zeros(s);
            for n in 0..s.n {
                for p in 0..s.plane() {
                    let idx = |c: usize| (n * s.c + c) * s.plane() + p;
                    let dot: f64 = (0..s.c).map(|c| y[idx(c)] * g[idx(c)]).sum();
                    for c in 0..s.c {
                        gx.data_mut()[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Global average pooling: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let inv = 1.0 / s.plane() as f64;
        let data = (0..s.n * s.c)
            .map(|k| xv.plane(k / s.c, k % s.c).iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).unwrap();
        self.push(out, &[x], move |ctx| {
            let mut gx = Tensor::zeros(s);
            for k in 0..s.n * s.c {
                let v = ctx.grad.data()[k] * inv;
                gx.plane_mut(k / s.c, k % s.c).fill(v);
            }
            vec![Some(gx)]
        })
    }

    /// `x + v` with `v` of shape `(n, c, 1, 1)` broadcast over space.
    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x);
        if self.shape(v) != Shape::new(s.n, s.c, 1, 1) {
            return Err(Error::Shape(format!(
                "broadcast_add: {} cannot broadcast over {s}",
                self.shape(v)
            )));
        }
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for k in 0..s.n * s.c {
            out.plane_mut(k / s.c, k % s.c).iter_mut().for_each(|o| *o += vv[k]);
        }
        Ok(self.push(out, &[x, v], move |ctx| {
            let gv = ctx.needs[1].then(|| {
                let data = (0..s.n * s.c)
                    .map(|k| ctx.grad.plane(k / s.c, k % s.c).iter().sum())
                    .collect();
                Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).unwrap()
            });
            vec![Some(ctx.grad.clone()), gv]
        }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values)?;
        let widths: Vec<usize> = values.iter().map(|v| v.shape().c).collect();
        Ok(self.push(out, parts, move |ctx| {
            let mut start = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let g = ctx.needs[i].then(|| ctx.grad.slice_channels(start, c).unwrap());
                    start += c;
                    g
                })
                .collect()
        }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let s = self.shape(x);
        Ok(self.push(out, &[x], move |ctx| {
            let mut gx = Tensor::zeros(s);
            let p = s.plane();
            for n in 0..s.n {
                let dst = &mut gx.item_mut(n)[start * p..(start + len) * p];
                dst.copy_from_slice(ctx.grad.item(n));
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, edges clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let s = self.shape(x);
        let (ho, wo) = (s.h * factor, s.w * factor);
        let ty = linear_taps(s.h, ho);
        let tx = linear_taps(s.w, wo);
        let xv = self.value(x);
        let mut out = Tensor::zeros(s.with_hw(ho, wo));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        dst[oy * wo + ox] = (1.0 - ly) * ((1.0 - lx) * src[y0 * s.w + x0] + lx * src[y0 * s.w + x1])
                            + ly * ((1.0 - lx) * src[y1 * s.w + x0] + lx * src[y1 * s.w + x1]);
                    }
                }
            }
        }
        self.push(out, &[x], move |ctx| {
            let mut gx = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    let g = ctx.grad.plane(n, c).to_vec();
                    let dst = gx.plane_mut(n, c);
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = g[oy * wo + ox];
                            dst[y0 * s.w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                            dst[y0 * s.w + x1] += (1.0 - ly) * lx * v;
                            dst[y1 * s.w + x0] += ly * (1.0 - lx) * v;
                            dst[y1 * s.w + x1] += ly * lx * v;
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Orthonormal 2-D transform of a real tensor. The result stacks the real
    /// planes (channels `0..c`) before the imaginary planes (`c..2c`).
    pub fn fft2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let spec = spectral::fft_real(self.value(x));
        let out = Tensor::concat_channels(&[&spec.re, &spec.im]).unwrap();
        self.push(out, &[x], move |ctx| {
            let gr = ctx.grad.slice_channels(0, s.c).unwrap();
            let gi = ctx.grad.slice_channels(s.c, s.c).unwrap();
            let (re, _) = spectral::ifft_complex(&spectral::Spectrum { re: gr, im: gi });
            vec![Some(re)]
        })
    }

    /// Real part of the orthonormal inverse transform of a stacked
    /// `(re ‖ im)` spectrum. Any imaginary part is discarded.
    pub fn ifft2_real(&mut self, spec: Var) -> Result<Var> {
        let s = self.shape(spec);
        if s.c % 2 != 0 {
            return Err(Error::Shape(format!("ifft2_real needs stacked re/im channels, got {s}")));
        }
        let c = s.c / 2;
        let v = self.value(spec);
        let (re, _) = spectral::ifft_complex(&spectral::Spectrum {
            re: v.slice_channels(0, c)?,
            im: v.slice_channels(c, c)?,
        });
        Ok(self.push(re, &[spec], move |ctx| {
            let (gr, gi) = spectral::fft_complex(ctx.grad, &Tensor::zeros(ctx.grad.shape()));
            vec![Some(Tensor::concat_channels(&[&gr, &gi]).unwrap())]
        }))
    }
}

impl Graph {
    /// Amplitude and phase planes of `x`'s spectrum.
    pub fn amplitude_phase(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.shape(x).c;
        let spec = self.fft2(x);
        let re = self.slice_channels(spec, 0, c)?;
        let im = self.slice_channels(spec, c, c)?;
        Ok((self.hypot(re, im)?, self.atan2(im, re)?))
    }

    pub fn amplitude(&mut self, x: Var) -> Result<Var> {
        Ok(self.amplitude_phase(x)?.0)
    }

    /// `Re(F⁻¹(amp · e^{i·phase}))`.
    pub fn recompose(&mut self, amp: Var, phase: Var) -> Result<Var> {
        let cos = self.cos(phase);
        let sin = self.sin(phase);
        let re = self.mul(amp, cos)?;
        let im = self.mul(amp, sin)?;
        let spec = self.concat_channels(&[re, im])?;
        self.ifft2_real(spec)
    }

    /// Amplitude of `amp_src` combined with the phase of `phase_src`.
    pub fn amp_swap(&mut self, amp_src: Var, phase_src: Var) -> Result<Var> {
        same_shape(self, amp_src, phase_src, "amp_swap")?;
        let amp = self.amplitude(amp_src)?;
        let (_, phase) = self.amplitude_phase(phase_src)?;
        self.recompose(amp, phase)
    }
}

/// Source indices and weight for each output position of a linear resize.
fn linear_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
