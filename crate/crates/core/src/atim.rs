//! Adaptive triple interaction: cross-scale fusion of stage-1 decoder and
//! stage-2 encoder features, and the dynamic filter block that turns the
//! fused features into per-pixel depthwise kernels for the stage-2 decoder.

use crate::blocks::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Depthwise3x3, ParamStore, Scope};
use crate::tensor::{reflect, Shape, Tensor};

/// Features at the three upper scales: full, 1/2 and 1/4 resolution, with
/// `c`, `2c` and `4c` channels.
#[derive(Clone, Copy, Debug)]
pub struct ScaleSet(pub [Var; 3]);

impl ScaleSet {
    pub fn validate(&self, g: &Graph, base_channels: usize) -> Result<()> {
        let s1 = g.shape(self.0[0]);
        for (i, &v) in self.0.iter().enumerate() {
            let s = g.shape(v);
            let f = 1 << i;
            if s.c != base_channels * f || s.h * f != s1.h || s.w * f != s1.w || s.n != s1.n {
                return Err(Error::Shape(format!(
                    "scale s{} has shape {s}; expected ({}, {}, {}, {})",
                    i + 1,
                    s1.n,
                    base_channels * f,
                    s1.h / f,
                    s1.w / f
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel depthwise kernels, stored `(n, k²·c, h, w)`.
///
/// Channel index `t·c + ch` holds tap `t = ky·k + kx` of channel `ch`
/// (kernel-major, then channel), i.e. at every pixel `W_{i,j}` is a row-major
/// `k² × c` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub weights: Tensor,
    pub k: usize,
}

impl FilterBank {
    pub fn new(weights: Tensor, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Shape(format!("dynamic kernel size must be odd, got {k}")));
        }
        if weights.shape().c % (k * k) != 0 {
            return Err(Error::Shape(format!(
                "filter bank {} is not a multiple of k²={}",
                weights.shape(),
                k * k
            )));
        }
        Ok(FilterBank { weights, k })
    }

    /// Center tap 1, all others 0, at every pixel and channel.
    pub fn identity(n: usize, c: usize, h: usize, w: usize, k: usize) -> Self {
        let center = (k * k) / 2;
        let weights = Tensor::from_fn(Shape::new(n, k * k * c, h, w), |_, ch, _, _| {
            if ch / c == center {
                1.0
            } else {
                0.0
            }
        });
        FilterBank { weights, k }
    }

    pub fn channels(&self) -> usize {
        self.weights.shape().c / (self.k * self.k)
    }

    /// `W_{y,x}` of batch element `n` as a row-major `k² × c` matrix.
    pub fn kernel_at(&self, n: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.weights.shape().c).map(|ch| self.weights.at(n, ch, y, x)).collect()
    }
}

/// `D ∗ W + D` for a concrete tensor and bank.
pub fn apply_dynamic_filter(d: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(d.clone());
    let b = g.constant(bank.weights.clone());
    let y = g.dynamic_filter(x, b, bank.k)?;
    let y = g.add(y, x)?;
    Ok(g.value(y).clone())
}

/// Reflected source index for every (tap offset, output position).
fn reflect_table(len: usize, k: usize) -> Vec<Vec<usize>> {
    let r = (k / 2) as isize;
    (0..k)
        .map(|t| (0..len).map(|i| reflect(i as isize + t as isize - r, len)).collect())
        .collect()
}

impl Graph {
    /// Per-pixel depthwise filtering with reflection padding `(k-1)/2`:
    /// `out[n,c,y,x] = Σ_{ky,kx} bank[n, (ky·k+kx)·C + c, y, x] · x[n, c, y+ky-r, x+kx-r]`.
    /// The residual of the full block is added by the caller.
    pub fn dynamic_filter(&mut self, x: Var, bank: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bank);
        if k % 2 == 0 || bs != Shape::new(xs.n, k * k * xs.c, xs.h, xs.w) {
            return Err(Error::Shape(format!(
                "dynamic filter: bank {bs} does not fit input {xs} with k={k}"
            )));
        }
        let (c, w) = (xs.c, xs.w);
        let ry = reflect_table(xs.h, k);
        let rx = reflect_table(xs.w, k);
        let mut out = Tensor::zeros(xs);
        {
            let (xv, bv) = (self.value(x), self.value(bank));
            for n in 0..xs.n {
                for ch in 0..c {
                    let src = xv.plane(n, ch);
                    let dst = out.plane_mut(n, ch);
                    for ky in 0..k {
                        for kx in 0..k {
                            let taps = bv.plane(n, (ky * k + kx) * c + ch);
                            let (rows, cols) = (&ry[ky], &rx[kx]);
                            for (y, &sy) in rows.iter().enumerate() {
                                let line = &src[sy * w..(sy + 1) * w];
                                let base = y * w;
                                for (xx, &sx) in cols.iter().enumerate() {
                                    dst[base + xx] += taps[base + xx] * line[sx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, &[x, bank], move |ctx| {
            let (xv, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut dx = ctx.needs[0].then(|| Tensor::zeros(xs));
            let mut db = ctx.needs[1].then(|| Tensor::zeros(bs));
            for n in 0..xs.n {
                for ch in 0..c {
                    let src = xv.plane(n, ch);
                    let gp = g.plane(n, ch);
                    for ky in 0..k {
                        for kx in 0..k {
                            let t = (ky * k + kx) * c + ch;
                            let (rows, cols) = (&ry[ky], &rx[kx]);
                            if let Some(db) = db.as_mut() {
                                let dt = db.plane_mut(n, t);
                                for (y, &sy) in rows.iter().enumerate() {
                                    for (xx, &sx) in cols.iter().enumerate() {
                                        dt[y * w + xx] = gp[y * w + xx] * src[sy * w + sx];
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let taps = bv.plane(n, t);
                                let dp = dx.plane_mut(n, ch);
                                for (y, &sy) in rows.iter().enumerate() {
                                    for (xx, &sx) in cols.iter().enumerate() {
                                        dp[sy * w + sx] += gp[y * w + xx] * taps[y * w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, db]
        }))
    }
}

/// Cross-scale fusion of one three-scale feature pyramid.
///
/// Each input scale gets its own 3×3 convolution; for every target scale the
/// three results are brought to the target resolution (bilinear up, strided
/// 3×3 convolutions down), concatenated and fused by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct CrossScaleFuse {
    base: usize,
    pre: [Conv2d; 3],
    down_1_2: Conv2d,
    down_1_3: [Conv2d; 2],
    down_2_3: Conv2d,
    fuse: [Conv2d; 3],
}

impl CrossScaleFuse {
    pub fn new(store: &mut ParamStore, name: &str, base: usize) -> Self {
        let cs = [base, 2 * base, 4 * base];
        let total: usize = cs.iter().sum();
        let conv = |store: &mut ParamStore, n: &str, ci, co, k, st| Conv2d::new(store, &format!("{name}.{n}"), ci, co, k, st);
        CrossScaleFuse {
            base,
            pre: [0, 1, 2].map(|i| conv(store, &format!("pre{}", i + 1), cs[i], cs[i], 3, 1)),
            down_1_2: conv(store, "down_1_2", cs[0], cs[0], 3, 2),
            down_1_3: [0, 1].map(|i| conv(store, &format!("down_1_3.{i}"), cs[0], cs[0], 3, 2)),
            down_2_3: conv(store, "down_2_3", cs[1], cs[1], 3, 2),
            fuse: [0, 1, 2].map(|i| conv(store, &format!("fuse{}", i + 1), total, cs[i], 1, 1)),
        }
    }

    pub fn forward(&self, s: &mut Scope, input: ScaleSet) -> Result<ScaleSet> {
        input.validate(s, self.base)?;
        let mut f = [input.0[0]; 3];
        for i in 0..3 {
            f[i] = self.pre[i].forward(s, input.0[i])?;
        }
        let to1 = [f[0], s.upsample_bilinear(f[1], 2), s.upsample_bilinear(f[2], 4)];
        let d12 = self.down_1_2.forward(s, f[0])?;
        let to2 = [d12, f[1], s.upsample_bilinear(f[2], 2)];
        let d13 = self.down_1_3[0].forward(s, f[0])?;
        let d13 = self.down_1_3[1].forward(s, d13)?;
        let d23 = self.down_2_3.forward(s, f[1])?;
        let to3 = [d13, d23, f[2]];
        let mut out = [input.0[0]; 3];
        for (i, parts) in [to1, to2, to3].iter().enumerate() {
            let cat = s.concat_channels(parts)?;
            out[i] = self.fuse[i].forward(s, cat)?;
        }
        Ok(ScaleSet(out))
    }
}

/// Adaptive dynamic filter block at one scale.
#[derive(Clone, Debug)]
pub struct DynamicFilterBlock {
    pub k: usize,
    pub channels: usize,
    fuse: Conv2d,
    spatial: Depthwise3x3,
    channel: Conv2d,
    project: Conv2d,
}

impl DynamicFilterBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "dynamic kernel size must be odd");
        DynamicFilterBlock {
            k,
            channels,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), 3 * channels, channels, 1, 1),
            spatial: Depthwise3x3::new(store, &format!("{name}.spatial"), channels),
            channel: Conv2d::new(store, &format!("{name}.channel"), channels, channels, 1, 1),
            project: Conv2d::new(store, &format!("{name}.project"), channels, k * k * channels, 1, 1),
        }
    }

    fn check(&self, s: &Scope, parts: [Var; 3]) -> Result<()> {
        let first = s.shape(parts[0]);
        for &p in &parts {
            let sh = s.shape(p);
            if sh != first || sh.c != self.channels {
                return Err(Error::Shape(format!(
                    "dynamic filter block for {} channels got {sh} alongside {first}",
                    self.channels
                )));
            }
        }
        Ok(())
    }

    /// Channel-context branch alone: global pooling then a 1×1 convolution,
    /// shape `(n, c, 1, 1)`.
    pub fn channel_context(&self, s: &mut Scope, fused: Var) -> Result<Var> {
        let pooled = s.global_avg_pool(fused);
        self.channel.forward(s, pooled)
    }

    /// Fuse the three inputs and project to a `(n, k²·c, h, w)` filter bank.
    pub fn generate_filters(&self, s: &mut Scope, fused_d1: Var, fused_e2: Var, d2: Var) -> Result<Var> {
        self.check(s, [fused_d1, fused_e2, d2])?;
        let cat = s.concat_channels(&[fused_d1, fused_e2, d2])?;
        let f = self.fuse.forward(s, cat)?;
        let spatial = self.spatial.forward(s, f)?;
        let channel = self.channel_context(s, f)?;
        let ctx = s.broadcast_add(spatial, channel)?;
        let ctx = s.leaky_relu(ctx, LEAKY_SLOPE);
        self.project.forward(s, ctx)
    }

    /// `D₂ ∗ W + D₂`.
    pub fn forward(&self, s: &mut Scope, fused_d1: Var, fused_e2: Var, d2: Var) -> Result<Var> {
        let bank = self.generate_filters(s, fused_d1, fused_e2, d2)?;
        let filtered = s.dynamic_filter(d2, bank, self.k)?;
        s.add(filtered, d2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, check_scope_gradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: Shape, seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Quadruple loop over (n, c, y, x) with the k×k window inside.
    fn naive_filter(d: &Tensor, bank: &FilterBank) -> Tensor {
        let s = d.shape();
        let (k, r) = (bank.k, (bank.k / 2) as isize);
        Tensor::from_fn(s, |n, c, y, x| {
            let kernel = bank.kernel_at(n, y, x);
            let mut acc = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let sy = reflect(y as isize + ky as isize - r, s.h);
                    let sx = reflect(x as isize + kx as isize - r, s.w);
                    acc += kernel[(ky * k + kx) * s.c + c] * d.at(n, c, sy, sx);
                }
            }
            acc + d.at(n, c, y, x)
        })
    }

    #[test]
    fn identity_bank_doubles_and_zero_bank_passes_through() {
        let d = rand(Shape::new(2, 3, 5, 6), 1);
        let id = FilterBank::identity(2, 3, 5, 6, 3);
        assert!(apply_dynamic_filter(&d, &id).unwrap().max_abs_diff(&d.scale(2.0)) < 1e-15);
        let zero = FilterBank::new(Tensor::zeros(Shape::new(2, 27, 5, 6)), 3).unwrap();
        assert_eq!(apply_dynamic_filter(&d, &zero).unwrap(), d);
    }

    #[test]
    fn matches_loop_oracle() {
        let d = rand(Shape::new(1, 4, 6, 6), 2);
        let bank = FilterBank::new(rand(Shape::new(1, 36, 6, 6), 3), 3).unwrap();
        let fast = apply_dynamic_filter(&d, &bank).unwrap();
        assert!(fast.max_abs_diff(&naive_filter(&d, &bank)) < 1e-6);
    }

    #[test]
    fn kernel_change_is_local() {
        let d = rand(Shape::new(1, 2, 6, 6), 4);
        let bank = FilterBank::new(rand(Shape::new(1, 18, 6, 6), 5), 3).unwrap();
        let base = apply_dynamic_filter(&d, &bank).unwrap();
        let mut moved = bank.clone();
        for ch in 0..18 {
            let v = moved.weights.at(0, ch, 2, 3);
            moved.weights.set(0, ch, 2, 3, v + 0.5);
        }
        let out = apply_dynamic_filter(&d, &moved).unwrap();
        for c in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    let changed = (out.at(0, c, y, x) - base.at(0, c, y, x)).abs() > 0.0;
                    assert_eq!(changed, (y, x) == (2, 3), "({c},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn mismatched_bank_is_rejected() {
        let d = rand(Shape::new(1, 2, 6, 6), 4);
        let bank = FilterBank::new(Tensor::zeros(Shape::new(1, 18, 5, 6)), 3).unwrap();
        assert!(apply_dynamic_filter(&d, &bank).is_err());
        assert!(FilterBank::new(Tensor::zeros(Shape::new(1, 16, 5, 6)), 4).is_err());
    }

    #[test]
    fn filter_op_gradients() {
        let d = rand(Shape::new(1, 2, 5, 4), 6);
        let b = rand(Shape::new(1, 18, 5, 4), 7);
        let r = check_gradient(&[d, b], 10, 8, |g, v| {
            let y = g.dynamic_filter(v[0], v[1], 3)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn generated_bank_shape_and_zero_case() {
        let mut store = ParamStore::new(3);
        let block = DynamicFilterBlock::new(&mut store, "adfb", 20, 3);
        let mut s = Scope::inference(&store);
        let z = s.constant(Tensor::zeros(Shape::new(1, 20, 32, 32)));
        let bank = block.generate_filters(&mut s, z, z, z).unwrap();
        assert_eq!(s.shape(bank), Shape::new(1, 180, 32, 32));
        assert_eq!(s.value(bank).max_abs(), 0.0);
    }

    #[test]
    fn channel_context_is_spatially_uniform() {
        let mut store = ParamStore::new(3);
        let block = DynamicFilterBlock::new(&mut store, "adfb", 4, 3);
        let mut s = Scope::inference(&store);
        let f = s.constant(rand(Shape::new(2, 4, 6, 6), 9));
        let ctx = block.channel_context(&mut s, f).unwrap();
        assert_eq!(s.shape(ctx), Shape::new(2, 4, 1, 1));
    }

    #[test]
    fn dynamic_filter_block_gradients() {
        let mut store = ParamStore::new(4);
        let block = DynamicFilterBlock::new(&mut store, "adfb", 2, 3);
        let inputs: Vec<Tensor> = (0..3).map(|i| rand(Shape::new(1, 2, 6, 6), 30 + i)).collect();
        let r = check_scope_gradient(&store, &inputs, 10, 5, |s, v| {
            let y = block.forward(s, v[0], v[1], v[2])?;
            let y2 = s.mul(y, y)?;
            Ok(s.mean(y2))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn cross_scale_fuse_shapes_and_connectivity() {
        let mut store = ParamStore::new(5);
        let fuse = CrossScaleFuse::new(&mut store, "ti", 20);
        let shapes = [Shape::new(1, 20, 32, 32), Shape::new(1, 40, 16, 16), Shape::new(1, 80, 8, 8)];
        let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, &sh)| rand(sh, 40 + i as u64)).collect();
        let mut s = Scope::training(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| s.leaf(t.clone())).collect();
        let out = fuse.forward(&mut s, ScaleSet([vars[0], vars[1], vars[2]])).unwrap();
        for (o, sh) in out.0.iter().zip(shapes) {
            assert_eq!(s.shape(*o), sh);
        }
        // every output scale depends on s3
        for &o in &out.0 {
            let mut s2 = Scope::training(&store);
            let v: Vec<Var> = inputs.iter().map(|t| s2.leaf(t.clone())).collect();
            let res = fuse.forward(&mut s2, ScaleSet([v[0], v[1], v[2]])).unwrap();
            let idx = out.0.iter().position(|x| *x == o).unwrap();
            let sq = s2.mul(res.0[idx], res.0[idx]).unwrap();
            let l = s2.sum(sq);
            s2.backward(l).unwrap();
            assert!(s2.grad(v[2]).unwrap().max_abs() > 0.0);
        }
        let zero: Vec<Var> = shapes.iter().map(|&sh| s.constant(Tensor::zeros(sh))).collect();
        let z = fuse.forward(&mut s, ScaleSet([zero[0], zero[1], zero[2]])).unwrap();
        assert!(z.0.iter().all(|&v| s.value(v).max_abs() == 0.0));
    }
}
