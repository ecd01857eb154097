//! Building blocks shared by both stages: the residual amplitude/phase
//! block, the supervised attention module and the resolution changes.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv2d, ConvTranspose2x2, ParamStore, Scope};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Which Fourier plane the residual block's frequency branch rewrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralBranch {
    Amplitude,
    Phase,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub spectral_branch: SpectralBranch,
}

/// Two 1×1 convolutions with a leaky ReLU between them, applied to one
/// spectral plane. On the amplitude plane the result is rectified with `|·|`.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    conv1: Conv2d,
    conv2: Conv2d,
    rectify: bool,
    identity: bool,
}

impl SpectralTransform {
    fn new(store: &mut ParamStore, name: &str, c: usize, rectify: bool) -> Self {
        SpectralTransform {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 1, 1),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 1, 1),
            rectify,
            identity: false,
        }
    }

    fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        if self.identity {
            return Ok(x);
        }
        let t = self.conv1.forward(s, x)?;
        let t = s.leaky_relu(t, LEAKY_SLOPE);
        let t = self.conv2.forward(s, t)?;
        Ok(if self.rectify { s.abs(t) } else { t })
    }
}

/// Residual amplitude block (RAB), residual phase block (RPB) or, with
/// [`SpectralBranch::None`], a plain spatial residual block.
///
/// `F_spa = x + conv(lrelu(conv(x)))`; the frequency branch rewrites one
/// plane of `F_spa`'s spectrum, inverts it to `F_fre`, and `[F_spa ‖ F_fre]`
/// is fused back to `channels` by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub cfg: BlockConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    spectral: Option<(SpectralTransform, Conv2d)>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig) -> Self {
        let c = cfg.channels;
        assert!(c > 0, "residual block with zero channels");
        let spectral = match cfg.spectral_branch {
            SpectralBranch::None => None,
            branch => Some((
                SpectralTransform::new(store, &format!("{name}.spectral"), c, branch == SpectralBranch::Amplitude),
                Conv2d::new(store, &format!("{name}.fuse"), 2 * c, c, 1, 1),
            )),
        };
        ResidualBlock {
            cfg,
            conv1: Conv2d::new(store, &format!("{name}.spatial.conv1"), c, c, 3, 1),
            conv2: Conv2d::new(store, &format!("{name}.spatial.conv2"), c, c, 3, 1),
            spectral,
        }
    }

    /// Replace the spectral 1×1 transforms by the identity map.
    pub fn freeze_spectral_identity(&mut self) {
        if let Some((t, _)) = self.spectral.as_mut() {
            t.identity = true;
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.conv1.num_params() + self.conv2.num_params();
        if let Some((t, fuse)) = &self.spectral {
            n += t.conv1.num_params() + t.conv2.num_params() + fuse.num_params();
        }
        n
    }

    /// The spatial residual path alone (`F_spa`).
    pub fn spatial(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let c = s.shape(x).c;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "residual block built for {} channels got {c}",
                self.cfg.channels
            )));
        }
        let t = self.conv1.forward(s, x)?;
        let t = s.leaky_relu(t, LEAKY_SLOPE);
        let t = self.conv2.forward(s, t)?;
        s.add(x, t)
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let f_spa = self.spatial(s, x)?;
        let Some((transform, fuse)) = &self.spectral else {
            return Ok(f_spa);
        };
        let (mut amp, mut phase) = s.amplitude_phase(f_spa)?;
        match self.cfg.spectral_branch {
            SpectralBranch::Amplitude => amp = transform.forward(s, amp)?,
            SpectralBranch::Phase => phase = transform.forward(s, phase)?,
            SpectralBranch::None => unreachable!(),
        }
        let f_fre = s.recompose(amp, phase)?;
        let cat = s.concat_channels(&[f_spa, f_fre])?;
        fuse.forward(s, cat)
    }
}

/// Supervised attention module bridging the stages.
///
/// `restored = conv_img(features) + image`,
/// `attention = σ(conv_att(restored))`,
/// `gated = conv_feat(features) · attention + features`.
#[derive(Clone, Debug)]
pub struct Sam {
    conv_feat: Conv2d,
    conv_img: Conv2d,
    conv_att: Conv2d,
}

pub struct SamOutput {
    pub restored: Var,
    pub gated: Var,
    pub attention: Var,
}

impl Sam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, image_channels: usize) -> Self {
        Sam {
            conv_feat: Conv2d::new(store, &format!("{name}.conv_feat"), channels, channels, 3, 1),
            conv_img: Conv2d::new(store, &format!("{name}.conv_img"), channels, image_channels, 3, 1),
            conv_att: Conv2d::new(store, &format!("{name}.conv_att"), image_channels, channels, 3, 1),
        }
    }

    pub fn forward(&self, s: &mut Scope, features: Var, image: Var) -> Result<SamOutput> {
        let (fs, is) = (s.shape(features), s.shape(image));
        if fs.n != is.n || fs.h != is.h || fs.w != is.w {
            return Err(Error::Shape(format!("SAM features {fs} vs image {is}")));
        }
        if is.c != self.conv_img.cout {
            return Err(Error::Shape(format!(
                "SAM expects {}-channel images, got {}",
                self.conv_img.cout, is.c
            )));
        }
        let residual = self.conv_img.forward(s, features)?;
        let restored = s.add(residual, image)?;
        let att = self.conv_att.forward(s, restored)?;
        let attention = s.sigmoid(att);
        let f = self.conv_feat.forward(s, features)?;
        let gated = s.mul(f, attention)?;
        let gated = s.add(gated, features)?;
        Ok(SamOutput {
            restored,
            gated,
            attention,
        })
    }
}

/// Strided 3×3 convolution: half resolution, double channels.
#[derive(Clone, Debug)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize) -> Self {
        Downsample {
            conv: Conv2d::new(store, name, cin, 2 * cin, 3, 2),
        }
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.h % 2 != 0 || shape.w % 2 != 0 {
            return Err(Error::Shape(format!("downsample needs even spatial dims, got {shape}")));
        }
        self.conv.forward(s, x)
    }
}

/// Transposed 2×2 convolution: double resolution, half channels.
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: ConvTranspose2x2,
    cin: usize,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize) -> Self {
        assert!(cin % 2 == 0, "upsample needs an even channel count");
        Upsample {
            conv: ConvTranspose2x2::new(store, name, cin, cin / 2),
            cin,
        }
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.c != self.cin {
            return Err(Error::Shape(format!("upsample built for {} channels got {shape}", self.cin)));
        }
        self.conv.forward(s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_scope_gradient;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: Shape, seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn block(branch: SpectralBranch, c: usize) -> (ParamStore, ResidualBlock) {
        let mut store = ParamStore::new(7);
        let b = ResidualBlock::new(&mut store, "b", BlockConfig { channels: c, spectral_branch: branch });
        (store, b)
    }

    fn run(store: &ParamStore, b: &ResidualBlock, x: &Tensor) -> Tensor {
        let mut s = Scope::inference(store);
        let xv = s.constant(x.clone());
        let y = b.forward(&mut s, xv).unwrap();
        s.value(y).clone()
    }

    #[test]
    fn rab_parameter_count_matches_layer_by_layer_tally() {
        // two 3x3 c->c convs, two 1x1 c->c convs, one 1x1 2c->c fusion; all biased
        let c = 20;
        let tally = 2 * (9 * c * c + c) + 2 * (c * c + c) + (2 * c * c + c);
        assert_eq!(tally, 8900);
        let (store, b) = block(SpectralBranch::Amplitude, c);
        assert_eq!(b.num_params(), tally);
        assert_eq!(store.count_inference(), tally);
        let (store, _) = block(SpectralBranch::None, c);
        assert_eq!(store.count_inference(), 2 * (9 * c * c + c));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for branch in [SpectralBranch::Amplitude, SpectralBranch::Phase, SpectralBranch::None] {
            let (store, b) = block(branch, 4);
            let y = run(&store, &b, &Tensor::zeros(Shape::new(1, 4, 8, 8)));
            assert_eq!(y.max_abs(), 0.0, "{branch:?}");
        }
    }

    #[test]
    fn spatial_only_block_equals_spatial_path() {
        let (store, b) = block(SpectralBranch::None, 4);
        let x = rand(Shape::new(2, 4, 8, 8), 1);
        let mut s = Scope::inference(&store);
        let xv = s.constant(x.clone());
        let sp = b.spatial(&mut s, xv).unwrap();
        let expect = s.value(sp).clone();
        assert_eq!(run(&store, &b, &x), expect);
    }

    #[test]
    fn rab_and_rpb_agree_with_identity_transforms() {
        let (store, mut rab) = block(SpectralBranch::Amplitude, 4);
        let mut rpb_store = ParamStore::new(99);
        let mut rpb = ResidualBlock::new(
            &mut rpb_store,
            "b",
            BlockConfig { channels: 4, spectral_branch: SpectralBranch::Phase },
        );
        assert_eq!(rpb_store.copy_matching(&store), rpb_store.len());
        rab.freeze_spectral_identity();
        rpb.freeze_spectral_identity();
        let x = rand(Shape::new(1, 4, 8, 8), 2);
        let a = run(&store, &rab, &x);
        let b = run(&rpb_store, &rpb, &x);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (store, b) = block(SpectralBranch::Amplitude, 4);
        let mut s = Scope::inference(&store);
        let x = s.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        assert!(matches!(b.forward(&mut s, x), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_block_gradients() {
        for (i, branch) in [SpectralBranch::Amplitude, SpectralBranch::Phase].into_iter().enumerate() {
            let (store, b) = block(branch, 3);
            let x = rand(Shape::new(1, 3, 8, 8), 10 + i as u64);
            let r = check_scope_gradient(&store, &[x], 10, 20 + i as u64, |s, v| {
                let y = b.forward(s, v[0])?;
                let y2 = s.mul(y, y)?;
                Ok(s.mean(y2))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "{branch:?}: {r:?}");
        }
    }

    #[test]
    fn sam_identity_and_attention_range() {
        let mut store = ParamStore::new(1);
        let sam = Sam::new(&mut store, "sam", 4, 3);
        let img = rand(Shape::new(1, 3, 8, 8), 3);
        let mut s = Scope::inference(&store);
        let f = s.constant(Tensor::zeros(Shape::new(1, 4, 8, 8)));
        let i = s.constant(img.clone());
        let out = sam.forward(&mut s, f, i).unwrap();
        assert_eq!(s.value(out.restored), &img);
        let fr = s.constant(rand(Shape::new(1, 4, 8, 8), 4).scale(50.0));
        let out = sam.forward(&mut s, fr, i).unwrap();
        assert!(s.value(out.attention).data().iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(s.shape(out.gated), Shape::new(1, 4, 8, 8));
        let bad = s.constant(Tensor::zeros(Shape::new(1, 3, 4, 8)));
        assert!(sam.forward(&mut s, f, bad).is_err());
    }

    #[test]
    fn scale_changes_follow_the_ladder() {
        let mut store = ParamStore::new(1);
        let down = Downsample::new(&mut store, "down", 20);
        let up = Upsample::new(&mut store, "up", 160);
        let up40 = Upsample::new(&mut store, "up40", 40);
        let mut s = Scope::inference(&store);
        let x = s.constant(Tensor::zeros(Shape::new(1, 20, 32, 32)));
        let d = down.forward(&mut s, x).unwrap();
        assert_eq!(s.shape(d), Shape::new(1, 40, 16, 16));
        let back = up40.forward(&mut s, d).unwrap();
        assert_eq!(s.shape(back), Shape::new(1, 20, 32, 32));
        let z = s.constant(Tensor::zeros(Shape::new(1, 160, 4, 4)));
        let u = up.forward(&mut s, z).unwrap();
        assert_eq!(s.shape(u), Shape::new(1, 80, 8, 8));
        let odd = s.constant(Tensor::zeros(Shape::new(1, 20, 7, 8)));
        assert!(down.forward(&mut s, odd).is_err());
    }
}
