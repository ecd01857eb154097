//! Paired hazy/clean images: folder loading, augmentation, PNG I/O and a
//! synthetic haze generator based on the atmospheric scattering model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One training or evaluation pair; both images are `(1, 3, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub hazy: Tensor,
    pub gt: Tensor,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, hazy: Tensor, gt: Tensor) -> Result<Self> {
        if hazy.shape() != gt.shape() {
            return Err(Error::Dataset(format!(
                "hazy {} and clean {} differ in shape",
                hazy.shape(),
                gt.shape()
            )));
        }
        Ok(PairedSample {
            id: id.into(),
            hazy,
            gt,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    /// File names present on one side only.
    pub orphans: Vec<String>,
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Write batch item 0 of a 3-channel tensor as an 8-bit PNG.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::Shape(format!("PNG output needs 3 channels, got {s}")));
    }
    let img = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| to_u8(t.at(0, c, y as usize, x as usize))))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a single-channel plane as a grayscale PNG, rescaled to `[0, 1]`.
pub fn write_gray_png(path: &Path, plane: &[f64], h: usize, w: usize) -> Result<()> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8((plane[y as usize * w + x as usize] - lo) / span)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        if let (true, Some(stem)) = (is_image, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pair hazy and clean file stems. A hazy stem matches a clean stem exactly,
/// or else by its prefix before the first `_` (`1400_1` ↔ `1400`).
/// Returns `(hazy stem, clean stem)` pairs and the orphans of both sides.
pub fn match_stems<'a>(
    hazy: impl IntoIterator<Item = &'a str>,
    gt: impl IntoIterator<Item = &'a str>,
) -> (Vec<(String, String)>, Vec<String>) {
    let gt: Vec<&str> = gt.into_iter().collect();
    let mut used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    for h in hazy {
        let prefix = h.split('_').next().unwrap_or(h);
        let hit = gt.iter().position(|g| *g == h).or_else(|| gt.iter().position(|g| *g == prefix));
        match hit {
            Some(i) => {
                used[i] = true;
                pairs.push((h.to_string(), gt[i].to_string()));
            }
            None => orphans.push(format!("hazy/{h}")),
        }
    }
    for (g, u) in gt.iter().zip(used) {
        if !u {
            orphans.push(format!("gt/{g}"));
        }
    }
    pairs.sort();
    (pairs, orphans)
}

/// Load `root/hazy/*` and `root/gt/*`, ordered by sample id (the hazy stem).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let hazy_dir = root.join("hazy");
    let gt_dir = root.join("gt");
    for d in [&hazy_dir, &gt_dir] {
        if !d.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", d.display())));
        }
    }
    let hazy = list_images(&hazy_dir)?;
    let gt = list_images(&gt_dir)?;
    let (pairs, orphans) = match_stems(hazy.keys().map(String::as_str), gt.keys().map(String::as_str));
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no matching pairs under {}: {} hazy and {} clean images",
            root.display(),
            hazy.len(),
            gt.len()
        )));
    }
    for o in &orphans {
        log::warn!("unmatched image {o} in {}", root.display());
    }
    let samples = pairs
        .iter()
        .map(|(h, g)| PairedSample::new(h.clone(), read_png(&hazy[h])?, read_png(&gt[g])?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, orphans })
}

/// Seed for one sample's augmentation stream, independent of load order.
pub fn sample_seed(global: u64, epoch: usize, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Random `patch × patch` crop (if given), horizontal and vertical flips and a
/// rotation by a multiple of 90°, applied identically to both images.
pub fn augment(sample: &PairedSample, seed: u64, patch: Option<usize>) -> Result<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample.hazy.shape();
    let (mut hazy, mut gt) = match patch {
        Some(p) if p > s.h || p > s.w => {
            return Err(Error::Dataset(format!(
                "patch {p} larger than image {}×{} ({})",
                s.h, s.w, sample.id
            )))
        }
        Some(p) => {
            let top = rng.gen_range(0..=s.h - p);
            let left = rng.gen_range(0..=s.w - p);
            (sample.hazy.crop(top, left, p, p)?, sample.gt.crop(top, left, p, p)?)
        }
        None => (sample.hazy.clone(), sample.gt.clone()),
    };
    if rng.gen_bool(0.5) {
        hazy = hazy.flip_horizontal();
        gt = gt.flip_horizontal();
    }
    if rng.gen_bool(0.5) {
        hazy = hazy.flip_vertical();
        gt = gt.flip_vertical();
    }
    for _ in 0..rng.gen_range(0..4) {
        hazy = hazy.rotate90();
        gt = gt.rotate90();
    }
    PairedSample::new(sample.id.clone(), hazy, gt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    /// Atmospheric light, in `[0.6, 1.0]`.
    pub airlight: f64,
    /// Scattering coefficient, in `[0.4, 2.0]` for generated data.
    pub beta: f64,
    /// Depth in `[0, 1]`, `(1, 1, h, w)`.
    pub depth: Tensor,
}

impl HazeParams {
    pub fn transmission(&self) -> Tensor {
        self.depth.map(|d| (-self.beta * d).exp())
    }
}

/// `hazy = clean·t + A·(1 − t)` with `t = exp(−β·d)`, clipped to `[0, 1]`.
pub fn synthesize_haze(clean: &Tensor, params: &HazeParams) -> Result<Tensor> {
    let s = clean.shape();
    let ds = params.depth.shape();
    if ds.h != s.h || ds.w != s.w || ds.c != 1 {
        return Err(Error::Shape(format!("depth {ds} does not fit image {s}")));
    }
    let t = params.transmission();
    let a = params.airlight;
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let t = t.at(n.min(ds.n - 1), 0, y, x);
        (clean.at(n, c, y, x) * t + a * (1.0 - t)).clamp(0.0, 1.0)
    }))
}

/// Smooth random clean image: a few low-frequency colour waves plus a disc
/// and a rectangle.
pub fn synthetic_clean(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            [
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.0..1.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(0.2..0.7));
    let disc = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.25));
    let disc_color: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(0.0..1.0));
    let rect = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5), rng.gen_range(0.2..0.5));
    let rect_color: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(0.0..1.0));
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
        if (u - disc.0).powi(2) + (v - disc.1).powi(2) < disc.2 * disc.2 {
            return disc_color[c];
        }
        if u >= rect.0 && u < rect.0 + rect.2 && v >= rect.1 && v < rect.1 + rect.2 {
            return rect_color[c];
        }
        let mut val = base[c];
        for k in 0..3 {
            let [fy, fx, ph, amp, _] = waves[c * 3 + k];
            val += amp * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin();
        }
        val.clamp(0.0, 1.0)
    })
}

/// Depth ramp in a random direction with a gentle bump, in `[0, 1]`.
pub fn synthetic_depth(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (cy, cx) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
    let raw = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
        let ramp = u * angle.sin() + v * angle.cos();
        ramp + 0.3 * (-((u - cy).powi(2) + (v - cx).powi(2)) * 8.0).exp()
    });
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.map(|d| (d - lo) / (hi - lo).max(1e-12))
}

/// `count` synthetic pairs of size `size × size`, reproducible from `seed`.
pub fn synthetic_pairs(count: usize, size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let clean = synthetic_clean(size, size, &mut rng);
            let params = HazeParams {
                airlight: rng.gen_range(0.6..=1.0),
                beta: rng.gen_range(0.4..=2.0),
                depth: synthetic_depth(size, size, &mut rng),
            };
            let hazy = synthesize_haze(&clean, &params)?;
            PairedSample::new(format!("{i:04}"), hazy, clean)
        })
        .collect()
}

/// Write pairs in the `hazy/` + `gt/` folder layout.
pub fn write_dataset(root: &Path, samples: &[PairedSample]) -> Result<()> {
    for sub in ["hazy", "gt"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        write_png(&root.join("hazy").join(format!("{}.png", s.id)), &s.hazy)?;
        write_png(&root.join("gt").join(format!("{}.png", s.id)), &s.gt)?;
    }
    Ok(())
}

/// Stack samples into `(n, 3, h, w)` hazy and clean batches.
pub fn batch(samples: &[PairedSample]) -> Result<(Tensor, Tensor)> {
    let hazy: Vec<&Tensor> = samples.iter().map(|s| &s.hazy).collect();
    let gt: Vec<&Tensor> = samples.iter().map(|s| &s.gt).collect();
    Ok((Tensor::stack(&hazy)?, Tensor::stack(&gt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(seed: u64, h: usize, w: usize) -> PairedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hazy = Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
        let gt = Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
        PairedSample::new("x", hazy, gt).unwrap()
    }

    fn sorted(t: &Tensor) -> Vec<f64> {
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn stem_rules() {
        let (pairs, orphans) = match_stems(["1400_1", "1400_2", "0007", "lonely"], ["0007", "1400", "9999"]);
        assert_eq!(
            pairs,
            vec![
                ("0007".into(), "0007".into()),
                ("1400_1".into(), "1400".into()),
                ("1400_2".into(), "1400".into())
            ]
        );
        assert_eq!(orphans, vec!["hazy/lonely".to_string(), "gt/9999".to_string()]);
    }

    #[test]
    fn folder_round_trip_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synthetic_pairs(5, 16, 1).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        write_png(&dir.path().join("hazy").join("extra.png"), &samples[0].hazy).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 5);
        assert_eq!(ds.orphans, vec!["hazy/extra".to_string()]);
        // 8-bit quantisation only
        assert!(ds.samples[2].gt.max_abs_diff(&samples[2].gt) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_pairs(1, 8, 2).unwrap();
        write_dataset(dir.path(), &s).unwrap();
        std::fs::rename(
            dir.path().join("gt").join("0000.png"),
            dir.path().join("gt").join("zzz.png"),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("1 hazy and 1 clean"), "{err}");
        assert!(load_dataset(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn haze_limits_and_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = synthetic_clean(8, 8, &mut rng);
        let depth = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, _| y as f64 / 7.0);
        let none = HazeParams {
            airlight: 0.8,
            beta: 0.0,
            depth: depth.clone(),
        };
        assert_eq!(synthesize_haze(&clean, &none).unwrap(), clean);
        let thick = HazeParams {
            airlight: 0.8,
            beta: 1e4,
            depth: Tensor::full(Shape::new(1, 1, 8, 8), 1.0),
        };
        assert!(synthesize_haze(&clean, &thick).unwrap().data().iter().all(|v| (v - 0.8).abs() < 1e-12));
        let mid = HazeParams {
            airlight: 0.9,
            beta: 1.2,
            depth,
        };
        let hazy = synthesize_haze(&clean, &mid).unwrap();
        let t = (-1.2f64 * 3.0 / 7.0).exp();
        let expect = clean.at(0, 1, 3, 5) * t + 0.9 * (1.0 - t);
        assert!((hazy.at(0, 1, 3, 5) - expect).abs() < 1e-12);
    }

    #[test]
    fn augmentation_is_reproducible_and_checked() {
        let s = sample(4, 12, 12);
        assert_eq!(augment(&s, 9, Some(8)).unwrap(), augment(&s, 9, Some(8)).unwrap());
        assert_eq!(augment(&s, 9, Some(8)).unwrap().hazy.shape(), Shape::new(1, 3, 8, 8));
        assert!(augment(&s, 9, Some(13)).is_err());
        let f = s.hazy.flip_horizontal().flip_horizontal();
        assert_eq!(f, s.hazy);
    }

    #[test]
    fn synthetic_pairs_are_reproducible_and_in_range() {
        let a = synthetic_pairs(3, 16, 7).unwrap();
        assert_eq!(a, synthetic_pairs(3, 16, 7).unwrap());
        for s in &a {
            assert!(s.hazy.data().iter().chain(s.gt.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn augmentation_preserves_pixel_multisets(seed in 0u64..10_000, h in 3usize..9, w in 3usize..9) {
            let s = sample(seed, h, w);
            let a = augment(&s, seed, None).unwrap();
            prop_assert_eq!(sorted(&a.hazy), sorted(&s.hazy));
            prop_assert_eq!(sorted(&a.gt), sorted(&s.gt));
        }

        #[test]
        fn more_scattering_never_raises_transmission(b1 in 0.0f64..3.0, extra in 0.0f64..3.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = synthetic_depth(8, 8, &mut rng);
            let lo = HazeParams { airlight: 0.8, beta: b1, depth: depth.clone() }.transmission();
            let hi = HazeParams { airlight: 0.8, beta: b1 + extra, depth }.transmission();
            prop_assert!(hi.data().iter().zip(lo.data()).all(|(h, l)| h <= l));
        }
    }
}
