//! Diagnostics: colour histograms, amplitude/phase disparity between a hazy
//! image and its clean reference, and stage feature-map grids.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{write_gray_png, write_png};
use crate::error::{Error, Result};
use crate::model::{Mitnet, SIZE_MULTIPLE};
use crate::nn::Scope;
use crate::spectral::amp_swap;
use crate::tensor::Tensor;

pub const BINS: usize = 256;

/// Normalised 256-bin histogram of one channel, or of the luma
/// (`0.299 R + 0.587 G + 0.114 B`) when `channel` is `None`.
pub fn histogram(img: &Tensor, channel: Option<usize>) -> Vec<f64> {
    let s = img.shape();
    let mut h = vec![0.0; BINS];
    for n in 0..s.n {
        for p in 0..s.plane() {
            let v = match channel {
                Some(c) => img.plane(n, c)[p],
                None => 0.299 * img.plane(n, 0)[p] + 0.587 * img.plane(n, 1)[p] + 0.114 * img.plane(n, 2)[p],
            };
            let bin = ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize;
            h[bin] += 1.0;
        }
    }
    let total = (s.n * s.plane()) as f64;
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Sum of absolute bin differences over R, G, B and luma histograms.
pub fn histogram_l1(a: &Tensor, b: &Tensor) -> f64 {
    [Some(0), Some(1), Some(2), None]
        .into_iter()
        .map(|c| {
            histogram(a, c)
                .iter()
                .zip(histogram(b, c))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        })
        .sum()
}

/// Squared-error maps of the two swapped reconstructions against the clean
/// image, averaged over channels: hazy amplitude with clean phase, and clean
/// amplitude with hazy phase.
#[derive(Clone, Debug)]
pub struct Disparity {
    pub amplitude_map: Vec<f64>,
    pub phase_map: Vec<f64>,
    pub amplitude_energy: f64,
    pub phase_energy: f64,
    pub h: usize,
    pub w: usize,
}

pub fn disparity(hazy: &Tensor, clean: &Tensor) -> Result<Disparity> {
    if hazy.shape() != clean.shape() {
        return Err(Error::Shape(format!("hazy {} vs reference {}", hazy.shape(), clean.shape())));
    }
    let s = hazy.shape();
    let amp_only = amp_swap(hazy, clean)?;
    let phase_only = amp_swap(clean, hazy)?;
    let map = |t: &Tensor| -> Vec<f64> {
        (0..s.plane())
            .map(|p| {
                let mut acc = 0.0;
                for n in 0..s.n {
                    for c in 0..s.c {
                        let d = t.plane(n, c)[p] - clean.plane(n, c)[p];
                        acc += d * d;
                    }
                }
                acc / (s.n * s.c) as f64
            })
            .collect()
    };
    let amplitude_map = map(&amp_only);
    let phase_map = map(&phase_only);
    let mean = |m: &[f64]| m.iter().sum::<f64>() / m.len() as f64;
    Ok(Disparity {
        amplitude_energy: mean(&amplitude_map),
        phase_energy: mean(&phase_map),
        amplitude_map,
        phase_map,
        h: s.h,
        w: s.w,
    })
}

/// Tile the channels of batch item 0 into a near-square grid, each tile
/// min-max normalised, with a one-pixel gap.
pub fn feature_grid(features: &Tensor) -> (Vec<f64>, usize, usize) {
    let s = features.shape();
    let cols = (s.c as f64).sqrt().ceil() as usize;
    let rows = s.c.div_ceil(cols);
    let (gh, gw) = (rows * (s.h + 1) - 1, cols * (s.w + 1) - 1);
    let mut grid = vec![0.0; gh * gw];
    for c in 0..s.c {
        let p = features.plane(0, c);
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (oy, ox) = ((c / cols) * (s.h + 1), (c % cols) * (s.w + 1));
        for y in 0..s.h {
            for x in 0..s.w {
                grid[(oy + y) * gw + ox + x] = (p[y * s.w + x] - lo) / span;
            }
        }
    }
    (grid, gh, gw)
}

#[derive(Clone, Debug)]
pub struct AnalysisSummary {
    pub config_hash: String,
    pub histogram_l1_input: f64,
    pub histogram_l1_output: f64,
    pub amplitude_energy: f64,
    pub phase_energy: f64,
}

/// Write every diagnostic for one image pair into `outdir`.
pub fn analyze(net: &Mitnet, config_hash: &str, hazy: &Tensor, reference: &Tensor, outdir: &Path) -> Result<AnalysisSummary> {
    if hazy.shape() != reference.shape() {
        return Err(Error::Shape(format!("image {} vs reference {}", hazy.shape(), reference.shape())));
    }
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let s = hazy.shape();
    let (y1, y2) = net.infer(hazy)?;
    write_png(&outdir.join("stage1.png"), &y1)?;
    write_png(&outdir.join("output.png"), &y2)?;

    let mut csv = format!("# config_hash: {config_hash}\nbin");
    for who in ["input", "output", "reference"] {
        for ch in ["r", "g", "b", "gray"] {
            write!(csv, ",{who}_{ch}").unwrap();
        }
    }
    csv.push('\n');
    let hists: Vec<Vec<f64>> = [hazy, &y2, reference]
        .iter()
        .flat_map(|img| [Some(0), Some(1), Some(2), None].map(|c| histogram(img, c)))
        .collect();
    for bin in 0..BINS {
        write!(csv, "{bin}").unwrap();
        for h in &hists {
            write!(csv, ",{}", h[bin]).unwrap();
        }
        csv.push('\n');
    }
    let hist_path = outdir.join("histograms.csv");
    std::fs::write(&hist_path, csv).map_err(|e| Error::io(&hist_path, e))?;

    let d = disparity(hazy, reference)?;
    write_gray_png(&outdir.join("amplitude_disparity.png"), &d.amplitude_map, d.h, d.w)?;
    write_gray_png(&outdir.join("phase_disparity.png"), &d.phase_map, d.h, d.w)?;

    // full-resolution decoder features of both stages
    let pad = |v: usize| v.max(SIZE_MULTIPLE).div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let input = hazy.batch_item(0).pad_reflect_to(pad(s.h), pad(s.w));
    let mut scope = Scope::inference(&net.store);
    let x = scope.constant(input);
    let out = net.forward(&mut scope, x, false)?;
    let f1 = scope.value(out.stage1.decoder[0]).crop(0, 0, s.h, s.w)?;
    let f2 = scope.value(out.stage2.decoder[0]).crop(0, 0, s.h, s.w)?;
    let diff = f2.sub(&f1)?.map(f64::abs);
    for (name, t) in [("stage1_features", &f1), ("stage2_features", &f2), ("feature_difference", &diff)] {
        let (grid, gh, gw) = feature_grid(t);
        write_gray_png(&outdir.join(format!("{name}.png")), &grid, gh, gw)?;
    }

    let summary = AnalysisSummary {
        config_hash: config_hash.to_string(),
        histogram_l1_input: histogram_l1(hazy, reference),
        histogram_l1_output: histogram_l1(&y2, reference),
        amplitude_energy: d.amplitude_energy,
        phase_energy: d.phase_energy,
    };
    let json = serde_json::json!({
        "config_hash": summary.config_hash,
        "histogram_l1_input_vs_reference": summary.histogram_l1_input,
        "histogram_l1_output_vs_reference": summary.histogram_l1_output,
        "amplitude_disparity_energy": summary.amplitude_energy,
        "phase_disparity_energy": summary.phase_energy,
    });
    let path = outdir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_pairs;
    use crate::tensor::Shape;

    #[test]
    fn identical_images_have_zero_histogram_distance() {
        let s = &synthetic_pairs(1, 16, 3).unwrap()[0];
        assert_eq!(histogram_l1(&s.gt, &s.gt), 0.0);
        assert!(histogram_l1(&s.hazy, &s.gt) > 0.0);
        let h = histogram(&s.gt, None);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn haze_lives_in_the_amplitude() {
        for s in synthetic_pairs(8, 32, 11).unwrap() {
            let d = disparity(&s.hazy, &s.gt).unwrap();
            assert!(d.amplitude_energy > d.phase_energy, "{}: {} vs {}", s.id, d.amplitude_energy, d.phase_energy);
        }
    }

    #[test]
    fn grid_dimensions() {
        let t = Tensor::zeros(Shape::new(1, 5, 4, 6));
        let (g, h, w) = feature_grid(&t);
        assert_eq!((h, w), (2 * 5 - 1, 3 * 7 - 1));
        assert_eq!(g.len(), h * w);
    }
}
