//! Training objective: spatial plus frequency supervision for each stage and
//! the weighted total with the MI term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::spectral;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Stage-1 amplitude term.
    pub alpha: f64,
    /// Stage-2 Fourier term.
    pub beta: f64,
    /// MI term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.05,
            beta: 0.05,
            gamma: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which Fourier plane stage 1 is responsible for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Guidance {
    /// Restore the clean amplitude, keep the hazy phase.
    Amplitude,
    /// Restore the clean phase, keep the hazy amplitude.
    Phase,
}

fn check_same(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa} vs {sb}")));
    }
    Ok(())
}

/// Supervision image for stage 1.
pub fn stage1_target(hazy: &crate::Tensor, gt: &crate::Tensor, guidance: Stage1Guidance) -> Result<crate::Tensor> {
    match guidance {
        Stage1Guidance::Amplitude => spectral::amp_swap(gt, hazy),
        Stage1Guidance::Phase => spectral::amp_swap(hazy, gt),
    }
}

impl Graph {
    /// `mae(y1, F⁻¹(A(gt), P(hazy))) + α · mae(A(y1), A(gt))`.
    pub fn stage1_loss(&mut self, y1: Var, hazy: Var, gt: Var, w: &LossWeights) -> Result<Var> {
        self.stage1_loss_guided(y1, hazy, gt, w, Stage1Guidance::Amplitude)
    }

    /// Stage-1 loss for either guidance. With phase guidance the target keeps
    /// the hazy amplitude and the frequency term compares phases.
    pub fn stage1_loss_guided(
        &mut self,
        y1: Var,
        hazy: Var,
        gt: Var,
        w: &LossWeights,
        guidance: Stage1Guidance,
    ) -> Result<Var> {
        check_same(self, y1, hazy, "stage-1 loss")?;
        check_same(self, y1, gt, "stage-1 loss")?;
        let target = match guidance {
            Stage1Guidance::Amplitude => self.amp_swap(gt, hazy)?,
            Stage1Guidance::Phase => self.amp_swap(hazy, gt)?,
        };
        let spatial = self.mae(y1, target)?;
        if w.alpha == 0.0 {
            return Ok(spatial);
        }
        let (amp_y, phase_y) = self.amplitude_phase(y1)?;
        let (amp_gt, phase_gt) = self.amplitude_phase(gt)?;
        let freq = match guidance {
            Stage1Guidance::Amplitude => self.mae(amp_y, amp_gt)?,
            Stage1Guidance::Phase => self.mae(phase_y, phase_gt)?,
        };
        let freq = self.scale(freq, w.alpha);
        self.add(spatial, freq)
    }

    /// `mae(y2, gt) + β · mean(|ΔRe F| + |ΔIm F|)`, the mean taken over the
    /// image's element count.
    pub fn stage2_loss(&mut self, y2: Var, gt: Var, w: &LossWeights) -> Result<Var> {
        check_same(self, y2, gt, "stage-2 loss")?;
        let spatial = self.mae(y2, gt)?;
        if w.beta == 0.0 {
            return Ok(spatial);
        }
        let numel = self.value(y2).len() as f64;
        let fy = self.fft2(y2);
        let fg = self.fft2(gt);
        let d = self.sub(fy, fg)?;
        let d = self.abs(d);
        let d = self.sum(d);
        let freq = self.scale(d, w.beta / numel);
        self.add(spatial, freq)
    }

    /// `l1 + l2 + γ · mi`.
    pub fn total_loss(&mut self, l1: Var, l2: Var, mi: Option<Var>, w: &LossWeights) -> Result<Var> {
        let sum = self.add(l1, l2)?;
        match mi {
            Some(mi) if w.gamma != 0.0 => {
                let m = self.scale(mi, w.gamma);
                self.add(sum, m)
            }
            _ => Ok(sum),
        }
    }
}
