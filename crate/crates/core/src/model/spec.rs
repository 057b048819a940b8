use serde::{Deserialize, Serialize};

use crate::layers::{check_p, conv_output_hw, pooled_len};
use crate::{Error, Result};

/// Pooling window (and stride) along time after the second and third
/// convolution.
pub const POOL_WIDTH: usize = 2;

/// Architecture descriptor. `conv_widths` always holds the *current* widths,
/// so parameter shapes follow from the spec alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSpec {
    pub n_eeg_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub conv_widths: [usize; 3],
    pub kernel_time: usize,
    pub linear_width: usize,
    pub dropout_p: f64,
    pub max_width: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            n_eeg_channels: 58,
            n_timepoints: 1000,
            n_classes: 6,
            conv_widths: [56, 112, 224],
            kernel_time: 32,
            linear_width: 224,
            dropout_p: 0.5,
            max_width: 4096,
        }
    }
}

/// Per-trial activation shapes through the network, batch axis omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeChain {
    pub input: [usize; 2],
    pub conv1: [usize; 3],
    pub conv2: [usize; 3],
    pub pool1: [usize; 3],
    pub conv3: [usize; 3],
    pub pool2: [usize; 3],
    pub linear: [usize; 3],
    pub features: usize,
    pub output: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        self.shape_chain().map(|_| ())
    }

    pub fn shape_chain(&self) -> Result<ShapeChain> {
        let bad = |msg: String| Error::Spec(msg);
        if self.n_eeg_channels == 0 || self.n_timepoints == 0 || self.n_classes < 2 {
            return Err(bad(format!(
                "need C ≥ 1, T ≥ 1 and K ≥ 2 (got C={}, T={}, K={})",
                self.n_eeg_channels, self.n_timepoints, self.n_classes
            )));
        }
        if self.conv_widths.contains(&0) || self.linear_width == 0 {
            return Err(bad(format!(
                "layer widths must be positive: conv {:?}, linear {}",
                self.conv_widths, self.linear_width
            )));
        }
        if let Some(w) = self.conv_widths.iter().find(|&&w| w > self.max_width) {
            return Err(bad(format!(
                "width {w} exceeds max_width {}",
                self.max_width
            )));
        }
        check_p(self.dropout_p)?;
        let (c, t, kt) = (self.n_eeg_channels, self.n_timepoints, self.kernel_time);
        let [w1, w2, w3] = self.conv_widths;
        let (_, t1) = conv_output_hw(c, t, 1, kt)
            .ok_or_else(|| bad(format!("temporal kernel {kt} wider than {t} time points")))?;
        let p1 = pooled_len(t1, POOL_WIDTH);
        let (_, t3) = conv_output_hw(1, p1, 1, kt).ok_or_else(|| {
            bad(format!(
                "temporal kernel {kt} wider than the pooled length {p1} before the third convolution"
            ))
        })?;
        let p2 = pooled_len(t3, POOL_WIDTH);
        if p2 == 0 {
            return Err(bad(format!(
                "third convolution output {t3} too short to pool"
            )));
        }
        Ok(ShapeChain {
            input: [c, t],
            conv1: [w1, c, t1],
            conv2: [w2, 1, t1],
            pool1: [w2, 1, p1],
            conv3: [w3, 1, t3],
            pool2: [w3, 1, p2],
            linear: [w3, 1, self.linear_width],
            features: w3 * self.linear_width,
            output: self.n_classes,
        })
    }

    /// Length of the time axis entering the time-wise linear layer.
    pub fn pooled_time(&self) -> usize {
        self.shape_chain().map(|s| s.pool2[2]).unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_widths[2] * self.linear_width
    }

    /// Number of scalar parameters, or `None` on overflow or an invalid
    /// spec. Cheap: nothing is allocated.
    pub fn param_count(&self) -> Option<usize> {
        let p2 = self.shape_chain().ok()?.pool2[2];
        let [w1, w2, w3] = self.conv_widths;
        let (c, kt, lw, k) = (
            self.n_eeg_channels,
            self.kernel_time,
            self.linear_width,
            self.n_classes,
        );
        let terms = [
            w1.checked_mul(kt)?,
            w2.checked_mul(w1)?.checked_mul(c)?,
            w3.checked_mul(w2)?.checked_mul(kt)?,
            lw.checked_mul(p2)?,
            k.checked_mul(w3)?.checked_mul(lw)?,
            // biases and batch-norm affine parameters
            w1.checked_add(w2)?.checked_add(w3)?.checked_mul(3)?,
            lw.checked_add(k)?,
        ];
        terms.iter().try_fold(0usize, |a, &t| a.checked_add(t))
    }
}
