//! Analytic compute and parameter accounting.
//!
//! One multiply-accumulate counts as two FLOPs; biases and activations are
//! ignored. Under this convention the per-module costs for a 256×256 input
//! (264×264 padded canvas, 64 blocks) at ratio 30% with 32 channels come out
//! at roughly 9.1e7 (gradient step), 7.7e9 (proximal module), 1.3e9
//! (controllable unit) and 5.8e2 (one selector head pair).

use serde::{Deserialize, Serialize};

use crate::network::PathTrace;

/// Dimensions that determine the cost of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    /// Feature-map height the convolutions run over.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Measurements per block.
    pub m: usize,
    /// Pixels per block.
    pub n: usize,
    pub num_blocks: usize,
    /// Length of the μ encoding; zero for the selector-only variant.
    pub encoding_len: usize,
    pub stages: usize,
}

const CONV3X3_MACS: usize = 9;

impl FlopsModel {
    fn conv_cc(&self) -> f64 {
        2.0 * (CONV3X3_MACS * self.channels * self.channels) as f64
            * (self.height * self.width) as f64
    }

    /// `Φx` and `Φᵀr` over every block.
    pub fn gdm(&self) -> f64 {
        2.0 * 2.0 * (self.m * self.n * self.num_blocks) as f64
    }

    /// Six `C → C` 3×3 convolutions (two plain, two per residual block).
    pub fn pmm(&self) -> f64 {
        6.0 * self.conv_cc()
    }

    /// `conv3` plus the two encoding maps.
    pub fn cu(&self) -> f64 {
        self.conv_cc() + 2.0 * 2.0 * (self.encoding_len * self.channels) as f64
    }

    /// The selector heads of one stage: shared bottleneck plus both logit
    /// layers.
    pub fn ps(&self) -> f64 {
        let reduced = self.channels / 4;
        2.0 * (self.channels * reduced + 2 * (reduced * 2)) as f64
    }

    /// Per-stage cost that is paid whether or not branches run.
    pub fn stage_overhead(&self) -> f64 {
        self.cu() + self.ps()
    }

    pub fn stage_static(&self) -> f64 {
        self.gdm() + self.pmm() + self.stage_overhead()
    }

    pub fn static_total(&self) -> f64 {
        self.stages as f64 * self.stage_static()
    }

    /// Cost with only the executed residual branches counted.
    pub fn dynamic_total(&self, executed: impl IntoIterator<Item = (bool, bool)>) -> f64 {
        executed
            .into_iter()
            .map(|(g, p)| {
                self.stage_overhead()
                    + if g { self.gdm() } else { 0.0 }
                    + if p { self.pmm() } else { 0.0 }
            })
            .sum()
    }

    pub fn dynamic_for(&self, trace: &PathTrace) -> f64 {
        self.dynamic_total(trace.decisions.iter().map(|d| (d.gdm_executed(), d.pmm_executed())))
    }

    /// `(static, dynamic)` for a trace.
    pub fn report(&self, trace: &PathTrace) -> (f64, f64) {
        (self.static_total(), self.dynamic_for(trace))
    }
}

/// Parameters of the gradient step: the step size.
pub fn gdm_params() -> usize {
    1
}

/// Six biased `C → C` 3×3 convolutions.
pub fn pmm_params(channels: usize) -> usize {
    6 * (CONV3X3_MACS * channels * channels + channels)
}

/// Biased `conv3` plus two biased `E → C` maps.
pub fn cu_params(channels: usize, encoding_len: usize) -> usize {
    let conv = CONV3X3_MACS * channels * channels + channels;
    let maps = if encoding_len > 0 {
        2 * (encoding_len * channels + channels)
    } else {
        0
    };
    conv + maps
}

/// Bias-free bottleneck and two biased logit layers.
pub fn ps_params(channels: usize) -> usize {
    let reduced = channels / 4;
    channels * reduced + 2 * (reduced * 2 + 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_dims() -> FlopsModel {
        FlopsModel {
            height: 264,
            width: 264,
            channels: 32,
            m: 326,
            n: 1089,
            num_blocks: 64,
            encoding_len: 6,
            stages: 25,
        }
    }

    #[test]
    fn module_costs() {
        let f = table_dims();
        assert_eq!(f.gdm(), 4.0 * 326.0 * 1089.0 * 64.0);
        assert_eq!(f.pmm(), 110_592.0 * 69_696.0);
        assert_eq!(f.ps(), 576.0);
        assert_eq!(f.cu(), 18_432.0 * 69_696.0 + 768.0);
    }

    #[test]
    fn all_skip_costs_only_overhead() {
        let f = table_dims();
        let d = f.dynamic_total(std::iter::repeat((false, false)).take(25));
        assert_eq!(d, 25.0 * (f.cu() + f.ps()));
        let all = f.dynamic_total(std::iter::repeat((true, true)).take(25));
        assert_eq!(all, f.static_total());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ps_params(32), 292);
        assert_eq!(pmm_params(32), 55_488);
        assert_eq!(cu_params(32, 6), 9_696);
        assert_eq!(cu_params(32, 0), 9_248);
    }
}
