//! Path selection: the two-way Gumbel-softmax gate, the squeeze-style
//! selector heads and the μ-conditioned controllable unit in front of them.
//!
//! Gate pairs are ordered `(execute, skip)`: component 0 multiplies the
//! residual branch of a module, component 1 its identity path.

use ndarray::{Array1, Array3, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, Linear, Parameters};

/// Lagrange multipliers the controllable model is trained on, ascending.
pub const MU_PRESETS: [f64; 6] = [0.00001, 0.00005, 0.0001, 0.0005, 0.001, 0.002];
/// Length of the binary μ encoding.
pub const ENCODING_LEN: usize = 6;
/// Gumbel-softmax temperature.
pub const DEFAULT_TAU: f64 = 1.0;

/// The modulation fed to the controllable unit: a multiplier and its binary
/// code. The code is stored most-significant bit first, so the largest
/// preset maps to `100000` and the smallest to `000001`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationInput {
    mu: Option<f64>,
    bits: Vec<u8>,
}

impl ModulationInput {
    /// One-hot code for one of the presets in `mu_set` (ascending).
    pub fn preset_in(mu: f64, mu_set: &[f64]) -> Result<Self> {
        let idx = mu_set
            .iter()
            .position(|&p| (p - mu).abs() <= 1e-12 * p.abs().max(1e-300))
            .ok_or_else(|| Error::domain(format!("μ = {mu} is not a preset")))?;
        let len = mu_set.len();
        let mut bits = vec![0u8; len];
        bits[len - 1 - idx] = 1;
        Ok(ModulationInput { mu: Some(mu), bits })
    }

    pub fn preset(mu: f64) -> Result<Self> {
        Self::preset_in(mu, &MU_PRESETS)
    }

    /// An arbitrary binary code, possibly one never seen in training.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::domain(format!("encoding bit {b} is not binary")));
        }
        let mu = (bits.iter().filter(|&&b| b == 1).count() == 1 && bits.len() == MU_PRESETS.len())
            .then(|| {
                let pos = bits.iter().position(|&b| b == 1).unwrap();
                MU_PRESETS[bits.len() - 1 - pos]
            });
        Ok(ModulationInput {
            mu,
            bits: bits.to_vec(),
        })
    }

    /// Parses a code such as `"010100"`.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::domain(format!("invalid encoding character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(&bits)
    }

    /// Code with every bit clear. Accepted like any other unseen code.
    pub fn zeros(len: usize) -> Self {
        ModulationInput {
            mu: None,
            bits: vec![0; len],
        }
    }

    /// The multiplier, when the code is a preset one-hot.
    pub fn mu(&self) -> Option<f64> {
        self.mu
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }

    pub fn encoding(&self) -> Array1<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Hard and soft values of one two-way gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatePair {
    pub hard: [f64; 2],
    pub soft: [f64; 2],
}

/// `soft = softmax((α + n) / τ)` and `hard = onehot(argmax soft)`, ties going
/// to index 0. Passing `None` for the noise gives the deterministic
/// evaluation-time gate.
pub fn gumbel_softmax(alpha: [f64; 2], tau: f64, noise: Option<[f64; 2]>) -> Result<GatePair> {
    if !alpha.iter().all(|a| a.is_finite()) {
        return Err(Error::Numeric {
            stage: 0,
            message: format!("non-finite gate logits {alpha:?}"),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature {tau} must be positive")));
    }
    let n = noise.unwrap_or([0.0, 0.0]);
    let z = [(alpha[0] + n[0]) / tau, (alpha[1] + n[1]) / tau];
    let top = z[0].max(z[1]);
    let e = [(z[0] - top).exp(), (z[1] - top).exp()];
    let sum = e[0] + e[1];
    let soft = [e[0] / sum, e[1] / sum];
    let hard = if soft[0] >= soft[1] { [1.0, 0.0] } else { [0.0, 1.0] };
    Ok(GatePair { hard, soft })
}

/// Gradient of the gate with respect to the logits. The straight-through
/// estimator routes the hard gate's gradient through the soft probabilities,
/// so the same Jacobian serves both.
pub fn gumbel_softmax_backward(soft: [f64; 2], tau: f64, grad: [f64; 2]) -> [f64; 2] {
    let mean = soft[0] * grad[0] + soft[1] * grad[1];
    [
        soft[0] * (grad[0] - mean) / tau,
        soft[1] * (grad[1] - mean) / tau,
    ]
}

/// Gumbel(0, 1) perturbations for every gate of a `stages`-deep network,
/// `[[g_exec, g_skip], [p_exec, p_skip]]` per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNoise {
    pub per_stage: Vec<[[f64; 2]; 2]>,
}

impl GateNoise {
    pub fn sample(stages: usize, rng: &mut impl Rng) -> Self {
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let per_stage = (0..stages)
            .map(|_| {
                [
                    [gumbel.sample(rng), gumbel.sample(rng)],
                    [gumbel.sample(rng), gumbel.sample(rng)],
                ]
            })
            .collect();
        GateNoise { per_stage }
    }

    pub fn zeros(stages: usize) -> Self {
        GateNoise {
            per_stage: vec![[[0.0; 2]; 2]; stages],
        }
    }
}

/// The two affine maps producing the scale `Q = softplus(fc1(e))` and the
/// shift `P = fc2(e)` from a μ encoding `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Per-stage selector parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSelector {
    pub conv3: Conv2d,
    /// Absent for the selector-only variant, which behaves as `Q ≡ 1, P ≡ 0`.
    pub modulation: Option<Modulation>,
    /// `C → C/4`, no bias; shared by both heads.
    pub fc3: Linear,
    /// `C/4 → 2` logits for the gradient-descent gate.
    pub fc4: Linear,
    /// `C/4 → 2` logits for the proximal-mapping gate.
    pub fc5: Linear,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate values kept for the backward pass through the selector.
#[derive(Clone, Debug)]
pub(crate) struct SelectorCache {
    conv_mean: Array1<f64>,
    q_pre: Option<Array1<f64>>,
    q: Array1<f64>,
    pooled: Array1<f64>,
    z_pre: Array1<f64>,
    z: Array1<f64>,
    pub gate_g: GatePair,
    pub gate_p: GatePair,
}

impl PathSelector {
    pub fn zeros(channels: usize, encoding_len: Option<usize>) -> Self {
        let reduced = channels / 4;
        PathSelector {
            conv3: Conv2d::zeros(channels, channels),
            modulation: encoding_len.map(|e| Modulation {
                fc1: Linear::zeros(e, channels, true),
                fc2: Linear::zeros(e, channels, true),
            }),
            fc3: Linear::zeros(channels, reduced, false),
            fc4: Linear::zeros(reduced, 2, true),
            fc5: Linear::zeros(reduced, 2, true),
        }
    }

    pub fn init(channels: usize, encoding_len: Option<usize>, rng: &mut impl Rng) -> Self {
        assert!(channels >= 4, "selector needs at least 4 channels");
        let reduced = channels / 4;
        PathSelector {
            conv3: Conv2d::init(channels, channels, rng),
            modulation: encoding_len.map(|e| Modulation {
                fc1: Linear::init(e, channels, true, rng),
                fc2: Linear::init(e, channels, true, rng),
            }),
            fc3: Linear::init(channels, reduced, false, rng),
            fc4: Linear::init(reduced, 2, true, rng),
            fc5: Linear::init(reduced, 2, true, rng),
        }
    }

    fn channels(&self) -> usize {
        self.conv3.out_channels()
    }

    /// `(Q, P, fc1 pre-activation)`; unit scale and zero shift without a
    /// modulation branch.
    fn coefficients(
        &self,
        modulation: &ModulationInput,
    ) -> Result<(Array1<f64>, Array1<f64>, Option<Array1<f64>>)> {
        let c = self.channels();
        match &self.modulation {
            None => Ok((Array1::ones(c), Array1::zeros(c), None)),
            Some(m) => {
                if modulation.bits().len() != m.fc1.inputs() {
                    return Err(Error::domain(format!(
                        "encoding has {} bits, model expects {}",
                        modulation.bits().len(),
                        m.fc1.inputs()
                    )));
                }
                let e = modulation.encoding();
                let q_pre = m.fc1.forward(e.view());
                let q = q_pre.mapv(softplus);
                let p = m.fc2.forward(e.view());
                Ok((q, p, Some(q_pre)))
            }
        }
    }

    /// `C = Q ⊗ conv3(X) + P`, broadcasting per channel.
    pub fn controllable_unit(
        &self,
        features: &Array3<f64>,
        modulation: &ModulationInput,
    ) -> Result<Array3<f64>> {
        let (q, p, _) = self.coefficients(modulation)?;
        let mut out = self.conv3.forward(features);
        for ((mut plane, &qc), &pc) in out.outer_iter_mut().zip(q.iter()).zip(p.iter()) {
            plane.mapv_inplace(|v| qc * v + pc);
        }
        Ok(out)
    }

    fn heads_from_pooled(
        &self,
        pooled: ArrayView1<'_, f64>,
        tau: f64,
        noise: Option<[[f64; 2]; 2]>,
    ) -> Result<(Array1<f64>, Array1<f64>, GatePair, GatePair)> {
        let z_pre = self.fc3.forward(pooled);
        let z = z_pre.mapv(|v| v.max(0.0));
        let a_g = self.fc4.forward(z.view());
        let a_p = self.fc5.forward(z.view());
        let gate_g = gumbel_softmax([a_g[0], a_g[1]], tau, noise.map(|n| n[0]))?;
        let gate_p = gumbel_softmax([a_p[0], a_p[1]], tau, noise.map(|n| n[1]))?;
        Ok((z_pre, z, gate_g, gate_p))
    }

    /// Average-pool, shared bottleneck, then one two-way gate per module.
    pub fn selector_heads(
        &self,
        c_feat: &Array3<f64>,
        tau: f64,
        noise: Option<[[f64; 2]; 2]>,
    ) -> Result<(GatePair, GatePair)> {
        let pooled = c_feat.mean_axis(Axis(1)).unwrap().mean_axis(Axis(1)).unwrap();
        let (_, _, g, p) = self.heads_from_pooled(pooled.view(), tau, noise)?;
        Ok((g, p))
    }

    /// The full path-controllable selector: controllable unit, then heads.
    pub fn pcs(
        &self,
        features: &Array3<f64>,
        modulation: &ModulationInput,
        tau: f64,
        noise: Option<[[f64; 2]; 2]>,
    ) -> Result<(GatePair, GatePair)> {
        let c_feat = self.controllable_unit(features, modulation)?;
        self.selector_heads(&c_feat, tau, noise)
    }

    /// Training-time forward. Pooling commutes with the per-channel affine
    /// map, so only the channel means of `conv3(X)` are kept.
    pub(crate) fn forward_cached(
        &self,
        features: &Array3<f64>,
        modulation: &ModulationInput,
        tau: f64,
        noise: Option<[[f64; 2]; 2]>,
    ) -> Result<SelectorCache> {
        let (q, p, q_pre) = self.coefficients(modulation)?;
        let conv = self.conv3.forward(features);
        let conv_mean = conv.mean_axis(Axis(1)).unwrap().mean_axis(Axis(1)).unwrap();
        let pooled = &q * &conv_mean + &p;
        let (z_pre, z, gate_g, gate_p) = self.heads_from_pooled(pooled.view(), tau, noise)?;
        Ok(SelectorCache {
            conv_mean,
            q_pre,
            q,
            pooled,
            z_pre,
            z,
            gate_g,
            gate_p,
        })
    }

    /// Backpropagates gate-value gradients `(d_g, d_p)` to the selector
    /// parameters and returns the gradient with respect to the input features.
    pub(crate) fn backward(
        &self,
        features: &Array3<f64>,
        modulation: &ModulationInput,
        cache: &SelectorCache,
        tau: f64,
        d_gate_g: [f64; 2],
        d_gate_p: [f64; 2],
        grad: &mut PathSelector,
    ) -> Array3<f64> {
        let da_g = gumbel_softmax_backward(cache.gate_g.soft, tau, d_gate_g);
        let da_p = gumbel_softmax_backward(cache.gate_p.soft, tau, d_gate_p);
        let mut dz = self
            .fc4
            .backward(cache.z.view(), Array1::from(da_g.to_vec()).view(), &mut grad.fc4);
        dz += &self
            .fc5
            .backward(cache.z.view(), Array1::from(da_p.to_vec()).view(), &mut grad.fc5);
        ndarray::Zip::from(&mut dz)
            .and(&cache.z_pre)
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
        let d_pooled = self.fc3.backward(cache.pooled.view(), dz.view(), &mut grad.fc3);

        if let (Some(m), Some(gm), Some(q_pre)) =
            (&self.modulation, grad.modulation.as_mut(), cache.q_pre.as_ref())
        {
            let e = modulation.encoding();
            let d_q = &d_pooled * &cache.conv_mean;
            let d_q_pre = d_q * &q_pre.mapv(sigmoid);
            m.fc1.backward(e.view(), d_q_pre.view(), &mut gm.fc1);
            m.fc2.backward(e.view(), d_pooled.view(), &mut gm.fc2);
        }

        let (_, h, w) = features.dim();
        let d_mean = &d_pooled * &cache.q / (h * w) as f64;
        let mut d_conv = Array3::<f64>::zeros(features.dim());
        for (mut plane, &d) in d_conv.outer_iter_mut().zip(d_mean.iter()) {
            plane.fill(d);
        }
        self.conv3
            .backward(features, &d_conv, &mut grad.conv3, true)
            .unwrap()
    }
}

impl Parameters for PathSelector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.conv3.visit(&join(prefix, "conv3"), f);
        if let Some(m) = &self.modulation {
            m.fc1.visit(&join(prefix, "fc1"), f);
            m.fc2.visit(&join(prefix, "fc2"), f);
        }
        self.fc3.visit(&join(prefix, "fc3"), f);
        self.fc4.visit(&join(prefix, "fc4"), f);
        self.fc5.visit(&join(prefix, "fc5"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        if let Some(m) = self.modulation.as_mut() {
            m.fc1.visit_mut(&join(prefix, "fc1"), f);
            m.fc2.visit_mut(&join(prefix, "fc2"), f);
        }
        self.fc3.visit_mut(&join(prefix, "fc3"), f);
        self.fc4.visit_mut(&join(prefix, "fc4"), f);
        self.fc5.visit_mut(&join(prefix, "fc5"), f);
    }
}
