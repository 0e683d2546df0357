//! The unfolded proximal-gradient network.
//!
//! Stage `k` maps the feature tensor `X^(k-1)` (channel 0 holds the image
//! estimate) to `X^(k)` in three steps:
//!
//! 1. the path selector looks at `X^(k-1)` and the μ code and emits the gate
//!    pairs `h_G`, `h_P`;
//! 2. the gradient step replaces channel 0 with
//!    `h_G1 · (x + ρ · Φᵀ(y - Φx)) + h_G2 · x`;
//! 3. the proximal module maps the result `R` to
//!    `h_P1 · (R + Conv₂(RB₂(RB₁(Conv₁(R))))) + h_P2 · R`.
//!
//! Each gate pair weights a module's output against its input, so a one-hot
//! `(1, 0)` at every stage is the plain ungated network and `(0, 1)` is the
//! identity.
//!
//! In evaluation mode a gate of `(0, 1)` skips its branch entirely and the
//! input passes through untouched. Training evaluates every branch so the
//! straight-through estimator can differentiate the gate values.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::flops::FlopsModel;
use crate::layers::{join, Conv2d, Parameters, ResidualBlock, ResidualCache};
use crate::selector::{GateNoise, GatePair, ModulationInput, PathSelector, DEFAULT_TAU, ENCODING_LEN};
use crate::sensing::{fidelity_step, fidelity_step_vjp, initialize, MeasurementMatrix, Measurements};

/// Default number of stages.
pub const DEFAULT_STAGES: usize = 25;
/// Default feature channel count.
pub const DEFAULT_CHANNELS: usize = 32;

/// Which selector family the network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Content-adaptive selectors only (`Q ≡ 1`, `P ≡ 0`).
    DpDun,
    /// Selectors modulated by the μ code through the controllable unit.
    DpcDun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub stages: usize,
    pub channels: usize,
    pub encoding_len: usize,
    pub variant: Variant,
    pub tau: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stages: DEFAULT_STAGES,
            channels: DEFAULT_CHANNELS,
            encoding_len: ENCODING_LEN,
            variant: Variant::DpcDun,
            tau: DEFAULT_TAU,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stage count must be positive".into()));
        }
        if self.channels < 4 {
            return Err(Error::Config("at least 4 feature channels are required".into()));
        }
        if self.variant == Variant::DpcDun && self.encoding_len == 0 {
            return Err(Error::Config("the controllable variant needs a μ encoding".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    fn modulation_len(&self) -> Option<usize> {
        (self.variant == Variant::DpcDun).then_some(self.encoding_len)
    }
}

/// The learned proximal mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximalModule {
    pub conv1: Conv2d,
    pub rb1: ResidualBlock,
    pub rb2: ResidualBlock,
    pub conv2: Conv2d,
}

impl ProximalModule {
    pub fn zeros(c: usize) -> Self {
        ProximalModule {
            conv1: Conv2d::zeros(c, c),
            rb1: ResidualBlock::zeros(c),
            rb2: ResidualBlock::zeros(c),
            conv2: Conv2d::zeros(c, c),
        }
    }

    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        ProximalModule {
            conv1: Conv2d::init(c, c, rng),
            rb1: ResidualBlock::init(c, rng),
            rb2: ResidualBlock::init(c, rng),
            conv2: Conv2d::init(c, c, rng),
        }
    }

    /// The residual branch `Conv₂(RB₂(RB₁(Conv₁(r))))`.
    pub fn branch(&self, r: &Array3<f64>) -> Array3<f64> {
        let a = self.conv1.forward(r);
        let a = self.rb1.forward(&a);
        let a = self.rb2.forward(&a);
        self.conv2.forward(&a)
    }
}

impl Parameters for ProximalModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.rb1.visit(&join(prefix, "rb1"), f);
        self.rb2.visit(&join(prefix, "rb2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.rb1.visit_mut(&join(prefix, "rb1"), f);
        self.rb2.visit_mut(&join(prefix, "rb2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Parameters of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// Gradient step size, unconstrained.
    pub rho: f64,
    pub pmm: ProximalModule,
    pub selector: PathSelector,
}

impl Parameters for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "rho"), &[1], std::slice::from_ref(&self.rho));
        self.pmm.visit(&join(prefix, "pmm"), f);
        self.selector.visit(&join(prefix, "selector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "rho"), std::slice::from_mut(&mut self.rho));
        self.pmm.visit_mut(&join(prefix, "pmm"), f);
        self.selector.visit_mut(&join(prefix, "selector"), f);
    }
}

/// The feature tensor between stages.
#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    pub features: Array3<f64>,
    pub stage_index: usize,
}

impl StageState {
    /// Channel 0, the current image estimate.
    pub fn image(&self) -> Array2<f64> {
        self.features.index_axis(Axis(0), 0).to_owned()
    }
}

/// Gate values used at one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision {
    pub stage_index: usize,
    pub h_g: [f64; 2],
    pub h_p: [f64; 2],
    pub soft_g: [f64; 2],
    pub soft_p: [f64; 2],
}

const SKIP: [f64; 2] = [0.0, 1.0];
const EXECUTE: [f64; 2] = [1.0, 0.0];

impl GateDecision {
    /// Gates with fixed values (soft mirrors hard). Used to pin paths.
    pub fn forced(stage_index: usize, h_g: [f64; 2], h_p: [f64; 2]) -> Self {
        GateDecision {
            stage_index,
            h_g,
            h_p,
            soft_g: h_g,
            soft_p: h_p,
        }
    }

    pub fn all_execute(stage_index: usize) -> Self {
        Self::forced(stage_index, EXECUTE, EXECUTE)
    }

    pub fn all_skip(stage_index: usize) -> Self {
        Self::forced(stage_index, SKIP, SKIP)
    }

    fn from_pairs(stage_index: usize, g: GatePair, p: GatePair, relaxed: bool) -> Self {
        GateDecision {
            stage_index,
            h_g: if relaxed { g.soft } else { g.hard },
            h_p: if relaxed { p.soft } else { p.hard },
            soft_g: g.soft,
            soft_p: p.soft,
        }
    }

    pub fn gdm_executed(&self) -> bool {
        self.h_g[0] > 0.5
    }

    pub fn pmm_executed(&self) -> bool {
        self.h_p[0] > 0.5
    }
}

/// Per-image record of the path taken.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTrace {
    pub decisions: Vec<GateDecision>,
    pub n_am_g: usize,
    pub n_am_p: usize,
    pub dynamic_flops: f64,
    pub static_flops: f64,
}

impl PathTrace {
    pub fn from_decisions(decisions: Vec<GateDecision>, flops: &FlopsModel) -> Self {
        let n_am_g = decisions.iter().filter(|d| d.gdm_executed()).count();
        let n_am_p = decisions.iter().filter(|d| d.pmm_executed()).count();
        let mut trace = PathTrace {
            decisions,
            n_am_g,
            n_am_p,
            dynamic_flops: 0.0,
            static_flops: flops.static_total(),
        };
        trace.dynamic_flops = flops.dynamic_for(&trace);
        trace
    }

    /// `(gdm executed, pmm executed)` per stage.
    pub fn path_mask(&self) -> Vec<[bool; 2]> {
        self.decisions
            .iter()
            .map(|d| [d.gdm_executed(), d.pmm_executed()])
            .collect()
    }
}

/// How gates are produced during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Deterministic argmax gates, skipped branches are not computed.
    Eval,
    /// Gumbel-perturbed straight-through gates; every branch is computed.
    Train(&'a GateNoise),
}

/// The full network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// `1 → C-1` convolution producing the carried feature channels.
    pub feature_init: Conv2d,
    pub stages: Vec<Stage>,
}

impl Parameters for Network {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.feature_init.visit(&join(prefix, "init"), f);
        for (k, stage) in self.stages.iter().enumerate() {
            stage.visit(&join(prefix, &format!("stage{k:02}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.feature_init.visit_mut(&join(prefix, "init"), f);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_mut(&join(prefix, &format!("stage{k:02}")), f);
        }
    }
}

fn check_finite(t: &Array3<f64>, stage: usize, what: &str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage,
            message: format!("non-finite values after {what}"),
        })
    }
}

fn at_stage(e: Error, stage: usize) -> Error {
    match e {
        Error::Numeric { message, .. } => Error::Numeric { stage, message },
        other => other,
    }
}

/// Builds `X^(0) = concat(x0, conv0(x0))`.
pub fn init_features(feature_init: &Conv2d, x0: &Array2<f64>) -> StageState {
    let (h, w) = x0.dim();
    let input = x0.view().insert_axis(Axis(0)).to_owned();
    let carried = feature_init.forward(&input);
    let mut features = Array3::<f64>::zeros((carried.dim().0 + 1, h, w));
    features.index_axis_mut(Axis(0), 0).assign(x0);
    features.slice_mut(s![1.., .., ..]).assign(&carried);
    StageState {
        features,
        stage_index: 0,
    }
}

/// Gated gradient step; returns `R^(k)`.
pub fn dgdm_forward(
    state: &StageState,
    meas: &Measurements,
    phi: &MeasurementMatrix,
    rho: f64,
    gate: &GateDecision,
) -> Result<Array3<f64>> {
    if gate.h_g == SKIP {
        return Ok(state.features.clone());
    }
    let x = state.features.index_axis(Axis(0), 0);
    let step = fidelity_step(x, meas, phi)?;
    let mut out = state.features.clone();
    let r = (&step * rho + &x) * gate.h_g[0] + &x * gate.h_g[1];
    out.index_axis_mut(Axis(0), 0).assign(&r);
    Ok(out)
}

/// Gated proximal mapping; returns `X^(k)`.
pub fn dpmm_forward(r: Array3<f64>, pmm: &ProximalModule, gate: &GateDecision) -> StageState {
    let stage_index = gate.stage_index + 1;
    if gate.h_p == SKIP {
        return StageState {
            features: r,
            stage_index,
        };
    }
    let branch = pmm.branch(&r);
    StageState {
        features: (branch + &r) * gate.h_p[0] + &r * gate.h_p[1],
        stage_index,
    }
}

/// Everything a training forward pass keeps for the backward pass.
#[derive(Clone, Debug)]
struct StageTape {
    input: Array3<f64>,
    selector: crate::selector::SelectorCache,
    decision: GateDecision,
    step: Array2<f64>,
    r: Array3<f64>,
    a1: Array3<f64>,
    rb1_cache: ResidualCache,
    rb1_out: Array3<f64>,
    rb2_cache: ResidualCache,
    rb2_out: Array3<f64>,
    branch: Array3<f64>,
}

/// Result of [`Network::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardTape {
    x0: Array2<f64>,
    stages: Vec<StageTape>,
    output: Array3<f64>,
    pub trace: PathTrace,
}

impl ForwardTape {
    pub fn reconstruction(&self) -> Array2<f64> {
        self.output.index_axis(Axis(0), 0).to_owned()
    }

    pub fn initial_estimate(&self) -> &Array2<f64> {
        &self.x0
    }
}

impl Network {
    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let feature_init = Conv2d::init(1, c - 1, rng);
        let stages = (0..config.stages)
            .map(|_| Stage {
                rho: 1.0,
                pmm: ProximalModule::init(c, rng),
                selector: PathSelector::init(c, config.modulation_len(), rng),
            })
            .collect();
        Ok(Network {
            config,
            feature_init,
            stages,
        })
    }

    /// Same structure with every parameter zero (a gradient buffer).
    pub fn zeros(config: NetworkConfig) -> Self {
        let c = config.channels;
        let stages = (0..config.stages)
            .map(|_| Stage {
                rho: 0.0,
                pmm: ProximalModule::zeros(c),
                selector: PathSelector::zeros(c, config.modulation_len()),
            })
            .collect();
        Network {
            feature_init: Conv2d::zeros(1, c - 1),
            stages,
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    pub fn flops_model(&self, meas: &Measurements, phi: &MeasurementMatrix) -> FlopsModel {
        let (h, w) = meas.layout.image_dims();
        FlopsModel {
            height: h,
            width: w,
            channels: self.config.channels,
            m: phi.m(),
            n: phi.n(),
            num_blocks: meas.num_blocks(),
            encoding_len: self.config.modulation_len().unwrap_or(0),
            stages: self.config.stages,
        }
    }

    pub fn init_features(&self, x0: &Array2<f64>) -> StageState {
        init_features(&self.feature_init, x0)
    }

    /// Reconstructs an image from its measurements.
    pub fn recover(
        &self,
        meas: &Measurements,
        phi: &MeasurementMatrix,
        modulation: &ModulationInput,
        mode: Mode<'_>,
    ) -> Result<(Array2<f64>, PathTrace)> {
        match mode {
            Mode::Train(noise) => {
                let tape = self.forward_train(meas, phi, modulation, noise, false)?;
                Ok((tape.reconstruction(), tape.trace))
            }
            Mode::Eval => self.run_eval(meas, phi, |k, state| {
                let (g, p) = self.stages[k].selector.pcs(
                    &state.features,
                    modulation,
                    self.config.tau,
                    None,
                )?;
                Ok(GateDecision::from_pairs(k, g, p, false))
            }),
        }
    }

    /// Evaluation-mode forward pass with externally pinned gate values.
    /// Values other than one-hot pairs are allowed, which makes the ungated
    /// update reachable (`(1, 1)` on both gates).
    pub fn recover_with_gates(
        &self,
        meas: &Measurements,
        phi: &MeasurementMatrix,
        gates: &[GateDecision],
    ) -> Result<(Array2<f64>, PathTrace)> {
        if gates.len() != self.stages.len() {
            return Err(Error::domain(format!(
                "{} gate decisions for {} stages",
                gates.len(),
                self.stages.len()
            )));
        }
        self.run_eval(meas, phi, |k, _| {
            Ok(GateDecision {
                stage_index: k,
                ..gates[k]
            })
        })
    }

    fn run_eval(
        &self,
        meas: &Measurements,
        phi: &MeasurementMatrix,
        mut gate_for: impl FnMut(usize, &StageState) -> Result<GateDecision>,
    ) -> Result<(Array2<f64>, PathTrace)> {
        let x0 = initialize(meas, phi)?;
        let mut state = self.init_features(&x0);
        let mut decisions = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            let gate = gate_for(k, &state).map_err(|e| at_stage(e, k))?;
            let r = dgdm_forward(&state, meas, phi, stage.rho, &gate)?;
            state = dpmm_forward(r, &stage.pmm, &gate);
            check_finite(&state.features, k, "stage update")?;
            decisions.push(gate);
        }
        let flops = self.flops_model(meas, phi);
        Ok((state.image(), PathTrace::from_decisions(decisions, &flops)))
    }

    /// Training forward pass. `relaxed` feeds the soft probabilities forward
    /// instead of the hard one-hot gates, which makes the loss smooth in the
    /// selector parameters (used for gradient checking).
    pub fn forward_train(
        &self,
        meas: &Measurements,
        phi: &MeasurementMatrix,
        modulation: &ModulationInput,
        noise: &GateNoise,
        relaxed: bool,
    ) -> Result<ForwardTape> {
        if noise.per_stage.len() != self.stages.len() {
            return Err(Error::domain("gate noise does not match the stage count"));
        }
        let tau = self.config.tau;
        let x0 = initialize(meas, phi)?;
        let mut features = self.init_features(&x0).features;
        let mut tapes = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            let sel = stage
                .selector
                .forward_cached(&features, modulation, tau, Some(noise.per_stage[k]))
                .map_err(|e| at_stage(e, k))?;
            let decision = GateDecision::from_pairs(k, sel.gate_g, sel.gate_p, relaxed);

            let x = features.index_axis(Axis(0), 0);
            let step = fidelity_step(x, meas, phi)?;
            let mut r = features.clone();
            let r0 = (&step * stage.rho + &x) * decision.h_g[0] + &x * decision.h_g[1];
            r.index_axis_mut(Axis(0), 0).assign(&r0);

            let pmm = &stage.pmm;
            let a1 = pmm.conv1.forward(&r);
            let (rb1_out, rb1_cache) = pmm.rb1.forward_cached(&a1);
            let (rb2_out, rb2_cache) = pmm.rb2.forward_cached(&rb1_out);
            let branch = pmm.conv2.forward(&rb2_out);
            let next = (&branch + &r) * decision.h_p[0] + &r * decision.h_p[1];
            check_finite(&next, k, "stage update")?;

            tapes.push(StageTape {
                input: std::mem::replace(&mut features, next),
                selector: sel,
                decision,
                step,
                r,
                a1,
                rb1_cache,
                rb1_out,
                rb2_cache,
                rb2_out,
                branch,
            });
        }
        let flops = self.flops_model(meas, phi);
        let trace = PathTrace::from_decisions(tapes.iter().map(|t| t.decision).collect(), &flops);
        Ok(ForwardTape {
            x0,
            stages: tapes,
            output: features,
            trace,
        })
    }

    /// Backward pass for a tape produced by [`Network::forward_train`].
    ///
    /// `d_output` is the loss gradient with respect to the reconstruction;
    /// `d_exec` is added to the gradient of every execute component
    /// (`h_G1`, `h_P1`), which is how the selection loss enters.
    /// Gradients are accumulated into `grad`.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        meas: &Measurements,
        phi: &MeasurementMatrix,
        modulation: &ModulationInput,
        d_output: &Array2<f64>,
        d_exec: f64,
        grad: &mut Network,
    ) -> Result<()> {
        let tau = self.config.tau;
        let mut d_x = Array3::<f64>::zeros(tape.output.dim());
        d_x.index_axis_mut(Axis(0), 0).assign(d_output);

        for (k, st) in tape.stages.iter().enumerate().rev() {
            let stage = &self.stages[k];
            let g = &mut grad.stages[k];
            let h_g = st.decision.h_g;
            let h_p = st.decision.h_p;

            // proximal module
            let d_hp = [(&d_x * &(&st.branch + &st.r)).sum() + d_exec, (&d_x * &st.r).sum()];
            let d_branch = &d_x * h_p[0];
            let d_rb2 = stage
                .pmm
                .conv2
                .backward(&st.rb2_out, &d_branch, &mut g.pmm.conv2, true)
                .unwrap();
            let d_rb1 = stage
                .pmm
                .rb2
                .backward(&st.rb1_out, &st.rb2_cache, &d_rb2, &mut g.pmm.rb2);
            let d_a1 = stage.pmm.rb1.backward(&st.a1, &st.rb1_cache, &d_rb1, &mut g.pmm.rb1);
            let mut d_r = stage
                .pmm
                .conv1
                .backward(&st.r, &d_a1, &mut g.pmm.conv1, true)
                .unwrap();
            d_r.scaled_add(h_p[0] + h_p[1], &d_x);

            // gradient step on channel 0; the carried channels pass straight through
            let x = st.input.index_axis(Axis(0), 0);
            let d_r0 = d_r.index_axis(Axis(0), 0).to_owned();
            let d_step_dot = (&d_r0 * &st.step).sum();
            let d_x_dot = (&d_r0 * &x).sum();
            let d_hg = [stage.rho * d_step_dot + d_x_dot + d_exec, d_x_dot];
            g.rho += h_g[0] * d_step_dot;
            let d_step = &d_r0 * (h_g[0] * stage.rho);
            let d_x0 = fidelity_step_vjp(d_step.view(), meas, phi)? + &d_r0 * (h_g[0] + h_g[1]);

            let mut d_prev = d_r;
            d_prev.index_axis_mut(Axis(0), 0).assign(&d_x0);

            let d_sel = stage.selector.backward(
                &st.input,
                modulation,
                &st.selector,
                tau,
                d_hg,
                d_hp,
                &mut g.selector,
            );
            d_prev += &d_sel;
            d_x = d_prev;
        }

        // only the carried channels depend on the feature-init convolution
        let carried = d_x.slice(s![1.., .., ..]).to_owned();
        let input = tape.x0.view().insert_axis(Axis(0)).to_owned();
        self.feature_init
            .backward(&input, &carried, &mut grad.feature_init, false);
        Ok(())
    }
}
