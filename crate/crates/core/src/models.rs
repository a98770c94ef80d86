//! The three lifter families: vanilla residual MLP, fully rotation-
//! equivariant vector-neuron lifter, and the hybrid lifter that pairs an
//! equivariant xy branch with an unconstrained depth branch.
//!
//! Equivariance contract, verified by tests for arbitrary parameter values:
//! rotating the 2D input in-plane rotates the fully-equivariant model's 3D
//! output about the optical axis and leaves its depth untouched. The hybrid
//! model guarantees this for the xy columns only. The vanilla model offers
//! no such guarantee — that is the point of comparing them.

use crate::error::{Error, Result};
use crate::geometry::{compute_stats, Pose2D, Pose3D, StandardizationMode, StandardizationStats};
use crate::nn::{kaiming_uniform, Parameter, RunningStats};
use crate::rng::stream_rng;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const VN_RELU_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vanilla,
    FullyEquivariant,
    Hybrid,
}

impl ModelKind {
    /// CLI spelling: vanilla | equi | hybrid.
    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "vanilla" => Ok(ModelKind::Vanilla),
            "equi" => Ok(ModelKind::FullyEquivariant),
            "hybrid" => Ok(ModelKind::Hybrid),
            other => Err(Error::invalid_argument(format!(
                "unknown model kind '{other}' (expected vanilla|equi|hybrid)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::FullyEquivariant => "equi",
            ModelKind::Hybrid => "hybrid",
        }
    }
}

/// How the hybrid depth branch is wired: on the standardized raw pose in
/// parallel with the equivariant branch, or on the first equivariant layer's
/// features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HybridMode {
    Parallel,
    FirstLayerFeatures,
}

impl HybridMode {
    pub fn parse(s: &str) -> Result<HybridMode> {
        match s {
            "parallel" => Ok(HybridMode::Parallel),
            "first-layer" => Ok(HybridMode::FirstLayerFeatures),
            other => Err(Error::invalid_argument(format!(
                "unknown hybrid mode '{other}' (expected parallel|first-layer)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HybridMode::Parallel => "parallel",
            HybridMode::FirstLayerFeatures => "first-layer",
        }
    }
}

/// Construction of the fully-equivariant model. The native construction
/// works directly on 2D vector channels with an invariant depth head; the
/// lifted construction appends a fixed random third coordinate per joint at
/// instantiation and runs 3D vector channels end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquivariantConstruction {
    Native2d,
    RandomLift3d,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hybrid_mode: HybridMode,
    pub construction: EquivariantConstruction,
    pub joint_count: usize,
    /// Width of the vanilla / depth MLP.
    pub width: usize,
    /// Residual blocks in the vanilla / depth MLP.
    pub blocks: usize,
    /// Vector-neuron channels in the equivariant trunk.
    pub vn_channels: usize,
    /// Hidden width of the invariant depth head.
    pub z_head_width: usize,
    pub dropout_rate: f64,
    /// Per-axis dataset standardization instead of the isotropic default.
    /// Only the vanilla model may use it: per-axis scaling breaks the exact
    /// rotation equivariance of the preprocessing.
    pub per_coordinate_stats: bool,
}

impl ModelConfig {
    /// Desk-scale preset. The widths are chosen so the three families land
    /// within ±20% of one another in parameter count.
    pub fn desk_scale(kind: ModelKind, joint_count: usize) -> ModelConfig {
        ModelConfig {
            kind,
            hybrid_mode: HybridMode::Parallel,
            construction: EquivariantConstruction::Native2d,
            joint_count,
            width: 128,
            blocks: 2,
            vn_channels: 42,
            z_head_width: 64,
            dropout_rate: 0.2,
            per_coordinate_stats: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count < 2 {
            return Err(Error::invalid_argument(
                "models need at least 2 joints".to_string(),
            ));
        }
        if self.width == 0 || self.blocks == 0 || self.vn_channels == 0 || self.z_head_width == 0 {
            return Err(Error::invalid_argument(
                "model widths must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid_argument(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.per_coordinate_stats && self.kind != ModelKind::Vanilla {
            return Err(Error::invalid_argument(
                "per-coordinate standardization is restricted to the vanilla model".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct LinearRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockRefs {
    lin1: LinearRef,
    bn1: BnRef,
    lin2: LinearRef,
    bn2: BnRef,
}

/// Martinez-style MLP: input linear + two residual blocks, each block two
/// rounds of linear → batch-norm → relu → dropout, with a skip connection.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpRefs {
    input: LinearRef,
    input_bn: BnRef,
    blocks: Vec<BlockRefs>,
    output: LinearRef,
}

/// Vector-neuron trunk: `mixes[i]` is the channel-mixing weight of layer i,
/// `dirs[i]` the learned nonlinearity direction (absent after the last mix).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VnRefs {
    mixes: Vec<usize>,
    dirs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Body {
    Vanilla {
        mlp: MlpRefs,
    },
    Equivariant {
        trunk: VnRefs,
        z_head: Vec<LinearRef>,
    },
    EquivariantLift3d {
        trunk: VnRefs,
    },
    Hybrid {
        trunk: VnRefs,
        z_mlp: MlpRefs,
    },
}

/// A 2D→3D lifter with its parameters, batch-norm buffers, and the input
/// standardization it was trained with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LifterModel {
    pub config: ModelConfig,
    /// Dataset-level standardization for the non-equivariant branches.
    pub stats: StandardizationStats,
    params: Vec<Parameter>,
    bn: Vec<RunningStats>,
    body: Body,
    /// Fixed random third input coordinate for the lifted construction.
    lift_anchor: Option<Vec<f64>>,
}

/// Parameter-index → tape-node bindings from one recorded forward pass.
pub type Bindings = Vec<(usize, NodeId)>;

struct Builder<'a> {
    params: &'a mut Vec<Parameter>,
    bn: &'a mut Vec<RunningStats>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> LinearRef {
        let w = kaiming_uniform(&mut self.rng, &[d_out, d_in], d_in);
        self.params.push(Parameter::new(format!("{name}.weight"), w));
        let wi = self.params.len() - 1;
        self.params
            .push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        LinearRef {
            w: wi,
            b: wi + 1,
        }
    }

    fn batch_norm(&mut self, name: &str, features: usize) -> BnRef {
        self.params.push(Parameter::new(
            format!("{name}.gamma"),
            Tensor::from_vec(&[features], vec![1.0; features]).expect("length matches"),
        ));
        let gamma = self.params.len() - 1;
        self.params.push(Parameter::new(
            format!("{name}.beta"),
            Tensor::zeros(&[features]),
        ));
        self.bn.push(RunningStats::new(features));
        BnRef {
            gamma,
            beta: gamma + 1,
            stats: self.bn.len() - 1,
        }
    }

    fn vn_weight(&mut self, name: &str, c_out: usize, c_in: usize) -> usize {
        let w = kaiming_uniform(&mut self.rng, &[c_out, c_in], c_in);
        self.params.push(Parameter::new(name.to_string(), w));
        self.params.len() - 1
    }

    fn mlp(&mut self, name: &str, d_in: usize, width: usize, blocks: usize, d_out: usize) -> MlpRefs {
        let input = self.linear(&format!("{name}.input"), width, d_in);
        let input_bn = self.batch_norm(&format!("{name}.input_bn"), width);
        let blocks = (0..blocks)
            .map(|i| BlockRefs {
                lin1: self.linear(&format!("{name}.block{i}.lin1"), width, width),
                bn1: self.batch_norm(&format!("{name}.block{i}.bn1"), width),
                lin2: self.linear(&format!("{name}.block{i}.lin2"), width, width),
                bn2: self.batch_norm(&format!("{name}.block{i}.bn2"), width),
            })
            .collect();
        let output = self.linear(&format!("{name}.output"), d_out, width);
        MlpRefs {
            input,
            input_bn,
            blocks,
            output,
        }
    }

    /// Trunk with `layers` channel mixes; nonlinearities after all but the
    /// last.
    fn vn_trunk(&mut self, name: &str, c_in: usize, c_mid: usize, c_out: usize, layers: usize) -> VnRefs {
        assert!(layers >= 2);
        let mut mixes = Vec::new();
        let mut dirs = Vec::new();
        for i in 0..layers {
            let (ci, co) = match i {
                0 => (c_in, c_mid),
                _ if i == layers - 1 => (c_mid, c_out),
                _ => (c_mid, c_mid),
            };
            mixes.push(self.vn_weight(&format!("{name}.mix{i}"), co, ci));
            if i != layers - 1 {
                dirs.push(self.vn_weight(&format!("{name}.dir{i}"), co, co));
            }
        }
        VnRefs { mixes, dirs }
    }
}

/// Either a training pass (mutating dropout RNG) or a deterministic
/// evaluation pass.
enum Pass<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl LifterModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<LifterModel> {
        config.validate()?;
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut builder = Builder {
            params: &mut params,
            bn: &mut bn,
            rng: stream_rng(seed, 0xB01D),
        };
        let n = config.joint_count;
        let c = config.vn_channels;
        let body = match (config.kind, config.construction) {
            (ModelKind::Vanilla, _) => Body::Vanilla {
                mlp: builder.mlp("vanilla", 2 * n, config.width, config.blocks, 3 * n),
            },
            (ModelKind::FullyEquivariant, EquivariantConstruction::Native2d) => {
                let trunk = builder.vn_trunk("equi.trunk", n, c, n, 3);
                let g = c * (c + 1) / 2;
                let zw = config.z_head_width;
                let z_head = vec![
                    builder.linear("equi.z1", zw, g),
                    builder.linear("equi.z2", zw, zw),
                    builder.linear("equi.z3", n, zw),
                ];
                Body::Equivariant { trunk, z_head }
            }
            (ModelKind::FullyEquivariant, EquivariantConstruction::RandomLift3d) => {
                Body::EquivariantLift3d {
                    trunk: builder.vn_trunk("equi3d.trunk", n, c, n, 3),
                }
            }
            (ModelKind::Hybrid, _) => {
                let trunk = builder.vn_trunk("hybrid.trunk", n, c, n, 3);
                let z_in = match config.hybrid_mode {
                    HybridMode::Parallel => 2 * n,
                    HybridMode::FirstLayerFeatures => 2 * c,
                };
                let z_mlp = builder.mlp("hybrid.z", z_in, config.width, config.blocks, n);
                Body::Hybrid { trunk, z_mlp }
            }
        };
        let lift_anchor = match (&config.kind, &config.construction) {
            (ModelKind::FullyEquivariant, EquivariantConstruction::RandomLift3d) => {
                let mut rng = stream_rng(seed, 0xA9C2);
                Some((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
            _ => None,
        };
        Ok(LifterModel {
            config,
            stats: StandardizationStats::identity(),
            params,
            bn,
            body,
            lift_anchor,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn joint_count(&self) -> usize {
        self.config.joint_count
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Fixes the grad buffers after deserialization.
    pub fn after_load(&mut self) {
        for p in &mut self.params {
            p.restore_grad_buffer();
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Adds the tape gradients of this pass into the parameter buffers.
    pub fn accumulate_gradients(&mut self, grads: &Gradients, bindings: &Bindings) {
        for (idx, node) in bindings {
            if let Some(g) = grads.get(*node) {
                let dst = self.params[*idx].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    /// Records a training forward pass for a batch of raw 2D poses.
    /// Returns the B×N×3 output node and the parameter bindings, and updates
    /// batch-norm running statistics.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        inputs: &[Pose2D],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, Bindings)> {
        let mut bindings = Vec::new();
        let mut bn_updates = Vec::new();
        let out = self.forward_inner(
            tape,
            inputs,
            Pass::Train { rng },
            &mut bindings,
            &mut bn_updates,
        )?;
        for (stats_idx, batch) in bn_updates {
            self.bn[stats_idx].update(&batch.mean, &batch.var);
        }
        Ok((out, bindings))
    }

    /// Deterministic evaluation on a batch of raw 2D poses.
    pub fn forward_eval(&self, inputs: &[Pose2D]) -> Result<Vec<Pose3D>> {
        let mut tape = Tape::new();
        let mut bindings = Vec::new();
        let mut bn_updates = Vec::new();
        let out = self.forward_inner(
            &mut tape,
            inputs,
            Pass::Eval,
            &mut bindings,
            &mut bn_updates,
        )?;
        tensor_to_poses(tape.value(out))
    }

    /// Convenience single-pose evaluation.
    pub fn lift(&self, input: &Pose2D) -> Result<Pose3D> {
        Ok(self
            .forward_eval(std::slice::from_ref(input))?
            .pop()
            .expect("one output per input"))
    }

    fn check_inputs(&self, inputs: &[Pose2D]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::invalid_argument("empty input batch".to_string()));
        }
        let n = self.config.joint_count;
        for p in inputs {
            if p.joint_count() != n {
                return Err(Error::invalid_argument(format!(
                    "model is configured for {n} joints, input has {}",
                    p.joint_count()
                )));
            }
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        inputs: &[Pose2D],
        mut pass: Pass<'_>,
        bindings: &mut Bindings,
        bn_updates: &mut Vec<(usize, crate::tape::BatchStats)>,
    ) -> Result<NodeId> {
        self.check_inputs(inputs)?;
        match &self.body {
            Body::Vanilla { mlp } => {
                let x = self.standardized_flat_input(tape, inputs);
                let flat = self.mlp_forward(tape, mlp, x, &mut pass, bindings, bn_updates)?;
                tape.reshape(flat, &[inputs.len(), self.config.joint_count, 3], "vanilla.out")
            }
            Body::Equivariant { trunk, z_head } => {
                let (x, scales) = self.centered_input(tape, inputs)?;
                let (xy, hidden, _first) = self.vn_forward(tape, trunk, x, bindings)?;
                let hidden = hidden.expect("trunk has at least two layers");
                let inv = tape.gram(hidden, "equi.invariants")?;
                let mut h = inv;
                for (i, lin) in z_head.iter().enumerate() {
                    h = self.linear_node(tape, lin, h, &format!("equi.z{i}"), bindings)?;
                    if i + 1 != z_head.len() {
                        h = tape.relu(h, format!("equi.z{i}.relu"));
                    }
                }
                let joined = tape.join_xyz(xy, h, "equi.join")?;
                tape.scale_rows(joined, scales, "equi.rescale")
            }
            Body::EquivariantLift3d { trunk } => {
                let (x, scales) = self.lifted_input(tape, inputs)?;
                let (out, _, _) = self.vn_forward(tape, trunk, x, bindings)?;
                tape.scale_rows(out, scales, "equi3d.rescale")
            }
            Body::Hybrid { trunk, z_mlp } => {
                let (x, scales) = self.centered_input(tape, inputs)?;
                let (xy, _, first) = self.vn_forward(tape, trunk, x, bindings)?;
                let xy = tape.scale_rows(xy, scales, "hybrid.xy.rescale")?;
                let z_in = match self.config.hybrid_mode {
                    HybridMode::Parallel => self.standardized_flat_input(tape, inputs),
                    HybridMode::FirstLayerFeatures => {
                        let c = self.config.vn_channels;
                        tape.reshape(first, &[inputs.len(), 2 * c], "hybrid.z.features")?
                    }
                };
                let z = self.mlp_forward(tape, z_mlp, z_in, &mut pass, bindings, bn_updates)?;
                tape.join_xyz(xy, z, "hybrid.join")
            }
        }
    }

    fn param_node(&self, tape: &mut Tape, idx: usize, bindings: &mut Bindings) -> NodeId {
        let p = &self.params[idx];
        let node = tape.var(p.value.clone(), p.name.clone());
        bindings.push((idx, node));
        node
    }

    fn linear_node(
        &self,
        tape: &mut Tape,
        lin: &LinearRef,
        x: NodeId,
        label: &str,
        bindings: &mut Bindings,
    ) -> Result<NodeId> {
        let w = self.param_node(tape, lin.w, bindings);
        let b = self.param_node(tape, lin.b, bindings);
        tape.linear(x, w, b, label)
    }

    /// linear → batch-norm → relu → dropout.
    #[allow(clippy::too_many_arguments)]
    fn dense_unit(
        &self,
        tape: &mut Tape,
        lin: &LinearRef,
        bn: &BnRef,
        x: NodeId,
        label: &str,
        pass: &mut Pass<'_>,
        bindings: &mut Bindings,
        bn_updates: &mut Vec<(usize, crate::tape::BatchStats)>,
    ) -> Result<NodeId> {
        let h = self.linear_node(tape, lin, x, label, bindings)?;
        let gamma = self.param_node(tape, bn.gamma, bindings);
        let beta = self.param_node(tape, bn.beta, bindings);
        let running = &self.bn[bn.stats];
        let h = match pass {
            Pass::Train { .. } => {
                let (node, stats) =
                    tape.batch_norm_train(h, gamma, beta, running.eps, format!("{label}.bn"))?;
                bn_updates.push((bn.stats, stats));
                node
            }
            Pass::Eval => tape.batch_norm_eval(
                h,
                gamma,
                beta,
                &running.mean,
                &running.var,
                running.eps,
                format!("{label}.bn"),
            )?,
        };
        let h = tape.relu(h, format!("{label}.relu"));
        match pass {
            Pass::Train { rng } => tape.dropout(h, self.config.dropout_rate, rng, format!("{label}.drop")),
            Pass::Eval => Ok(h),
        }
    }

    fn mlp_forward(
        &self,
        tape: &mut Tape,
        mlp: &MlpRefs,
        x: NodeId,
        pass: &mut Pass<'_>,
        bindings: &mut Bindings,
        bn_updates: &mut Vec<(usize, crate::tape::BatchStats)>,
    ) -> Result<NodeId> {
        let mut h = self.dense_unit(tape, &mlp.input, &mlp.input_bn, x, "mlp.input", pass, bindings, bn_updates)?;
        for (i, block) in mlp.blocks.iter().enumerate() {
            let skip = h;
            let label1 = format!("mlp.block{i}.1");
            let label2 = format!("mlp.block{i}.2");
            let a = self.dense_unit(tape, &block.lin1, &block.bn1, h, &label1, pass, bindings, bn_updates)?;
            let b = self.dense_unit(tape, &block.lin2, &block.bn2, a, &label2, pass, bindings, bn_updates)?;
            h = tape.add(b, skip, format!("mlp.block{i}.residual"))?;
        }
        self.linear_node(tape, &mlp.output, h, "mlp.output", bindings)
    }

    /// Trunk forward. Returns (final mix output B×N×D, last hidden feature,
    /// first layer feature).
    fn vn_forward(
        &self,
        tape: &mut Tape,
        trunk: &VnRefs,
        x: NodeId,
        bindings: &mut Bindings,
    ) -> Result<(NodeId, Option<NodeId>, NodeId)> {
        let mut h = x;
        let mut first = None;
        let mut last_hidden = None;
        for (i, &mix) in trunk.mixes.iter().enumerate() {
            let w = self.param_node(tape, mix, bindings);
            h = tape.vn_linear(h, w, format!("vn.mix{i}"))?;
            if i < trunk.dirs.len() {
                let d = self.param_node(tape, trunk.dirs[i], bindings);
                let k = tape.vn_linear(h, d, format!("vn.dir{i}"))?;
                h = tape.vn_relu(h, k, VN_RELU_EPS, format!("vn.relu{i}"))?;
                last_hidden = Some(h);
            }
            if i == 0 {
                first = Some(h);
            }
        }
        Ok((h, last_hidden, first.expect("trunk has layers")))
    }

    /// Dataset-standardized flattened pose batch (B×2N), as a constant leaf.
    fn standardized_flat_input(&self, tape: &mut Tape, inputs: &[Pose2D]) -> NodeId {
        let n = self.config.joint_count;
        let mut data = Vec::with_capacity(inputs.len() * 2 * n);
        for pose in inputs {
            let std = crate::geometry::standardize(pose, &self.stats);
            for j in std.joints() {
                data.push(j[0]);
                data.push(j[1]);
            }
        }
        let t = Tensor::from_vec(&[inputs.len(), 2 * n], data).expect("length matches");
        tape.constant(t, "input.standardized")
    }

    /// Per-pose centered and isotropically scaled batch (B×N×2) plus the
    /// per-sample scales. This preprocessing commutes with in-plane rotation,
    /// so it preserves the equivariance of what follows.
    fn centered_input(&self, tape: &mut Tape, inputs: &[Pose2D]) -> Result<(NodeId, Vec<f64>)> {
        let n = self.config.joint_count;
        let mut data = Vec::with_capacity(inputs.len() * n * 2);
        let mut scales = Vec::with_capacity(inputs.len());
        for pose in inputs {
            let stats = compute_stats(std::slice::from_ref(pose), StandardizationMode::Isotropic)?;
            let std = crate::geometry::standardize(pose, &stats);
            for j in std.joints() {
                data.push(j[0]);
                data.push(j[1]);
            }
            scales.push(stats.isotropic_scale());
        }
        let t = Tensor::from_vec(&[inputs.len(), n, 2], data).expect("length matches");
        Ok((tape.constant(t, "input.centered"), scales))
    }

    /// Centered input with the fixed random anchor as third coordinate
    /// (B×N×3).
    fn lifted_input(&self, tape: &mut Tape, inputs: &[Pose2D]) -> Result<(NodeId, Vec<f64>)> {
        let anchor = self
            .lift_anchor
            .as_ref()
            .expect("lifted construction stores an anchor");
        let n = self.config.joint_count;
        let mut data = Vec::with_capacity(inputs.len() * n * 3);
        let mut scales = Vec::with_capacity(inputs.len());
        for pose in inputs {
            let stats = compute_stats(std::slice::from_ref(pose), StandardizationMode::Isotropic)?;
            let std = crate::geometry::standardize(pose, &stats);
            for (ji, j) in std.joints().iter().enumerate() {
                data.push(j[0]);
                data.push(j[1]);
                data.push(anchor[ji]);
            }
            scales.push(stats.isotropic_scale());
        }
        let t = Tensor::from_vec(&[inputs.len(), n, 3], data).expect("length matches");
        Ok((tape.constant(t, "input.lifted"), scales))
    }
}

/// B×N×2 batch tensor from poses.
pub fn poses2d_to_tensor(poses: &[Pose2D]) -> Result<Tensor> {
    if poses.is_empty() {
        return Err(Error::invalid_argument("empty pose batch".to_string()));
    }
    let n = poses[0].joint_count();
    let mut data = Vec::with_capacity(poses.len() * n * 2);
    for p in poses {
        if p.joint_count() != n {
            return Err(Error::invalid_argument(
                "pose batch has mixed joint counts".to_string(),
            ));
        }
        for j in p.joints() {
            data.extend_from_slice(j);
        }
    }
    Tensor::from_vec(&[poses.len(), n, 2], data)
}

/// B×N×3 batch tensor from poses.
pub fn poses3d_to_tensor(poses: &[Pose3D]) -> Result<Tensor> {
    if poses.is_empty() {
        return Err(Error::invalid_argument("empty pose batch".to_string()));
    }
    let n = poses[0].joint_count();
    let mut data = Vec::with_capacity(poses.len() * n * 3);
    for p in poses {
        if p.joint_count() != n {
            return Err(Error::invalid_argument(
                "pose batch has mixed joint counts".to_string(),
            ));
        }
        for j in p.joints() {
            data.extend_from_slice(j);
        }
    }
    Tensor::from_vec(&[poses.len(), n, 3], data)
}

/// Splits a B×N×3 tensor back into poses.
pub fn tensor_to_poses(t: &Tensor) -> Result<Vec<Pose3D>> {
    let (bsz, n, three) = t.dims3()?;
    if three != 3 {
        return Err(Error::invalid_argument(format!(
            "expected last dimension 3, got shape {:?}",
            t.shape()
        )));
    }
    let mut out = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let mut joints = Vec::with_capacity(n);
        for j in 0..n {
            let base = (b * n + j) * 3;
            joints.push([t.data()[base], t.data()[base + 1], t.data()[base + 2]]);
        }
        out.push(Pose3D::new(joints)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rotation2, apply_rotation3, embed_so2_in_so3, Rotation2};
    use crate::gradcheck::check_gradients;
    use crate::metrics::{equivariance_error, ColumnMask};
    use std::f64::consts::TAU;

    fn random_pose(rng: &mut impl Rng, n: usize, scale: f64) -> Pose2D {
        Pose2D::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn vn_linear_identity_and_zero_weight() {
        let mut rng = stream_rng(21, 0);
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(&[1, 3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
            "x",
        );
        let eye = tape.constant(
            Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            "eye",
        );
        let y = tape.vn_linear(x, eye, "vn").unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let zero = tape.constant(Tensor::zeros(&[2, 3]), "zero");
        let z = tape.vn_linear(x, zero, "vn0").unwrap();
        assert!(tape.value(z).data().iter().all(|v| *v == 0.0));
    }

    /// Applies an in-plane rotation to every channel of a B×C×2 feature.
    fn rotate_feature(t: &Tensor, r: &Rotation2) -> Tensor {
        let mut out = t.clone();
        for ch in out.data_mut().chunks_mut(2) {
            let p = r.rotate_point([ch[0], ch[1]]);
            ch[0] = p[0];
            ch[1] = p[1];
        }
        out
    }

    #[test]
    fn vn_linear_commutes_with_rotation() {
        let mut rng = stream_rng(21, 1);
        for _ in 0..50 {
            let c = 4;
            let co = 3;
            let v = Tensor::from_vec(
                &[2, c, 2],
                (0..2 * c * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let w = Tensor::from_vec(
                &[co, c],
                (0..co * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let r = Rotation2::from_angle(rng.random_range(0.0..TAU)).unwrap();

            let mut tape = Tape::new();
            let wv = tape.constant(w.clone(), "w");
            let x1 = tape.constant(rotate_feature(&v, &r), "xr");
            let a = tape.vn_linear(x1, wv, "vn").unwrap();
            let x2 = tape.constant(v, "x");
            let b = tape.vn_linear(x2, wv, "vn").unwrap();
            let b_rot = rotate_feature(tape.value(b), &r);
            for (p, q) in tape.value(a).data().iter().zip(b_rot.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vn_relu_positive_branch_is_identity() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap(), "q");
        let k = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![2.0, 4.0]).unwrap(), "k");
        let y = tape.vn_relu(q, k, VN_RELU_EPS, "vnrelu").unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn vn_relu_zero_direction_returns_q() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![-3.0, 0.5]).unwrap(), "q");
        let k = tape.constant(Tensor::zeros(&[1, 1, 2]), "k");
        let y = tape.vn_relu(q, k, VN_RELU_EPS, "vnrelu").unwrap();
        assert_eq!(tape.value(y).data(), &[-3.0, 0.5]);
    }

    #[test]
    fn vn_relu_equivariance() {
        let mut rng = stream_rng(21, 2);
        for _ in 0..50 {
            let c = 5;
            let q = Tensor::from_vec(
                &[1, c, 2],
                (0..c * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let k = Tensor::from_vec(
                &[1, c, 2],
                (0..c * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let r = Rotation2::from_angle(rng.random_range(0.0..TAU)).unwrap();

            let mut tape = Tape::new();
            let qr = tape.constant(rotate_feature(&q, &r), "qr");
            let kr = tape.constant(rotate_feature(&k, &r), "kr");
            let a = tape.vn_relu(qr, kr, VN_RELU_EPS, "vnrelu").unwrap();
            let qn = tape.constant(q, "q");
            let kn = tape.constant(k, "k");
            let b = tape.vn_relu(qn, kn, VN_RELU_EPS, "vnrelu").unwrap();
            let b_rot = rotate_feature(tape.value(b), &r);
            for (p, s) in tape.value(a).data().iter().zip(b_rot.data()) {
                assert!((p - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_examples_and_invariance() {
        // Single unit channel → value 1; orthogonal channels → zero cross term.
        let mut tape = Tape::new();
        let unit = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap(), "u");
        let g1 = tape.gram(unit, "gram").unwrap();
        assert_eq!(tape.value(g1).data(), &[1.0]);

        let ortho = tape.constant(
            Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            "o",
        );
        let g2 = tape.gram(ortho, "gram").unwrap();
        assert_eq!(tape.value(g2).data(), &[1.0, 0.0, 1.0]);

        let mut rng = stream_rng(21, 3);
        for _ in 0..50 {
            let c = 4;
            let v = Tensor::from_vec(
                &[1, c, 2],
                (0..c * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let r = Rotation2::from_angle(rng.random_range(0.0..TAU)).unwrap();
            let mut tape = Tape::new();
            let a_in = tape.constant(rotate_feature(&v, &r), "vr");
            let a = tape.gram(a_in, "gram").unwrap();
            let b_in = tape.constant(v, "v");
            let b = tape.gram(b_in, "gram").unwrap();
            for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fd_vn_ops() {
        let mut rng = stream_rng(21, 4);
        for trial in 0..5 {
            let (bsz, c, co) = (2, 3 + trial % 2, 2 + trial % 3);
            let x = Tensor::from_vec(
                &[bsz, c, 2],
                (0..bsz * c * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = Tensor::from_vec(
                &[co, c],
                (0..co * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let d = Tensor::from_vec(
                &[co, co],
                (0..co * co).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let target = Tensor::zeros(&[bsz, co * (co + 1) / 2]);
            check_gradients(&[x, w, d], 1e-5, 1e-5, move |tape, ids| {
                let h = tape.vn_linear(ids[0], ids[1], "mix")?;
                let k = tape.vn_linear(h, ids[2], "dir")?;
                let a = tape.vn_relu(h, k, VN_RELU_EPS, "vnrelu")?;
                let g = tape.gram(a, "gram")?;
                let t = tape.constant(target.clone(), "t");
                tape.mse_loss(g, t, "loss")
            })
            .unwrap();
        }
    }

    #[test]
    fn fd_vn_relu_negative_branch() {
        // Force the projection branch: k = −q makes ⟨q,k⟩ < 0.
        let q = Tensor::from_vec(&[1, 2, 2], vec![0.7, -0.3, 0.4, 0.9]).unwrap();
        let k = Tensor::from_vec(&[1, 2, 2], vec![-0.7, 0.2, -0.4, -0.8]).unwrap();
        check_gradients(&[q, k], 1e-5, 1e-5, |tape, ids| {
            let y = tape.vn_relu(ids[0], ids[1], VN_RELU_EPS, "vnrelu")?;
            let t = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(), "t");
            tape.mse_loss(y, t, "loss")
        })
        .unwrap();
    }

    fn model(kind: ModelKind, seed: u64) -> LifterModel {
        LifterModel::new(ModelConfig::desk_scale(kind, 17), seed).unwrap()
    }

    #[test]
    fn desk_scale_parameter_counts_match_within_20_percent() {
        let vanilla = model(ModelKind::Vanilla, 0).count_parameters() as f64;
        let equi = model(ModelKind::FullyEquivariant, 0).count_parameters() as f64;
        let hybrid = model(ModelKind::Hybrid, 0).count_parameters() as f64;
        let within = |a: f64, b: f64| {
            let ratio = a / b;
            (0.8..=1.2).contains(&ratio)
        };
        assert!(within(equi, vanilla), "equi {equi} vs vanilla {vanilla}");
        assert!(within(hybrid, vanilla), "hybrid {hybrid} vs vanilla {vanilla}");
    }

    #[test]
    fn count_parameters_single_linear() {
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut b = Builder {
            params: &mut params,
            bn: &mut bn,
            rng: stream_rng(0, 0),
        };
        b.linear("probe", 3, 2);
        let total: usize = params.iter().map(Parameter::len).sum();
        assert_eq!(total, 9);
    }

    #[test]
    fn vanilla_deterministic_and_rotation_sensitive() {
        let mut rng = stream_rng(22, 0);
        let m1 = model(ModelKind::Vanilla, 7);
        let m2 = model(ModelKind::Vanilla, 7);
        let pose = random_pose(&mut rng, 17, 300.0);
        let a = m1.lift(&pose).unwrap();
        let b = m2.lift(&pose).unwrap();
        assert_eq!(a, b);

        // Rotation sensitivity: some sampled angle must produce a visible
        // equivariance residual for a generic random model.
        let mut found = 0;
        for trial in 0..20 {
            let m = model(ModelKind::Vanilla, 100 + trial);
            let pose = random_pose(&mut rng, 17, 300.0);
            let theta = rng.random_range(0.1..TAU - 0.1);
            let err = equivariance_error(&m, &pose, theta, ColumnMask::Full).unwrap();
            if err > 1e-3 {
                found += 1;
            }
        }
        assert!(found >= 1, "vanilla model never showed rotation sensitivity");
    }

    #[test]
    fn vanilla_permutation_sensitive() {
        let mut rng = stream_rng(22, 5);
        let mut found = 0;
        for trial in 0..20 {
            let m = model(ModelKind::Vanilla, 300 + trial);
            let pose = random_pose(&mut rng, 17, 300.0);
            let mut swapped = pose.joints().to_vec();
            swapped.swap(1, 4);
            let swapped = Pose2D::new(swapped).unwrap();
            let a = m.lift(&pose).unwrap();
            let b = m.lift(&swapped).unwrap();
            // Compare joint 0's prediction; a permutation-equivariant map in
            // the vanilla family would keep it fixed.
            let d = crate::metrics::mpjpe(&a, &b).unwrap();
            if d > 1e-3 {
                found += 1;
            }
        }
        assert!(found >= 1);
    }

    #[test]
    fn equivariant_residual_small_for_random_models() {
        let mut rng = stream_rng(22, 1);
        for trial in 0..10 {
            let m = model(ModelKind::FullyEquivariant, 40 + trial);
            for _ in 0..5 {
                let pose = random_pose(&mut rng, 17, 300.0);
                let theta = rng.random_range(0.0..TAU);
                let err = equivariance_error(&m, &pose, theta, ColumnMask::Full).unwrap();
                let rms = m.lift(&pose).unwrap().rms();
                assert!(err <= 1e-9 * rms.max(1e-12), "residual {err} vs rms {rms}");
            }
        }
    }

    #[test]
    fn equivariant_zero_angle_residual_is_zero() {
        let mut rng = stream_rng(22, 2);
        let m = model(ModelKind::FullyEquivariant, 5);
        let pose = random_pose(&mut rng, 17, 300.0);
        let err = equivariance_error(&m, &pose, 0.0, ColumnMask::Full).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn equivariant_depth_invariant_under_rotation() {
        let mut rng = stream_rng(22, 3);
        let m = model(ModelKind::FullyEquivariant, 9);
        for _ in 0..10 {
            let pose = random_pose(&mut rng, 17, 300.0);
            let theta = rng.random_range(0.0..TAU);
            let r = Rotation2::from_angle(theta).unwrap();
            let a = m.lift(&apply_rotation2(&pose, &r)).unwrap();
            let b = m.lift(&pose).unwrap();
            for (ja, jb) in a.joints().iter().zip(b.joints()) {
                assert!((ja[2] - jb[2]).abs() < 1e-12 * (1.0 + jb[2].abs()) + 1e-12);
            }
        }
    }

    #[test]
    fn lifted_construction_is_equivariant_too() {
        let mut rng = stream_rng(22, 4);
        let mut config = ModelConfig::desk_scale(ModelKind::FullyEquivariant, 17);
        config.construction = EquivariantConstruction::RandomLift3d;
        let m = LifterModel::new(config, 3).unwrap();
        for _ in 0..10 {
            let pose = random_pose(&mut rng, 17, 300.0);
            let theta = rng.random_range(0.0..TAU);
            let err = equivariance_error(&m, &pose, theta, ColumnMask::Full).unwrap();
            let rms = m.lift(&pose).unwrap().rms();
            assert!(err <= 1e-9 * rms.max(1e-12));
        }
    }

    #[test]
    fn hybrid_xy_equivariant_z_not() {
        let mut rng = stream_rng(22, 6);
        for mode in [HybridMode::Parallel, HybridMode::FirstLayerFeatures] {
            for trial in 0..5 {
                let mut config = ModelConfig::desk_scale(ModelKind::Hybrid, 17);
                config.hybrid_mode = mode;
                let m = LifterModel::new(config, 60 + trial).unwrap();
                let pose = random_pose(&mut rng, 17, 300.0);
                let rms = m.lift(&pose).unwrap().rms();
                let mut z_hit = false;
                for _ in 0..8 {
                    let theta = rng.random_range(0.3..TAU - 0.3);
                    let xy = equivariance_error(&m, &pose, theta, ColumnMask::Xy).unwrap();
                    assert!(xy <= 1e-9 * rms.max(1e-12), "xy residual {xy}");
                    let z = equivariance_error(&m, &pose, theta, ColumnMask::Z).unwrap();
                    if z > 1e-3 {
                        z_hit = true;
                    }
                }
                assert!(z_hit, "hybrid {mode:?} depth stayed invariant for all angles");
            }
        }
    }

    #[test]
    fn hybrid_zero_angle_residual_is_zero() {
        let mut rng = stream_rng(22, 7);
        let m = model(ModelKind::Hybrid, 8);
        let pose = random_pose(&mut rng, 17, 300.0);
        let err = equivariance_error(&m, &pose, 0.0, ColumnMask::Full).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_joint_count_rejected() {
        let m = model(ModelKind::Vanilla, 0);
        let mut rng = stream_rng(22, 8);
        let pose = random_pose(&mut rng, 16, 100.0);
        assert!(matches!(m.lift(&pose), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn equivariance_holds_under_composed_rotations_proptest_style() {
        // Composition of the model map with a rotation of a rotated input.
        let mut rng = stream_rng(22, 9);
        let m = model(ModelKind::FullyEquivariant, 1);
        let pose = random_pose(&mut rng, 17, 250.0);
        let t1 = 1.1;
        let t2 = 2.3;
        let r1 = Rotation2::from_angle(t1).unwrap();
        let r2 = Rotation2::from_angle(t2).unwrap();
        let lhs = m.lift(&apply_rotation2(&apply_rotation2(&pose, &r1), &r2)).unwrap();
        let rhs = apply_rotation3(
            &m.lift(&pose).unwrap(),
            &embed_so2_in_so3(&r1.compose(&r2)),
        );
        let d = crate::metrics::mpjpe(&lhs, &rhs).unwrap();
        assert!(d <= 1e-9 * rhs.rms().max(1e-12));
    }
}
