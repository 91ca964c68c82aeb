//! Planning via query interaction.
//!
//! A learned ego query attends first to agent queries and then to map
//! queries through single-block transformer decoders, each with its own
//! positional-encoding MLP. A small MLP head maps the two updated ego
//! queries, the ego status and a command embedding to `T_f` waypoints.
//!
//! Agent and map queries are embeddings of ground-truth scene features;
//! they stand in for the BEV perception stack, which this crate does not
//! model.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    load_named_tensors, named_tensors_to_string, save_named_tensors, Gradients, NodeId, Tape,
    Tensor,
};
use crate::error::{Error, Result};
use crate::geometry::{nearest_segment, Point2};
use crate::scene::{best_mode, Command, MapClass, PlanTrajectory, Scenario, DEFAULT_T_F};

/// Meters per unit of network input/output.
const POSITION_SCALE: f64 = 10.0;
const AGENT_FEATURES: usize = 6;
const MAP_FEATURES: usize = 11;
const STATUS_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(rename = "T_f")]
    pub t_f: usize,
    pub d_cmd: usize,
    pub head_hidden: usize,
    /// Ego-agent interaction block enabled.
    pub agent_interaction: bool,
    /// Ego-map interaction block enabled.
    pub map_interaction: bool,
    /// Auxiliary heads re-predicting map points and agent futures.
    pub aux_heads: bool,
    pub aux_modes: usize,
    pub aux_points: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 1,
            t_f: DEFAULT_T_F,
            d_cmd: 8,
            head_hidden: 64,
            agent_interaction: true,
            map_interaction: true,
            aux_heads: false,
            aux_modes: 6,
            aux_points: 20,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "interact: d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.t_f == 0 || self.head_hidden == 0 {
            return Err(Error::Config(
                "interact: T_f and head_hidden must be >= 1".into(),
            ));
        }
        if self.aux_heads && (self.aux_modes == 0 || self.aux_points == 0) {
            return Err(Error::Config(
                "interact: aux heads need modes and points".into(),
            ));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let d = self.d_model;
        let mut out: Vec<(String, (usize, usize))> = Vec::new();
        let mut add = |name: &str, shape: (usize, usize)| out.push((name.to_string(), shape));
        for (prefix, inputs) in [("agent_enc", AGENT_FEATURES), ("map_enc", MAP_FEATURES)] {
            add(&format!("{prefix}.w1"), (inputs, d));
            add(&format!("{prefix}.b1"), (1, d));
            add(&format!("{prefix}.w2"), (d, d));
            add(&format!("{prefix}.b2"), (1, d));
        }
        for prefix in ["pe1", "pe2"] {
            add(&format!("{prefix}.w1"), (2, d));
            add(&format!("{prefix}.b1"), (1, d));
            add(&format!("{prefix}.w2"), (d, d));
            add(&format!("{prefix}.b2"), (1, d));
        }
        add("ego_query", (1, d));
        for prefix in ["agent_block", "map_block"] {
            for w in ["wq", "wk", "wv", "wo"] {
                add(&format!("{prefix}.{w}"), (d, d));
            }
            add(&format!("{prefix}.ff_w1"), (d, 2 * d));
            add(&format!("{prefix}.ff_b1"), (1, 2 * d));
            add(&format!("{prefix}.ff_w2"), (2 * d, d));
            add(&format!("{prefix}.ff_b2"), (1, d));
        }
        let h = self.head_hidden;
        add("head.cmd_embed", (Command::ALL.len(), self.d_cmd));
        add("head.w1", (2 * d + STATUS_FEATURES + self.d_cmd, h));
        add("head.b1", (1, h));
        add("head.w2", (h, h));
        add("head.b2", (1, h));
        add("head.w3", (h, 2 * self.t_f));
        add("head.b3", (1, 2 * self.t_f));
        if self.aux_heads {
            add("aux.map_w", (d, 2 * self.aux_points));
            add("aux.map_b", (1, 2 * self.aux_points));
            add("aux.cls_w", (d, MapClass::ALL.len()));
            add("aux.cls_b", (1, MapClass::ALL.len()));
            add("aux.mot_w", (d, 2 * self.aux_modes * self.t_f));
            add("aux.mot_b", (1, 2 * self.aux_modes * self.t_f));
            add("aux.score_w", (d, self.aux_modes));
            add("aux.score_b", (1, self.aux_modes));
        }
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionParams {
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl InteractionParams {
    fn from_tensors(tensors: Vec<(String, Tensor)>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { tensors, index }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; the ego query in `[-1, 1]`.
    pub fn init(config: &InteractionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let fan_in: HashMap<String, usize> = shapes
            .iter()
            .map(|(name, (rows, _))| (name.clone(), *rows))
            .collect();
        let tensors = shapes
            .into_iter()
            .map(|(name, (rows, cols))| {
                let bound = if name == "ego_query" || name == "head.cmd_embed" {
                    1.0
                } else {
                    let weight = bias_weight_name(&name);
                    let fan = weight.and_then(|w| fan_in.get(&w)).copied().unwrap_or(rows);
                    1.0 / (fan.max(1) as f64).sqrt()
                };
                let data = (0..rows * cols)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                (name, Tensor::new(rows, cols, data).expect("shape"))
            })
            .collect();
        Ok(Self::from_tensors(tensors))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i].1)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in &mut self.tensors {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        named_tensors_to_string(&self.tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_named_tensors(path, &self.tensors)
    }

    /// Loads a checkpoint and checks it against the shapes `config` expects.
    pub fn load(path: impl AsRef<Path>, config: &InteractionConfig) -> Result<Self> {
        let tensors = load_named_tensors(path)?;
        let expected = config.param_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors in checkpoint, config expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, t), (ename, eshape)) in tensors.iter().zip(&expected) {
            if name != ename || t.shape() != *eshape {
                return Err(Error::CheckpointMismatch(format!(
                    "found `{name}` {:?}, expected `{ename}` {eshape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self::from_tensors(tensors))
    }
}

/// Weight tensor that determines a bias's fan-in (`x.b1` -> `x.w1`).
fn bias_weight_name(name: &str) -> Option<String> {
    let (prefix, last) = name.rsplit_once('.')?;
    let weight = if let Some(rest) = last.strip_prefix("ff_b") {
        format!("ff_w{rest}")
    } else if let Some(rest) = last.strip_prefix('b') {
        format!("w{rest}")
    } else if let Some(stem) = last.strip_suffix("_b") {
        format!("{stem}_w")
    } else {
        return None;
    };
    Some(format!("{prefix}.{weight}"))
}

/// Raw per-element features fed to the query embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInputs {
    pub agent_features: Tensor,
    pub map_features: Tensor,
    /// Agent positions, `N_a x 2`, scaled.
    pub agent_positions: Tensor,
    /// Map element centroids, `N_m x 2`, scaled.
    pub map_positions: Tensor,
    pub ego_position: Tensor,
    pub ego_status: Tensor,
    pub command: Command,
}

fn unit(v: Point2) -> Point2 {
    let n = v.norm();
    if n > 0.0 {
        v * (1.0 / n)
    } else {
        Point2::ORIGIN
    }
}

impl QueryInputs {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let s = 1.0 / POSITION_SCALE;
        let agent_rows: Vec<Vec<f64>> = scenario
            .agents
            .iter()
            .map(|a| {
                let first = best_mode(a).first().copied().unwrap_or(a.position);
                let speed = first.distance(a.position) / scenario.horizon_dt;
                vec![
                    a.position.x * s,
                    a.position.y * s,
                    a.heading.cos(),
                    a.heading.sin(),
                    speed * s,
                    a.confidence,
                ]
            })
            .collect();
        let map_rows: Vec<Vec<f64>> = scenario
            .map
            .iter()
            .map(|m| {
                let pts = m.points.points();
                let mean = m.points.centroid();
                let first = unit(pts[1] - pts[0]);
                let last = unit(pts[pts.len() - 1] - pts[pts.len() - 2]);
                let near =
                    nearest_segment(scenario.ego.position, &m.points).map_or(mean, |hit| hit.foot);
                let mut row = vec![0.0; MapClass::ALL.len()];
                row[m.class.index()] = 1.0;
                row.extend_from_slice(&[
                    mean.x * s,
                    mean.y * s,
                    near.x * s,
                    near.y * s,
                    first.x,
                    first.y,
                    last.x,
                    last.y,
                ]);
                row
            })
            .collect();
        let positions = |pts: Vec<Point2>| {
            Tensor::from_rows(
                &pts.iter()
                    .map(|p| vec![p.x * s, p.y * s])
                    .collect::<Vec<_>>(),
                2,
            )
            .expect("2 columns")
        };
        let ego = scenario.ego;
        Self {
            agent_features: Tensor::from_rows(&agent_rows, AGENT_FEATURES).expect("agent width"),
            map_features: Tensor::from_rows(&map_rows, MAP_FEATURES).expect("map width"),
            agent_positions: positions(scenario.agents.iter().map(|a| a.position).collect()),
            map_positions: positions(scenario.map.iter().map(|m| m.points.centroid()).collect()),
            ego_position: positions(vec![ego.position]),
            ego_status: Tensor::row(&[ego.velocity * s, ego.acceleration, ego.steering_angle]),
            command: ego.command,
        }
    }
}

/// Parameters registered as leaves on one tape.
pub struct BoundParams {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &InteractionParams) -> Self {
        let ids = params
            .tensors
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        Self {
            ids,
            index: params.index.clone(),
        }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))]
    }

    /// Parameter gradients in checkpoint order (zeros where unused).
    pub fn collect_grads(&self, grads: &Gradients, params: &InteractionParams) -> Vec<Tensor> {
        self.ids
            .iter()
            .zip(&params.tensors)
            .map(|(&id, (_, t))| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias_row(xw, b)
}

/// Two-layer MLP `relu(x W1 + b1) W2 + b2`.
fn mlp2(tape: &mut Tape, x: NodeId, p: &BoundParams, prefix: &str) -> Result<NodeId> {
    let h = linear(
        tape,
        x,
        p.id(&format!("{prefix}.w1")),
        p.id(&format!("{prefix}.b1")),
    )?;
    let h = tape.relu(h);
    linear(
        tape,
        h,
        p.id(&format!("{prefix}.w2")),
        p.id(&format!("{prefix}.b2")),
    )
}

/// Output of one decoder block.
pub struct BlockOutput {
    pub query: NodeId,
    /// Attention weights per head, each `1 x N_keys`.
    pub attention: Vec<NodeId>,
}

/// One transformer-decoder block: cross-attention with residual, then a
/// feed-forward layer with residual.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    q_pos: NodeId,
    k_pos: NodeId,
    p: &BoundParams,
    prefix: &str,
    n_heads: usize,
) -> Result<BlockOutput> {
    let d = tape.value(q).cols();
    for node in [k, v, q_pos, k_pos] {
        if tape.value(node).cols() != d {
            return Err(Error::Shape {
                op: "decoder_block",
                lhs: tape.value(q).shape(),
                rhs: tape.value(node).shape(),
            });
        }
    }
    let w = |s: &str| p.id(&format!("{prefix}.{s}"));
    let qp = tape.add(q, q_pos)?;
    let kp = tape.add(k, k_pos)?;
    let qh = tape.matmul(qp, w("wq"))?;
    let kh = tape.matmul(kp, w("wk"))?;
    let vh = tape.matmul(v, w("wv"))?;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut attention = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qs, ks, vs) = if n_heads == 1 {
            (qh, kh, vh)
        } else {
            (
                tape.slice_cols(qh, lo, hi)?,
                tape.slice_cols(kh, lo, hi)?,
                tape.slice_cols(vh, lo, hi)?,
            )
        };
        let kt = tape.transpose(ks);
        let scores = tape.matmul(qs, kt)?;
        let scores = tape.scalar_mul(scores, scale);
        let weights = tape.softmax_rows(scores);
        attention.push(weights);
        heads.push(tape.matmul(weights, vs)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let attended = tape.matmul(merged, w("wo"))?;
    let hidden = tape.add(q, attended)?;
    let ff = linear(tape, hidden, w("ff_w1"), w("ff_b1"))?;
    let ff = tape.relu(ff);
    let ff = linear(tape, ff, w("ff_w2"), w("ff_b2"))?;
    Ok(BlockOutput {
        query: tape.add(hidden, ff)?,
        attention,
    })
}

/// Agent and map query embeddings.
pub struct QueryNodes {
    pub agents: NodeId,
    pub maps: NodeId,
}

pub fn encode_query_nodes(
    tape: &mut Tape,
    inputs: &QueryInputs,
    p: &BoundParams,
) -> Result<QueryNodes> {
    let af = tape.constant(inputs.agent_features.clone());
    let mf = tape.constant(inputs.map_features.clone());
    Ok(QueryNodes {
        agents: mlp2(tape, af, p, "agent_enc")?,
        maps: mlp2(tape, mf, p, "map_enc")?,
    })
}

/// Evaluated agent (`N_a x d`) and map (`N_m x d`) queries with positions.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub agent_queries: Tensor,
    pub map_queries: Tensor,
    pub agent_positions: Tensor,
    pub map_positions: Tensor,
    pub ego_position: Tensor,
}

pub fn encode_queries(scenario: &Scenario, params: &InteractionParams) -> Result<QueryFeatures> {
    let inputs = QueryInputs::from_scenario(scenario);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let nodes = encode_query_nodes(&mut tape, &inputs, &bound)?;
    Ok(QueryFeatures {
        agent_queries: tape.value(nodes.agents).clone(),
        map_queries: tape.value(nodes.maps).clone(),
        agent_positions: inputs.agent_positions,
        map_positions: inputs.map_positions,
        ego_position: inputs.ego_position,
    })
}

/// MLP planning head over `[Q'_ego, Q''_ego, ego status, command embedding]`.
/// Returns a `T_f x 2` node in meters.
pub fn plan_head(
    tape: &mut Tape,
    q_agent: NodeId,
    q_map: NodeId,
    status: NodeId,
    command: Command,
    p: &BoundParams,
    t_f: usize,
) -> Result<NodeId> {
    let mut one_hot = Tensor::zeros(1, Command::ALL.len());
    one_hot.data_mut()[command.index()] = 1.0;
    let one_hot = tape.constant(one_hot);
    let cmd = tape.matmul(one_hot, p.id("head.cmd_embed"))?;
    let features = tape.concat_cols(&[q_agent, q_map, status, cmd])?;
    let h = linear(tape, features, p.id("head.w1"), p.id("head.b1"))?;
    let h = tape.relu(h);
    let h = linear(tape, h, p.id("head.w2"), p.id("head.b2"))?;
    let h = tape.relu(h);
    let out = linear(tape, h, p.id("head.w3"), p.id("head.b3"))?;
    let out = tape.scalar_mul(out, POSITION_SCALE);
    tape.reshape(out, t_f, 2)
}

/// Auxiliary prediction nodes (present when `aux_heads` is on).
pub struct AuxNodes {
    /// `N_m x 2 N_p` map points in meters.
    pub map_points: NodeId,
    /// `N_m x 3` class logits.
    pub map_logits: NodeId,
    /// `N_a x (N_k T_f 2)` agent futures in meters.
    pub motion: NodeId,
    /// `N_a x N_k` mode logits.
    pub mode_logits: NodeId,
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub params: BoundParams,
    /// `T_f x 2` waypoints.
    pub plan_node: NodeId,
    pub agent_attention: Vec<NodeId>,
    pub map_attention: Vec<NodeId>,
    pub aux: Option<AuxNodes>,
}

impl ForwardPass {
    pub fn plan(&self) -> PlanTrajectory {
        PlanTrajectory::from_flat(self.tape.value(self.plan_node).data())
    }
}

/// Full pipeline: query encoding, ego-agent block, ego-map block, plan head.
pub fn forward_plan(
    scenario: &Scenario,
    params: &InteractionParams,
    config: &InteractionConfig,
) -> Result<(PlanTrajectory, ForwardPass)> {
    let inputs = QueryInputs::from_scenario(scenario);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let queries = encode_query_nodes(&mut tape, &inputs, &bound)?;
    let p_ego = tape.constant(inputs.ego_position.clone());
    let p_a = tape.constant(inputs.agent_positions.clone());
    let p_m = tape.constant(inputs.map_positions.clone());
    let ego = bound.id("ego_query");

    let (q1, agent_attention) = if config.agent_interaction {
        let q_pos = mlp2(&mut tape, p_ego, &bound, "pe1")?;
        let k_pos = mlp2(&mut tape, p_a, &bound, "pe1")?;
        let out = decoder_block(
            &mut tape,
            ego,
            queries.agents,
            queries.agents,
            q_pos,
            k_pos,
            &bound,
            "agent_block",
            config.n_heads,
        )?;
        (out.query, out.attention)
    } else {
        (ego, Vec::new())
    };
    let (q2, map_attention) = if config.map_interaction {
        let q_pos = mlp2(&mut tape, p_ego, &bound, "pe2")?;
        let k_pos = mlp2(&mut tape, p_m, &bound, "pe2")?;
        let out = decoder_block(
            &mut tape,
            q1,
            queries.maps,
            queries.maps,
            q_pos,
            k_pos,
            &bound,
            "map_block",
            config.n_heads,
        )?;
        (out.query, out.attention)
    } else {
        (q1, Vec::new())
    };
    let status = tape.constant(inputs.ego_status.clone());
    let plan_node = plan_head(
        &mut tape,
        q1,
        q2,
        status,
        inputs.command,
        &bound,
        config.t_f,
    )?;

    let aux = if config.aux_heads {
        let map_points = linear(
            &mut tape,
            queries.maps,
            bound.id("aux.map_w"),
            bound.id("aux.map_b"),
        )?;
        let map_points = tape.scalar_mul(map_points, POSITION_SCALE);
        let map_logits = linear(
            &mut tape,
            queries.maps,
            bound.id("aux.cls_w"),
            bound.id("aux.cls_b"),
        )?;
        let motion = linear(
            &mut tape,
            queries.agents,
            bound.id("aux.mot_w"),
            bound.id("aux.mot_b"),
        )?;
        let motion = tape.scalar_mul(motion, POSITION_SCALE);
        let mode_logits = linear(
            &mut tape,
            queries.agents,
            bound.id("aux.score_w"),
            bound.id("aux.score_b"),
        )?;
        Some(AuxNodes {
            map_points,
            map_logits,
            motion,
            mode_logits,
        })
    } else {
        None
    };

    let pass = ForwardPass {
        tape,
        params: bound,
        plan_node,
        agent_attention,
        map_attention,
        aux,
    };
    Ok((pass.plan(), pass))
}
