use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention;
use super::features::{relation_vector, NodeInput, DESCRIPTOR_DIM, RELATION_DIM};
use super::params::{Linear, Mlp, ParamStore};
use super::{SpnConfig, SpnError};
use crate::neighbor_graph::{EdgeKey, FeatureCache, RecomputePlan, Topology};
use crate::scene_map::SegmentId;
use crate::tape::{Tape, Var};

/// Weights of one message-passing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Source node → first half of the query.
    pub query_node: Linear,
    /// Edge → second half of the query.
    pub query_edge: Linear,
    /// Neighbor node → attention target.
    pub target: Linear,
    /// One attention-logit MLP per head.
    pub attention: Vec<Mlp>,
    pub node_update: Mlp,
    pub edge_update: Mlp,
}

#[derive(Clone, Debug)]
pub struct Spn {
    pub config: SpnConfig,
    pub params: ParamStore,
    pub encoder: Mlp,
    pub node_proj: Linear,
    pub edge_proj: Mlp,
    pub layers: Vec<LayerParams>,
    pub node_classifier: Mlp,
    pub edge_classifier: Mlp,
}

/// A graph in training layout: nodes by position, directed edges as
/// `(source, target)` positions sorted ascending.
#[derive(Clone, Debug, Default)]
pub struct GraphBatch {
    pub nodes: Vec<NodeInput>,
    pub edges: Vec<(usize, usize)>,
}

impl GraphBatch {
    /// Builds the batch for `inputs` restricted to `topology`, keeping node
    /// order ascending by id.
    pub fn from_topology(inputs: &BTreeMap<SegmentId, NodeInput>, topology: &Topology) -> Self {
        let ids: Vec<SegmentId> = topology.nodes().filter(|id| inputs.contains_key(id)).collect();
        let index: BTreeMap<SegmentId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let edges = topology
            .directed_edges()
            .into_iter()
            .filter_map(|(a, b)| Some((*index.get(&a)?, *index.get(&b)?)))
            .collect();
        Self {
            nodes: ids.iter().map(|id| inputs[id].clone()).collect(),
            edges,
        }
    }

    pub fn edge_keys(&self) -> Vec<EdgeKey> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.nodes[a].id, self.nodes[b].id))
            .collect()
    }
}

/// Tape handles of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Node features per layer, index 0 = encoder output.
    pub node_layers: Vec<Var>,
    pub edge_layers: Vec<Var>,
    pub node_logits: Var,
    pub edge_logits: Var,
}

/// Feature computations executed by one incremental pass, per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecomputeStats {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub node_classifications: usize,
    pub edge_classifications: usize,
    pub timings: StageTimings,
}

/// Wall-clock time spent per stage of an incremental pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub node_encoding: Duration,
    pub edge_encoding: Duration,
    /// One entry per message-passing layer.
    pub layers: Vec<Duration>,
    pub classification: Duration,
}

impl RecomputeStats {
    pub fn matches_plan(&self, plan: &RecomputePlan) -> bool {
        let last = plan.layers();
        self.nodes == plan.node_counts()
            && self.edges == plan.edge_counts()
            && self.node_classifications == plan.nodes[last].len()
            && self.edge_classifications == plan.edges[last].len()
    }
}

fn rows_to_matrix<'a>(rows: impl IntoIterator<Item = &'a [f64]>, width: usize) -> Array2<f64> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("consistent row widths")
}

impl Spn {
    pub fn new(config: SpnConfig) -> Result<Self, SpnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let c = &config;

        let mut enc_dims = vec![c.channels.width()];
        enc_dims.extend(&c.encoder_dims);
        let encoder = Mlp::new(&mut store, "encoder", &enc_dims, &mut rng);
        let pooled = *c.encoder_dims.last().expect("validated");
        let node_proj = Linear::new(&mut store, "node_proj", pooled + DESCRIPTOR_DIM, c.node_dim, &mut rng);
        let edge_proj = Mlp::new(
            &mut store,
            "edge_proj",
            &[RELATION_DIM, c.edge_hidden, c.edge_dim],
            &mut rng,
        );

        let half_q = c.query_dim / 2;
        let (head_q, head_t) = (c.query_dim / c.heads, c.target_dim / c.heads);
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("gnn.{l}");
            let attention = (0..c.heads)
                .map(|h| {
                    Mlp::new(
                        &mut store,
                        &format!("{p}.attention.{h}"),
                        &[head_q, head_q, head_t],
                        &mut rng,
                    )
                })
                .collect();
            let hidden = c.node_dim + c.target_dim;
            layers.push(LayerParams {
                query_node: Linear::new(&mut store, &format!("{p}.query_node"), c.node_dim, half_q, &mut rng),
                query_edge: Linear::new(&mut store, &format!("{p}.query_edge"), c.edge_dim, half_q, &mut rng),
                target: Linear::new(&mut store, &format!("{p}.target"), c.node_dim, c.target_dim, &mut rng),
                attention,
                node_update: Mlp::new(
                    &mut store,
                    &format!("{p}.node_update"),
                    &[c.node_dim + c.target_dim, hidden, c.node_dim],
                    &mut rng,
                ),
                edge_update: Mlp::new(
                    &mut store,
                    &format!("{p}.edge_update"),
                    &[2 * c.node_dim + c.edge_dim, hidden, c.edge_dim],
                    &mut rng,
                ),
            });
        }
        let node_classifier = Mlp::new(
            &mut store,
            "node_classifier",
            &[c.node_dim, (c.node_dim / 2).max(1), c.num_classes],
            &mut rng,
        );
        let edge_classifier = Mlp::new(
            &mut store,
            "edge_classifier",
            &[c.edge_dim, (c.edge_dim / 2).max(1), c.num_predicates],
            &mut rng,
        );
        Ok(Self {
            config,
            params: store,
            encoder,
            node_proj,
            edge_proj,
            layers,
            node_classifier,
            edge_classifier,
        })
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<(), SpnError> {
        super::params::save_tensors(stem, &self.params, &self.config)
    }

    /// Rebuilds the network from a checkpoint, checking every declared shape.
    pub fn load(stem: &std::path::Path) -> Result<Self, SpnError> {
        let (store, config): (ParamStore, SpnConfig) = super::params::load_tensors(stem)?;
        let mut spn = Spn::new(config)?;
        spn.params.load_from(&store)?;
        Ok(spn)
    }

    // ---- tape building blocks ----

    fn linear(&self, tape: &mut Tape, lin: &Linear, x: Var) -> Var {
        let w = tape.param(lin.weight, self.params.get(lin.weight));
        let b = tape.param(lin.bias, self.params.get(lin.bias));
        tape.linear(x, w, b)
    }

    fn mlp(&self, tape: &mut Tape, mlp: &Mlp, x: Var) -> Var {
        let mut h = x;
        for (i, lin) in mlp.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = self.linear(tape, lin, h);
        }
        h
    }

    /// Layer-0 node features for `nodes`, one row each.
    pub fn encode_nodes(&self, tape: &mut Tape, nodes: &[&NodeInput]) -> Result<Var, SpnError> {
        let width = self.config.channels.width();
        let total: usize = nodes.iter().map(|n| n.points.nrows()).sum();
        let mut stacked = Array2::zeros((total, width));
        let mut groups = Vec::with_capacity(total);
        let mut row = 0;
        for (g, n) in nodes.iter().enumerate() {
            if n.points.nrows() == 0 {
                return Err(SpnError::EmptyInput(format!("segment {} has no points", n.id)));
            }
            if n.points.ncols() != width {
                return Err(SpnError::Shape(format!(
                    "segment {} has {} point channels, encoder expects {width}",
                    n.id,
                    n.points.ncols()
                )));
            }
            stacked
                .slice_mut(ndarray::s![row..row + n.points.nrows(), ..])
                .assign(&n.points);
            groups.extend(std::iter::repeat_n(g, n.points.nrows()));
            row += n.points.nrows();
        }
        let x = tape.leaf(stacked);
        let per_point = self.mlp(tape, &self.encoder, x);
        let pooled = tape.group_max(per_point, &groups, nodes.len());
        let desc = rows_to_matrix(nodes.iter().map(|n| &n.descriptor[..]), DESCRIPTOR_DIM);
        let desc = tape.leaf(desc);
        let raw = tape.concat(&[pooled, desc]);
        Ok(self.linear(tape, &self.node_proj, raw))
    }

    /// Layer-0 edge features for the given directed pairs.
    pub fn encode_edges(&self, tape: &mut Tape, pairs: &[(&NodeInput, &NodeInput)]) -> Result<Var, SpnError> {
        let mut rel = Vec::with_capacity(pairs.len() * RELATION_DIM);
        for (i, j) in pairs {
            if i.id == j.id {
                return Err(SpnError::SelfEdge(i.id));
            }
            rel.extend(relation_vector(&i.properties, &j.properties));
        }
        let r = Array2::from_shape_vec((pairs.len(), RELATION_DIM), rel).expect("row-major");
        let r = tape.leaf(r);
        Ok(self.mlp(tape, &self.edge_proj, r))
    }

    /// Attention messages for directed edges given the gathered source,
    /// edge and neighbor features (one row per edge).
    fn messages(&self, tape: &mut Tape, layer: &LayerParams, vi: Var, e: Var, vj: Var) -> Var {
        let qn = self.linear(tape, &layer.query_node, vi);
        let qe = self.linear(tape, &layer.query_edge, e);
        let q = tape.concat(&[qn, qe]);
        let t = self.linear(tape, &layer.target, vj);
        let h = self.config.heads;
        let (qw, tw) = (self.config.query_dim / h, self.config.target_dim / h);
        let logits: Vec<Var> = layer
            .attention
            .iter()
            .enumerate()
            .map(|(k, g_a)| {
                let part = tape.slice_cols(q, k * qw, (k + 1) * qw);
                self.mlp(tape, g_a, part)
            })
            .collect();
        let logits = tape.concat(&logits);
        let weights = tape.softmax_chunks(logits, tw);
        tape.mul(weights, t)
    }

    /// New features for `targets` (rows of `v`): max over the messages of
    /// their outgoing edges, joined with the node's own feature.
    ///
    /// `edges` are `(source row, neighbor row)` pairs of `v` aligned with the
    /// rows of `e`; every source must be a target and `group[k]` is the
    /// target position of edge `k`'s source.
    #[allow(clippy::too_many_arguments)]
    fn node_update(
        &self,
        tape: &mut Tape,
        layer: &LayerParams,
        v: Var,
        e: Var,
        edges: &[(usize, usize)],
        group: &[usize],
        targets: &[usize],
    ) -> Var {
        let src: Vec<usize> = edges.iter().map(|&(a, _)| a).collect();
        let dst: Vec<usize> = edges.iter().map(|&(_, b)| b).collect();
        let vi = tape.gather(v, &src);
        let vj = tape.gather(v, &dst);
        let msg = self.messages(tape, layer, vi, e, vj);
        let agg = tape.group_max(msg, group, targets.len());
        let own = tape.gather(v, targets);
        let joined = tape.concat(&[own, agg]);
        self.mlp(tape, &layer.node_update, joined)
    }

    fn edge_update(&self, tape: &mut Tape, layer: &LayerParams, v: Var, e: Var, edges: &[(usize, usize)]) -> Var {
        let src: Vec<usize> = edges.iter().map(|&(a, _)| a).collect();
        let dst: Vec<usize> = edges.iter().map(|&(_, b)| b).collect();
        let vi = tape.gather(v, &src);
        let vj = tape.gather(v, &dst);
        let joined = tape.concat(&[vi, e, vj]);
        self.mlp(tape, &layer.edge_update, joined)
    }

    /// Full forward pass over a batch, recorded on `tape`.
    pub fn forward_batch(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<BatchOutput, SpnError> {
        if batch.nodes.is_empty() {
            return Err(SpnError::EmptyInput("graph has no nodes".into()));
        }
        let refs: Vec<&NodeInput> = batch.nodes.iter().collect();
        let mut v = self.encode_nodes(tape, &refs)?;
        let pairs: Vec<_> = batch
            .edges
            .iter()
            .map(|&(a, b)| (&batch.nodes[a], &batch.nodes[b]))
            .collect();
        let mut e = self.encode_edges(tape, &pairs)?;
        let mut node_layers = vec![v];
        let mut edge_layers = vec![e];
        let all: Vec<usize> = (0..batch.nodes.len()).collect();
        let group: Vec<usize> = batch.edges.iter().map(|&(a, _)| a).collect();
        for layer in &self.layers {
            let v_next = self.node_update(tape, layer, v, e, &batch.edges, &group, &all);
            let e_next = self.edge_update(tape, layer, v, e, &batch.edges);
            v = v_next;
            e = e_next;
            node_layers.push(v);
            edge_layers.push(e);
        }
        let node_logits = self.mlp(tape, &self.node_classifier, v);
        let edge_logits = self.mlp(tape, &self.edge_classifier, e);
        tape.check()?;
        Ok(BatchOutput {
            node_layers,
            edge_layers,
            node_logits,
            edge_logits,
        })
    }

    /// Executes `plan` against `cache`: planned entries are recomputed from
    /// their cached inputs, everything else is reused untouched.
    pub fn forward_cached(
        &self,
        inputs: &BTreeMap<SegmentId, NodeInput>,
        topology: &Topology,
        cache: &mut FeatureCache,
        plan: &RecomputePlan,
    ) -> Result<RecomputeStats, SpnError> {
        let layers = self.layers.len();
        if plan.layers() != layers || cache.layers() != layers {
            return Err(SpnError::Shape(format!(
                "plan has {} layers, cache {}, network {layers}",
                plan.layers(),
                cache.layers()
            )));
        }
        cache.invalidate(plan);
        let mut stats = RecomputeStats::default();
        let input = |id: &SegmentId| {
            inputs
                .get(id)
                .ok_or_else(|| SpnError::CacheMiss(format!("inputs of segment {id}")))
        };

        // layer 0
        let clock = Instant::now();
        let ids: Vec<SegmentId> = plan.nodes[0].iter().copied().collect();
        if !ids.is_empty() {
            let refs = ids.iter().map(input).collect::<Result<Vec<_>, _>>()?;
            let mut tape = Tape::new();
            let v = self.encode_nodes(&mut tape, &refs)?;
            tape.check()?;
            store_rows(&mut cache.nodes[0], &ids, tape.value(v));
        }
        stats.nodes.push(ids.len());
        stats.timings.node_encoding = clock.elapsed();
        let clock = Instant::now();
        let keys: Vec<EdgeKey> = plan.edges[0].iter().copied().collect();
        if !keys.is_empty() {
            let pairs = keys
                .iter()
                .map(|(a, b)| Ok((input(a)?, input(b)?)))
                .collect::<Result<Vec<_>, SpnError>>()?;
            let mut tape = Tape::new();
            let e = self.encode_edges(&mut tape, &pairs)?;
            tape.check()?;
            store_rows(&mut cache.edges[0], &keys, tape.value(e));
        }
        stats.edges.push(keys.len());
        stats.timings.edge_encoding = clock.elapsed();

        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, next) = (l, l + 1);
            let clock = Instant::now();

            // nodes
            let targets: Vec<SegmentId> = plan.nodes[next].iter().copied().collect();
            if !targets.is_empty() {
                let target_set: BTreeSet<SegmentId> = targets.iter().copied().collect();
                let mut extra = BTreeSet::new();
                let mut edges = Vec::new();
                for &t in &targets {
                    for n in topology.neighbors(t) {
                        edges.push((t, n));
                        if !target_set.contains(&n) {
                            extra.insert(n);
                        }
                    }
                }
                // Targets come first so their rows line up with `target_pos`.
                let order: Vec<SegmentId> = targets.iter().copied().chain(extra).collect();
                let remap: BTreeMap<SegmentId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
                let local_edges: Vec<(usize, usize)> = edges.iter().map(|(a, b)| (remap[a], remap[b])).collect();
                let group: Vec<usize> = edges.iter().map(|(a, _)| remap[a]).collect();
                let target_pos: Vec<usize> = (0..targets.len()).collect();
                let v_rows = order
                    .iter()
                    .map(|id| cached_node(cache, prev, *id))
                    .collect::<Result<Vec<_>, _>>()?;
                let e_rows = edges
                    .iter()
                    .map(|k| cached_edge(cache, prev, *k))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut tape = Tape::new();
                let v = tape.leaf(rows_to_matrix(v_rows, self.config.node_dim));
                let e = tape.leaf(rows_to_matrix(e_rows, self.config.edge_dim));
                let out = self.node_update(&mut tape, layer, v, e, &local_edges, &group, &target_pos);
                tape.check()?;
                let values = tape.value(out).clone();
                store_rows(&mut cache.nodes[next], &targets, &values);
            }
            stats.nodes.push(targets.len());

            // edges
            let keys: Vec<EdgeKey> = plan.edges[next].iter().copied().collect();
            if !keys.is_empty() {
                let mut local: Vec<SegmentId> = keys.iter().flat_map(|&(a, b)| [a, b]).collect();
                local.sort();
                local.dedup();
                let pos = |id: &SegmentId| local.binary_search(id).expect("local node");
                let local_edges: Vec<(usize, usize)> = keys.iter().map(|(a, b)| (pos(a), pos(b))).collect();
                let v_rows = local
                    .iter()
                    .map(|id| cached_node(cache, prev, *id))
                    .collect::<Result<Vec<_>, _>>()?;
                let e_rows = keys
                    .iter()
                    .map(|k| cached_edge(cache, prev, *k))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut tape = Tape::new();
                let v = tape.leaf(rows_to_matrix(v_rows, self.config.node_dim));
                let e = tape.leaf(rows_to_matrix(e_rows, self.config.edge_dim));
                let out = self.edge_update(&mut tape, layer, v, e, &local_edges);
                tape.check()?;
                let values = tape.value(out).clone();
                store_rows(&mut cache.edges[next], &keys, &values);
            }
            stats.edges.push(keys.len());
            stats.timings.layers.push(clock.elapsed());
        }

        // classifiers
        let clock = Instant::now();
        let ids: Vec<SegmentId> = plan.nodes[layers].iter().copied().collect();
        if !ids.is_empty() {
            let rows = ids
                .iter()
                .map(|id| cached_node(cache, layers, *id))
                .collect::<Result<Vec<_>, _>>()?;
            let mut tape = Tape::new();
            let x = tape.leaf(rows_to_matrix(rows, self.config.node_dim));
            let logits = self.mlp(&mut tape, &self.node_classifier, x);
            tape.check()?;
            let values = tape.value(logits).clone();
            store_rows(&mut cache.node_logits, &ids, &values);
        }
        stats.node_classifications = ids.len();
        let keys: Vec<EdgeKey> = plan.edges[layers].iter().copied().collect();
        if !keys.is_empty() {
            let rows = keys
                .iter()
                .map(|k| cached_edge(cache, layers, *k))
                .collect::<Result<Vec<_>, _>>()?;
            let mut tape = Tape::new();
            let x = tape.leaf(rows_to_matrix(rows, self.config.edge_dim));
            let logits = self.mlp(&mut tape, &self.edge_classifier, x);
            tape.check()?;
            let values = tape.value(logits).clone();
            store_rows(&mut cache.edge_logits, &keys, &values);
        }
        stats.edge_classifications = keys.len();
        stats.timings.classification = clock.elapsed();
        Ok(stats)
    }

    /// From-scratch evaluation of every feature of the graph into a new cache.
    pub fn forward_full(
        &self,
        inputs: &BTreeMap<SegmentId, NodeInput>,
        topology: &Topology,
    ) -> Result<FeatureCache, SpnError> {
        let mut cache = FeatureCache::new(self.layers.len());
        let plan = RecomputePlan::full(topology, self.layers.len());
        self.forward_cached(inputs, topology, &mut cache, &plan)?;
        Ok(cache)
    }

    // ---- per-vector reference forms ----

    fn eval_linear(&self, lin: &Linear, x: &[f64]) -> Vec<f64> {
        let w = self.params.get(lin.weight);
        let b = self.params.get(lin.bias);
        (0..lin.fan_out)
            .map(|o| b[[0, o]] + w.row(o).iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Evaluates an MLP on one vector.
    pub fn eval_mlp(&self, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, lin) in mlp.layers.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = self.eval_linear(lin, &h);
        }
        h
    }

    /// Attention message from neighbor `v_j` to source `v_i` over edge `e_ij`.
    pub fn fan(&self, layer: usize, v_i: &[f64], e_ij: &[f64], v_j: &[f64]) -> Result<Vec<f64>, SpnError> {
        let p = self
            .layers
            .get(layer)
            .ok_or_else(|| SpnError::Shape(format!("no layer {layer}")))?;
        if v_i.len() != self.config.node_dim || v_j.len() != self.config.node_dim || e_ij.len() != self.config.edge_dim
        {
            return Err(SpnError::Shape("fan inputs do not match layer widths".into()));
        }
        let mut q = self.eval_linear(&p.query_node, v_i);
        q.extend(self.eval_linear(&p.query_edge, e_ij));
        let t = self.eval_linear(&p.target, v_j);
        let heads: Vec<_> = p
            .attention
            .iter()
            .map(|m| move |x: &[f64]| self.eval_mlp(m, x))
            .collect();
        attention::mfat(&q, &t, &heads)
    }

    /// Attention weights used by [`Spn::fan`]; they depend only on the query.
    pub fn fan_weights(&self, layer: usize, v_i: &[f64], e_ij: &[f64]) -> Result<Vec<f64>, SpnError> {
        let p = &self.layers[layer];
        let mut q = self.eval_linear(&p.query_node, v_i);
        q.extend(self.eval_linear(&p.query_edge, e_ij));
        let heads: Vec<_> = p
            .attention
            .iter()
            .map(|m| move |x: &[f64]| self.eval_mlp(m, x))
            .collect();
        attention::mfat_weights(&q, self.config.target_dim, &heads)
    }

    /// Message-passing update of one node from per-vector inputs: element-wise
    /// max over the neighbor messages (zero without neighbors), then the
    /// node-update MLP.
    pub fn node_update_single(
        &self,
        layer: usize,
        v_i: &[f64],
        neighbors: &[(&[f64], &[f64])],
    ) -> Result<Vec<f64>, SpnError> {
        let mut agg: Option<Vec<f64>> = None;
        for (e_ij, v_j) in neighbors {
            let m = self.fan(layer, v_i, e_ij, v_j)?;
            agg = Some(match agg {
                None => m,
                Some(a) => a.iter().zip(&m).map(|(x, y)| x.max(*y)).collect(),
            });
        }
        let agg = agg.unwrap_or_else(|| vec![0.0; self.config.target_dim]);
        let mut joined = v_i.to_vec();
        joined.extend(agg);
        Ok(self.eval_mlp(&self.layers[layer].node_update, &joined))
    }

    /// Class and predicate probabilities from logits.
    pub fn probabilities(logits: &[f64]) -> Vec<f64> {
        let mut p = logits.to_vec();
        crate::tape::softmax_in_place(&mut p);
        p
    }
}

fn store_rows<K: Ord + Copy>(target: &mut BTreeMap<K, Vec<f64>>, keys: &[K], values: &Array2<f64>) {
    for (k, row) in keys.iter().zip(values.axis_iter(Axis(0))) {
        target.insert(*k, row.to_vec());
    }
}

fn cached_node(cache: &FeatureCache, layer: usize, id: SegmentId) -> Result<&[f64], SpnError> {
    cache
        .node(layer, id)
        .ok_or_else(|| SpnError::CacheMiss(format!("node {id} at layer {layer}")))
}

fn cached_edge(cache: &FeatureCache, layer: usize, key: EdgeKey) -> Result<&[f64], SpnError> {
    cache
        .edge(layer, key)
        .ok_or_else(|| SpnError::CacheMiss(format!("edge {}->{} at layer {layer}", key.0, key.1)))
}
