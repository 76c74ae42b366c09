//! Layer DAG with canonical execution order and a parameter registry.
//!
//! Nodes are stored in a canonical topological order: Kahn's algorithm,
//! always taking the lexicographically smallest ready node id. Execution,
//! the parameter registry, serialization and fingerprints all follow that
//! order, so they do not depend on the order nodes were added in.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::{self, ForwardCtx, GradRequest, LayerConfig, LayerState, Saved};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Id under which the graph input is referenced.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Debug, Clone)]
pub struct Node<T: Real = f32> {
    pub id: String,
    pub config: LayerConfig,
    pub state: LayerState<T>,
    pub inputs: Vec<Source>,
    /// Per-sample output dims.
    pub out_dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T: Real = f32> {
    name: String,
    input_dims: Vec<usize>,
    nodes: Vec<Node<T>>,
    output: Source,
}

/// Collects node declarations; [`GraphBuilder::build`] orders, checks and
/// initializes them.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: String,
    input_dims: Vec<usize>,
    decls: Vec<(String, LayerConfig, Vec<String>)>,
    counters: HashMap<&'static str, usize>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_dims: impl Into<Vec<usize>>) -> Self {
        GraphBuilder {
            name: name.into(),
            input_dims: input_dims.into(),
            decls: Vec::new(),
            counters: HashMap::new(),
        }
    }

    pub fn input(&self) -> String {
        INPUT_ID.to_string()
    }

    /// Add a node with an explicit id.
    pub fn add_named(&mut self, id: impl Into<String>, config: LayerConfig, inputs: &[&str]) -> String {
        let id = id.into();
        self.decls
            .push((id.clone(), config, inputs.iter().map(|s| s.to_string()).collect()));
        id
    }

    /// Add a node named `<kind>`, `<kind>_1`, `<kind>_2`, ... by kind.
    pub fn add(&mut self, config: LayerConfig, inputs: &[&str]) -> String {
        let kind = config.kind_name();
        let n = self.counters.entry(kind).or_insert(0);
        let id = if *n == 0 {
            kind.to_string()
        } else {
            format!("{kind}_{n}")
        };
        *n += 1;
        self.add_named(id, config, inputs)
    }

    pub fn build(self, output: &str) -> Result<ModelGraph<f32>> {
        Shape::new(self.input_dims.clone())?;
        let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, (id, cfg, _)) in self.decls.iter().enumerate() {
            if id == INPUT_ID || by_id.insert(id.as_str(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{id}`")));
            }
            cfg.validate().map_err(|e| e.at_node(id))?;
        }
        // Kahn's algorithm with the smallest ready id first.
        let mut indegree = vec![0usize; self.decls.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.decls.len()];
        let mut ready: BTreeSet<(&str, usize)> = BTreeSet::new();
        for (i, (id, cfg, inputs)) in self.decls.iter().enumerate() {
            if inputs.len() != cfg.arity() {
                return Err(Error::InvalidGraph(format!(
                    "node `{id}` ({}) needs {} input(s), got {}",
                    cfg.kind_name(),
                    cfg.arity(),
                    inputs.len()
                )));
            }
            for inp in inputs {
                if inp == INPUT_ID {
                    continue;
                }
                let &j = by_id
                    .get(inp.as_str())
                    .ok_or_else(|| Error::UnknownNode(inp.clone()))?;
                indegree[i] += 1;
                consumers[j].push(i);
            }
            if indegree[i] == 0 {
                ready.insert((id.as_str(), i));
            }
        }
        let mut order = Vec::with_capacity(self.decls.len());
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert((self.decls[c].0.as_str(), c));
                }
            }
        }
        if order.len() != self.decls.len() {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }
        let position: HashMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(pos, &i)| (self.decls[i].0.as_str(), pos))
            .collect();
        let resolve = |id: &str| -> Result<Source> {
            if id == INPUT_ID {
                Ok(Source::Input)
            } else {
                position
                    .get(id)
                    .map(|&p| Source::Node(p))
                    .ok_or_else(|| Error::UnknownNode(id.to_string()))
            }
        };
        let mut nodes: Vec<Node<f32>> = Vec::with_capacity(order.len());
        for &i in &order {
            let (id, cfg, inputs) = &self.decls[i];
            let sources = inputs
                .iter()
                .map(|s| resolve(s))
                .collect::<Result<Vec<_>>>()?;
            let in_dims: Vec<&[usize]> = sources
                .iter()
                .map(|s| match *s {
                    Source::Input => self.input_dims.as_slice(),
                    Source::Node(p) => nodes[p].out_dims.as_slice(),
                })
                .collect();
            let out_dims = cfg.output_dims(&in_dims).map_err(|e| e.at_node(id))?;
            let state = cfg.init_state(id, in_dims[0]).map_err(|e| e.at_node(id))?;
            nodes.push(Node {
                id: id.clone(),
                config: cfg.clone(),
                state,
                inputs: sources,
                out_dims,
            });
        }
        let output = resolve(output)?;
        Ok(ModelGraph {
            name: self.name,
            input_dims: self.input_dims,
            nodes,
            output,
        })
    }
}

/// One entry of the canonical parameter registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub node: usize,
    pub node_id: String,
    pub name: String,
    pub shape: Shape,
    pub trainable: bool,
    /// Non-parameter state such as batch-norm moving statistics.
    pub buffer: bool,
}

impl ParamEntry {
    /// `<node id>/<name>`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.node_id, self.name)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real = f32> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    pub saved: Vec<Saved<T>>,
}

/// What [`ModelGraph::backward`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardOptions {
    pub params: bool,
    pub input: bool,
    /// Stop once the gradient of this node's output is complete.
    pub target: Option<usize>,
}

impl BackwardOptions {
    pub const PARAMS: BackwardOptions = BackwardOptions {
        params: true,
        input: false,
        target: None,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    /// Per node, gradients of its trainable parameters.
    pub params: Vec<BTreeMap<String, Tensor<T>>>,
    pub input: Option<Tensor<T>>,
    /// Gradient of the target node's output, when a target was given.
    pub target: Option<Tensor<T>>,
}

impl<T: Real> ModelGraph<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn output(&self) -> Source {
        self.output
    }

    pub fn output_dims(&self) -> &[usize] {
        self.dims_of(self.output)
    }

    fn dims_of(&self, s: Source) -> &[usize] {
        match s {
            Source::Input => &self.input_dims,
            Source::Node(i) => &self.nodes[i].out_dims,
        }
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            input_dims: self.input_dims.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    id: n.id.clone(),
                    config: n.config.clone(),
                    state: n.state.cast(),
                    inputs: n.inputs.clone(),
                    out_dims: n.out_dims.clone(),
                })
                .collect(),
            output: self.output,
        }
    }

    /// Trainable parameters, then frozen parameters and buffers, each group
    /// in node order and then name order.
    pub fn registry(&self) -> Vec<ParamEntry> {
        let mut entries = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for (name, t) in &n.state.params {
                entries.push(ParamEntry {
                    node: i,
                    node_id: n.id.clone(),
                    name: name.clone(),
                    shape: t.shape().clone(),
                    trainable: n.state.is_trainable(name),
                    buffer: false,
                });
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for (name, t) in &n.state.buffers {
                entries.push(ParamEntry {
                    node: i,
                    node_id: n.id.clone(),
                    name: name.clone(),
                    shape: t.shape().clone(),
                    trainable: false,
                    buffer: true,
                });
            }
        }
        // stable: trainables first, preserving node/name order within groups
        entries.sort_by_key(|e| !e.trainable);
        entries
    }

    pub fn tensor(&self, entry: &ParamEntry) -> &Tensor<T> {
        let state = &self.nodes[entry.node].state;
        if entry.buffer {
            &state.buffers[&entry.name]
        } else {
            &state.params[&entry.name]
        }
    }

    pub fn tensor_mut(&mut self, entry: &ParamEntry) -> &mut Tensor<T> {
        let state = &mut self.nodes[entry.node].state;
        if entry.buffer {
            state.buffers.get_mut(&entry.name).expect("registry entry")
        } else {
            state.params.get_mut(&entry.name).expect("registry entry")
        }
    }

    pub fn count_trainable(&self) -> usize {
        self.registry()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.shape.numel())
            .sum()
    }

    pub fn count_non_trainable(&self) -> usize {
        self.registry()
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| e.shape.numel())
            .sum()
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &ForwardCtx) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if x.dims().len() != self.input_dims.len() + 1 || x.dims()[1..] != self.input_dims[..] {
            let mut expected = vec![x.dims()[0]];
            expected.extend_from_slice(&self.input_dims);
            return Err(Error::ShapeMismatch {
                left: x.shape().clone(),
                right: Shape::new(expected)?,
            }
            .at_node(INPUT_ID));
        }
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut saved = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => x,
                    Source::Node(p) => &outputs[p],
                })
                .collect();
            let (y, s) = layers::forward(&node.config, &node.state, &inputs, ctx, &node.id)
                .map_err(|e| e.at_node(&node.id))?;
            if cfg!(debug_assertions) && !y.all_finite() {
                return Err(Error::NonFinite {
                    node: node.id.clone(),
                });
            }
            outputs.push(y);
            saved.push(s);
        }
        let prediction = match self.output {
            Source::Input => x.clone(),
            Source::Node(i) => outputs[i].clone(),
        };
        Ok((
            prediction,
            ForwardCache {
                input: x.clone(),
                outputs,
                saved,
            },
        ))
    }

    /// Reverse-mode pass seeded with `seed_grad` at node `seed`.
    ///
    /// Nodes are visited in reverse canonical order; a node feeding several
    /// consumers sums their contributions in that visiting order.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        seed: usize,
        seed_grad: Tensor<T>,
        opts: BackwardOptions,
    ) -> Result<Gradients<T>> {
        if cache.outputs.len() != self.nodes.len() || cache.saved.len() != self.nodes.len() {
            return Err(Error::BackwardBeforeForward(None));
        }
        let n = self.nodes.len();
        if seed >= n {
            return Err(Error::InvalidArgument(format!("seed node {seed} out of range")));
        }
        // which node outputs need a gradient
        let mut relevant = vec![false; n];
        for (i, node) in self.nodes.iter().enumerate() {
            let has_trainable = opts.params
                && node.state.params.keys().any(|k| node.state.is_trainable(k));
            relevant[i] = has_trainable
                || opts.target == Some(i)
                || node.inputs.iter().any(|s| match *s {
                    Source::Input => opts.input,
                    Source::Node(p) => relevant[p],
                });
        }
        let stop = match opts.target {
            Some(t) if !opts.params && !opts.input => t + 1,
            _ => 0,
        };
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; n];
        pending[seed] = Some(seed_grad);
        let mut params = vec![BTreeMap::new(); n];
        let mut input_grad: Option<Tensor<T>> = None;
        for i in (stop..=seed).rev() {
            let Some(dy) = pending[i].take() else { continue };
            if opts.target == Some(i) {
                pending[i] = Some(dy.clone());
            }
            let node = &self.nodes[i];
            let want_inputs = node.inputs.iter().any(|s| match *s {
                Source::Input => opts.input,
                Source::Node(p) => relevant[p],
            });
            let want_params = opts.params && !node.state.params.is_empty();
            if !want_inputs && !want_params {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input => &cache.input,
                    Source::Node(p) => &cache.outputs[p],
                })
                .collect();
            let grads = layers::backward(
                &node.config,
                &node.state,
                &inputs,
                &cache.outputs[i],
                &cache.saved[i],
                &dy,
                GradRequest {
                    inputs: want_inputs,
                    params: want_params,
                },
            )
            .map_err(|e| e.at_node(&node.id))?;
            params[i] = grads
                .params
                .into_iter()
                .filter(|(k, _)| node.state.is_trainable(k))
                .collect();
            for (src, g) in node.inputs.iter().zip(grads.inputs) {
                let Some(g) = g else { continue };
                let slot = match *src {
                    Source::Input => {
                        if !opts.input {
                            continue;
                        }
                        &mut input_grad
                    }
                    Source::Node(p) => {
                        if !relevant[p] {
                            continue;
                        }
                        &mut pending[p]
                    }
                };
                *slot = Some(match slot.take() {
                    None => g,
                    Some(acc) => {
                        let sum = acc.data().iter().zip(g.data()).map(|(&a, &b)| a + b).collect();
                        Tensor::new(acc.dims().to_vec(), sum)?
                    }
                });
            }
        }
        let target = opts.target.and_then(|t| pending[t].take());
        Ok(Gradients {
            params,
            input: input_grad,
            target,
        })
    }

    /// Fold batch statistics from a training forward pass into the moving
    /// statistics of every batch-norm node.
    pub fn update_batch_stats(&mut self, cache: &ForwardCache<T>) -> Result<()> {
        for (node, saved) in self.nodes.iter_mut().zip(&cache.saved) {
            let (LayerConfig::BatchNorm { momentum, .. }, Saved::BatchNorm(s)) = (&node.config, saved)
            else {
                continue;
            };
            let Some((mean, var)) = &s.batch_stats else { continue };
            let momentum = T::from_f64(*momentum as f64);
            let mm = layers::norm::update_moving(&node.state.buffers["moving_mean"], mean, momentum)?;
            let mv = layers::norm::update_moving(&node.state.buffers["moving_variance"], var, momentum)?;
            node.state.buffers.insert("moving_mean".into(), mm);
            node.state.buffers.insert("moving_variance".into(), mv);
        }
        Ok(())
    }

    /// Human-readable architecture listing; byte-stable for a given graph.
    pub fn architecture_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {}", self.name);
        let _ = writeln!(s, "input {:?}", self.input_dims);
        for n in &self.nodes {
            let inputs: Vec<&str> = n
                .inputs
                .iter()
                .map(|src| match *src {
                    Source::Input => INPUT_ID,
                    Source::Node(p) => self.nodes[p].id.as_str(),
                })
                .collect();
            let params: usize = n.state.params.values().map(|t| t.len()).sum();
            let _ = write!(
                s,
                "node {} kind={} inputs=[{}] out={:?} params={}",
                n.id,
                n.config.kind_name(),
                inputs.join(","),
                n.out_dims,
                params
            );
            let hyper = n.config.describe();
            if !hyper.is_empty() {
                let _ = write!(s, " {hyper}");
            }
            s.push('\n');
        }
        let out = match self.output {
            Source::Input => INPUT_ID,
            Source::Node(p) => self.nodes[p].id.as_str(),
        };
        let _ = writeln!(s, "output {out}");
        let _ = writeln!(s, "trainable_params {}", self.count_trainable());
        let _ = writeln!(s, "non_trainable_params {}", self.count_non_trainable());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(units: usize, seed: u64) -> LayerConfig {
        LayerConfig::Dense {
            units,
            use_bias: true,
            init_seed: seed,
        }
    }

    #[test]
    fn empty_graph_is_identity() {
        let g = GraphBuilder::new("id", vec![3]).build(INPUT_ID).unwrap();
        let x = Tensor::new([2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(g.forward(&x, &ForwardCtx::infer()).unwrap().0, x);
    }

    #[test]
    fn zero_dense_sigmoid_is_half() {
        let mut b = GraphBuilder::new("z", vec![4]);
        let d = b.add(dense(1, 1), &[INPUT_ID]);
        let s = b.add(LayerConfig::Sigmoid, &[&d]);
        let mut g = b.build(&s).unwrap();
        for e in g.registry() {
            let t = g.tensor_mut(&e);
            *t = Tensor::zeros_like(t);
        }
        let x = Tensor::new([2, 4], vec![3.0f32, -1.0, 8.0, 0.5, -9.0, 2.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.forward(&x, &ForwardCtx::infer()).unwrap().0.data(), &[0.5, 0.5]);
    }

    #[test]
    fn auto_names_count_per_kind() {
        let mut b = GraphBuilder::new("n", vec![4]);
        let a = b.add(LayerConfig::Relu, &[INPUT_ID]);
        let c = b.add(dense(2, 1), &[&a]);
        let d = b.add(LayerConfig::Relu, &[&c]);
        assert_eq!((a.as_str(), c.as_str(), d.as_str()), ("relu", "dense", "relu_1"));
    }

    #[test]
    fn structural_errors() {
        let mut b = GraphBuilder::new("e", vec![4]);
        b.add_named("x", LayerConfig::Relu, &["y"]);
        b.add_named("y", LayerConfig::Relu, &["x"]);
        assert!(matches!(b.build("x"), Err(Error::InvalidGraph(_))));
        let mut b = GraphBuilder::new("e", vec![4]);
        b.add(LayerConfig::Relu, &["missing"]);
        assert!(matches!(b.build("relu"), Err(Error::UnknownNode(_))));
        let mut b = GraphBuilder::new("e", vec![4]);
        b.add_named("r", LayerConfig::Relu, &[INPUT_ID]);
        b.add_named("r", LayerConfig::Relu, &[INPUT_ID]);
        assert!(matches!(b.build("r"), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn dense_parameter_count() {
        let mut b = GraphBuilder::new("d", vec![12544]);
        let d = b.add(dense(1, 1), &[INPUT_ID]);
        assert_eq!(b.build(&d).unwrap().count_trainable(), 12_545);
    }

    #[test]
    fn backward_needs_a_forward_cache() {
        let mut b = GraphBuilder::new("b", vec![2]);
        let d = b.add(dense(1, 1), &[INPUT_ID]);
        let g = b.build(&d).unwrap();
        let empty = ForwardCache {
            input: Tensor::zeros([1, 2]).unwrap(),
            outputs: vec![],
            saved: vec![],
        };
        let err = g.backward(&empty, 0, Tensor::zeros([1, 1]).unwrap(), BackwardOptions::PARAMS);
        assert!(matches!(err, Err(Error::BackwardBeforeForward(None))));
    }
}
