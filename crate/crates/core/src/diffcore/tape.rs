//! Reverse-mode operation tape.
//!
//! Nodes are evaluated eagerly when pushed, so every intermediate value is
//! available to the caller (pair weights, for instance, are computed from
//! forward values before the loss node is attached). [`Tape::backward`]
//! walks the nodes in reverse push order and asks each [`Primitive`] for the
//! gradient of its inputs.

use std::collections::BTreeMap;

use super::sum::ksum;
use super::tensor::Tensor2;
use super::vector::NORM_FLOOR;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Identifies a trainable parameter across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Gradient for one parameter, shaped like the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord {
    pub param: ParamId,
    pub grad: Tensor2,
}

/// A differentiable operation with its own backward rule.
pub trait Primitive: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2>;

    /// Gradients with respect to each input given the gradient of the output.
    /// `None` means no gradient flows into that input.
    fn backward(
        &self,
        inputs: &[&Tensor2],
        output: &Tensor2,
        grad_out: &Tensor2,
    ) -> Vec<Option<Tensor2>>;
}

enum NodeKind {
    Constant,
    Param(ParamId),
    Op {
        prim: Box<dyn Primitive>,
        inputs: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor2,
    kind: NodeKind,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push(value, NodeKind::Constant)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor2) -> NodeId {
        self.push(value, NodeKind::Param(id))
    }

    fn push(&mut self, value: Tensor2, kind: NodeKind) -> NodeId {
        self.nodes.push(Node { value, kind });
        NodeId(self.nodes.len() - 1)
    }

    pub fn apply<P: Primitive + 'static>(&mut self, prim: P, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor2> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            prim.forward(&vals)?
        };
        Ok(self.push(
            value,
            NodeKind::Op {
                prim: Box::new(prim),
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let out = self.value(loss);
        if out.shape() != (1, 1) {
            return Err(Error::shape(
                "Tape::backward",
                "1x1",
                format!("{:?}", out.shape()),
            ));
        }
        if !out.item().is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "tape output".into(),
            });
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let NodeKind::Op { prim, inputs } = &self.nodes[idx].kind {
                let vals: Vec<&Tensor2> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
                let input_grads = prim.backward(&vals, &self.nodes[idx].value, &g);
                debug_assert_eq!(input_grads.len(), inputs.len(), "{}", prim.name());
                for (input, ig) in inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    debug_assert_eq!(
                        ig.shape(),
                        self.nodes[input.0].value.shape(),
                        "{}",
                        prim.name()
                    );
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.kind {
                NodeKind::Param(p) => Some((p, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Transpose, &[a])
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(AddBias, &[a, bias])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Tanh, &[a])
    }

    pub fn mean_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        self.apply(MeanGroups { group }, &[a])
    }

    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.apply(SelectRows { rows }, &[a])
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(NormalizeRows, &[a])
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Detach, &[a])
    }

    /// `Σ weight_k · term_k` over `1 × 1` terms.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        self.apply(WeightedSum { weights }, &ids)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient reaching `node`, or `None` if nothing flowed there.
    pub fn of(&self, node: NodeId) -> Option<&Tensor2> {
        self.grads[node.0].as_ref()
    }

    /// Per-parameter gradients, summed over every leaf bound to the same id,
    /// in ascending parameter order. Parameters that received no gradient are
    /// omitted.
    pub fn records(&self) -> Vec<GradRecord> {
        let mut merged: BTreeMap<ParamId, Tensor2> = BTreeMap::new();
        for &(p, node) in &self.params {
            let Some(g) = self.of(node) else { continue };
            match merged.get_mut(&p) {
                Some(acc) => acc.add_assign(g),
                None => {
                    merged.insert(p, g.clone());
                }
            }
        }
        merged
            .into_iter()
            .map(|(param, grad)| GradRecord { param, grad })
            .collect()
    }
}

struct MatMul;

impl Primitive for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        inputs[0].matmul(inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let ga = g
            .matmul(&inputs[1].transpose())
            .expect("shapes checked in forward");
        let gb = inputs[0]
            .transpose()
            .matmul(g)
            .expect("shapes checked in forward");
        vec![Some(ga), Some(gb)]
    }
}

struct Transpose;

impl Primitive for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(inputs[0].transpose())
    }

    fn backward(&self, _: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        vec![Some(g.transpose())]
    }
}

struct AddBias;

impl Primitive for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        inputs[0].add_row_bias(inputs[1])
    }

    fn backward(&self, _: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        vec![Some(g.clone()), Some(g.sum_rows())]
    }
}

struct Tanh;

impl Primitive for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(inputs[0].map(f64::tanh))
    }

    fn backward(&self, _: &[&Tensor2], out: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        vec![Some(g.zip_map(out, |g, y| g * (1.0 - y * y)))]
    }
}

/// Means over consecutive blocks of `group` rows.
struct MeanGroups {
    group: usize,
}

impl Primitive for MeanGroups {
    fn name(&self) -> &'static str {
        "mean_groups"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        let x = inputs[0];
        if self.group == 0 {
            return Err(Error::EmptyTracklet);
        }
        if x.rows() % self.group != 0 {
            return Err(Error::shape(
                "mean_groups",
                format!("multiple of {} rows", self.group),
                x.rows(),
            ));
        }
        let n = self.group as f64;
        Ok(Tensor2::from_fn(x.rows() / self.group, x.cols(), |i, j| {
            ksum((0..self.group).map(|r| x[(i * self.group + r, j)])) / n
        }))
    }

    fn backward(&self, inputs: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let n = self.group as f64;
        let x = inputs[0];
        vec![Some(Tensor2::from_fn(x.rows(), x.cols(), |i, j| {
            g[(i / self.group, j)] / n
        }))]
    }
}

struct SelectRows {
    rows: Vec<usize>,
}

impl Primitive for SelectRows {
    fn name(&self) -> &'static str {
        "select_rows"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        let x = inputs[0];
        if let Some(&bad) = self.rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: x.rows(),
            });
        }
        Ok(Tensor2::from_fn(self.rows.len(), x.cols(), |i, j| {
            x[(self.rows[i], j)]
        }))
    }

    fn backward(&self, inputs: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let mut out = Tensor2::zeros(inputs[0].rows(), inputs[0].cols());
        for (i, &r) in self.rows.iter().enumerate() {
            for j in 0..g.cols() {
                out[(r, j)] += g[(i, j)];
            }
        }
        vec![Some(out)]
    }
}

/// Scales every row to unit length.
struct NormalizeRows;

impl Primitive for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        let x = inputs[0];
        let mut out = x.clone();
        for i in 0..x.rows() {
            let n = super::sum::norm(x.row(i));
            if n <= NORM_FLOOR {
                return Err(Error::NearZeroNorm { norm: n });
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor2], out: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        let x = inputs[0];
        let mut gx = Tensor2::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let n = super::sum::norm(x.row(i));
            let y = out.row(i);
            let gy = g.row(i);
            let proj = super::sum::dot(y, gy);
            for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                *v = (gy[j] - y[j] * proj) / n;
            }
        }
        vec![Some(gx)]
    }
}

/// Identity forward; blocks all gradient.
struct Detach;

impl Primitive for Detach {
    fn name(&self) -> &'static str {
        "detach"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _: &[&Tensor2], _: &Tensor2, _: &Tensor2) -> Vec<Option<Tensor2>> {
        vec![None]
    }
}

struct WeightedSum {
    weights: Vec<f64>,
}

impl Primitive for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        if let Some(bad) = inputs.iter().find(|t| t.shape() != (1, 1)) {
            return Err(Error::shape(
                "weighted_sum",
                "1x1",
                format!("{:?}", bad.shape()),
            ));
        }
        Ok(Tensor2::scalar(ksum(
            inputs.iter().zip(&self.weights).map(|(t, w)| w * t.item()),
        )))
    }

    fn backward(&self, _: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        self.weights
            .iter()
            .map(|&w| (w != 0.0).then(|| Tensor2::scalar(w * g.item())))
            .collect()
    }
}
