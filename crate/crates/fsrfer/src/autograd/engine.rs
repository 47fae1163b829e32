use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) trait Op {
    /// Gradient of the output w.r.t. each parent, expressed as new `Var`
    /// graphs so the result can itself be differentiated.
    fn backward(&self, parents: &[Var], grad_out: &Var) -> Vec<Var>;
    fn name(&self) -> &'static str;
}

struct VarNode {
    id: u64,
    data: Rc<ArrayD<f64>>,
    parents: Vec<Var>,
    op: Option<Box<dyn Op>>,
    requires_grad: bool,
}

/// A node in the computation graph: an immutable tensor plus provenance.
#[derive(Clone)]
pub struct Var(Rc<VarNode>);

impl Var {
    /// Leaf that participates in differentiation (a parameter or an input
    /// whose gradient is wanted).
    pub fn leaf(data: ArrayD<f64>) -> Var {
        Var::from_rc(Rc::new(data), true)
    }

    /// Leaf constant: never differentiated through.
    pub fn constant(data: ArrayD<f64>) -> Var {
        Var::from_rc(Rc::new(data), false)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_rc(data: Rc<ArrayD<f64>>, requires_grad: bool) -> Var {
        Var(Rc::new(VarNode {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            parents: Vec::new(),
            op: None,
            requires_grad,
        }))
    }

    /// Record an op application. Parent links are kept only if some parent
    /// requires grad; otherwise the node collapses to a constant leaf.
    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Var>, op: Box<dyn Op>) -> Var {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Var(Rc::new(VarNode {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: Rc::new(data),
                parents,
                op: Some(op),
                requires_grad: true,
            }))
        } else {
            Var::constant(data)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn data_rc(&self) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.0.data)
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same data, no history: gradients never flow through a detached var.
    pub fn detach(&self) -> Var {
        Var::from_rc(self.data_rc(), false)
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(
            self.0.data.len(),
            1,
            "value() on tensor of shape {:?}",
            self.shape()
        );
        *self.0.data.iter().next().unwrap()
    }
}

/// Reverse-mode gradient of a scalar `output` w.r.t. `wrt`.
///
/// Returns one entry per requested var; `None` when the output does not
/// depend on it. With `create_graph` the returned gradients stay connected
/// to the graph and can be differentiated again; without it they are
/// detached constants and the backward computation retains nothing.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(
        output.data().len(),
        1,
        "grad() expects a scalar output, got shape {:?}",
        output.shape()
    );

    // Iterative post-order DFS over the requires-grad subgraph.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Var, usize)> = vec![(output.clone(), 0)];
    if output.requires_grad() {
        visited.insert(output.id(), ());
    }
    while let Some((node, child_idx)) = stack.pop() {
        let parents = &node.0.parents;
        if child_idx < parents.len() {
            stack.push((node.clone(), child_idx + 1));
            let p = parents[child_idx].clone();
            if p.requires_grad() && !visited.contains_key(&p.id()) {
                visited.insert(p.id(), ());
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(
        output.id(),
        Var::constant(ArrayD::from_elem(IxDyn(output.shape()), 1.0)),
    );

    // `order` is post-order, so iterating in reverse visits every node after
    // all of its consumers: its accumulated gradient is final at that point.
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue; // unreachable from output through differentiable ops
        };
        let Some(op) = node.0.op.as_ref() else {
            continue; // leaf
        };
        let parents: Vec<Var> = if create_graph {
            node.0.parents.clone()
        } else {
            node.0.parents.iter().map(Var::detach).collect()
        };
        let g_in = if create_graph { g } else { g.detach() };
        let parent_grads = op.backward(&parents, &g_in);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (p, pg) in node.0.parents.iter().zip(parent_grads) {
            if !p.requires_grad() {
                continue;
            }
            debug_assert_eq!(
                p.shape(),
                pg.shape(),
                "op {} produced a gradient of shape {:?} for a parent of shape {:?}",
                op.name(),
                pg.shape(),
                p.shape()
            );
            match grads.remove(&p.id()) {
                Some(prev) => {
                    grads.insert(p.id(), crate::autograd::ops::add(&prev, &pg));
                }
                None => {
                    grads.insert(p.id(), pg);
                }
            }
        }
    }

    wrt.iter()
        .map(|v| {
            grads.get(&v.id()).map(|g| {
                if create_graph {
                    g.clone()
                } else {
                    g.detach()
                }
            })
        })
        .collect()
}
