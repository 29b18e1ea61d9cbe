use std::sync::{Arc, Mutex, MutexGuard};

use super::ops::{vjp, Op};
use super::params::{GradMap, ParamSet};
use super::{Result, Scalar, Tensor, TensorError};

/// Append-only record of primitive applications.
///
/// Cloning a `Tape` yields another handle to the same record. Tapes are
/// independent: concurrent episodes each build their own.
#[derive(Clone)]
pub struct Tape<T: Scalar = f32> {
    inner: Arc<TapeInner<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Mutex<Vec<Node<T>>>,
    mode: Mutex<Mode>,
}

#[derive(Clone, Copy)]
struct Mode {
    recording: bool,
    level: u8,
}

#[derive(Clone)]
pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

#[derive(Clone)]
pub(crate) struct Input<T: Scalar> {
    pub(crate) id: Option<usize>,
    pub(crate) shape: Arc<[usize]>,
    pub(crate) data: Arc<Vec<T>>,
}

#[derive(Clone)]
pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Input<T>>,
    pub(crate) shape: Arc<[usize]>,
    pub(crate) out: Arc<Vec<T>>,
    /// 0 for nodes recorded by ordinary forward computation, 1 for nodes
    /// recorded while a `create_graph` backward was running.
    pub(crate) level: u8,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(TapeInner {
                nodes: Mutex::new(Vec::new()),
                mode: Mutex::new(Mode { recording: true, level: 0 }),
            }),
        }
    }

    /// Records `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape.clone(),
            out: value.data.clone(),
            level: 0,
        });
        Tensor::from_parts(
            value.shape.clone(),
            value.data.clone(),
            Some(NodeRef { tape: self.clone(), id }),
        )
    }

    pub fn len(&self) -> usize {
        self.nodes().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest nesting level among recorded nodes.
    pub fn nesting_level(&self) -> u8 {
        self.nodes().iter().map(|n| n.level).max().unwrap_or(0)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.mode().recording
    }

    fn nodes(&self) -> MutexGuard<'_, Vec<Node<T>>> {
        self.inner.nodes.lock().expect("tape poisoned")
    }

    fn mode(&self) -> MutexGuard<'_, Mode> {
        self.inner.mode.lock().expect("tape poisoned")
    }

    fn push(&self, mut node: Node<T>) -> usize {
        node.level = node.level.max(self.mode().level);
        let mut nodes = self.nodes();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn record(
        &self,
        op: Op<T>,
        inputs: &[&Tensor<T>],
        shape: Arc<[usize]>,
        out: Arc<Vec<T>>,
    ) -> Tensor<T> {
        let inputs = inputs
            .iter()
            .map(|t| Input {
                id: t.node.as_ref().filter(|n| n.tape.ptr_eq(self)).map(|n| n.id),
                shape: t.shape.clone(),
                data: t.data.clone(),
            })
            .collect();
        let id = self.push(Node { op, inputs, shape: shape.clone(), out: out.clone(), level: 0 });
        Tensor::from_parts(shape, out, Some(NodeRef { tape: self.clone(), id }))
    }

    fn set_mode(&self, mode: Mode) -> Mode {
        std::mem::replace(&mut *self.mode(), mode)
    }
}

/// Restores the tape mode when a backward pass ends, including on error.
struct ModeGuard<'a, T: Scalar> {
    tape: &'a Tape<T>,
    saved: Mode,
}

impl<T: Scalar> Drop for ModeGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.set_mode(self.saved);
    }
}

/// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are recorded on the tape and
/// can be differentiated again. Tensors in `wrt` that `loss` does not
/// depend on get a zero gradient.
pub fn grad<T: Scalar>(loss: &Tensor<T>, wrt: &[&Tensor<T>], create_graph: bool) -> Result<Vec<Tensor<T>>> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    let loss_ref = loss.node.as_ref().ok_or(TensorError::NotOnTape)?;
    let tape = &loss_ref.tape;
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for t in wrt {
        let n = t.node.as_ref().ok_or(TensorError::NotOnTape)?;
        if !n.tape.ptr_eq(tape) {
            return Err(TensorError::TapeMismatch);
        }
        wrt_ids.push(n.id);
    }
    let hi = loss_ref.id;
    let lo = wrt_ids.iter().copied().min().unwrap_or(hi).min(hi);

    // Snapshot the relevant window so VJPs can append while we iterate.
    let window: Vec<Node<T>> = tape.nodes()[lo..=hi].to_vec();
    let local = |id: usize| id.checked_sub(lo);

    // A node needs a gradient if it is a wrt target or depends on one.
    let mut is_target = vec![false; window.len()];
    for &id in &wrt_ids {
        if id <= hi {
            is_target[id - lo] = true;
        }
    }
    let mut relevant = is_target.clone();
    for (i, node) in window.iter().enumerate() {
        if !relevant[i] {
            relevant[i] = node
                .inputs
                .iter()
                .any(|inp| inp.id.and_then(local).is_some_and(|j| relevant[j]));
        }
    }

    if create_graph {
        let nested = window.iter().enumerate().any(|(i, node)| {
            relevant[i]
                && node.level > 0
                && node.inputs.iter().any(|inp| inp.id.and_then(local).is_some_and(|j| relevant[j]))
        });
        if nested {
            return Err(TensorError::NestingExceeded);
        }
    }
    let _guard = ModeGuard {
        tape,
        saved: tape.set_mode(Mode { recording: create_graph, level: u8::from(create_graph) }),
    };

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; window.len()];
    grads[hi - lo] = Some(Tensor::ones(loss.shape()));
    let mut results: Vec<Option<Tensor<T>>> = vec![None; window.len()];

    for i in (0..window.len()).rev() {
        let Some(g) = grads[i].take() else { continue };
        if !relevant[i] {
            continue;
        }
        if is_target[i] {
            results[i] = Some(g.clone());
        }
        let node = &window[i];
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|inp| inp.id.and_then(local).is_some_and(|j| relevant[j]))
            .collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let inputs: Vec<Tensor<T>> = node
            .inputs
            .iter()
            .map(|inp| {
                Tensor::from_parts(
                    inp.shape.clone(),
                    inp.data.clone(),
                    inp.id.map(|id| NodeRef { tape: tape.clone(), id }),
                )
            })
            .collect();
        let out = Tensor::from_parts(
            node.shape.clone(),
            node.out.clone(),
            Some(NodeRef { tape: tape.clone(), id: lo + i }),
        );
        let contribs = vjp(&node.op, &inputs, &out, &g, &needs)?;
        for ((inp, need), contrib) in node.inputs.iter().zip(&needs).zip(contribs) {
            if !need {
                continue;
            }
            let (Some(j), Some(c)) = (inp.id.and_then(local), contrib) else { continue };
            grads[j] = Some(match grads[j].take() {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
        }
    }

    Ok(wrt_ids
        .iter()
        .zip(wrt)
        .map(|(&id, t)| {
            results
                .get(id - lo)
                .cloned()
                .flatten()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Gradient of `loss` with respect to every parameter in `wrt`, keyed by name.
pub fn backward<T: Scalar>(loss: &Tensor<T>, wrt: &ParamSet<T>, create_graph: bool) -> Result<GradMap<T>> {
    let tensors: Vec<&Tensor<T>> = wrt.iter().map(|(_, t)| t).collect();
    let grads = grad(loss, &tensors, create_graph)?;
    Ok(GradMap::from_pairs(
        wrt.iter().map(|(name, _)| name.to_string()).zip(grads).collect(),
    ))
}
