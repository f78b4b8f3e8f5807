//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Tensors are define-by-run: every operation applied to a tensor that
//! requires a gradient appends a node to an implicit DAG. Each node is
//! stamped with a monotonically increasing id, so inputs always carry a
//! smaller id than their outputs and a reverse sweep in descending id order
//! is a valid topological traversal.
//!
//! Backward rules are themselves written with differentiable tensor
//! operations. Running a backward pass with `create_graph = true` therefore
//! records the gradient computation and a second pass through it yields
//! second derivatives, which is what the R1 gradient penalty needs.

mod conv;
pub mod gradcheck;
mod linalg;
pub(crate) mod ops;
mod optim;

use std::cell::Cell;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

pub use conv::conv_out_extent;
pub use linalg::SparseMatrix;
pub use optim::{adam_step, AdamConfig, AdamState};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Whether operations on this thread are currently being recorded.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the operation inputs, the upstream gradient and a
/// mask of which inputs want a gradient; it returns one entry per input
/// (`None` where the mask is false).
pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool])
        -> Result<Vec<Option<Tensor>>>;

    /// False for operations whose backward is computed with raw kernels and
    /// therefore cannot be differentiated again.
    fn differentiable_backward(&self) -> bool {
        true
    }
}

pub(crate) struct Node {
    op: Box<dyn Backward>,
    inputs: Vec<Tensor>,
    consumed: AtomicBool,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Tensor>>,
    node: Option<Node>,
}

/// Dense row-major n-dimensional array participating in the autodiff graph.
///
/// Cloning is cheap (shared handle). A scalar has shape `[]`.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &preview)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

impl Tensor {
    /// Creates a constant tensor. Fails when `shape` and `data` disagree.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("shape {shape:?} has a zero extent")));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Creates a leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::new(data, shape)?.requires_grad_(true))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_parts(vec![value; numel], shape.to_vec(), false, None)
    }

    pub(crate) fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data: RwLock::new(data),
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Builds the result of an operation, recording a node when any input
    /// requires a gradient and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        op: impl Backward + 'static,
    ) -> Tensor {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            op: Box::new(op),
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            consumed: AtomicBool::new(false),
        });
        Tensor::from_parts(data, shape, track, node)
    }

    /// Returns a leaf copy with the requested gradient flag.
    pub fn requires_grad_(self, flag: bool) -> Tensor {
        if self.0.node.is_none() && Arc::strong_count(&self.0) == 1 {
            let inner = Arc::try_unwrap(self.0).ok().expect("unique handle");
            return Tensor::from_parts(
                inner.data.into_inner().expect("lock poisoned"),
                inner.shape,
                flag,
                None,
            );
        }
        Tensor::from_parts(self.to_vec(), self.shape().to_vec(), flag, None)
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.to_vec(), self.shape().to_vec(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        data[0]
    }

    /// Overwrites the values of a leaf in place (optimizer updates,
    /// checkpoint loading). Fails on non-leaves or a length mismatch.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Graph("set_data on a non-leaf tensor".into()));
        }
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        if data.len() != values.len() {
            return Err(Error::Shape(format!(
                "set_data with {} values into shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut data);
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Gives a parameter an all-zero gradient if it has none, so optimizers
    /// can step over parameters that did not take part in the last pass.
    pub fn ensure_grad(&self) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape()));
        }
    }

    fn accumulate_grad(&self, g: Tensor) -> Result<()> {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        let next = match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        };
        *slot = Some(next);
        Ok(())
    }

    /// Back-propagates from a scalar, accumulating into every leaf that
    /// requires a gradient. With `create_graph` the gradients are recorded so
    /// they can be differentiated again; otherwise the traversed graph is
    /// released and a second call on it fails.
    pub fn backward(&self, create_graph: bool) -> Result<()> {
        self.backward_with(create_graph, create_graph)
    }

    pub fn backward_with(&self, retain_graph: bool, create_graph: bool) -> Result<()> {
        let leaves = run_backward(self, retain_graph, create_graph, None)?;
        for (leaf, g) in leaves {
            leaf.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Gradients of the scalar `output` with respect to `inputs`, returned
/// rather than accumulated. Inputs that do not influence the output get a
/// zero gradient. The graph is always retained.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let wanted: Vec<u64> = inputs.iter().map(|t| t.id()).collect();
    let found = run_backward(output, true, create_graph, Some(&wanted))?;
    let mut by_id: HashMap<u64, Tensor> = found.into_iter().map(|(t, g)| (t.id(), g)).collect();
    Ok(inputs
        .iter()
        .map(|t| by_id.remove(&t.id()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Entry in the reverse sweep, ordered by node id.
struct Pending(u64);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.cmp(&other.0)
    }
}

fn run_backward(
    root: &Tensor,
    retain_graph: bool,
    create_graph: bool,
    targets: Option<&[u64]>,
) -> Result<Vec<(Tensor, Tensor)>> {
    if !root.is_scalar() {
        return Err(Error::Graph(format!(
            "backward requires a scalar, got shape {:?}",
            root.shape()
        )));
    }
    if !root.requires_grad() {
        // Nothing upstream can receive a gradient.
        return Ok(Vec::new());
    }
    with_grad_mode(create_graph, || {
        let mut grads: HashMap<u64, (Tensor, Tensor)> = HashMap::new();
        let mut heap = BinaryHeap::new();
        grads.insert(
            root.id(),
            (root.clone(), Tensor::ones(root.shape())),
        );
        heap.push(Pending(root.id()));
        let mut results = Vec::new();

        let reaches = targets.map(|t| reaching_targets(root, t));
        let wanted = |t: &Tensor| {
            t.requires_grad() && reaches.as_ref().map_or(true, |r| r.contains_key(&t.id()))
        };

        while let Some(Pending(id)) = heap.pop() {
            let (tensor, g) = grads.remove(&id).expect("queued tensor has a gradient");
            let is_target = targets.is_some_and(|t| t.contains(&id));
            if is_target || (targets.is_none() && tensor.is_leaf()) {
                results.push((tensor.clone(), g.clone()));
            }
            let Some(node) = &tensor.0.node else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(&wanted).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            if node.consumed.load(Ordering::Acquire) {
                return Err(Error::Graph(format!(
                    "graph through `{}` was already released by a previous backward; \
                     pass retain_graph to backward twice",
                    node.op.name()
                )));
            }
            if create_graph && !node.op.differentiable_backward() {
                return Err(Error::Graph(format!(
                    "`{}` does not support double backward",
                    node.op.name()
                )));
            }
            let input_grads = node.op.backward(&node.inputs, &g, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            if !retain_graph {
                node.consumed.store(true, Ordering::Release);
            }
            for ((input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(ig.shape(), input.shape(), "grad shape from `{}`", node.op.name());
                match grads.get_mut(&input.id()) {
                    Some((_, acc)) => *acc = acc.add(&ig)?,
                    None => {
                        grads.insert(input.id(), (input.clone(), ig));
                        heap.push(Pending(input.id()));
                    }
                }
            }
        }
        Ok(results)
    })
}

/// Ids of every tensor in the graph below `root` from which one of
/// `targets` is reachable (targets included).
fn reaching_targets(root: &Tensor, targets: &[u64]) -> HashMap<u64, ()> {
    let mut memo: HashMap<u64, bool> = HashMap::new();
    // Iterative post-order DFS.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if memo.contains_key(&t.id()) {
            continue;
        }
        let inputs: &[Tensor] = t.0.node.as_ref().map_or(&[], |n| &n.inputs);
        if expanded {
            let hit = targets.contains(&t.id())
                || inputs.iter().any(|i| memo.get(&i.id()).copied().unwrap_or(false));
            memo.insert(t.id(), hit);
        } else {
            stack.push((t.clone(), true));
            for i in inputs {
                if i.requires_grad() && !memo.contains_key(&i.id()) {
                    stack.push((i.clone(), false));
                }
            }
        }
    }
    memo.into_iter().filter(|&(_, hit)| hit).map(|(id, _)| (id, ())).collect()
}
