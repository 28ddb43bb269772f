use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes.
///
/// Parameters still carry `requires_grad`, but nothing produced inside the
/// closure links back to them.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: receives the output gradient and, per input, whether a
/// gradient is wanted. Returns one optional gradient buffer per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Row-major f32 array that can take part in a reverse-mode gradient graph.
///
/// Cloning is cheap and shares storage. Tensors produced by ops are never
/// mutated afterwards; only leaf parameters are updated in place by the
/// optimizer.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl Tensor {
    fn build(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; shape.iter().product()], shape.to_vec(), false, None)
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(vec![v], vec![], false, None)
    }

    /// Result of an op. Records a graph node only when some input tracks
    /// gradients and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f32>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let tracked = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if tracked {
            let node = Node { op, inputs, backward: Box::new(backward) };
            Self::build(data, shape, true, Some(node))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the op that produced this tensor, if it is a graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Intended for leaf parameters only.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f32 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f32>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                what: "element count".into(),
                expected: self.len(),
                got: shape.iter().product(),
            });
        }
        let data = self.to_vec();
        Ok(Tensor::from_op("reshape", data, shape.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
    /// reachable tensor that tracks gradients.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(AutodiffError::NotScalar { shape: self.shape().to_vec() });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(node) = t.0.node.as_ref() else { continue };
            let g = match t.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
            let grads = (node.backward)(&g, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len(), "op {}", node.op);
            for (input, grad) in node.inputs.iter().zip(grads) {
                if let (true, Some(grad)) = (input.requires_grad(), grad) {
                    debug_assert_eq!(grad.len(), input.len(), "op {}", node.op);
                    input.accumulate_grad(&grad);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the graph below `self` (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, expanded) pairs emulate recursion.
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.0.node.as_ref() {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

fn check_len(data: &[f32], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "tensor",
            what: "element count".into(),
            expected: n,
            got: data.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    }

    #[test]
    fn ops_on_constants_record_nothing() {
        let a = Tensor::new(vec![1.0, -2.0], &[2]).unwrap();
        let r = crate::ops::relu(&a);
        assert!(r.is_leaf());
        assert!(!r.requires_grad());
    }

    #[test]
    fn no_grad_suppresses_nodes() {
        let p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let r = no_grad(|| crate::ops::relu(&p));
        assert!(r.is_leaf());
        let r2 = crate::ops::relu(&p);
        assert_eq!(r2.op_name(), Some("relu"));
    }

    #[test]
    fn backward_requires_scalar() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let r = crate::ops::relu(&p);
        assert!(matches!(r.backward(), Err(AutodiffError::NotScalar { .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(x * x) + sum(x)  =>  dy/dx = 2x + 1
        let x = Tensor::param(vec![1.5, -0.5, 2.0], &[3]).unwrap();
        let sq = crate::ops::mul(&x, &x).unwrap();
        let y = crate::ops::add(&crate::ops::sum(&sq), &crate::ops::sum(&x)).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 0.0, 5.0]);
        // Intermediates keep their gradient too.
        assert_eq!(sq.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }
}
