use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use super::{Real, Tensor};
use crate::error::{ensure_arg, Result};

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send>;

struct Node<T> {
    /// Tape index of each operator input, `None` for untracked inputs.
    inputs: Vec<Option<usize>>,
    /// `None` marks a leaf.
    backward: Option<BackwardFn<T>>,
    numel: usize,
}

struct TapeState<T> {
    nodes: Vec<Node<T>>,
    /// Bumped every time a backward pass consumes the recording.
    generation: u64,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only record of differentiable operations.
///
/// Cloning a `Tape` yields another handle to the same recording. A tape is
/// meant to be driven from one thread per training step; the mutex only
/// makes tracked tensors `Send`.
pub struct Tape<T: Real> {
    id: u64,
    state: Arc<Mutex<TapeState<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            id: self.id,
            state: Arc::clone(&self.state),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef<T: Real> {
    tape: Tape<T>,
    index: usize,
    generation: u64,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            state: Arc::new(Mutex::new(TapeState {
                nodes: Vec::new(),
                generation: 0,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, TapeState<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers `t` as a leaf whose gradient will be reported by backward.
    pub fn track(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut st = self.lock();
        let index = st.nodes.len();
        st.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            numel: t.numel(),
        });
        Tensor {
            shape: t.shape,
            data: t.storage(),
            node: Some(NodeRef {
                tape: self.clone(),
                index,
                generation: st.generation,
            }),
        }
    }

    /// Number of operations recorded since the last backward pass.
    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn record<T: Real>(
    inputs: &[&Tensor<T>],
    numel: usize,
    backward: BackwardFn<T>,
) -> Option<NodeRef<T>> {
    let tape = inputs
        .iter()
        .find_map(|t| t.node.as_ref().map(|n| n.tape.clone()))?;
    let mut st = tape.lock();
    let slots = inputs
        .iter()
        .map(|t| {
            t.node.as_ref().map(|n| {
                assert!(
                    n.tape.id == tape.id,
                    "operator inputs recorded on different tapes"
                );
                assert!(
                    n.generation == st.generation,
                    "tensor belongs to a tape recording already consumed by backward"
                );
                n.index
            })
        })
        .collect();
    let index = st.nodes.len();
    st.nodes.push(Node {
        inputs: slots,
        backward: Some(backward),
        numel,
    });
    let generation = st.generation;
    drop(st);
    Some(NodeRef {
        generation,
        tape,
        index,
    })
}

/// Gradients of a scalar with respect to every leaf that influenced it.
pub struct Gradients<T: Real> {
    tape_id: u64,
    generation: u64,
    by_leaf: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf created with [`Tape::track`]. `None` when the
    /// tensor did not contribute to the loss or belongs to another recording.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let node = t.node.as_ref()?;
        if node.tape.id != self.tape_id || node.generation != self.generation {
            return None;
        }
        self.by_leaf
            .get(&node.index)
            .map(|g| Tensor::from_parts(t.shape, g.clone()))
    }

    /// Gradient for `t`, or zeros when it did not contribute.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<T: Real> Tensor<T> {
    /// Back-propagates from this scalar through its tape.
    ///
    /// Nodes are visited strictly in reverse recording order and gradient
    /// contributions are summed. The recording is consumed: the tape is
    /// empty afterwards and tensors from the old recording can no longer be
    /// used as operator inputs alongside new ones.
    pub fn backward(&self) -> Result<Gradients<T>> {
        ensure_arg!(
            self.numel() == 1,
            "backward needs a scalar loss, got shape {}",
            self.shape
        );
        let Some(root) = self.node.as_ref() else {
            return Err(crate::Error::InvalidArgument(
                "backward called on a tensor that is not recorded on a tape".into(),
            ));
        };
        let (mut nodes, generation) = {
            let mut st = root.tape.lock();
            ensure_arg!(
                st.generation == root.generation,
                "tape recording was already consumed by a previous backward pass"
            );
            let nodes = std::mem::take(&mut st.nodes);
            let generation = st.generation;
            st.generation += 1;
            (nodes, generation)
        };
        nodes.truncate(root.index + 1);

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.index] = Some(vec![T::one()]);
        let mut by_leaf = HashMap::new();

        while let Some(node) = nodes.pop() {
            let index = nodes.len();
            let Some(g) = grads[index].take() else {
                continue;
            };
            debug_assert_eq!(g.len(), node.numel);
            let Some(backward) = node.backward else {
                by_leaf.insert(index, g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let contributions = backward(&g, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (slot, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(j), Some(c)) = (slot, contrib) else {
                    continue;
                };
                match &mut grads[*j] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), c.len());
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a = *a + *v;
                        }
                    }
                    empty => *empty = Some(c),
                }
            }
        }

        Ok(Gradients {
            tape_id: root.tape.id,
            generation,
            by_leaf,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::full([1, 1, 1, 3], 2.0));
        let y = x.add(&x).unwrap().sum();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec(), vec![2.0; 3]);
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::from_fn([1, 2, 2, 2], |_, c, y, x| {
            (c + y + x) as f64
        }));
        let g = x.mean().backward().unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 1.0 / 8.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::scalar(3.0));
        let g = x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f32>::zeros([1, 1, 2, 2]));
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn backward_consumes_recording() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f32>::scalar(1.0));
        let y = x.scale(3.0);
        assert!(!tape.is_empty());
        let g = y.backward().unwrap();
        assert!(tape.is_empty());
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 3.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn untracked_branch_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::scalar(2.0));
        let c = Tensor::<f64>::scalar(5.0);
        let g = x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 5.0);
        assert!(g.get(&c).is_none());
    }
}
