//! Reverse-mode differentiation over vector-valued nodes.
//!
//! Every node holds a flat `Vec<f64>` value. Operations push a node with a
//! backward closure that maps the node's output gradient to one gradient
//! per parent. Coarse operations (morphing, shading, rasterisation, small
//! dense networks) are recorded as single nodes with hand-written
//! vector-Jacobian products.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};

type Backward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    value: Rc<Vec<f64>>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, len {})", self.id, self.len())
    }
}

/// Result of [`Tape::backward`]: one gradient slot per recorded node.
pub struct Gradients {
    tape_id: *const Tape,
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `var`; zeros
    /// when `var` does not influence it.
    pub fn wrt(&self, var: &Var<'_>) -> Vec<f64> {
        assert!(
            std::ptr::eq(self.tape_id, var.tape),
            "variable belongs to a different tape"
        );
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[var.id]],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, parents: Vec<usize>, backward: Option<Backward>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf node. Gradients are reported for leaves like for any other node.
    pub fn input(&self, value: Vec<f64>) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.input(vec![value])
    }

    /// Records an operation with a caller-supplied vector-Jacobian product.
    /// `backward` receives the output gradient and must return one gradient
    /// per parent, each matching that parent's length.
    pub fn custom<'t, F>(&'t self, parents: &[Var<'t>], value: Vec<f64>, backward: F) -> Var<'t>
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    {
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "parent recorded on another tape");
        }
        self.push(
            value,
            parents.iter().map(|p| p.id).collect(),
            Some(Box::new(backward)),
        )
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::invalid("output was not recorded on this tape"));
        }
        let nodes = self.nodes.borrow();
        if output.id >= nodes.len() {
            return Err(Error::invalid("output was not recorded on this tape"));
        }
        if nodes[output.id].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got length {}",
                nodes[output.id].value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.len(), nodes[p].value.len());
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape_id: self,
            grads,
            lens: nodes.iter().map(|n| n.value.len()).collect(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a length-one node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar node");
        v[0]
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len());
        let value = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        self.tape
            .custom(&[*self, *other], value, |g| vec![g.to_vec(), g.to_vec()])
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len());
        let value = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        self.tape.custom(&[*self, *other], value, |g| {
            vec![g.to_vec(), g.iter().map(|v| -v).collect()]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len());
        let value = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        self.tape.custom(&[*self, *other], value, move |g| {
            vec![
                g.iter().zip(b.iter()).map(|(g, y)| g * y).collect(),
                g.iter().zip(a.iter()).map(|(g, x)| g * x).collect(),
            ]
        })
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let value = self.value().iter().map(|x| k * x).collect();
        self.tape
            .custom(&[*self], value, move |g| vec![g.iter().map(|v| k * v).collect()])
    }

    pub fn sum(&self) -> Var<'t> {
        let n = self.len();
        let value = vec![self.value().iter().sum()];
        self.tape.custom(&[*self], value, move |g| vec![vec![g[0]; n]])
    }

    pub fn sum_squares(&self) -> Var<'t> {
        let a = self.value();
        let value = vec![a.iter().map(|x| x * x).sum()];
        self.tape.custom(&[*self], value, move |g| {
            vec![a.iter().map(|x| 2.0 * x * g[0]).collect()]
        })
    }

    pub fn dot(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len());
        let value = vec![a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()];
        self.tape.custom(&[*self, *other], value, move |g| {
            vec![
                b.iter().map(|y| g[0] * y).collect(),
                a.iter().map(|x| g[0] * x).collect(),
            ]
        })
    }

    pub fn slice(&self, range: Range<usize>) -> Var<'t> {
        let n = self.len();
        assert!(range.end <= n);
        let value = self.value()[range.clone()].to_vec();
        self.tape.custom(&[*self], value, move |g| {
            let mut out = vec![0.0; n];
            out[range.clone()].copy_from_slice(g);
            vec![out]
        })
    }

    /// Picks `indices` in order; repeated indices accumulate on the way back.
    pub fn gather(&self, indices: Vec<usize>) -> Var<'t> {
        let n = self.len();
        let a = self.value();
        let value = indices.iter().map(|&i| a[i]).collect();
        self.tape.custom(&[*self], value, move |g| {
            let mut out = vec![0.0; n];
            for (&i, gv) in indices.iter().zip(g) {
                out[i] += gv;
            }
            vec![out]
        })
    }

    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let mut value = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            value.extend_from_slice(&p.value());
        }
        tape.custom(parts, value, move |g| {
            let mut off = 0;
            lens.iter()
                .map(|&l| {
                    let s = g[off..off + l].to_vec();
                    off += l;
                    s
                })
                .collect()
        })
    }

    /// `Σ w_i x_i` over scalar nodes.
    pub fn weighted_sum(terms: &[(f64, Var<'t>)]) -> Var<'t> {
        let tape = terms[0].1.tape;
        let weights: Vec<f64> = terms.iter().map(|(w, _)| *w).collect();
        let vars: Vec<Var<'t>> = terms.iter().map(|(_, v)| *v).collect();
        let value = vec![terms.iter().map(|(w, v)| w * v.item()).sum()];
        tape.custom(&vars, value, move |g| {
            weights.iter().map(|w| vec![w * g[0]]).collect()
        })
    }
}
