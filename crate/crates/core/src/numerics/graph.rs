//! Tape-based reverse-mode differentiation over tensors.
//!
//! A [`Graph`] records every operation of a forward pass in a define-by-run
//! tape; [`Graph::backward`] walks the tape once in reverse and accumulates
//! vector-Jacobian products into per-node gradients. Tensors are immutable
//! after construction, so forward evaluation is pure; a single backward pass
//! is single-threaded over one graph.
//!
//! Gradient stopping is explicit: [`Graph::detach`] re-enters a value as a
//! constant leaf, which is how fixation sampling and patch extraction are
//! kept outside the differentiated pipeline.

use std::cell::RefCell;
use std::sync::Arc;

use crate::numerics::signal::{
    self, apply_resize_plan, gelu_grad_scalar, gelu_scalar, resize_plan, AxisGroups,
    LAYER_NORM_EPS,
};
use crate::numerics::tensor::{self, Real, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type Vjp<T> = Box<dyn Fn(&Tensor<T>) -> Tensor<T>>;

struct Parent<T: Real> {
    id: usize,
    vjp: Vjp<T>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Parent<T>>,
    needs_grad: bool,
    label: &'static str,
}

/// Recorded computation graph.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Result of a backward pass: one gradient per reachable node.
pub struct Gradients<T: Real> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, "param")
    }

    /// Non-trainable leaf; gradients never flow into it.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, "constant")
    }

    /// Stop-gradient marker: the value continues forward, the tape is cut.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_leaf(value, false, "detach")
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar_value on non-scalar {:?}", t.shape());
        t.data()[0]
    }

    fn push_leaf(&self, value: Tensor<T>, needs_grad: bool, label: &'static str) -> Var {
        assert!(value.all_finite(), "non-finite value produced by {label}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad,
            label,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, parents: Vec<Parent<T>>, label: &'static str) -> Var {
        assert!(value.all_finite(), "non-finite value produced by {label}");
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|p| nodes[p.id].needs_grad);
        nodes.push(Node {
            value,
            parents,
            needs_grad,
            label,
        });
        Var(nodes.len() - 1)
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Backward pass from a scalar loss. Returns gradients for every node on
    /// a differentiable path from the loss to a trainable leaf.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss, got {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else {
                continue;
            };
            if !nodes[id].needs_grad {
                continue;
            }
            for parent in &nodes[id].parents {
                if !nodes[parent.id].needs_grad {
                    continue;
                }
                let contrib = (parent.vjp)(&g);
                debug_assert_eq!(
                    contrib.shape(),
                    nodes[parent.id].value.shape(),
                    "vjp shape mismatch in {}",
                    nodes[id].label
                );
                match &mut grads[parent.id] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Gradients { by_node: grads }
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.with_value(a, |ta| {
            self.with_value(b, |tb| {
                assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x + y)
                    .collect();
                Tensor::new(ta.shape().to_vec(), data).unwrap()
            })
        });
        self.push(
            value,
            vec![
                Parent {
                    id: a.0,
                    vjp: Box::new(|g| g.clone()),
                },
                Parent {
                    id: b.0,
                    vjp: Box::new(|g| g.clone()),
                },
            ],
            "add",
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.with_value(a, |ta| {
            self.with_value(b, |tb| {
                assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x - y)
                    .collect();
                Tensor::new(ta.shape().to_vec(), data).unwrap()
            })
        });
        self.push(
            value,
            vec![
                Parent {
                    id: a.0,
                    vjp: Box::new(|g| g.clone()),
                },
                Parent {
                    id: b.0,
                    vjp: Box::new(|g| g.map(|v| -v)),
                },
            ],
            "sub",
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let (ca, cb) = (ta, tb);
        self.push(
            value,
            vec![
                Parent {
                    id: a.0,
                    vjp: {
                        let cb = cb.clone();
                        Box::new(move |g| {
                            let data = g.data().iter().zip(cb.data()).map(|(&x, &y)| x * y).collect();
                            Tensor::new(g.shape().to_vec(), data).unwrap()
                        })
                    },
                },
                Parent {
                    id: b.0,
                    vjp: Box::new(move |g| {
                        let data = g.data().iter().zip(ca.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::new(g.shape().to_vec(), data).unwrap()
                    }),
                },
            ],
            "mul",
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.with_value(a, |t| t.map(|v| v * c));
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| g.map(|v| v * c)),
            }],
            "scale",
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        let value = self.with_value(a, |t| t.map(|v| v + c));
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(|g| g.clone()),
            }],
            "add_const",
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let ta = self.value(a);
        let value = ta.map(gelu_scalar);
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                        .collect();
                    Tensor::new(g.shape().to_vec(), data).unwrap()
                }),
            }],
            "gelu",
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| {
            t.map(|x| T::one() / (T::one() + (-x).exp()))
        });
        let y = value.clone();
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &s)| gv * s * (T::one() - s))
                        .collect();
                    Tensor::new(g.shape().to_vec(), data).unwrap()
                }),
            }],
            "sigmoid",
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let ta = self.value(a);
        let value = ta.map(|x| x.max(T::zero()));
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    Tensor::new(g.shape().to_vec(), data).unwrap()
                }),
            }],
            "relu",
        )
    }

    /// Elementwise natural log. Inputs must be strictly positive.
    pub fn log(&self, a: Var) -> Var {
        let ta = self.value(a);
        assert!(
            ta.data().iter().all(|v| *v > T::zero()),
            "log requires strictly positive inputs"
        );
        let value = ta.map(|x| x.ln());
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv / x)
                        .collect();
                    Tensor::new(g.shape().to_vec(), data).unwrap()
                }),
            }],
            "log",
        )
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(a);
        let value = self.with_value(a, |t| t.reshaped(shape).expect("reshape"));
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| g.reshaped(&in_shape).expect("reshape grad")),
            }],
            "reshape",
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.with_value(a, tensor::transpose2d);
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(|g| tensor::transpose2d(g)),
            }],
            "transpose",
        )
    }

    /// Concatenate 2-D blocks along the column axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), 2, "concat_cols expects 2-D blocks");
                assert_eq!(s[0], rows, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.0].value.data();
                for r in 0..rows {
                    data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        let value = Tensor::new(vec![rows, total], data).unwrap();
        let mut parents = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let o = offset;
            parents.push(Parent {
                id: p.0,
                vjp: Box::new(move |g| {
                    let gt = g.shape()[1];
                    let mut out = vec![T::zero(); g.shape()[0] * w];
                    for r in 0..g.shape()[0] {
                        out[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * gt + o..r * gt + o + w]);
                    }
                    Tensor::new(vec![g.shape()[0], w], out).unwrap()
                }),
            });
            offset += w;
        }
        self.push(value, parents, "concat_cols")
    }

    /// Gather: out[k] = a[index[k]]. Covers patchify and patch-merge layouts.
    pub fn permute_flat(&self, a: Var, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let in_len = self.with_value(a, |t| t.len());
        let in_shape = self.shape(a);
        assert_eq!(out_shape.iter().product::<usize>(), index.len());
        let value = self.with_value(a, |t| {
            let data = index.iter().map(|&i| t.data()[i]).collect();
            Tensor::new(out_shape.to_vec(), data).unwrap()
        });
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let mut out = vec![T::zero(); in_len];
                    for (k, &i) in index.iter().enumerate() {
                        out[i] += g.data()[k];
                    }
                    Tensor::new(in_shape.clone(), out).unwrap()
                }),
            }],
            "permute_flat",
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = tensor::matmul(&ta, &tb);
        self.push(
            value,
            vec![
                Parent {
                    id: a.0,
                    vjp: {
                        let tb = tb.clone();
                        Box::new(move |g| tensor::matmul(g, &tensor::transpose2d(&tb)))
                    },
                },
                Parent {
                    id: b.0,
                    vjp: Box::new(move |g| tensor::matmul(&tensor::transpose2d(&ta), g)),
                },
            ],
            "matmul",
        )
    }

    pub fn matvec(&self, m: Var, x: Var) -> Var {
        let (tm, tx) = (self.value(m), self.value(x));
        let value = tensor::matvec(&tm, &tx);
        let (rows, cols) = (tm.dim(0), tm.dim(1));
        self.push(
            value,
            vec![
                Parent {
                    id: m.0,
                    vjp: {
                        let tx = tx.clone();
                        Box::new(move |g| {
                            let mut out = vec![T::zero(); rows * cols];
                            for i in 0..rows {
                                for j in 0..cols {
                                    out[i * cols + j] = g.data()[i] * tx.data()[j];
                                }
                            }
                            Tensor::new(vec![rows, cols], out).unwrap()
                        })
                    },
                },
                Parent {
                    id: x.0,
                    vjp: Box::new(move |g| tensor::matvec(&tensor::transpose2d(&tm), g)),
                },
            ],
            "matvec",
        )
    }

    /// mat (R×C) + row ([C]) broadcast over rows.
    pub fn add_row_broadcast(&self, mat: Var, row: Var) -> Var {
        let (tm, tr) = (self.value(mat), self.value(row));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tm.dim(1), tr.len(), "add_row_broadcast width mismatch");
        let (rows, cols) = (tm.dim(0), tm.dim(1));
        let mut data = tm.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tr.data()[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(
            value,
            vec![
                Parent {
                    id: mat.0,
                    vjp: Box::new(|g| g.clone()),
                },
                Parent {
                    id: row.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                out[c] += g.data()[r * cols + c];
                            }
                        }
                        Tensor::new(vec![cols], out).unwrap()
                    }),
                },
            ],
            "add_row_broadcast",
        )
    }

    /// mat (R×C) + alpha * col ([R]) broadcast over columns.
    pub fn add_col_broadcast_scaled(&self, mat: Var, col: Var, alpha: T) -> Var {
        let (tm, tc) = (self.value(mat), self.value(col));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tm.dim(0), tc.len(), "add_col_broadcast height mismatch");
        let (rows, cols) = (tm.dim(0), tm.dim(1));
        let mut data = tm.data().to_vec();
        for r in 0..rows {
            let add = alpha * tc.data()[r];
            for c in 0..cols {
                data[r * cols + c] += add;
            }
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(
            value,
            vec![
                Parent {
                    id: mat.0,
                    vjp: Box::new(|g| g.clone()),
                },
                Parent {
                    id: col.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); rows];
                        for r in 0..rows {
                            for c in 0..cols {
                                out[r] += g.data()[r * cols + c];
                            }
                            out[r] = out[r] * alpha;
                        }
                        Tensor::new(vec![rows], out).unwrap()
                    }),
                },
            ],
            "add_col_broadcast_scaled",
        )
    }

    /// mat (R×C) ⊙ col ([R]) broadcast over columns.
    pub fn mul_col_broadcast(&self, mat: Var, col: Var) -> Var {
        let (tm, tc) = (self.value(mat), self.value(col));
        assert_eq!(tm.rank(), 2);
        assert_eq!(tm.dim(0), tc.len(), "mul_col_broadcast height mismatch");
        let (rows, cols) = (tm.dim(0), tm.dim(1));
        let mut data = tm.data().to_vec();
        for r in 0..rows {
            let m = tc.data()[r];
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] * m;
            }
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        let (tm2, tc2) = (tm, tc);
        self.push(
            value,
            vec![
                Parent {
                    id: mat.0,
                    vjp: {
                        let tc2 = tc2.clone();
                        Box::new(move |g| {
                            let mut out = g.data().to_vec();
                            for r in 0..rows {
                                let m = tc2.data()[r];
                                for c in 0..cols {
                                    out[r * cols + c] = out[r * cols + c] * m;
                                }
                            }
                            Tensor::new(vec![rows, cols], out).unwrap()
                        })
                    },
                },
                Parent {
                    id: col.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); rows];
                        for r in 0..rows {
                            for c in 0..cols {
                                out[r] += g.data()[r * cols + c] * tm2.data()[r * cols + c];
                            }
                        }
                        Tensor::new(vec![rows], out).unwrap()
                    }),
                },
            ],
            "mul_col_broadcast",
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let value = self.with_value(a, |t| {
            Tensor::scalar(T::fromf(t.sum_f64()))
        });
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| Tensor::full(&shape, g.data()[0])),
            }],
            "sum_all",
        )
    }

    /// Mean over axis 0 of a 2-D tensor: (R×C) -> [C].
    pub fn mean_rows(&self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2, "mean_rows expects 2-D");
        let (rows, cols) = (ta.dim(0), ta.dim(1));
        let inv = T::fromf(1.0 / rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += ta.data()[r * cols + c];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let value = Tensor::new(vec![cols], out).unwrap();
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let mut out = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            out[r * cols + c] = g.data()[c] * inv;
                        }
                    }
                    Tensor::new(vec![rows, cols], out).unwrap()
                }),
            }],
            "mean_rows",
        )
    }

    /// Build a 1-D vector from scalar vars.
    pub fn stack_scalars(&self, scalars: &[Var]) -> Var {
        assert!(!scalars.is_empty());
        let data: Vec<T> = scalars.iter().map(|&s| self.scalar_value(s)).collect();
        let value = Tensor::new(vec![data.len()], data).unwrap();
        let parents = scalars
            .iter()
            .enumerate()
            .map(|(k, &s)| Parent {
                id: s.0,
                vjp: Box::new(move |g: &Tensor<T>| Tensor::scalar(g.data()[k])) as Vjp<T>,
            })
            .collect();
        self.push(value, parents, "stack_scalars")
    }

    // ---- scalar broadcast arithmetic ----

    /// t * s with s a scalar ([1]) var.
    pub fn mul_scalar(&self, t: Var, s: Var) -> Var {
        let tt = self.value(t);
        let sv = self.scalar_value(s);
        let value = tt.map(|v| v * sv);
        let shape = tt.shape().to_vec();
        self.push(
            value,
            vec![
                Parent {
                    id: t.0,
                    vjp: Box::new(move |g| g.map(|v| v * sv)),
                },
                Parent {
                    id: s.0,
                    vjp: Box::new(move |g| {
                        debug_assert_eq!(g.shape(), &shape[..]);
                        let dot = g
                            .data()
                            .iter()
                            .zip(tt.data())
                            .fold(T::zero(), |acc, (&gv, &tv)| acc + gv * tv);
                        Tensor::scalar(dot)
                    }),
                },
            ],
            "mul_scalar",
        )
    }

    /// t / s with s a scalar ([1]) var.
    pub fn div_scalar(&self, t: Var, s: Var) -> Var {
        let tt = self.value(t);
        let sv = self.scalar_value(s);
        assert!(sv != T::zero(), "div_scalar by zero");
        let value = tt.map(|v| v / sv);
        self.push(
            value,
            vec![
                Parent {
                    id: t.0,
                    vjp: Box::new(move |g| g.map(|v| v / sv)),
                },
                Parent {
                    id: s.0,
                    vjp: Box::new(move |g| {
                        let dot = g
                            .data()
                            .iter()
                            .zip(tt.data())
                            .fold(T::zero(), |acc, (&gv, &tv)| acc + gv * tv);
                        Tensor::scalar(-dot / (sv * sv))
                    }),
                },
            ],
            "div_scalar",
        )
    }

    /// Broadcast a scalar var to a 1-D vector of length n.
    pub fn broadcast_scalar(&self, s: Var, n: usize) -> Var {
        let sv = self.scalar_value(s);
        let value = Tensor::full(&[n], sv);
        self.push(
            value,
            vec![Parent {
                id: s.0,
                vjp: Box::new(|g| Tensor::scalar(g.data().iter().fold(T::zero(), |a, &v| a + v))),
            }],
            "broadcast_scalar",
        )
    }

    // ---- normalization / activation blocks ----

    /// Softmax over a set of axes with temperature, recorded with its vjp.
    pub fn softmax(&self, a: Var, axes: &[usize], temperature: T) -> Var {
        let ta = self.value(a);
        let value = signal::softmax_over(&ta, axes, temperature).expect("softmax args");
        let y = value.clone();
        let groups = AxisGroups::new(ta.shape(), axes);
        let inv_t = T::one() / temperature;
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let mut out = vec![T::zero(); g.len()];
                    groups.for_each(|group| {
                        let mut dot = T::zero();
                        for &i in group {
                            dot += g.data()[i] * y.data()[i];
                        }
                        for &i in group {
                            out[i] = y.data()[i] * (g.data()[i] - dot) * inv_t;
                        }
                    });
                    Tensor::new(g.shape().to_vec(), out).unwrap()
                }),
            }],
            "softmax",
        )
    }

    /// Last-axis layer normalization with affine parameters.
    pub fn layer_norm(&self, x: Var, scale: Var, shift: Var) -> Var {
        let (tx, tscale, tshift) = (self.value(x), self.value(scale), self.value(shift));
        let value = signal::layer_norm(&tx, &tscale, &tshift).expect("layer_norm shapes");
        let width = *tx.shape().last().unwrap();
        let rows = tx.len() / width;
        // cache per-row inverse std and normalized values for the backward pass
        let mut inv_std = vec![T::zero(); rows];
        let mut xhat = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * width..(r + 1) * width];
            let mean = row.iter().map(|v| v.tof()).sum::<f64>() / width as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.tof() - mean;
                    d * d
                })
                .sum::<f64>()
                / width as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = T::fromf(istd);
            for c in 0..width {
                xhat[r * width + c] = T::fromf((row[c].tof() - mean) * istd);
            }
        }
        let xhat = Tensor::new(tx.shape().to_vec(), xhat).unwrap();
        let xhat_x = xhat.clone();
        let xhat_s = xhat.clone();
        let inv_std_x = inv_std;
        let scale_x = tscale.clone();
        self.push(
            value,
            vec![
                Parent {
                    id: x.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); g.len()];
                        let wf = T::fromf(width as f64);
                        for r in 0..rows {
                            let gr = &g.data()[r * width..(r + 1) * width];
                            let xr = &xhat_x.data()[r * width..(r + 1) * width];
                            let mut sum_gh = T::zero();
                            let mut sum_ghx = T::zero();
                            for c in 0..width {
                                let gh = gr[c] * scale_x.data()[c];
                                sum_gh += gh;
                                sum_ghx += gh * xr[c];
                            }
                            let mean_gh = sum_gh / wf;
                            let mean_ghx = sum_ghx / wf;
                            for c in 0..width {
                                let gh = gr[c] * scale_x.data()[c];
                                out[r * width + c] =
                                    inv_std_x[r] * (gh - mean_gh - xr[c] * mean_ghx);
                            }
                        }
                        Tensor::new(g.shape().to_vec(), out).unwrap()
                    }),
                },
                Parent {
                    id: scale.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); width];
                        for r in 0..rows {
                            for c in 0..width {
                                out[c] += g.data()[r * width + c] * xhat_s.data()[r * width + c];
                            }
                        }
                        Tensor::new(vec![width], out).unwrap()
                    }),
                },
                Parent {
                    id: shift.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); width];
                        for r in 0..rows {
                            for c in 0..width {
                                out[c] += g.data()[r * width + c];
                            }
                        }
                        Tensor::new(vec![width], out).unwrap()
                    }),
                },
            ],
            "layer_norm",
        )
    }

    // ---- batched (per-channel) attention primitives ----

    /// out[b,i,p] = q[b,i] * k[b,p].
    pub fn batched_outer(&self, q: Var, k: Var) -> Var {
        let (tq, tk) = (self.value(q), self.value(k));
        assert_eq!(tq.rank(), 2);
        assert_eq!(tk.rank(), 2);
        assert_eq!(tq.dim(0), tk.dim(0), "batched_outer batch mismatch");
        let (b, i, p) = (tq.dim(0), tq.dim(1), tk.dim(1));
        let mut data = vec![T::zero(); b * i * p];
        for bi in 0..b {
            for ii in 0..i {
                let qv = tq.data()[bi * i + ii];
                for pi in 0..p {
                    data[(bi * i + ii) * p + pi] = qv * tk.data()[bi * p + pi];
                }
            }
        }
        let value = Tensor::new(vec![b, i, p], data).unwrap();
        let (tq2, tk2) = (tq, tk);
        self.push(
            value,
            vec![
                Parent {
                    id: q.0,
                    vjp: {
                        let tk2 = tk2.clone();
                        Box::new(move |g| {
                            let mut out = vec![T::zero(); b * i];
                            for bi in 0..b {
                                for ii in 0..i {
                                    let mut acc = T::zero();
                                    for pi in 0..p {
                                        acc += g.data()[(bi * i + ii) * p + pi]
                                            * tk2.data()[bi * p + pi];
                                    }
                                    out[bi * i + ii] = acc;
                                }
                            }
                            Tensor::new(vec![b, i], out).unwrap()
                        })
                    },
                },
                Parent {
                    id: k.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); b * p];
                        for bi in 0..b {
                            for pi in 0..p {
                                let mut acc = T::zero();
                                for ii in 0..i {
                                    acc += g.data()[(bi * i + ii) * p + pi]
                                        * tq2.data()[bi * i + ii];
                                }
                                out[bi * p + pi] = acc;
                            }
                        }
                        Tensor::new(vec![b, p], out).unwrap()
                    }),
                },
            ],
            "batched_outer",
        )
    }

    /// out[b,i] = sum_p a[b,i,p] * v[b,p].
    pub fn batched_matvec(&self, a: Var, v: Var) -> Var {
        let (ta, tv) = (self.value(a), self.value(v));
        assert_eq!(ta.rank(), 3);
        assert_eq!(tv.rank(), 2);
        let (b, i, p) = (ta.dim(0), ta.dim(1), ta.dim(2));
        assert_eq!(tv.dim(0), b);
        assert_eq!(tv.dim(1), p, "batched_matvec inner mismatch");
        let mut data = vec![T::zero(); b * i];
        for bi in 0..b {
            for ii in 0..i {
                let mut acc = T::zero();
                for pi in 0..p {
                    acc += ta.data()[(bi * i + ii) * p + pi] * tv.data()[bi * p + pi];
                }
                data[bi * i + ii] = acc;
            }
        }
        let value = Tensor::new(vec![b, i], data).unwrap();
        let (ta2, tv2) = (ta, tv);
        self.push(
            value,
            vec![
                Parent {
                    id: a.0,
                    vjp: {
                        let tv2 = tv2.clone();
                        Box::new(move |g| {
                            let mut out = vec![T::zero(); b * i * p];
                            for bi in 0..b {
                                for ii in 0..i {
                                    let gv = g.data()[bi * i + ii];
                                    for pi in 0..p {
                                        out[(bi * i + ii) * p + pi] = gv * tv2.data()[bi * p + pi];
                                    }
                                }
                            }
                            Tensor::new(vec![b, i, p], out).unwrap()
                        })
                    },
                },
                Parent {
                    id: v.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); b * p];
                        for bi in 0..b {
                            for pi in 0..p {
                                let mut acc = T::zero();
                                for ii in 0..i {
                                    acc += g.data()[bi * i + ii]
                                        * ta2.data()[(bi * i + ii) * p + pi];
                                }
                                out[bi * p + pi] = acc;
                            }
                        }
                        Tensor::new(vec![b, p], out).unwrap()
                    }),
                },
            ],
            "batched_matvec",
        )
    }

    /// out[b,i] = sum_p a[b,i,p] * w[p], with one shared weight vector.
    pub fn batched_matvec_shared(&self, a: Var, w: Var) -> Var {
        let (ta, tw) = (self.value(a), self.value(w));
        assert_eq!(ta.rank(), 3);
        assert_eq!(tw.rank(), 1);
        let (b, i, p) = (ta.dim(0), ta.dim(1), ta.dim(2));
        assert_eq!(tw.dim(0), p, "batched_matvec_shared inner mismatch");
        let mut data = vec![T::zero(); b * i];
        for bi in 0..b {
            for ii in 0..i {
                let mut acc = T::zero();
                for pi in 0..p {
                    acc += ta.data()[(bi * i + ii) * p + pi] * tw.data()[pi];
                }
                data[bi * i + ii] = acc;
            }
        }
        let value = Tensor::new(vec![b, i], data).unwrap();
        let (ta2, tw2) = (ta, tw);
        self.push(
            value,
            vec![
                Parent {
                    id: a.0,
                    vjp: {
                        let tw2 = tw2.clone();
                        Box::new(move |g| {
                            let mut out = vec![T::zero(); b * i * p];
                            for bi in 0..b {
                                for ii in 0..i {
                                    let gv = g.data()[bi * i + ii];
                                    for pi in 0..p {
                                        out[(bi * i + ii) * p + pi] = gv * tw2.data()[pi];
                                    }
                                }
                            }
                            Tensor::new(vec![b, i, p], out).unwrap()
                        })
                    },
                },
                Parent {
                    id: w.0,
                    vjp: Box::new(move |g| {
                        let mut out = vec![T::zero(); p];
                        for bi in 0..b {
                            for ii in 0..i {
                                let gv = g.data()[bi * i + ii];
                                for pi in 0..p {
                                    out[pi] += gv * ta2.data()[(bi * i + ii) * p + pi];
                                }
                            }
                        }
                        Tensor::new(vec![p], out).unwrap()
                    }),
                },
            ],
            "batched_matvec_shared",
        )
    }

    // ---- resampling ----

    /// Bilinear resize of a 2-D field, differentiable in the field.
    pub fn resize2d(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rank(), 2, "resize2d expects 2-D");
        let (in_h, in_w) = (ta.dim(0), ta.dim(1));
        let plan = resize_plan(in_h, in_w, out_h, out_w);
        let data = apply_resize_plan(&plan, ta.data());
        let value = Tensor::new(vec![out_h, out_w], data).unwrap();
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| {
                    let mut out = vec![0.0f64; in_h * in_w];
                    for (k, contribs) in plan.iter().enumerate() {
                        let gv = g.data()[k].tof();
                        for &(idx, w) in contribs {
                            out[idx] += gv * w;
                        }
                    }
                    Tensor::new(vec![in_h, in_w], out.into_iter().map(T::fromf).collect())
                        .unwrap()
                }),
            }],
            "resize2d",
        )
    }

    /// Bilinear resampling of a token grid (HW×C) onto a new spatial shape,
    /// applied independently per channel.
    pub fn resample_tokens(
        &self,
        tokens: Var,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    ) -> Var {
        let tt = self.value(tokens);
        assert_eq!(tt.rank(), 2);
        let channels = tt.dim(1);
        assert_eq!(tt.dim(0), in_hw.0 * in_hw.1, "token count vs spatial shape");
        let plan = resize_plan(in_hw.0, in_hw.1, out_hw.0, out_hw.1);
        let out_tokens = out_hw.0 * out_hw.1;
        let mut data = vec![T::zero(); out_tokens * channels];
        for (k, contribs) in plan.iter().enumerate() {
            for ch in 0..channels {
                let mut acc = 0.0f64;
                for &(idx, w) in contribs {
                    acc += tt.data()[idx * channels + ch].tof() * w;
                }
                data[k * channels + ch] = T::fromf(acc);
            }
        }
        let value = Tensor::new(vec![out_tokens, channels], data).unwrap();
        let in_tokens = in_hw.0 * in_hw.1;
        self.push(
            value,
            vec![Parent {
                id: tokens.0,
                vjp: Box::new(move |g| {
                    let mut out = vec![0.0f64; in_tokens * channels];
                    for (k, contribs) in plan.iter().enumerate() {
                        for ch in 0..channels {
                            let gv = g.data()[k * channels + ch].tof();
                            for &(idx, w) in contribs {
                                out[idx * channels + ch] += gv * w;
                            }
                        }
                    }
                    Tensor::new(
                        vec![in_tokens, channels],
                        out.into_iter().map(T::fromf).collect(),
                    )
                    .unwrap()
                }),
            }],
            "resample_tokens",
        )
    }

    /// Stride-1 average pooling, differentiable in the field.
    pub fn avg_pool_s1(&self, a: Var, kh: usize, kw: usize) -> Var {
        let ta = self.value(a);
        let (in_h, in_w) = (ta.dim(0), ta.dim(1));
        let value = signal::avg_pool_stride1(&ta, kh, kw).expect("avg_pool args");
        self.push(
            value,
            vec![Parent {
                id: a.0,
                vjp: Box::new(move |g| signal::avg_pool_adjoint(g, in_h, in_w, kh, kw)),
            }],
            "avg_pool_s1",
        )
    }

    // ---- losses ----

    /// Cross entropy from logits against a fixed target distribution:
    /// `-sum_k q_k log softmax(x)_k`, fused for stability.
    pub fn cross_entropy_logits(&self, logits: Var, target: &Tensor<T>) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rank(), 1, "cross_entropy_logits expects a logit vector");
        assert_eq!(tl.len(), target.len(), "class count mismatch");
        let max = tl.data().iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = 0.0f64;
        for &v in tl.data() {
            sum += (v - max).tof().exp();
        }
        let log_z = sum.ln() + max.tof();
        let probs: Vec<T> = tl
            .data()
            .iter()
            .map(|&v| T::fromf((v.tof() - log_z).exp()))
            .collect();
        let mut loss = 0.0f64;
        for (k, &q) in target.data().iter().enumerate() {
            if q != T::zero() {
                loss -= q.tof() * (tl.data()[k].tof() - log_z);
            }
        }
        let value = Tensor::scalar(T::fromf(loss));
        let target = target.clone();
        self.push(
            value,
            vec![Parent {
                id: logits.0,
                vjp: Box::new(move |g| {
                    let gs = g.data()[0];
                    let data = probs
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &q)| gs * (p - q))
                        .collect();
                    Tensor::new(vec![target.len()], data).unwrap()
                }),
            }],
            "cross_entropy_logits",
        )
    }
}

/// `x (R×Cin) · w (Cin×Cout) + b`, the standard dense layer.
pub fn linear2d<T: Real>(g: &Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row_broadcast(y, b)
}

/// `w (M×N) · x (N) + b (M)` for vector inputs.
pub fn linear_vec<T: Real>(g: &Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matvec(w, x);
    g.add(y, b)
}
