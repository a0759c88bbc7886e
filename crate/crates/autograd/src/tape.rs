//! The recording tape, variables, and the core (non-convolutional) ops.

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

/// Dynamic-rank `f64` array, the single value type on the tape.
pub type Arr = ArrayD<f64>;

/// Derivative guard for `sqrt` at zero.
const SQRT_GRAD_FLOOR: f64 = 1e-12;

pub(crate) type BackwardFn = Box<dyn Fn(&Arr, &mut dyn FnMut(usize, Arr))>;

struct Node {
    value: Rc<Arr>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records a computation graph of array operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) id: usize,
    pub(crate) tape: &'t Tape,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf variable.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` is a
    /// leaf that required gradients and was reached.
    pub fn get(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Arr> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// A differentiable leaf (model parameter or other watched input).
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        self.push(value, None, true)
    }

    /// A non-differentiable input (data, targets, frozen parameters).
    pub fn constant(&self, value: Arr) -> Var<'_> {
        self.push(value, None, false)
    }

    /// 0-dimensional constant.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Arr::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var<'_>) -> Rc<Arr> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub(crate) fn push_op(
        &self,
        value: Arr,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        self.push(value, backward, requires_grad)
    }

    fn push(&self, value: Arr, backward: Option<BackwardFn>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { id, tape: self }
    }

    /// Reverse pass from a scalar root. Interior gradients are dropped as
    /// soon as they are consumed; leaf gradients are kept for the caller.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[root.id].value.ndim() == 0,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Arr::ones(IxDyn(&[])));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(bw) = node.backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let Some(g) = grads[id].take() else {
                continue; // not reachable from the root
            };
            let (before, _after) = grads.split_at_mut(id);
            let mut sink = |pid: usize, contrib: Arr| {
                debug_assert!(pid < id, "backward edge must point to an earlier node");
                match &mut before[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            bw(&g, &mut sink);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> Rc<Arr> {
        self.tape.value(self)
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Value of a 0-dimensional variable.
    pub fn scalar_value(self) -> f64 {
        let v = self.value();
        assert!(v.ndim() == 0, "scalar_value on non-scalar");
        *v.first().unwrap()
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unop(self, value: Arr, bw: impl Fn(&Arr, &Arr) -> Arr + 'static) -> Var<'t> {
        let id = self.id;
        let x = self.value();
        self.tape.push(
            value,
            Some(Box::new(move |g, sink| sink(id, bw(g, &x)))),
            self.requires_grad(),
        )
    }

    fn binop(
        self,
        rhs: Var<'t>,
        value: Arr,
        bw_l: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static,
        bw_r: impl Fn(&Arr, &Arr, &Arr) -> Arr + 'static,
    ) -> Var<'t> {
        let (lid, rid) = (self.id, rhs.id);
        let (need_l, need_r) = (self.requires_grad(), rhs.requires_grad());
        let (xl, xr) = (self.value(), rhs.value());
        self.tape.push(
            value,
            Some(Box::new(move |g, sink| {
                if need_l {
                    sink(lid, bw_l(g, &xl, &xr));
                }
                if need_r {
                    sink(rid, bw_r(g, &xl, &xr));
                }
            })),
            need_l || need_r,
        )
    }

    // ---- elementwise ----

    pub fn neg_v(self) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| -x), |g, _| g.mapv(|x| -x))
    }

    pub fn add_v(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binop(rhs, (&*a + &*b).into_dyn(), |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub_v(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binop(
            rhs,
            (&*a - &*b).into_dyn(),
            |g, _, _| g.clone(),
            |g, _, _| g.mapv(|x| -x),
        )
    }

    pub fn mul_v(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        self.binop(
            rhs,
            (&*a * &*b).into_dyn(),
            |g, _, b| g * b,
            |g, a, _| g * a,
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| x + s), |g, _| g.clone())
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| x * s), move |g, _| g.mapv(|x| x * s))
    }

    /// `s - x` elementwise.
    pub fn rsub_scalar(self, s: f64) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| s - x), |g, _| g.mapv(|x| -x))
    }

    pub fn sqr(self) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| x * x), |g, x| 2.0 * (g * x))
    }

    /// `x^p` for `x >= 0`. `p == 0` is the constant 1 with zero gradient.
    pub fn pow_scalar(self, p: f64) -> Var<'t> {
        let v = self.value();
        if p == 0.0 {
            let one = Arr::ones(v.raw_dim());
            return self.unop(one, |g, _| Arr::zeros(g.raw_dim()));
        }
        self.unop(v.mapv(|x| x.powf(p)), move |g, x| {
            g * &x.mapv(|x| p * x.powf(p - 1.0))
        })
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().mapv(f64::exp);
        let saved = out.clone();
        self.unop(out, move |g, _| g * &saved)
    }

    /// Natural log; caller guarantees positive input (clamp first).
    pub fn ln(self) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(f64::ln), |g, x| g / x)
    }

    /// `max(x, lo)`; gradient passes where `x >= lo`.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| x.max(lo)), move |g, x| {
            let mut out = g.clone();
            out.zip_mut_with(x, |gi, &xi| {
                if xi < lo {
                    *gi = 0.0;
                }
            });
            out
        })
    }

    pub fn recip(self) -> Var<'t> {
        let out = self.value().mapv(|x| 1.0 / x);
        let saved = out.clone();
        self.unop(out, move |g, _| -(g * &saved.mapv(|y| y * y)))
    }

    pub fn sqrt(self) -> Var<'t> {
        let out = self.value().mapv(f64::sqrt);
        let saved = out.clone();
        self.unop(out, move |g, _| {
            (g / &saved.mapv(|y| y.max(SQRT_GRAD_FLOOR))) * 0.5
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().mapv(f64::tanh);
        let saved = out.clone();
        self.unop(out, move |g, _| g * &saved.mapv(|y| 1.0 - y * y))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value();
        self.unop(v.mapv(|x| x.max(0.0)), |g, x| {
            let mut out = g.clone();
            out.zip_mut_with(x, |gi, &xi| {
                if xi <= 0.0 {
                    *gi = 0.0;
                }
            });
            out
        })
    }

    // ---- reductions ----

    pub fn sum_all(self) -> Var<'t> {
        let v = self.value();
        let shape = v.raw_dim();
        self.unop(Arr::from_elem(IxDyn(&[]), v.sum()), move |g, _| {
            Arr::from_elem(shape.clone(), *g.first().unwrap())
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let v = self.value();
        let n = v.len() as f64;
        let shape = v.raw_dim();
        self.unop(
            Arr::from_elem(IxDyn(&[]), v.sum() / n),
            move |g, _| Arr::from_elem(shape.clone(), *g.first().unwrap() / n),
        )
    }

    /// Column means of a 2-D array: `(r, c) -> (c)`.
    pub fn mean_axis0(self) -> Var<'t> {
        let v = self.value();
        let m = v.view().into_dimensionality::<Ix2>().unwrap();
        let rows = m.nrows() as f64;
        let (r, c) = (m.nrows(), m.ncols());
        let out = m.mean_axis(Axis(0)).unwrap().into_dyn();
        self.unop(out, move |g, _| {
            let gr = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[r, c]));
            let mut dxm = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
            for mut row in dxm.rows_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = gr[j] / rows;
                }
            }
            dx
        })
    }

    // ---- linear algebra ----

    /// Matrix product of 2-D arrays: `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let am = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let bm = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        assert_eq!(am.ncols(), bm.nrows(), "matmul: inner dimensions differ");
        let out = am.dot(&bm).into_dyn();
        self.binop(
            rhs,
            out,
            |g, _, b| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let bm = b.view().into_dimensionality::<Ix2>().unwrap();
                gm.dot(&bm.t()).into_dyn()
            },
            |g, a, _| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let am = a.view().into_dimensionality::<Ix2>().unwrap();
                am.t().dot(&gm).into_dyn()
            },
        )
    }

    /// Add a row vector to every row of a 2-D array.
    pub fn add_rowvec(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        let am = a.view().into_dimensionality::<Ix2>().unwrap();
        let bv = b.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(am.ncols(), bv.len(), "add_rowvec: width mismatch");
        let out = (&am + &bv).into_dyn();
        self.binop(
            bias,
            out,
            |g, _, _| g.clone(),
            |g, _, _| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                gm.sum_axis(Axis(0)).into_dyn()
            },
        )
    }

    /// Reshape preserving element order. Input must be standard layout.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        assert!(v.is_standard_layout(), "reshape requires standard layout");
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape: size mismatch");
        let old_shape: Vec<usize> = v.shape().to_vec();
        let out = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.unop(out, move |g, _| {
            g.clone().into_shape_with_order(IxDyn(&old_shape)).unwrap()
        })
    }

    // ---- gathers ----

    /// Select rows of a 2-D array: `(r, c)[idx] -> (k, c)`.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let v = self.value();
        let m = v.view().into_dimensionality::<Ix2>().unwrap();
        for &i in idx {
            assert!(i < m.nrows(), "gather_rows: index out of range");
        }
        let (r, c) = (m.nrows(), m.ncols());
        let mut out = Arr::zeros(IxDyn(&[idx.len(), c]));
        {
            let mut om = out.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (k, &i) in idx.iter().enumerate() {
                om.row_mut(k).assign(&m.row(i));
            }
        }
        let idx: Vec<usize> = idx.to_vec();
        self.unop(out, move |g, _| {
            let gm = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[r, c]));
            let mut dxm = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (k, &i) in idx.iter().enumerate() {
                let mut row = dxm.row_mut(i);
                row += &gm.row(k);
            }
            dx
        })
    }

    /// Pick one column per row: `out[i] = x[i, labels[i]]`.
    pub fn gather_label(self, labels: &[usize]) -> Var<'t> {
        let v = self.value();
        let m = v.view().into_dimensionality::<Ix2>().unwrap();
        let (r, c) = (m.nrows(), m.ncols());
        assert_eq!(labels.len(), r, "gather_label: one label per row");
        for &l in labels {
            assert!(l < c, "gather_label: label out of range");
        }
        let mut out = Arr::zeros(IxDyn(&[r]));
        for (i, &l) in labels.iter().enumerate() {
            out[i] = m[(i, l)];
        }
        let labels: Vec<usize> = labels.to_vec();
        self.unop(out, move |g, _| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[r, c]));
            for (i, &l) in labels.iter().enumerate() {
                dx[[i, l]] = gv[i];
            }
            dx
        })
    }

    // ---- softmax family ----

    /// Row-wise log-softmax of a 2-D array, computed via log-sum-exp.
    pub fn log_softmax(self) -> Var<'t> {
        let v = self.value();
        let m = v.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            row.mapv_inplace(|x| x - lse);
        }
        let saved = out.clone();
        self.unop(out.into_dyn(), move |g, _| {
            let gm = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = gm.to_owned();
            for (mut drow, (grow, yrow)) in
                dx.rows_mut().into_iter().zip(gm.rows().into_iter().zip(saved.rows()))
            {
                let gsum: f64 = grow.sum();
                for (d, &y) in drow.iter_mut().zip(yrow.iter()) {
                    *d -= y.exp() * gsum;
                }
            }
            dx.into_dyn()
        })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.add_v(rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.sub_v(rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.mul_v(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.neg_v()
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, s: f64) -> Var<'t> {
        self.add_scalar(s)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, s: f64) -> Var<'t> {
        self.mul_scalar(s)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        v.rsub_scalar(self)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v.mul_scalar(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn add_mul_backward() {
        let t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let y = ((a + b) * a).sum_all();
        assert_eq!(y.scalar_value(), 6.0 + 16.0 + 30.0 + 48.0);
        let g = t.backward(y);
        // d/da (a^2 + ab) = 2a + b
        let ga = g.get(a).unwrap();
        assert_eq!(ga[[0, 0]], 2.0 + 5.0);
        assert_eq!(ga[[1, 1]], 8.0 + 8.0);
        let gb = g.get(b).unwrap();
        assert_eq!(gb[[0, 1]], 2.0);
    }

    #[test]
    fn reuse_accumulates() {
        let t = Tape::new();
        let a = t.leaf(Arr::from_elem(IxDyn(&[3]), 2.0));
        let y = (a + a).sum_all();
        let g = t.backward(y);
        assert_eq!(g.get(a).unwrap()[[0]], 2.0);
    }

    #[test]
    fn constants_get_no_grad() {
        let t = Tape::new();
        let a = t.leaf(Arr::from_elem(IxDyn(&[2]), 3.0));
        let c = t.constant(Arr::from_elem(IxDyn(&[2]), 4.0));
        let y = (a * c).sum_all();
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap()[[1]], 4.0);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let y = x.log_softmax();
        let v = y.value();
        let s0: f64 = (0..3).map(|j| v[[0, j]].exp()).sum();
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!((v[[1, 0]] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_values() {
        let t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.leaf(arr2(&[[5.0], [6.0]]).into_dyn());
        let y = a.matmul(b);
        let v = y.value();
        assert_eq!(v[[0, 0]], 17.0);
        assert_eq!(v[[1, 0]], 39.0);
    }
}
