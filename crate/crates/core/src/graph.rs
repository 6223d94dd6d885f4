//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is an eager tape: every operation computes its value
//! immediately and records a closure that maps the output cotangent to
//! cotangents of its parents. Values are generic over [`El`] so the same
//! model code runs in f32 for training and f64 for finite-difference
//! verification.

use ndarray::prelude::*;
use ndarray::{concatenate, LinalgScalar, ScalarOperand};
use std::ops::Range;
use std::rc::Rc;

/// Element type for tensors: f32 or f64.
pub trait El:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn cast_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).unwrap()
    }
    fn to_f64(self) -> f64;
}

impl El for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl El for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

pub type Arr<F> = ArrayD<F>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&Arr<F>) -> Vec<(usize, Arr<F>)>>;

struct Node<F> {
    value: Rc<Arr<F>>,
    back: Option<BackFn<F>>,
}

pub struct Graph<F: El> {
    nodes: Vec<Node<F>>,
}

/// Cotangents produced by [`Graph::backward`], indexed by `Var`.
pub struct Gradients<F: El> {
    grads: Vec<Option<Arr<F>>>,
}

impl<F: El> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Arr<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn as2<F: El>(a: &Arr<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn as1<F: El>(a: &Arr<F>) -> ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("1-d tensor")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: El> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr<F>, back: Option<BackFn<F>>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Arr<F>) -> Var {
        self.push(value, None)
    }

    /// Non-differentiable input. Identical to `leaf` except in intent;
    /// gradients simply stop here.
    pub fn constant(&mut self, value: Arr<F>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Arr<F> {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Arr<F>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar (0-d or single-element) output.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        let seed = Arr::ones(self.value(out).raw_dim());
        self.backward_with(out, seed)
    }

    /// Reverse pass seeded with an explicit cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: Arr<F>) -> Gradients<F> {
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape");
        let mut grads: Vec<Option<Arr<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise, same shape ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g.clone()), (b.0, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g.clone()), (b.0, g.mapv(|x| -x))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let v = &*av * &*bv;
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g * &*bv), (b.0, g * &*av)]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let v = &*av / &*bv;
        self.push(
            v,
            Some(Box::new(move |g| {
                let ga = g / &*bv;
                let gb = -(g * &*av) / (&*bv * &*bv);
                vec![(a.0, ga), (b.0, gb)]
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Some(Box::new(move |g| vec![(a.0, g.mapv(|x| -x))])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::cast_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Some(Box::new(move |g| vec![(a.0, g.mapv(|x| x * c))])))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::cast_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Some(Box::new(move |g| vec![(a.0, g.clone())])))
    }

    /// Elementwise multiplication with a constant array (no gradient to it).
    pub fn mul_const(&mut self, a: Var, c: Arr<F>) -> Var {
        let c = Rc::new(c);
        let v = &*self.nodes[a.0].value * &*c;
        self.push(v, Some(Box::new(move |g| vec![(a.0, g * &*c)])))
    }

    pub fn add_const(&mut self, a: Var, c: Arr<F>) -> Var {
        let v = &*self.nodes[a.0].value + &c;
        self.push(v, Some(Box::new(move |g| vec![(a.0, g.clone())])))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        let vr = Rc::new(v.clone());
        self.push(v, Some(Box::new(move |g| vec![(a.0, g * &*vr)])))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let v = av.mapv(|x| x.ln());
        self.push(v, Some(Box::new(move |g| vec![(a.0, g / &*av)])))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let vr = Rc::new(v.clone());
        let half = F::cast_f64(0.5);
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g / &vr.mapv(|y| y / half))]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let vr = Rc::new(v.clone());
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g * &vr.mapv(|t| F::one() - t * t))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let vr = Rc::new(v.clone());
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g * &vr.mapv(|s| s * (F::one() - s)))]
            })),
        )
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let c = F::cast_f64(GELU_C);
        let k = F::cast_f64(GELU_A);
        let half = F::cast_f64(0.5);
        let one = F::one();
        let v = av.mapv(|x| half * x * (one + (c * (x + k * x * x * x)).tanh()));
        self.push(
            v,
            Some(Box::new(move |g| {
                let three = F::cast_f64(3.0);
                let d = av.mapv(|x| {
                    let inner = c * (x + k * x * x * x);
                    let t = inner.tanh();
                    half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x)
                });
                vec![(a.0, g * &d)]
            })),
        )
    }

    /// Identity in value, blocks the gradient.
    pub fn stopgrad(&mut self, a: Var) -> Var {
        let v = (*self.nodes[a.0].value).clone();
        self.push(v, None)
    }

    // ---- linear algebra (2-d) ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.rc(a);
        let bv = self.rc(b);
        let v = as2(&av).dot(&as2(&bv)).into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let ga = g2.dot(&as2(&bv).t()).into_dyn();
                let gb = as2(&av).t().dot(&g2).into_dyn();
                vec![(a.0, ga), (b.0, gb)]
            })),
        )
    }

    /// `R · x` with a constant left matrix (e.g. a bilinear resampling map).
    pub fn matmul_const_left(&mut self, r: Array2<F>, x: Var) -> Var {
        let xv = self.rc(x);
        let r = Rc::new(r);
        let v = r.dot(&as2(&xv)).into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(x.0, r.t().dot(&as2(g)).into_dyn())]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, as2(g).t().to_owned().into_dyn())]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
        let v = self.nodes[a.0]
            .value
            .to_shape(shape)
            .expect("reshape size")
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |g| {
                vec![(a.0, g.to_shape(&old[..]).unwrap().to_owned())]
            })),
        )
    }

    /// Row-broadcast bias: `x[i, j] + b[j]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let v = &as2(&self.nodes[x.0].value) + &as1(&self.nodes[b.0].value);
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g| {
                let gb = as2(g).sum_axis(Axis(0)).into_dyn();
                vec![(x.0, g.clone()), (b.0, gb)]
            })),
        )
    }

    /// `x · w + b`, row-major batch of inputs.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Scale row `i` of `x` by `v[i]`.
    pub fn mul_colvec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.rc(x);
        let vv = self.rc(v);
        let out = &as2(&xv) * &as1(&vv).insert_axis(Axis(1));
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let gx = (&g2 * &as1(&vv).insert_axis(Axis(1))).into_dyn();
                let gv = (&g2 * &as2(&xv)).sum_axis(Axis(1)).into_dyn();
                vec![(x.0, gx), (v.0, gv)]
            })),
        )
    }

    /// Divide row `i` of `x` by `v[i]`.
    pub fn div_colvec(&mut self, x: Var, v: Var) -> Var {
        let xv = self.rc(x);
        let vv = self.rc(v);
        let out = &as2(&xv) / &as1(&vv).insert_axis(Axis(1));
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let vcol = as1(&vv).insert_axis(Axis(1)).to_owned();
                let gx = (&g2 / &vcol).into_dyn();
                let gv = (-(&g2 * &as2(&xv)) / (&vcol * &vcol))
                    .sum_axis(Axis(1))
                    .into_dyn();
                vec![(x.0, gx), (v.0, gv)]
            })),
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let v = as2(&self.nodes[x.0].value).sum_axis(Axis(axis)).into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                let g1 = as1(g);
                let mut out = Array2::<F>::zeros((shape[0], shape[1]));
                if axis == 0 {
                    for mut row in out.rows_mut() {
                        row.assign(&g1);
                    }
                } else {
                    for (mut row, &gi) in out.rows_mut().into_iter().zip(g1.iter()) {
                        row.fill(gi);
                    }
                }
                vec![(x.0, out.into_dyn())]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let s = self.nodes[x.0].value.sum();
        let v = Arr::from_elem(IxDyn(&[]), s);
        self.push(
            v,
            Some(Box::new(move |g| {
                let gs = *g.first().unwrap();
                vec![(x.0, Arr::from_elem(&shape[..], gs))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let x2 = as2(&self.nodes[x.0].value).to_owned();
        let mut v = x2.clone();
        let lanes_axis = Axis(axis);
        for mut lane in v.lanes_mut(lanes_axis) {
            let m = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            lane.mapv_inplace(|e| (e - m).exp());
            let s: F = lane.iter().cloned().sum();
            lane.mapv_inplace(|e| e / s);
        }
        let vr = Rc::new(v.clone());
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gx = (&g2 * &*vr).to_owned();
                // subtract per-lane inner product
                let dot = (&g2 * &*vr).sum_axis(Axis(axis));
                let dot = dot.insert_axis(Axis(axis));
                gx = gx - &(&*vr * &dot);
                vec![(x.0, gx.into_dyn())]
            })),
        )
    }

    /// Numerically stable log-sum-exp over each row of a 2-d tensor.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let x2 = as2(&self.nodes[x.0].value).to_owned();
        let n = x2.nrows();
        let mut out = Array1::<F>::zeros(n);
        let mut soft = x2.clone();
        for (i, row) in x2.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&e| (e - m).exp()).sum();
            out[i] = m + s.ln();
            let mut sr = soft.row_mut(i);
            sr.mapv_inplace(|e| (e - m).exp() / s);
        }
        let soft = Rc::new(soft);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g1 = as1(g).insert_axis(Axis(1)).to_owned();
                vec![(x.0, (&*soft * &g1).into_dyn())]
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, r: Range<usize>) -> Var {
        let shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let v = as2(&self.nodes[x.0].value)
            .slice(s![r.start..r.end, ..])
            .to_owned()
            .into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                let mut out = Array2::<F>::zeros((shape[0], shape[1]));
                out.slice_mut(s![r.start..r.end, ..]).assign(&as2(g));
                vec![(x.0, out.into_dyn())]
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, r: Range<usize>) -> Var {
        let shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let v = as2(&self.nodes[x.0].value)
            .slice(s![.., r.start..r.end])
            .to_owned()
            .into_dyn();
        self.push(
            v,
            Some(Box::new(move |g| {
                let mut out = Array2::<F>::zeros((shape[0], shape[1]));
                out.slice_mut(s![.., r.start..r.end]).assign(&as2(g));
                vec![(x.0, out.into_dyn())]
            })),
        )
    }

    /// Gather rows by (possibly repeating) indices; backward scatter-adds.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let x2 = as2(&self.nodes[x.0].value);
        let mut v = Array2::<F>::zeros((idx.len(), shape[1]));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&x2.row(i));
        }
        let idx: Vec<usize> = idx.to_vec();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut out = Array2::<F>::zeros((shape[0], shape[1]));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = out.row_mut(i);
                    dst += &g2.row(r);
                }
                vec![(x.0, out.into_dyn())]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let v = concatenate(Axis(0), &views).unwrap().into_dyn();
        let sizes: Vec<usize> = views.iter().map(|w| w.nrows()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&id, &n) in ids.iter().zip(&sizes) {
                    out.push((id, g2.slice(s![off..off + n, ..]).to_owned().into_dyn()));
                    off += n;
                }
                out
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let v = concatenate(Axis(1), &views).unwrap().into_dyn();
        let sizes: Vec<usize> = views.iter().map(|w| w.ncols()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&id, &n) in ids.iter().zip(&sizes) {
                    out.push((id, g2.slice(s![.., off..off + n]).to_owned().into_dyn()));
                    off += n;
                }
                out
            })),
        )
    }

    /// Add `p` ([N, D]) to every consecutive N-row block of `x` ([V*N, D]).
    pub fn add_tile_rows(&mut self, x: Var, p: Var) -> Var {
        let pshape: Vec<usize> = self.nodes[p.0].value.shape().to_vec();
        let n = pshape[0];
        let xv = self.rc(x);
        let pv = self.rc(p);
        let x2 = as2(&xv);
        let rows = x2.nrows();
        assert_eq!(rows % n, 0, "tiled rows must divide");
        let mut v = x2.to_owned();
        for mut block in v.exact_chunks_mut((n, pshape[1])) {
            block += &as2(&pv);
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gp = Array2::<F>::zeros((n, pshape[1]));
                for block in g2.exact_chunks((n, pshape[1])) {
                    gp += &block;
                }
                vec![(x.0, g.clone()), (p.0, gp.into_dyn())]
            })),
        )
    }

    /// Multiply every consecutive N-row block of `x` ([V*N, D]) elementwise
    /// by `p` ([N, D]).
    pub fn mul_tile_rows(&mut self, x: Var, p: Var) -> Var {
        let pshape: Vec<usize> = self.nodes[p.0].value.shape().to_vec();
        let n = pshape[0];
        let xv = self.rc(x);
        let pv = self.rc(p);
        let x2 = as2(&xv);
        let rows = x2.nrows();
        assert_eq!(rows % n, 0, "tiled rows must divide");
        let mut v = x2.to_owned();
        for mut block in v.exact_chunks_mut((n, pshape[1])) {
            block *= &as2(&pv);
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let p2 = as2(&pv);
                let x2 = as2(&xv);
                let mut gx = g2.to_owned();
                for mut block in gx.exact_chunks_mut((n, pshape[1])) {
                    block *= &p2;
                }
                let mut gp = Array2::<F>::zeros((n, pshape[1]));
                for (gblock, xblock) in g2
                    .exact_chunks((n, pshape[1]))
                    .into_iter()
                    .zip(x2.exact_chunks((n, pshape[1])))
                {
                    gp += &(&gblock * &xblock);
                }
                vec![(x.0, gx.into_dyn()), (p.0, gp.into_dyn())]
            })),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.rc(x);
        let gv = self.rc(gamma);
        let x2 = as2(&xv);
        let d = x2.ncols();
        let dn = F::cast_f64(d as f64);
        let eps = F::cast_f64(eps);
        let mut xhat = x2.to_owned();
        let mut inv = Array1::<F>::zeros(x2.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.iter().cloned().sum::<F>() / dn;
            row.mapv_inplace(|e| e - mean);
            let var = row.iter().map(|&e| e * e).sum::<F>() / dn;
            let iv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|e| e * iv);
            inv[i] = iv;
        }
        let out = (&xhat * &as1(&gv)) + &as1(&self.nodes[beta.0].value);
        let xhat = Rc::new(xhat);
        let inv = Rc::new(inv);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let dgamma = (&g2 * &*xhat).sum_axis(Axis(0)).into_dyn();
                let dbeta = g2.sum_axis(Axis(0)).into_dyn();
                let dxhat = &g2 * &as1(&gv);
                let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                let sum_dxhat_xhat = (&dxhat * &*xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                let invcol = inv.view().insert_axis(Axis(1)).to_owned();
                let dx = (&(dxhat.mapv(|e| e * dn)) - &sum_dxhat - &(&*xhat * &sum_dxhat_xhat))
                    * &invcol.mapv(|e| e / dn);
                vec![(x.0, dx.into_dyn()), (gamma.0, dgamma), (beta.0, dbeta)]
            })),
        )
    }

    /// Scaled dot-product attention: `softmax(q·kᵀ·scale)·v`.
    ///
    /// Returns the output and the attention matrix as a plain value for
    /// inspection; gradients flow to q, k and v.
    pub fn sdpa(&mut self, q: Var, k: Var, v: Var, scale: f64) -> (Var, Array2<F>) {
        let qv = self.rc(q);
        let kv = self.rc(k);
        let vv = self.rc(v);
        let sc = F::cast_f64(scale);
        let mut logits = as2(&qv).dot(&as2(&kv).t());
        logits.mapv_inplace(|e| e * sc);
        let mut attn = logits;
        for mut row in attn.rows_mut() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s: F = row.iter().cloned().sum();
            row.mapv_inplace(|e| e / s);
        }
        let out = attn.dot(&as2(&vv)).into_dyn();
        let attn_out = attn.clone();
        let attn = Rc::new(attn);
        let var = self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let dv = attn.t().dot(&g2).into_dyn();
                let da = g2.dot(&as2(&vv).t());
                // softmax backward per row
                let dot = (&da * &*attn).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (&da - &dot) * &*attn; // d logits (already scaled)
                let dq = (ds.dot(&as2(&kv))).mapv(|e| e * sc).into_dyn();
                let dk = (ds.t().dot(&as2(&qv))).mapv(|e| e * sc).into_dyn();
                vec![(q.0, dq), (k.0, dk), (v.0, dv)]
            })),
        );
        (var, attn_out)
    }
}

impl<F: El> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr<f64> {
        Arr::from_shape_fn(shape, |_| {
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-10..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    }

    /// Central finite differences against analytic gradients for a scalar
    /// function of several leaves.
    fn check_grads(
        inputs: &[Arr<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let out = f(&mut g, &vars);
        assert_eq!(g.value(out).len(), 1, "scalar output expected");
        let grads = g.backward(out);
        let eps = 1e-6;
        for (ii, a) in inputs.iter().enumerate() {
            let ga = grads.get(vars[ii]).cloned().unwrap_or_else(|| Arr::zeros(a.raw_dim()));
            for flat in 0..a.len() {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap.as_slice_mut().unwrap()[flat] += eps;
                am.as_slice_mut().unwrap()[flat] -= eps;
                let eval = |arr: &Arr<f64>| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, b)| g2.leaf(if j == ii { arr.clone() } else { b.clone() }))
                        .collect();
                    let o = f(&mut g2, &vs);
                    *g2.value(o).first().unwrap()
                };
                let fd = (eval(&ap) - eval(&am)) / (2.0 * eps);
                let an = ga.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-2);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {} elem {}: fd={} analytic={}",
                    ii,
                    flat,
                    fd,
                    an
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        check_grads(&[a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1]);
            let d = g.div(m, v[1]);
            let s = g.sub(d, v[0]);
            let t = g.add(s, v[1]);
            let u = g.tanh(t);
            let w = g.sigmoid(u);
            let x = g.gelu(w);
            g.mean_all(x)
        }, 1e-6);
    }

    #[test]
    fn exp_ln_sqrt_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[2, 3]).mapv(|x| x.abs() + 0.5);
        check_grads(&[a], |g, v| {
            let e = g.exp(v[0]);
            let l = g.ln(e);
            let s = g.sqrt(l);
            g.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn matmul_linear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[4, 3]);
        let w = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5]);
        check_grads(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let y = g.gelu(y);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn softmax_logsumexp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[4, 5]);
        check_grads(&[x.clone()], |g, v| {
            let s0 = g.softmax_axis(v[0], 0);
            let s1 = g.softmax_axis(s0, 1);
            let l = g.logsumexp_rows(s1);
            let twice = g.mul(l, l);
            g.mean_all(twice)
        }, 1e-6);
    }

    #[test]
    fn layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 6]);
        let gamma = randn(&mut rng, &[6]).mapv(|v| v + 2.0);
        let beta = randn(&mut rng, &[6]);
        check_grads(&[x, gamma, beta], |g, v| {
            let y = g.layernorm_rows(v[0], v[1], v[2], 1e-5);
            let y = g.tanh(y);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn sdpa_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = randn(&mut rng, &[3, 4]);
        let k = randn(&mut rng, &[5, 4]);
        let v = randn(&mut rng, &[5, 4]);
        check_grads(&[q, k, v], |g, vs| {
            let (o, _) = g.sdpa(vs[0], vs[1], vs[2], 0.5);
            g.mean_all(o)
        }, 1e-6);
    }

    #[test]
    fn sdpa_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = randn(&mut rng, &[6, 4]);
        let k = randn(&mut rng, &[9, 4]);
        let v = randn(&mut rng, &[9, 4]);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.leaf(q), g.leaf(k), g.leaf(v));
        let (_, attn) = g.sdpa(qv, kv, vv, 0.5);
        for row in attn.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[6, 4]);
        let p = randn(&mut rng, &[3, 4]);
        check_grads(&[x.clone(), p.clone()], |g, v| {
            let t = g.add_tile_rows(v[0], v[1]);
            let a = g.slice_rows(t, 1..5);
            let b = g.slice_cols(a, 0..3);
            let c = g.select_rows(b, &[0, 0, 2, 3]);
            let d = g.concat_rows(&[c, c]);
            let e = g.concat_cols(&[d, d]);
            let f = g.transpose(e);
            let r = g.reshape(f, &[6, 8]);
            g.mean_all(r)
        }, 1e-6);
    }

    #[test]
    fn colvec_sumaxis_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[4, 5]);
        let v = randn(&mut rng, &[4]).mapv(|e| e.abs() + 0.5);
        check_grads(&[x, v], |g, vs| {
            let a = g.mul_colvec(vs[0], vs[1]);
            let b = g.div_colvec(a, vs[1]);
            let c = g.sum_axis(b, 1);
            let d = g.sum_axis(vs[0], 0);
            let e = g.mul(c, c);
            let s1 = g.sum_all(e);
            let s2 = g.sum_all(d);
            g.add(s1, s2)
        }, 1e-6);
    }

    #[test]
    fn stopgrad_blocks() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Arr::from_elem(IxDyn(&[2, 2]), 3.0));
        let y = g.stopgrad(x);
        let z = g.mul(y, y);
        let out = g.sum_all(z);
        let grads = g.backward(out);
        assert!(grads.get(x).is_none());
    }
}
