//! Reverse-mode differentiation over a linear tape.
//!
//! Every op pushes one node holding its value, its parent handles and a
//! closure that maps the upstream gradient to parent gradients. Nodes whose
//! parents are all constants carry no closure. `backward` walks the tape in
//! exact reverse execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(parent values, output value, upstream grad, which parents need a grad)`.
type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of a scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let pg = backward(&parents, &node.value, &g, &needs);
            for ((p, gp), need) in node.parents.iter().zip(pg).zip(&needs) {
                let (Some(gp), true) = (gp, *need) else { continue };
                debug_assert_eq!(gp.shape(), self.nodes[p.0].value.shape());
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&gp),
                    None => grads[p.0] = Some(gp),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && node.parents.is_empty() && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    // ---- structural ops ----

    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.push(out, &[x], Box::new(move |_, _, g, _| vec![Some(g.reshape(&in_shape).expect("reshape adjoint"))])))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(out, &[x], Box::new(move |_, _, g, _| vec![Some(g.permute(&inverse).expect("permute adjoint"))])))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |p, _, g, _| {
                let n = p[0].row_len();
                let mut gx = Tensor::zeros(p[0].shape());
                gx.data_mut()[start * n..end * n].copy_from_slice(g.data());
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&parts)?;
        Ok(self.push(
            out,
            xs,
            Box::new(|p, _, g, needs| {
                let mut off = 0;
                p.iter()
                    .zip(needs)
                    .map(|(t, &need)| {
                        let n = t.numel();
                        let r = need.then(|| Tensor::new(t.shape(), g.data()[off..off + n].to_vec()).expect("concat adjoint"));
                        off += n;
                        r
                    })
                    .collect()
            }),
        ))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Box::new(|_, _, g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], Box::new(|_, _, g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|p, _, g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |gv, bv| gv * bv).unwrap()),
                    needs[1].then(|| g.zip_map(p[0], |gv, av| gv * av).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Box::new(move |_, _, g, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, &[x], Box::new(|_, _, g, _| vec![Some(g.clone())]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(
            out,
            &[x],
            Box::new(|_, y, g, _| vec![Some(g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)).unwrap())]),
        )
    }

    /// Adds a per-channel vector along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if axis >= xs.len() || bs != [xs[axis]] {
            return Err(Error::shape("add_bias", &xs, &bs));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let ch = xs[axis];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % ch];
        }
        Ok(self.push(
            out,
            &[x, bias],
            Box::new(move |_, _, g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); ch];
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc[(i / inner) % ch] += gv;
                    }
                    Tensor::new(&[ch], acc).unwrap()
                });
                vec![Some(g.clone()), gb]
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Box::new(|p, _, g, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sums over the last axis; a rank-1 input reduces to shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let m = *xs.last().unwrap();
        let out_shape = if xs.len() > 1 { xs[..xs.len() - 1].to_vec() } else { vec![1] };
        let data: Vec<T> = self.value(x).data().chunks(m).map(|c| c.iter().fold(T::zero(), |a, &b| a + b)).collect();
        let out = Tensor::new(&out_shape, data).unwrap();
        self.push(
            out,
            &[x],
            Box::new(move |p, _, g, _| {
                let gd: Vec<T> = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
                vec![Some(Tensor::new(p[0].shape(), gd).unwrap())]
            }),
        )
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let m = *self.shape(x).last().unwrap();
        let s = self.sum_last(x);
        self.scale(s, T::one() / T::lit(m as f64))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|p, _, g, needs| {
                let (m, k) = (p[0].shape()[0], p[0].shape()[1]);
                let n = p[1].shape()[1];
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    tensor::matmul_a_bt(g.data(), p[1].data(), &mut d, m, k, n);
                    Tensor::new(&[m, k], d).unwrap()
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    tensor::matmul_at_b(p[0].data(), g.data(), &mut d, m, k, n);
                    Tensor::new(&[k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product of `B×M×K` and `B×K×N`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[bs, m, k], &[bs2, k2, n]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(Error::shape("bmm", &sa, &sb));
        };
        if bs != bs2 || k != k2 {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            tensor::matmul_into(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let out = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |p, _, g, needs| {
                let (ad, bd, gd) = (p[0].data(), p[1].data(), g.data());
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        tensor::matmul_a_bt(&gd[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], &mut d[i * m * k..(i + 1) * m * k], m, k, n);
                    }
                    Tensor::new(&[bs, m, k], d).unwrap()
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        tensor::matmul_at_b(&ad[i * m * k..(i + 1) * m * k], &gd[i * m * n..(i + 1) * m * n], &mut d[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                    Tensor::new(&[bs, k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Applies `w: K×N` to the last axis of `x: [..., K]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let rows = xs.iter().product::<usize>() / k;
        let x2 = self.reshape(x, &[rows, k])?;
        let y = self.matmul(x2, w)?;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        let out = tensor::conv2d_forward(self.value(x).data(), self.value(w).data(), &geo);
        let out = Tensor::new(&[geo.batch, geo.c_out, geo.h_out, geo.w_out], out)?;
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |p, _, g, needs| {
                let (dx, dw) = tensor::conv2d_backward(p[0].data(), p[1].data(), g.data(), &geo, needs[0], needs[1]);
                vec![
                    dx.map(|d| Tensor::new(p[0].shape(), d).unwrap()),
                    dw.map(|d| Tensor::new(p[1].shape(), d).unwrap()),
                ]
            }),
        ))
    }

    /// Same-padded depthwise convolution; `w` is `C×1×k×k` with odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[b, c, h, wd], &[cw, one, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("depthwise_conv2d", &xs, &ws));
        };
        if c != cw || one != 1 || kh != kw {
            return Err(Error::shape("depthwise_conv2d", &xs, &ws));
        }
        if kh % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel must be odd, got {kh}")));
        }
        let out = tensor::depthwise_forward(self.value(x).data(), self.value(w).data(), b, c, h, wd, kh);
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |p, _, g, _| {
                let (dx, dw) = tensor::depthwise_backward(p[0].data(), p[1].data(), g.data(), b, c, h, wd, kh);
                vec![Some(Tensor::new(p[0].shape(), dx).unwrap()), Some(Tensor::new(p[1].shape(), dw).unwrap())]
            }),
        ))
    }

    // ---- normalization ----

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let rows = xs.iter().product::<usize>() / c;
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        let xd = self.value(x).data();
        let inv_c = T::one() / T::lit(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = gm[j] * xh + bt[j];
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |_, _, g, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); rows * c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let i = r * c + j;
                        dg[j] += gd[i] * xhat[i];
                        db[j] += gd[i];
                        let dxh = gd[i] * gm[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        let i = r * c + j;
                        dx[i] = rstd[r] * (gd[i] * gm[j] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Some(Tensor::new(&xs, dx).unwrap()),
                    Some(Tensor::new(&[c], dg).unwrap()),
                    Some(Tensor::new(&[c], db).unwrap()),
                ]
            }),
        ))
    }

    /// Batch normalization over every axis except axis 1. With `running`
    /// set, the supplied statistics are used as constants (inference mode);
    /// otherwise batch statistics are used and returned.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T, running: Option<(&[T], &[T])>) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", &xs, &[0, 0]));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &xs, self.shape(gamma)));
        }
        let count = T::lit((b * inner) as f64);
        let xd = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        for &v in &xd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                            mean[ci] += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                for bi in 0..b {
                    for ci in 0..c {
                        for &v in &xd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                            var[ci] += (v - mean[ci]) * (v - mean[ci]);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / count);
                (mean, var)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ci = (i / inner) % c;
            *xh = (v - mean[ci]) * rstd[ci];
            *o = gm[ci] * *xh + bt[ci];
        }
        let frozen = running.is_some();
        let out = Tensor::new(&xs, out)?;
        let var_out = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |_, _, g, _| {
                let gd = g.data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut m1 = vec![T::zero(); c];
                let mut m2 = vec![T::zero(); c];
                for (i, &gv) in gd.iter().enumerate() {
                    let ci = (i / inner) % c;
                    dg[ci] += gv * xhat[i];
                    db[ci] += gv;
                    m1[ci] += gv * gm[ci];
                    m2[ci] += gv * gm[ci] * xhat[i];
                }
                let dx: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let ci = (i / inner) % c;
                        if frozen {
                            gv * gm[ci] * rstd[ci]
                        } else {
                            rstd[ci] * (gv * gm[ci] - m1[ci] / count - xhat[i] * m2[ci] / count)
                        }
                    })
                    .collect();
                vec![
                    Some(Tensor::new(&xs, dx).unwrap()),
                    Some(Tensor::new(&[c], dg).unwrap()),
                    Some(Tensor::new(&[c], db).unwrap()),
                ]
            }),
        );
        Ok((var_out, mean, var))
    }

    /// Divides each row of a matrix by its Euclidean norm; rows with norm
    /// below `eps` are divided by `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, m) = tensor::dims2(self.value(x), "l2_normalize_rows")?;
        let norms: Vec<T> = self
            .value(x)
            .data()
            .chunks(m)
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps))
            .collect();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v / norms[i / m];
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, y, g, _| {
                let mut dx = vec![T::zero(); n * m];
                for r in 0..n {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    if norms[r] > eps {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                        for j in 0..m {
                            dx[r * m + j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    } else {
                        for j in 0..m {
                            dx[r * m + j] = gr[j] / eps;
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, m], dx).unwrap())]
            }),
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = tensor::dims2(self.value(x), "softmax_rows")?;
        let out = Tensor::new(&[n, m], tensor::softmax_rows(self.value(x).data(), n, m))?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, s, g, _| {
                let mut dx = vec![T::zero(); n * m];
                for r in 0..n {
                    let sr = &s.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot = sr.iter().zip(gr).fold(T::zero(), |a, (&sv, &gv)| a + sv * gv);
                    for j in 0..m {
                        dx[r * m + j] = sr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(&[n, m], dx).unwrap())]
            }),
        ))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = tensor::dims2(self.value(x), "log_softmax_rows")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * m];
        for r in 0..n {
            let row = &xd[r * m..(r + 1) * m];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp()).ln();
            for j in 0..m {
                out[r * m + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, y, g, _| {
                let mut dx = vec![T::zero(); n * m];
                for r in 0..n {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let gs = gr.iter().fold(T::zero(), |a, &v| a + v);
                    for j in 0..m {
                        dx[r * m + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                vec![Some(Tensor::new(&[n, m], dx).unwrap())]
            }),
        ))
    }

    /// Picks `x[i, idx[i]]` from each row of a matrix.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = tensor::dims2(self.value(x), "gather_cols")?;
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(Error::Usage(format!("gather index out of range for a {n}x{m} matrix")));
        }
        let idx = idx.to_vec();
        let data: Vec<T> = idx.iter().enumerate().map(|(i, &j)| self.value(x).data()[i * m + j]).collect();
        let out = Tensor::new(&[n], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, _, g, _| {
                let mut dx = vec![T::zero(); n * m];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * m + j] = g.data()[i];
                }
                vec![Some(Tensor::new(&[n, m], dx).unwrap())]
            }),
        ))
    }

    /// `h_t = a_t ⊙ h_{t-1} + u_t` along axis 1 of `B×L×N` inputs, `h_{-1} = 0`.
    pub fn linear_recurrence(&mut self, a: Var, u: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let &[b, l, n] = s.as_slice() else {
            return Err(Error::shape("linear_recurrence", &s, self.shape(u)));
        };
        if self.shape(u) != s.as_slice() {
            return Err(Error::shape("linear_recurrence", &s, self.shape(u)));
        }
        let ad = self.value(a).data();
        let ud = self.value(u).data();
        let mut h = vec![T::zero(); b * l * n];
        for bi in 0..b {
            for t in 0..l {
                for k in 0..n {
                    let i = (bi * l + t) * n + k;
                    let prev = if t == 0 { T::zero() } else { h[i - n] };
                    h[i] = ad[i] * prev + ud[i];
                }
            }
        }
        let out = Tensor::new(&s, h)?;
        Ok(self.push(
            out,
            &[a, u],
            Box::new(move |p, h, g, _| {
                let (ad, hd, gd) = (p[0].data(), h.data(), g.data());
                let mut da = vec![T::zero(); b * l * n];
                let mut du = vec![T::zero(); b * l * n];
                for bi in 0..b {
                    for k in 0..n {
                        let mut carry = T::zero();
                        for t in (0..l).rev() {
                            let i = (bi * l + t) * n + k;
                            let gh = gd[i] + carry;
                            du[i] = gh;
                            da[i] = if t == 0 { T::zero() } else { gh * hd[i - n] };
                            carry = gh * ad[i];
                        }
                    }
                }
                vec![Some(Tensor::new(&s, da).unwrap()), Some(Tensor::new(&s, du).unwrap())]
            }),
        ))
    }

    /// Registers an op with a caller-supplied adjoint. Used by the spiking
    /// layers, whose backward is a surrogate rather than the true derivative.
    pub fn custom(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        self.push(value, parents, Box::new(backward))
    }
}

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

/// Compares tape gradients of a scalar function against central finite
/// differences with step `1e-4·(1+|x|)` at `points` randomly chosen input
/// coordinates. Coordinates where the one-sided slopes disagree (a kink of
/// a piecewise-linear op within one step) are resampled and counted.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], points: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
    };
    let mut attempts = 0;
    while report.checked < points && attempts < points * 20 {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let x = inputs[which].data()[flat];
        let h = 1e-4 * (1.0 + x.abs());
        let mut shifted = inputs.to_vec();
        shifted[which].data_mut()[flat] = x + h;
        let fp = eval(&shifted)?;
        shifted[which].data_mut()[flat] = x - h;
        let fm = eval(&shifted)?;
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() > 1e-2 * right.abs().max(left.abs()) && (right - left).abs() > 1e-6 {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.get(vars[which]).map_or(0.0, |g| g.data()[flat]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
