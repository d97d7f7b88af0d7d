use crate::error::{Error, Result};

use super::{Parameter, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Softmax { x: Var },
    Concat { a: Var, b: Var },
    /// `logits` is set when the probability input was produced by a softmax
    /// on this tape; the loss is then evaluated in fused log-softmax form
    /// and the backward pass writes straight into the logits.
    CrossEntropy { p: Var, labels: Vec<u8>, logits: Option<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, c: E },
    Reshape { x: Var },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Record of executed operations, replayed in reverse for gradients.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter's current value as a leaf.
    pub fn param(&mut self, p: &Parameter<E>) -> Var {
        self.leaf(p.value().clone())
    }

    pub fn value_of(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// was on the loss path.
    pub fn grad_of(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `out[b,o] = sum_i x[b,i] w[i,o] + b[o]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bsz, in_dim) = self.value_of(x).dims2("linear")?;
        let (w_in, out_dim) = self.value_of(w).dims2("linear")?;
        let bias = self.value_of(b);
        if w_in != in_dim {
            return Err(Error::shape(
                "linear",
                format!("input width {} vs weight rows {}", in_dim, w_in),
            ));
        }
        if bias.shape() != [out_dim] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} vs output width {}", bias.shape(), out_dim),
            ));
        }
        let xd = self.value_of(x).data();
        let wd = self.value_of(w).data();
        let bd = bias.data();
        let mut out = vec![E::zero(); bsz * out_dim];
        for bi in 0..bsz {
            let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
            let orow = &mut out[bi * out_dim..(bi + 1) * out_dim];
            orow.copy_from_slice(bd);
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[i * out_dim..(i + 1) * out_dim];
                for (o, wv) in wrow.iter().enumerate() {
                    orow[o] = orow[o] + xv * *wv;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![bsz, out_dim], out)?, Op::Linear { x, w, b }))
    }

    /// Valid cross-correlation, stride 1: `x[B,C,H,W] * k[F,C,KH,KW] + b[F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (bsz, c_in, h, w) = self.value_of(x).dims4("conv2d")?;
        let (f_out, kc, kh, kw) = self.value_of(k).dims4("conv2d")?;
        let bias = self.value_of(b);
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", c_in, kc),
            ));
        }
        if bias.shape() != [f_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} vs {} filters", bias.shape(), f_out),
            ));
        }
        if h < kh || w < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {}x{} smaller than kernel {}x{}", h, w, kh, kw),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xd = self.value_of(x).data();
        let kd = self.value_of(k).data();
        let bd = bias.data();
        let mut out = vec![E::zero(); bsz * f_out * oh * ow];
        for bi in 0..bsz {
            for f in 0..f_out {
                let oplane = &mut out[(bi * f_out + f) * oh * ow..(bi * f_out + f + 1) * oh * ow];
                for v in oplane.iter_mut() {
                    *v = bd[f];
                }
                for c in 0..c_in {
                    let xplane = &xd[(bi * c_in + c) * h * w..(bi * c_in + c + 1) * h * w];
                    let kplane = &kd[(f * c_in + c) * kh * kw..(f * c_in + c + 1) * kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = kplane[ky * kw + kx];
                            for oy in 0..oh {
                                let xrow = &xplane[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                                let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                                for i in 0..ow {
                                    orow[i] = orow[i] + kv * xrow[i];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![bsz, f_out, oh, ow], out)?, Op::Conv2d { x, k, b }))
    }

    /// 2x2 max pooling with stride 2. Gradient routes to the first maximum
    /// in row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (bsz, c, h, w) = self.value_of(x).dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("odd spatial dims {}x{}", h, w)));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value_of(x).data();
        let mut out = vec![E::zero(); bsz * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..bsz * c {
            let xplane = &xd[p * h * w..(p + 1) * h * w];
            let obase = p * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = xplane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if xplane[idx] > best {
                            best = xplane[idx];
                            best_idx = idx;
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = (p * h * w + best_idx) as u32;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![bsz, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value_of(x);
        let out = Tensor::from_fn(v.shape().to_vec(), |i| {
            let e = v.data()[i];
            if e > E::zero() {
                e
            } else {
                E::zero()
            }
        });
        self.push(out, Op::Relu { x })
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value_of(x);
        let (rows, cols) = softmax_rows(v)?;
        let xd = v.data();
        let mut out = vec![E::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let orow = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().fold(E::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = E::zero();
            for (o, &z) in orow.iter_mut().zip(row) {
                let e = (z - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x }))
    }

    /// Column-wise concatenation of `a[B,P]` and `b[B,Q]` into `[B,P+Q]`,
    /// `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value_of(a).dims2("concat")?;
        let (rb, cb) = self.value_of(b).dims2("concat")?;
        if ra != rb {
            return Err(Error::shape("concat", format!("batch sizes {} vs {}", ra, rb)));
        }
        let ad = self.value_of(a).data();
        let bd = self.value_of(b).data();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::Concat { a, b }))
    }

    /// Mean categorical cross-entropy of predicted distributions `p` against
    /// integer labels. When `p` comes from a softmax recorded on this tape
    /// the loss is computed from the pre-softmax logits (fused log-softmax);
    /// probabilities are never logged on that path.
    pub fn cross_entropy(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let v = self.value_of(p);
        let (rows, cols) = softmax_rows(v)?;
        if rows != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} rows vs {} labels", rows, labels.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::invalid("cross_entropy", "empty batch"));
        }
        for (i, &y) in labels.iter().enumerate() {
            if usize::from(y) >= cols {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {} at row {} out of range for {} classes", y, i, cols),
                ));
            }
        }
        let logits = match self.nodes[p.0].op {
            Op::Softmax { x } => Some(x),
            _ => None,
        };
        let inv_b = E::from_f64(1.0 / rows as f64);
        let mut total = E::zero();
        match logits {
            Some(z) => {
                let zd = self.value_of(z).data();
                for (r, &y) in labels.iter().enumerate() {
                    let row = &zd[r * cols..(r + 1) * cols];
                    let max = row.iter().fold(E::neg_infinity(), |m, &v| if v > m { v } else { m });
                    let mut sum = E::zero();
                    for &zv in row {
                        sum = sum + (zv - max).exp();
                    }
                    let lse = max + sum.ln();
                    total = total + (lse - row[usize::from(y)]);
                }
            }
            None => {
                let pd = self.value_of(p).data();
                for (r, &y) in labels.iter().enumerate() {
                    let pv = pd[r * cols + usize::from(y)].max(E::min_positive_value());
                    total = total - pv.ln();
                }
            }
        }
        let value = Tensor::scalar(total * inv_b);
        Ok(self.push(value, Op::CrossEntropy { p, labels: labels.to_vec(), logits }))
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value_of(a), self.value_of(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = Tensor::from_fn(va.shape().to_vec(), |i| va.data()[i] + vb.data()[i]);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let v = self.value_of(x);
        let out = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value_of(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} cannot view {} elements", shape, v.numel()),
            ));
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Reverse pass from a scalar loss. Fills gradients for every node on
    /// the loss path; may run once per recorded forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.value_of(loss).shape().to_vec();
        if self.value_of(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        self.consumed = true;
        self.grads[loss.0] = Some(Tensor::full(loss_shape, E::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.grads[idx].take() else { continue };
            self.propagate(idx, &gy);
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> &mut [E] {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        self.grads[v.0].as_mut().unwrap().data_mut()
    }

    fn propagate(&mut self, idx: usize, gy: &Tensor<E>) {
        // Ops only reference earlier nodes, so writing input gradients never
        // touches `gy`'s slot.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Linear { x, w, b } => {
                let (bsz, in_dim) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let out_dim = self.nodes[idx].value.shape()[1];
                let gyd = gy.data();

                self.ensure_grad(x);
                {
                    let wd = &self.nodes[w.0].value;
                    let mut gx = self.grads[x.0].take().unwrap();
                    let gxd = gx.data_mut();
                    let wdd = wd.data();
                    for bi in 0..bsz {
                        let gyrow = &gyd[bi * out_dim..(bi + 1) * out_dim];
                        let gxrow = &mut gxd[bi * in_dim..(bi + 1) * in_dim];
                        for i in 0..in_dim {
                            let wrow = &wdd[i * out_dim..(i + 1) * out_dim];
                            let mut acc = E::zero();
                            for o in 0..out_dim {
                                acc = acc + gyrow[o] * wrow[o];
                            }
                            gxrow[i] = gxrow[i] + acc;
                        }
                    }
                    self.grads[x.0] = Some(gx);
                }
                self.ensure_grad(w);
                {
                    let mut gw = self.grads[w.0].take().unwrap();
                    let gwd = gw.data_mut();
                    let xd = self.nodes[x.0].value.data();
                    for bi in 0..bsz {
                        let gyrow = &gyd[bi * out_dim..(bi + 1) * out_dim];
                        let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
                        for (i, &xv) in xrow.iter().enumerate() {
                            let gwrow = &mut gwd[i * out_dim..(i + 1) * out_dim];
                            for o in 0..out_dim {
                                gwrow[o] = gwrow[o] + xv * gyrow[o];
                            }
                        }
                    }
                    self.grads[w.0] = Some(gw);
                }
                let gb = self.ensure_grad(b);
                for bi in 0..bsz {
                    let gyrow = &gyd[bi * out_dim..(bi + 1) * out_dim];
                    for o in 0..out_dim {
                        gb[o] = gb[o] + gyrow[o];
                    }
                }
            }
            &Op::Conv2d { x, k, b } => {
                let (bsz, c_in, h, w) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (f_out, _, kh, kw) = {
                    let s = self.nodes[k.0].value.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let gyd = gy.data();

                let gb = self.ensure_grad(b);
                for bi in 0..bsz {
                    for f in 0..f_out {
                        let gyplane = &gyd[(bi * f_out + f) * oh * ow..(bi * f_out + f + 1) * oh * ow];
                        let mut acc = E::zero();
                        for &g in gyplane {
                            acc = acc + g;
                        }
                        gb[f] = gb[f] + acc;
                    }
                }

                self.ensure_grad(x);
                self.ensure_grad(k);
                let mut gx = self.grads[x.0].take().unwrap();
                let mut gk = self.grads[k.0].take().unwrap();
                {
                    let gxd = gx.data_mut();
                    let gkd = gk.data_mut();
                    let xd = self.nodes[x.0].value.data();
                    let kd = self.nodes[k.0].value.data();
                    for bi in 0..bsz {
                        for f in 0..f_out {
                            let gyplane =
                                &gyd[(bi * f_out + f) * oh * ow..(bi * f_out + f + 1) * oh * ow];
                            for c in 0..c_in {
                                let xplane = &xd[(bi * c_in + c) * h * w..(bi * c_in + c + 1) * h * w];
                                let gxplane =
                                    &mut gxd[(bi * c_in + c) * h * w..(bi * c_in + c + 1) * h * w];
                                let kbase = (f * c_in + c) * kh * kw;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let kv = kd[kbase + ky * kw + kx];
                                        let mut acc = E::zero();
                                        for oy in 0..oh {
                                            let xoff = (oy + ky) * w + kx;
                                            let gyrow = &gyplane[oy * ow..(oy + 1) * ow];
                                            let xrow = &xplane[xoff..xoff + ow];
                                            let gxrow = &mut gxplane[xoff..xoff + ow];
                                            for i in 0..ow {
                                                acc = acc + xrow[i] * gyrow[i];
                                                gxrow[i] = gxrow[i] + kv * gyrow[i];
                                            }
                                        }
                                        gkd[kbase + ky * kw + kx] = gkd[kbase + ky * kw + kx] + acc;
                                    }
                                }
                            }
                        }
                    }
                }
                self.grads[x.0] = Some(gx);
                self.grads[k.0] = Some(gk);
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let gyd = gy.data();
                let gx = self.ensure_grad(x);
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src as usize] = gx[src as usize] + gyd[o];
                }
            }
            &Op::Relu { x } => {
                let gyd = gy.data();
                self.ensure_grad(x);
                let mut gx = self.grads[x.0].take().unwrap();
                {
                    let xd = self.nodes[x.0].value.data();
                    let gxd = gx.data_mut();
                    for i in 0..gxd.len() {
                        if xd[i] > E::zero() {
                            gxd[i] = gxd[i] + gyd[i];
                        }
                    }
                }
                self.grads[x.0] = Some(gx);
            }
            &Op::Softmax { x } => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = softmax_rows(y).expect("validated at record time");
                let yd = y.data().to_vec();
                let gyd = gy.data();
                let gx = self.ensure_grad(x);
                for r in 0..rows {
                    let yrow = &yd[r * cols..(r + 1) * cols];
                    let gyrow = &gyd[r * cols..(r + 1) * cols];
                    let mut dot = E::zero();
                    for i in 0..cols {
                        dot = dot + gyrow[i] * yrow[i];
                    }
                    let gxrow = &mut gx[r * cols..(r + 1) * cols];
                    for i in 0..cols {
                        gxrow[i] = gxrow[i] + yrow[i] * (gyrow[i] - dot);
                    }
                }
            }
            &Op::Concat { a, b } => {
                let ca = self.nodes[a.0].value.shape()[1];
                let cb = self.nodes[b.0].value.shape()[1];
                let rows = self.nodes[a.0].value.shape()[0];
                let gyd = gy.data().to_vec();
                {
                    let ga = self.ensure_grad(a);
                    for r in 0..rows {
                        let grow = &gyd[r * (ca + cb)..r * (ca + cb) + ca];
                        let garow = &mut ga[r * ca..(r + 1) * ca];
                        for i in 0..ca {
                            garow[i] = garow[i] + grow[i];
                        }
                    }
                }
                let gb = self.ensure_grad(b);
                for r in 0..rows {
                    let grow = &gyd[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                    let gbrow = &mut gb[r * cb..(r + 1) * cb];
                    for i in 0..cb {
                        gbrow[i] = gbrow[i] + grow[i];
                    }
                }
            }
            Op::CrossEntropy { p, labels, logits } => {
                let p = *p;
                let labels = labels.clone();
                let logits = *logits;
                let g = gy.data()[0];
                let rows = labels.len();
                let inv_b = E::from_f64(1.0 / rows as f64);
                match logits {
                    Some(z) => {
                        // d/dz = (softmax(z) - onehot(y)) / B; softmax(z) is
                        // the already-computed probability node.
                        let pd = self.nodes[p.0].value.data().to_vec();
                        let cols = pd.len() / rows;
                        let gz = self.ensure_grad(z);
                        for (r, &y) in labels.iter().enumerate() {
                            let prow = &pd[r * cols..(r + 1) * cols];
                            let gzrow = &mut gz[r * cols..(r + 1) * cols];
                            for i in 0..cols {
                                let delta = if i == usize::from(y) { E::one() } else { E::zero() };
                                gzrow[i] = gzrow[i] + g * inv_b * (prow[i] - delta);
                            }
                        }
                    }
                    None => {
                        let pd = self.nodes[p.0].value.data().to_vec();
                        let cols = pd.len() / rows;
                        let gp = self.ensure_grad(p);
                        for (r, &y) in labels.iter().enumerate() {
                            let yi = usize::from(y);
                            let pv = pd[r * cols + yi].max(E::min_positive_value());
                            gp[r * cols + yi] = gp[r * cols + yi] - g * inv_b / pv;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                let gyd = gy.data().to_vec();
                {
                    let ga = self.ensure_grad(a);
                    for i in 0..gyd.len() {
                        ga[i] = ga[i] + gyd[i];
                    }
                }
                let gb = self.ensure_grad(b);
                for i in 0..gyd.len() {
                    gb[i] = gb[i] + gyd[i];
                }
            }
            &Op::Scale { x, c } => {
                let gyd = gy.data().to_vec();
                let gx = self.ensure_grad(x);
                for i in 0..gyd.len() {
                    gx[i] = gx[i] + c * gyd[i];
                }
            }
            &Op::Reshape { x } => {
                let gyd = gy.data().to_vec();
                let gx = self.ensure_grad(x);
                for i in 0..gyd.len() {
                    gx[i] = gx[i] + gyd[i];
                }
            }
        }
    }
}

fn softmax_rows<E: Scalar>(t: &Tensor<E>) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [k] => Ok((1, k)),
        [b, k] => Ok((b, k)),
        _ => Err(Error::shape("softmax", format!("expected rank 1 or 2, got {:?}", t.shape()))),
    }
}
