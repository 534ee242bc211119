use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor in its owning parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, stride: usize, pad: usize },
    Relu { x: Var, capture: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AvgPool3 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

/// Wengert list of one forward pass.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    training: bool,
    swept: bool,
}

/// Gradients produced by one backward sweep.
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }

    /// Gradient with respect to any recorded value (None if it does not reach the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dims4(t: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *t {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape { op, lhs: t.to_vec(), rhs: vec![0; 4] }),
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + k - pad` falls inside `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k { (in_len + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

impl<T: Real> Tape<T> {
    /// `training` enables the batch-size guard in batch normalization.
    pub fn new(training: bool) -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), training, swept: false }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite output at tape node {}", self.values.len())));
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input (no gradient is reported for it by parameter id).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        self.values.push(t.clone());
        self.ops.push(Op::Param(id));
        Var(self.values.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [n, cin, h, wd] = dims4(&xs, "conv2d")?;
        let [cout, wcin, kh, kw] = dims4(&ws, "conv2d")?;
        if wcin != cin || kh != kw || kh % 2 == 0 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape { op: "conv2d", lhs: xs, rhs: ws });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for b in 0..n {
            for co in 0..cout {
                let o = &mut out[(b * cout + co) * ho * wo..][..ho * wo];
                for ci in 0..cin {
                    let plane = &xd[(b * cin + ci) * h * wd..][..h * wd];
                    let kern = &wdat[(co * cin + ci) * kh * kw..][..kh * kw];
                    for ki in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(ho, h, ki, stride, pad);
                        for kj in 0..kw {
                            let wv = kern[ki * kw + kj];
                            let (ow_lo, ow_hi) = valid_range(wo, wd, kj, stride, pad);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ki - pad;
                                let row = &plane[ih * wd..][..wd];
                                let orow = &mut o[oh * wo..][..wo];
                                for ow in ow_lo..ow_hi {
                                    orow[ow] += wv * row[ow * stride + kj - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        self.push(value, Op::Conv { x, w, stride, pad })
    }

    /// ReLU whose sign pattern is reported by [`Tape::activation_patterns`].
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.relu_with(x, true)
    }

    /// ReLU excluded from activation-pattern capture.
    pub fn relu_uncaptured(&mut self, x: Var) -> Result<Var> {
        self.relu_with(x, false)
    }

    fn relu_with(&mut self, x: Var, capture: bool) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x, capture })
    }

    /// Per-channel batch normalization with current-batch statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, h, w] = dims4(&xs, "batchnorm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: xs,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        if self.training && n < 2 {
            return Err(Error::Validation("batchnorm in training mode needs a batch of at least 2".into()));
        }
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut mean = T::zero();
            for b in 0..n {
                mean += xd[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            mean = mean / m;
            let mut var = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * hw..][..hw] {
                    var += (v - mean) * (v - mean);
                }
            }
            var = var / m;
            let is = (var + T::BN_EPS).sqrt().recip();
            inv_std[ch] = is;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std })
    }

    /// 3x3 average pooling, stride 1, padding 1, padded cells excluded from the mean.
    pub fn avgpool3x3(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, h, w] = dims4(&xs, "avgpool")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for p in 0..n * c {
            let plane = &xd[p * h * w..][..h * w];
            let o = &mut out[p * h * w..][..h * w];
            for i in 0..h {
                let (i0, i1) = (i.saturating_sub(1), (i + 2).min(h));
                for j in 0..w {
                    let (j0, j1) = (j.saturating_sub(1), (j + 2).min(w));
                    let mut s = T::zero();
                    for a in i0..i1 {
                        for bb in j0..j1 {
                            s += plane[a * w + bb];
                        }
                    }
                    o[i * w + j] = s / T::of(((i1 - i0) * (j1 - j0)) as f64);
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::AvgPool3 { x })
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, h, w] = dims4(&xs, "global_avgpool")?;
        let hw = T::of((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool { x })
    }

    /// `x [N, F] * w[O, F]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, f, o) = match (xs.as_slice(), ws.as_slice()) {
            ([n, f], [o, f2]) if f == f2 && self.value(b).shape() == [*o] => (*n, *f, *o),
            _ => return Err(Error::Shape { op: "linear", lhs: xs, rhs: ws }),
        };
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            let xr = &xd[r * f..][..f];
            for k in 0..o {
                let wr = &wd[k * f..][..f];
                out[r * o + k] = bd[k] + xr.iter().zip(wr).map(|(&a, &bb)| a * bb).sum::<T>();
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        let (n, c) = match ls.as_slice() {
            [n, c] if *n == labels.len() && *n > 0 => (*n, *c),
            _ => return Err(Error::Shape { op: "cross_entropy", lhs: ls, rhs: vec![labels.len()] }),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &ld[r * c..][..c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for k in 0..c {
                probs[r * c + k] = (row[k] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        let value = Tensor::scalar(loss / T::of(n as f64));
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Binary sign pattern of every captured ReLU, one pattern per batch sample.
    pub fn activation_patterns(&self) -> Vec<Vec<bool>> {
        let mut patterns: Vec<Vec<bool>> = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Relu { x, capture: true } = op {
                let t = &self.values[x.0];
                let n = t.shape()[0];
                if patterns.is_empty() {
                    patterns = vec![Vec::new(); n];
                }
                let per = t.len() / n;
                let out = self.values[i].data();
                for (s, pat) in patterns.iter_mut().enumerate() {
                    pat.extend(out[s * per..][..per].iter().map(|&v| v > T::zero()));
                }
            }
        }
        patterns
    }

    /// Reverse sweep from a scalar loss. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.swept {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape { op: "backward", lhs: self.value(loss).shape().to_vec(), rhs: vec![1] });
        }
        self.swept = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv { x, w, stride, pad } => {
                    let (gx, gw) = self.conv_backward(*x, *w, *stride, *pad, &gout);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Relu { x, .. } => {
                    let out = self.values[i].data();
                    let g = gout
                        .data()
                        .iter()
                        .zip(out)
                        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(gout.shape().to_vec(), g)?);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let [n, c, h, w] = dims4(gout.shape(), "batchnorm")?;
                    let hw = h * w;
                    let m = T::of((n * hw) as f64);
                    let gd = gout.data();
                    let gam = self.values[gamma.0].data();
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ch in 0..c {
                        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for k in base..base + hw {
                                sdy += gd[k];
                                sdyx += gd[k] * xhat[k];
                            }
                        }
                        dbeta[ch] = sdy;
                        dgamma[ch] = sdyx;
                        let scale = gam[ch] * inv_std[ch] / m;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for k in base..base + hw {
                                dx[k] = scale * (m * gd[k] - sdy - xhat[k] * sdyx);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(gout.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Op::AvgPool3 { x } => {
                    let [n, c, h, w] = dims4(gout.shape(), "avgpool")?;
                    let gd = gout.data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for p in 0..n * c {
                        let g = &gd[p * h * w..][..h * w];
                        let d = &mut dx[p * h * w..][..h * w];
                        for i in 0..h {
                            let (i0, i1) = (i.saturating_sub(1), (i + 2).min(h));
                            for j in 0..w {
                                let (j0, j1) = (j.saturating_sub(1), (j + 2).min(w));
                                let share = g[i * w + j] / T::of(((i1 - i0) * (j1 - j0)) as f64);
                                for a in i0..i1 {
                                    for bb in j0..j1 {
                                        d[a * w + bb] += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(gout.shape().to_vec(), dx)?);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.values[x.0].shape().to_vec();
                    let hw = xs[2] * xs[3];
                    let inv = T::of(hw as f64).recip();
                    let dx = gout.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.values[x.0];
                    let wv = &self.values[w.0];
                    let (n, f) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    let gd = gout.data();
                    let mut dx = vec![T::zero(); n * f];
                    let mut dw = vec![T::zero(); o * f];
                    let mut db = vec![T::zero(); o];
                    for r in 0..n {
                        for k in 0..o {
                            let g = gd[r * o + k];
                            db[k] += g;
                            for q in 0..f {
                                dx[r * f + q] += g * wv.data()[k * f + q];
                                dw[k * f + q] += g * xv.data()[r * f + q];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, f], dx)?);
                    accumulate(&mut grads, *w, Tensor::new(vec![o, f], dw)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![o], db)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout.clone());
                }
                Op::Mul { a, b } => {
                    let av = self.values[a.0].data();
                    let bv = self.values[b.0].data();
                    let ga = gout.data().iter().zip(bv).map(|(&g, &q)| g * q).collect();
                    let gb = gout.data().iter().zip(av).map(|(&g, &p)| g * p).collect();
                    accumulate(&mut grads, *a, Tensor::new(gout.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(gout.shape().to_vec(), gb)?);
                }
                Op::Sum { x } => {
                    let shape = self.values[x.0].shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, gout.item()));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.values[logits.0].shape()[1];
                    let n = labels.len();
                    let scale = gout.item() / T::of(n as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![n, c], d)?);
                }
            }
            grads[i] = Some(gout);
        }

        let mut params = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (op, &grads[i]) {
                if cfg!(debug_assertions) && !g.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for parameter {}", id.0)));
                }
                match params.get_mut(id) {
                    None => {
                        params.insert(*id, g.clone());
                    }
                    Some(acc) => add_into(acc, g),
                }
            }
        }
        Ok(Grads { nodes: grads, params })
    }

    fn conv_backward(&self, x: Var, w: Var, stride: usize, pad: usize, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let [n, cin, h, wd] = dims4(xv.shape(), "conv2d").expect("checked in forward");
        let [cout, _, kh, kw] = dims4(wv.shape(), "conv2d").expect("checked in forward");
        let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
        let xd = xv.data();
        let wdat = wv.data();
        let gd = gout.data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wdat.len()];
        for b in 0..n {
            for co in 0..cout {
                let g = &gd[(b * cout + co) * ho * wo..][..ho * wo];
                for ci in 0..cin {
                    let xoff = (b * cin + ci) * h * wd;
                    let koff = (co * cin + ci) * kh * kw;
                    for ki in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(ho, h, ki, stride, pad);
                        for kj in 0..kw {
                            let wval = wdat[koff + ki * kw + kj];
                            let (ow_lo, ow_hi) = valid_range(wo, wd, kj, stride, pad);
                            let mut acc = T::zero();
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ki - pad;
                                let grow = &g[oh * wo..][..wo];
                                let xrow = &xd[xoff + ih * wd..][..wd];
                                let dxrow = &mut dx[xoff + ih * wd..][..wd];
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * stride + kj - pad;
                                    acc += grow[ow] * xrow[iw];
                                    dxrow[iw] += grow[ow] * wval;
                                }
                            }
                            dw[koff + ki * kw + kj] += acc;
                        }
                    }
                }
            }
        }
        (
            Tensor::new(xv.shape().to_vec(), dx).expect("same shape"),
            Tensor::new(wv.shape().to_vec(), dw).expect("same shape"),
        )
    }
}

fn add_into<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_permutation() {
        let mut tape = Tape::new(false);
        let x = t(&[1, 3, 2, 2], &(0..12).map(f64::from).collect::<Vec<_>>());
        // out channel 0 <- in 2, 1 <- in 0, 2 <- in 1
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        w.data_mut()[2] = 1.0;
        w.data_mut()[3] = 1.0;
        w.data_mut()[3 + 3 + 1] = 1.0;
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let y = tape.conv2d(xv, wv, 1, 0).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[0..4], &x.data()[8..12]);
        assert_eq!(&out[4..8], &x.data()[0..4]);
        assert_eq!(&out[8..12], &x.data()[4..8]);
    }

    #[test]
    fn conv_zero_weight_and_center_sum() {
        let mut tape = Tape::new(false);
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let xv = tape.leaf(x);
        let zero = tape.leaf(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(xv, zero, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let ones = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(xv, ones, 1, 1).unwrap();
        // Hand convolution: center sees the full 3x3 window, corner (0,0) sees 1+2+4+5.
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data()[4], 45.0);
        assert_eq!(tape.value(y).data()[0], 12.0);
    }

    #[test]
    fn conv_output_size_and_shape_error() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.leaf(Tensor::zeros(&[2, 4, 7, 7]));
        let w = tape.leaf(Tensor::zeros(&[8, 4, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 4, 4]);
        let bad = tape.leaf(Tensor::zeros(&[8, 3, 3, 3]));
        let err = tape.conv2d(x, bad, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 7, 7]") && err.contains("[8, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new(false);
        let a = tape.leaf(t(&[3], &[-1., -2., -0.5]));
        let b = tape.leaf(t(&[2], &[1., 3.]));
        let c = tape.leaf(t(&[2], &[-1., 2.]));
        let ra = tape.relu(a).unwrap();
        let rb = tape.relu(b).unwrap();
        let rc = tape.relu(c).unwrap();
        assert_eq!(tape.value(ra).data(), &[0., 0., 0.]);
        assert_eq!(tape.value(rb).data(), &[1., 3.]);
        assert_eq!(tape.value(rc).data(), &[0., 2.]);
    }

    #[test]
    fn batchnorm_fixed_point_and_constant() {
        let mut tape = Tape::new(true);
        // Per-channel mean 0, biased variance 1.
        let x = t(&[2, 1, 1, 2], &[1., -1., 1., -1.]);
        let xv = tape.leaf(x.clone());
        let g = tape.leaf(Tensor::full(&[1], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.batchnorm(xv, g, b).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-6);
        }
        let cst = tape.leaf(Tensor::full(&[2, 1, 2, 2], 3.5));
        let beta = tape.leaf(Tensor::full(&[1], 0.25));
        let y = tape.batchnorm(cst, g, beta).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_standardizes() {
        let mut rng = seed::rng(3);
        let mut tape = Tape::new(true);
        let x = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-5.0..9.0));
        let xv = tape.leaf(x);
        let g = tape.leaf(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.batchnorm(xv, g, b).unwrap();
        let yd = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| yd[(n * 3 + ch) * 9..][..9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_training() {
        let mut tape = Tape::<f64>::new(true);
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.batchnorm(x, g, b), Err(Error::Validation(_))));
        let mut eval = Tape::<f64>::new(false);
        let x = eval.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let g = eval.leaf(Tensor::full(&[2], 1.0));
        let b = eval.leaf(Tensor::zeros(&[2]));
        assert!(eval.batchnorm(x, g, b).is_ok());
    }

    #[test]
    fn pooling_add_and_cross_entropy() {
        let mut tape = Tape::new(false);
        let c = tape.leaf(Tensor::full(&[2, 2, 4, 3], 1.75));
        let p = tape.avgpool3x3(c).unwrap();
        assert!(tape.value(p).data().iter().all(|&v: &f64| (v - 1.75).abs() < 1e-15));
        let gp = tape.global_avgpool(c).unwrap();
        assert_eq!(tape.value(gp).shape(), &[2, 2]);
        let z = tape.leaf(Tensor::zeros(&[2, 2, 4, 3]));
        let s = tape.add(c, z).unwrap();
        assert_eq!(tape.value(s), tape.value(c));
        let logits = tape.leaf(Tensor::full(&[3, 5], 0.3));
        let l = tape.softmax_cross_entropy(logits, &[0, 4, 2]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.softmax_cross_entropy(logits, &[0, 5, 1]), Err(Error::Validation(_))));
    }

    #[test]
    fn linear_dot_gradient() {
        let mut tape = Tape::new(false);
        let x = t(&[4], &[0.5, -2.0, 3.0, 1.25]);
        let w = tape.param(ParamId(0), &t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let xv = tape.leaf(x.clone());
        let p = tape.mul(w, xv).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap().data(), x.data());
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_gradient_is_zero_for_negative_inputs() {
        let mut tape = Tape::new(false);
        let x = tape.param(ParamId(1), &t(&[3], &[-1.0, 2.0, -3.0]));
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(1)).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn activation_patterns_per_sample() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(t(&[2, 1, 1, 2], &[1., -1., 1., -1.]));
        let y = tape.leaf(t(&[2, 1, 1, 2], &[-1., -1., 1., 1.]));
        tape.relu(x).unwrap();
        tape.relu_uncaptured(y).unwrap();
        tape.relu(y).unwrap();
        let pats = tape.activation_patterns();
        assert_eq!(pats, vec![vec![true, false, false, false], vec![true, false, true, true]]);
        let empty = Tape::<f64>::new(false);
        assert!(empty.activation_patterns().is_empty());
    }

    /// Central finite differences over every input of every primitive.
    fn check_gradients(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) {
        let run = |vals: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new(true);
            let vars: Vec<_> = vals.iter().enumerate().map(|(i, v)| tape.param(ParamId(i), v)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new(true);
        let vars: Vec<_> = inputs.iter().enumerate().map(|(i, v)| tape.param(ParamId(i), v)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (i, inp) in inputs.iter().enumerate() {
            let analytic = grads.param(ParamId(i)).unwrap();
            for k in 0..inp.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= h;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let a: f64 = analytic.data()[k];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} coord {k}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = seed::rng(11);
        let x = randn(&[2, 2, 5, 5], &mut rng);
        let w3 = randn(&[3, 2, 3, 3], &mut rng);
        let w1 = randn(&[3, 2, 1, 1], &mut rng);
        let probe = randn(&[2, 3, 5, 5], &mut rng);
        let probe_s2 = randn(&[2, 3, 3, 3], &mut rng);
        check_gradients(
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], 1, 1).unwrap();
                let y = tp.mul(y, v[2]).unwrap();
                tp.sum(y).unwrap()
            },
            &[x.clone(), w3.clone(), probe.clone()],
        );
        check_gradients(
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], 2, 1).unwrap();
                let y = tp.mul(y, v[2]).unwrap();
                tp.sum(y).unwrap()
            },
            &[x.clone(), w3.clone(), probe_s2],
        );
        check_gradients(
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], 1, 0).unwrap();
                let y = tp.mul(y, v[2]).unwrap();
                tp.sum(y).unwrap()
            },
            &[x.clone(), w1, probe.clone()],
        );
        let gamma = randn(&[2], &mut rng);
        let beta = randn(&[2], &mut rng);
        let probe2 = randn(&[2, 2, 5, 5], &mut rng);
        check_gradients(
            |tp, v| {
                let y = tp.batchnorm(v[0], v[1], v[2]).unwrap();
                let y = tp.mul(y, v[3]).unwrap();
                tp.sum(y).unwrap()
            },
            &[x.clone(), gamma, beta, probe2.clone()],
        );
        check_gradients(
            |tp, v| {
                let y = tp.avgpool3x3(v[0]).unwrap();
                let y = tp.mul(y, v[1]).unwrap();
                tp.sum(y).unwrap()
            },
            &[x.clone(), probe2],
        );
        let lw = randn(&[4, 2], &mut rng);
        let lb = randn(&[4], &mut rng);
        check_gradients(
            |tp, v| {
                let g = tp.global_avgpool(v[0]).unwrap();
                let l = tp.linear(g, v[1], v[2]).unwrap();
                tp.softmax_cross_entropy(l, &[3, 1]).unwrap()
            },
            &[x, lw, lb],
        );
    }
}
