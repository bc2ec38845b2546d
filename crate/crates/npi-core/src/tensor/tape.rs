use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Supported nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

/// Elementwise binary ops. No implicit broadcasting: tap-point addition is
/// shape-exact, so shape mismatches are hard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
}

/// Mean-reduced loss kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Mse,
}

const BCE_EPS: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

struct Node<T: Scalar> {
    out: Tensor<T>,
    back: Box<dyn Fn(&[T])>,
}

/// Ordered record of executed differentiable operations.
///
/// Replaying the record in reverse order is a valid topological order of the
/// computation graph, since ops are appended in execution order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dim(format!("{what}: expected 2-d tensor, got {s:?}"))),
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded ops and their captured intermediates.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, out: &Tensor<T>, back: impl Fn(&[T]) + 'static) {
        out.set_requires_grad(true);
        self.nodes.push(Node {
            out: out.clone(),
            back: Box::new(back),
        });
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that is not on the tape".into(),
            ));
        }
        loss.accum_grad(&[T::one()]);
        for node in self.nodes.iter().rev() {
            if let Some(g) = node.out.grad() {
                (node.back)(&g);
            }
        }
        self.nodes.clear();
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, k) = dims2(a, "matmul lhs")?;
        let (k2, c) = dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dims differ ({r}x{k} vs {k2}x{c})"
            )));
        }
        let out = Tensor::new(vec![r, c], raw_matmul(&a.data(), &b.data(), r, k, c))?;
        check_finite("matmul", &out)?;
        if a.requires_grad() || b.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out, move |g| {
                if a.requires_grad() {
                    // ga += g · bᵀ
                    let mut ga = vec![T::zero(); r * k];
                    {
                        let bd = b.data();
                        for i in 0..r {
                            for j in 0..c {
                                let gij = g[i * c + j];
                                for p in 0..k {
                                    ga[i * k + p] = ga[i * k + p] + gij * bd[p * c + j];
                                }
                            }
                        }
                    }
                    a.accum_grad(&ga);
                }
                if b.requires_grad() {
                    // gb += aᵀ · g
                    let mut gb = vec![T::zero(); k * c];
                    {
                        let ad = a.data();
                        for i in 0..r {
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                for j in 0..c {
                                    gb[p * c + j] = gb[p * c + j] + aip * g[i * c + j];
                                }
                            }
                        }
                    }
                    b.accum_grad(&gb);
                }
            });
        }
        Ok(out)
    }

    pub fn elementwise(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        kind: ElementwiseKind,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "elementwise {kind:?}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<T> = match kind {
            ElementwiseKind::Add => a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect(),
            ElementwiseKind::Mul => a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect(),
        };
        let out = Tensor::new(a.shape().to_vec(), data)?;
        check_finite("elementwise", &out)?;
        if a.requires_grad() || b.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out, move |g| match kind {
                ElementwiseKind::Add => {
                    if a.requires_grad() {
                        a.accum_grad(g);
                    }
                    if b.requires_grad() {
                        b.accum_grad(g);
                    }
                }
                ElementwiseKind::Mul => {
                    if a.requires_grad() {
                        let bd = b.data();
                        let ga: Vec<T> = g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect();
                        drop(bd);
                        a.accum_grad(&ga);
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        let gb: Vec<T> = g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect();
                        drop(ad);
                        b.accum_grad(&gb);
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    /// `x[r,c] + bias[c]`, broadcast over rows. The one deliberate broadcast,
    /// named explicitly so tap-point addition cannot reach it by accident.
    pub fn add_bias(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = dims2(x, "add_bias input")?;
        if bias.numel() != c {
            return Err(Error::Dim(format!(
                "add_bias: bias length {} vs {} columns",
                bias.numel(),
                c
            )));
        }
        let bd = bias.to_vec();
        let data: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let out = Tensor::new(vec![r, c], data)?;
        check_finite("add_bias", &out)?;
        if x.requires_grad() || bias.requires_grad() {
            let (x, bias) = (x.clone(), bias.clone());
            self.push(&out, move |g| {
                if x.requires_grad() {
                    x.accum_grad(g);
                }
                if bias.requires_grad() {
                    let mut gb = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % c] = gb[i % c] + gi;
                    }
                    bias.accum_grad(&gb);
                }
            });
        }
        Ok(out)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
        let kt = T::from_f64(k);
        let data: Vec<T> = x.data().iter().map(|&v| v * kt).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        check_finite("scale", &out)?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| {
                let gx: Vec<T> = g.iter().map(|&gi| gi * kt).collect();
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    /// Multiply by a learnable scalar tensor.
    pub fn scale_t(&mut self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::Dim("scale_t: scale must be a scalar tensor".into()));
        }
        let sv = s.value();
        let data: Vec<T> = x.data().iter().map(|&v| v * sv).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        check_finite("scale_t", &out)?;
        if x.requires_grad() || s.requires_grad() {
            let (x, s) = (x.clone(), s.clone());
            self.push(&out, move |g| {
                if x.requires_grad() {
                    let gx: Vec<T> = g.iter().map(|&gi| gi * sv).collect();
                    x.accum_grad(&gx);
                }
                if s.requires_grad() {
                    let xd = x.data();
                    let gs = g
                        .iter()
                        .zip(xd.iter())
                        .fold(T::zero(), |acc, (&gi, &xi)| acc + gi * xi);
                    drop(xd);
                    s.accum_grad(&[gs]);
                }
            });
        }
        Ok(out)
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn activation(&mut self, x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
        let data: Vec<T> = x.data().iter().map(|&v| act_forward(v, kind)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        check_finite("activation", &out)?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| {
                let xd = x.data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gi, &xi)| gi * act_derivative(xi, kind))
                    .collect();
                drop(xd);
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh_act(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.activation(x, Activation::Tanh)
    }

    /// Per-row layer normalization over the last dimension.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (r, c) = dims2(x, "layer_norm input")?;
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::Dim(format!(
                "layer_norm: gain/bias length must be {c}"
            )));
        }
        let eps = T::from_f64(LN_EPS);
        let xd = x.to_vec();
        let gd = gain.to_vec();
        let bd = bias.to_vec();
        let cn = T::from_f64(c as f64);
        let mut data = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_sigma = vec![T::zero(); r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / cn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / cn;
            let is = (var + eps).sqrt().recip();
            inv_sigma[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                data[i * c + j] = gd[j] * xh + bd[j];
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        check_finite("layer_norm", &out)?;
        if x.requires_grad() || gain.requires_grad() || bias.requires_grad() {
            let (x, gain, bias) = (x.clone(), gain.clone(), bias.clone());
            self.push(&out, move |g| {
                let gd = gain.to_vec();
                if x.requires_grad() {
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..c {
                            let dxh = g[i * c + j] * gd[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xhat[i * c + j];
                        }
                        mean_dxh = mean_dxh / cn;
                        mean_dxh_xh = mean_dxh_xh / cn;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gd[j];
                            gx[i * c + j] =
                                inv_sigma[i] * (dxh - mean_dxh - xhat[i * c + j] * mean_dxh_xh);
                        }
                    }
                    x.accum_grad(&gx);
                }
                if gain.requires_grad() {
                    let mut gg = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] = gg[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    gain.accum_grad(&gg);
                }
                if bias.requires_grad() {
                    let mut gb = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i * c + j];
                        }
                    }
                    bias.accum_grad(&gb);
                }
            });
        }
        Ok(out)
    }

    pub fn softmax_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = dims2(x, "softmax input")?;
        let xd = x.to_vec();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&xd[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![r, c], data)?;
        check_finite("softmax_rows", &out)?;
        if x.requires_grad() {
            let x = x.clone();
            let y = out.to_vec();
            self.push(&out, move |g| {
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        gx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    // ── Losses (mean-reduced scalars; gradients flow to pred only) ──

    pub fn loss(&mut self, pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<Tensor<T>> {
        match kind {
            LossKind::Bce => self.bce(pred, target),
            LossKind::Mse => self.mse(pred, target),
        }
    }

    pub fn bce(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if pred.shape() != target.shape() {
            return Err(Error::Dim(format!(
                "bce: shapes {:?} and {:?} differ",
                pred.shape(),
                target.shape()
            )));
        }
        let tol = T::from_f64(1e-6);
        for &p in pred.data().iter() {
            if p < -tol || p > T::one() + tol {
                return Err(Error::Domain(format!(
                    "bce probability {} outside [0,1]",
                    p.into_f64()
                )));
            }
        }
        let lo = T::from_f64(BCE_EPS);
        let hi = T::one() - lo;
        let n = pred.numel();
        let nt = T::from_f64(n as f64);
        let pd = pred.to_vec();
        let td = target.to_vec();
        let mut acc = T::zero();
        for (&p, &t) in pd.iter().zip(td.iter()) {
            let pc = p.max(lo).min(hi);
            acc = acc - (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
        }
        let out = Tensor::scalar(acc / nt);
        check_finite("bce", &out)?;
        if pred.requires_grad() {
            let pred = pred.clone();
            self.push(&out, move |g| {
                let g0 = g[0];
                let pd = pred.to_vec();
                let gx: Vec<T> = pd
                    .iter()
                    .zip(td.iter())
                    .map(|(&p, &t)| {
                        if p <= lo || p >= hi {
                            T::zero() // clamp region: flat
                        } else {
                            g0 * ((p - t) / (p * (T::one() - p))) / nt
                        }
                    })
                    .collect();
                pred.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    pub fn mse(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if pred.shape() != target.shape() {
            return Err(Error::Dim(format!(
                "mse: shapes {:?} and {:?} differ",
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.numel();
        let nt = T::from_f64(n as f64);
        let td = target.to_vec();
        let mut acc = T::zero();
        for (&p, &t) in pred.data().iter().zip(td.iter()) {
            acc = acc + (p - t) * (p - t);
        }
        let out = Tensor::scalar(acc / nt);
        check_finite("mse", &out)?;
        if pred.requires_grad() {
            let pred = pred.clone();
            let two = T::from_f64(2.0);
            self.push(&out, move |g| {
                let g0 = g[0];
                let pd = pred.to_vec();
                let gx: Vec<T> = pd
                    .iter()
                    .zip(td.iter())
                    .map(|(&p, &t)| g0 * two * (p - t) / nt)
                    .collect();
                pred.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    /// Softmax cross-entropy over logit rows with integer class targets.
    pub fn cross_entropy(&mut self, logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
        let (r, c) = dims2(logits, "cross_entropy logits")?;
        if targets.len() != r {
            return Err(Error::Dim(format!(
                "cross_entropy: {} logit rows but {} targets",
                r,
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Domain(format!(
                "cross_entropy: class id {bad} outside vocab of {c}"
            )));
        }
        let xd = logits.to_vec();
        let mut probs = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&xd[i * c..(i + 1) * c], &mut probs[i * c..(i + 1) * c]);
        }
        let lo = T::from_f64(BCE_EPS);
        let rn = T::from_f64(r as f64);
        let mut acc = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            acc = acc - probs[i * c + t].max(lo).ln();
        }
        let out = Tensor::scalar(acc / rn);
        check_finite("cross_entropy", &out)?;
        if logits.requires_grad() {
            let logits = logits.clone();
            let targets = targets.to_vec();
            self.push(&out, move |g| {
                let g0 = g[0];
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        let delta = if targets[i] == j { T::one() } else { T::zero() };
                        gx[i * c + j] = g0 * (probs[i * c + j] - delta) / rn;
                    }
                }
                logits.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.data().iter().fold(T::zero(), |a, &v| a + v);
        let out = Tensor::scalar(s);
        check_finite("sum_all", &out)?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| {
                let gx = vec![g[0]; x.numel()];
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    pub fn mean_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.numel();
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f64)
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape, x.to_vec())?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| x.accum_grad(g));
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = dims2(x, "transpose input")?;
        let xd = x.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        let out = Tensor::new(vec![c, r], data)?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| {
                let mut gx = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, c) = dims2(x, "slice_rows input")?;
        if start + len > r {
            return Err(Error::Dim(format!(
                "slice_rows: [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let data = x.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| {
                let mut gx = vec![T::zero(); r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, c) = dims2(x, "slice_cols input")?;
        if start + len > c {
            return Err(Error::Dim(format!(
                "slice_cols: [{start}, {}) out of {c} cols",
                start + len
            )));
        }
        let xd = x.data();
        let mut data = vec![T::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        drop(xd);
        let out = Tensor::new(vec![r, len], data)?;
        if x.requires_grad() {
            let x = x.clone();
            self.push(&out, move |g| {
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                x.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: empty input".into()));
        }
        let (_, c) = dims2(&parts[0], "concat_rows part")?;
        let mut total = 0usize;
        let mut data = Vec::new();
        for p in parts {
            let (pr, pc) = dims2(p, "concat_rows part")?;
            if pc != c {
                return Err(Error::Dim(format!(
                    "concat_rows: column mismatch {pc} vs {c}"
                )));
            }
            total += pr;
            data.extend_from_slice(&p.data());
        }
        let out = Tensor::new(vec![total, c], data)?;
        if parts.iter().any(|p| p.requires_grad()) {
            let parts: Vec<Tensor<T>> = parts.to_vec();
            self.push(&out, move |g| {
                let mut offset = 0usize;
                for p in &parts {
                    let n = p.numel();
                    if p.requires_grad() {
                        p.accum_grad(&g[offset..offset + n]);
                    }
                    offset += n;
                }
            });
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: empty input".into()));
        }
        let (r, _) = dims2(&parts[0], "concat_cols part")?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| dims2(p, "concat_cols part").map(|(pr, pc)| {
                debug_assert_eq!(pr, r);
                pc
            }))
            .collect::<Result<_>>()?;
        for p in parts {
            if p.rows() != r {
                return Err(Error::Dim("concat_cols: row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); r * total];
        let mut offset = 0usize;
        for (p, &wc) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + wc]
                    .copy_from_slice(&pd[i * wc..(i + 1) * wc]);
            }
            offset += wc;
        }
        let out = Tensor::new(vec![r, total], data)?;
        if parts.iter().any(|p| p.requires_grad()) {
            let parts: Vec<Tensor<T>> = parts.to_vec();
            self.push(&out, move |g| {
                let mut offset = 0usize;
                for (p, &wc) in parts.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut gp = vec![T::zero(); r * wc];
                        for i in 0..r {
                            gp[i * wc..(i + 1) * wc].copy_from_slice(
                                &g[i * total + offset..i * total + offset + wc],
                            );
                        }
                        p.accum_grad(&gp);
                    }
                    offset += wc;
                }
            });
        }
        Ok(out)
    }

    /// Row gather from an embedding table, with scatter-add backward.
    pub fn gather_rows(&mut self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let (v, d) = dims2(table, "gather_rows table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Domain(format!("gather_rows: id {bad} out of {v}")));
        }
        let td = table.data();
        let mut data = vec![T::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        let out = Tensor::new(vec![ids.len(), d], data)?;
        if table.requires_grad() {
            let table = table.clone();
            let ids = ids.to_vec();
            self.push(&out, move |g| {
                let mut gt = vec![T::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[i * d + j];
                    }
                }
                table.accum_grad(&gt);
            });
        }
        Ok(out)
    }
}

pub(crate) fn raw_matmul<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn act_forward<T: Scalar>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Activation::Tanh => x.tanh(),
        Activation::Gelu => {
            let half = T::from_f64(0.5);
            half * x * (T::one() + gelu_inner(x).tanh())
        }
    }
}

fn act_derivative<T: Scalar>(x: T, kind: Activation) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
        Activation::Gelu => {
            let half = T::from_f64(0.5);
            let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
            let a = T::from_f64(0.044715);
            let three = T::from_f64(3.0);
            let t = gelu_inner(x).tanh();
            half * (T::one() + t)
                + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
        }
    }
}

fn gelu_inner<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    c * (x + a * x * x * x)
}
