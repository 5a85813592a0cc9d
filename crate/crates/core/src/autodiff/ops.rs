use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom};
use crate::tensor::{broadcast_shapes, numel, Element, Tensor};

use super::tape::{BackwardArgs, Var};

thread_local! {
    static CORRUPT_CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when enabled on the current thread, conv2d kernel gradients are
/// deliberately scaled by 1.5 so gradient checks can be shown to catch it.
pub fn set_conv_backward_fault(enabled: bool) {
    CORRUPT_CONV_BACKWARD.with(|c| c.set(enabled));
}

fn conv_fault() -> bool {
    CORRUPT_CONV_BACKWARD.with(|c| c.get())
}

fn broadcast_to<F: Element>(g: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    Tensor::zeros(shape).add(g)
}

impl<'t, F: Element> Var<'t, F> {
    fn binary(
        self,
        other: Var<'t, F>,
        op: &'static str,
        f: fn(F, F) -> F,
        backward: fn(&BackwardArgs<'_, F>) -> Result<Vec<Option<Tensor<F>>>>,
    ) -> Result<Var<'t, F>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let out = a.zip(&b, op, f)?;
        Ok(self.tape.push(op, out, &[self, other], Box::new(backward)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            |args| {
                Ok(vec![
                    Some(args.grad.sum_to_shape(args.inputs[0].shape())?),
                    Some(args.grad.sum_to_shape(args.inputs[1].shape())?),
                ])
            },
        )
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |args| {
                Ok(vec![
                    Some(args.grad.sum_to_shape(args.inputs[0].shape())?),
                    Some(
                        args.grad
                            .scale(-F::one())
                            .sum_to_shape(args.inputs[1].shape())?,
                    ),
                ])
            },
        )
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            |args| {
                let (a, b) = (&args.inputs[0], &args.inputs[1]);
                Ok(vec![
                    Some(args.grad.mul(b)?.sum_to_shape(a.shape())?),
                    Some(args.grad.mul(a)?.sum_to_shape(b.shape())?),
                ])
            },
        )
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let out = self.value().scale(c);
        self.tape.push(
            "scale",
            out,
            &[self],
            Box::new(move |args| Ok(vec![Some(args.grad.scale(c))])),
        )
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        let out = self.value().map(|v| v + c);
        self.tape.push(
            "add_scalar",
            out,
            &[self],
            Box::new(|args| Ok(vec![Some(args.grad.clone())])),
        )
    }

    /// Same value, no gradient flow.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.constant((*self.value()).clone())
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast leading axes.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let out = matmul_fwd(&a, &b)?;
        Ok(self.tape.push(
            "matmul",
            out,
            &[self, other],
            Box::new(|args| {
                let (a, b) = (&args.inputs[0], &args.inputs[1]);
                let (ga, gb) = matmul_bwd(a, b, args.grad)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(
            "reshape",
            out,
            &[self],
            Box::new(|args| Ok(vec![Some(args.grad.reshape(args.inputs[0].shape())?)])),
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, F>> {
        let out = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape.push(
            "permute",
            out,
            &[self],
            Box::new(move |args| Ok(vec![Some(args.grad.permute(&inverse)?)])),
        ))
    }

    pub fn transpose_last(self) -> Result<Var<'t, F>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `index` of axis 0.
    pub fn select0(self, index: usize) -> Result<Var<'t, F>> {
        let out = self.value().select0(index)?;
        Ok(self.tape.push(
            "select0",
            out,
            &[self],
            Box::new(move |args| {
                let shape = args.inputs[0].shape();
                let inner = args.grad.numel();
                let mut g = Tensor::zeros(shape);
                g.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(args.grad.data());
                Ok(vec![Some(g)])
            }),
        ))
    }

    /// Stacks same-shaped values along a new axis 0.
    pub fn stack0(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        for p in parts {
            first.check_tape(p)?;
        }
        let values: Vec<Rc<Tensor<F>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<F>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::stack0(&refs)?;
        let count = parts.len();
        Ok(first.tape.push(
            "stack0",
            out,
            parts,
            Box::new(move |args| {
                (0..count)
                    .map(|i| args.grad.select0(i).map(Some))
                    .collect::<Result<Vec<_>>>()
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t, F> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(
            "sum",
            out,
            &[self],
            Box::new(|args| {
                Ok(vec![Some(Tensor::full(
                    args.inputs[0].shape(),
                    args.grad.item(),
                ))])
            }),
        )
    }

    /// Mean over the listed axes, which are removed from the shape.
    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape("mean_axes", &shape, axes));
        }
        let keep: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let reduced: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count = numel(&shape) / numel(&keep).max(1);
        let inv = F::one() / F::lit(count as f64);
        let out = self
            .value()
            .sum_to_shape(&keep)?
            .scale(inv)
            .reshape(&reduced)?;
        Ok(self.tape.push(
            "mean_axes",
            out,
            &[self],
            Box::new(move |args| {
                let g = args.grad.reshape(&keep)?.scale(inv);
                Ok(vec![Some(broadcast_to(&g, args.inputs[0].shape())?)])
            }),
        ))
    }

    /// 2-D cross-correlation of `[N, C_in, H, W]` (or `[C_in, H, W]`) with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'t, F>, stride: usize, padding: usize) -> Result<Var<'t, F>> {
        self.check_tape(&kernel)?;
        let (x, w) = (self.value(), kernel.value());
        let (n, geom, c_out) = conv2d_geom(x.shape(), w.shape(), stride, padding)?;
        let out = conv2d_fwd(&x, &w, n, geom, c_out);
        let mut out_shape = vec![c_out, geom.h_out, geom.w_out];
        if x.rank() == 4 {
            out_shape.insert(0, n);
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.tape.push(
            "conv2d",
            out,
            &[self, kernel],
            Box::new(move |args| {
                let (gx, mut gw) =
                    conv2d_bwd(&args.inputs[0], &args.inputs[1], args.grad, n, geom, c_out)?;
                if conv_fault() {
                    gw = gw.scale(F::lit(1.5));
                }
                Ok(vec![Some(gx), Some(gw)])
            }),
        ))
    }

    /// Depthwise 1-D correlation over the last axis of `[.., C, L]` with kernel `[C, k]`,
    /// zero 'same' padding of `(k-1)/2` on each side.
    pub fn conv1d_depthwise(self, kernel: Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_tape(&kernel)?;
        let (x, w) = (self.value(), kernel.value());
        let (channels, len, k) = conv1d_geom(x.shape(), w.shape())?;
        let mut out = vec![F::zero(); x.numel()];
        kernels::conv1d_depthwise(x.data(), w.data(), channels, len, k, &mut out);
        let out = Tensor::from_vec(x.shape(), out)?;
        Ok(self.tape.push(
            "conv1d_depthwise",
            out,
            &[self, kernel],
            Box::new(move |args| {
                let (x, w, g) = (
                    args.inputs[0].data(),
                    args.inputs[1].data(),
                    args.grad.data(),
                );
                let pad = (k - 1) / 2;
                let mut gx = vec![F::zero(); x.len()];
                let mut gw = vec![F::zero(); w.len()];
                for (r, (xrow, grow)) in x.chunks_exact(len).zip(g.chunks_exact(len)).enumerate() {
                    let c = r % channels;
                    let gxrow = &mut gx[r * len..(r + 1) * len];
                    for (i, &gi) in grow.iter().enumerate() {
                        for j in 0..k {
                            let src = i + j;
                            if src >= pad && src - pad < len {
                                gw[c * k + j] += gi * xrow[src - pad];
                                gxrow[src - pad] += gi * w[c * k + j];
                            }
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(args.inputs[0].shape(), gx)?),
                    Some(Tensor::from_vec(args.inputs[1].shape(), gw)?),
                ])
            }),
        ))
    }

    /// 2×2 max pooling with stride 2 over the last two axes. Ties go to the first element.
    pub fn maxpool2d(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::shape("maxpool2d", shape, &[2, 2]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "maxpool2d needs even spatial extents, got {h}x{w}"
            )));
        }
        let planes = x.numel() / (h * w);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        let d = x.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.tape.push(
            "maxpool2d",
            out,
            &[self],
            Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].shape());
                let gd = g.data_mut();
                for (&i, &gv) in argmax.iter().zip(args.grad.data()) {
                    gd[i as usize] += gv;
                }
                Ok(vec![Some(g)])
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, F>> {
        let logits = self.value();
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![F::zero(); b * c];
        let mut loss = F::zero();
        for (i, row) in logits.data().chunks_exact(c).enumerate() {
            let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (v - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let inv_b = F::one() / F::lit(b as f64);
        let labels = labels.to_vec();
        Ok(self.tape.push(
            "cross_entropy",
            Tensor::scalar(loss * inv_b),
            &[self],
            Box::new(move |args| {
                let scale = args.grad.item() * inv_b;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * c + l] -= F::one();
                }
                for v in g.iter_mut() {
                    *v *= scale;
                }
                Ok(vec![Some(Tensor::from_vec(&[b, c], g)?)])
            }),
        ))
    }
}

/// Differentiable op with a caller-supplied backward.
///
/// `forward` computes the output from the input values; `backward` maps
/// `(inputs, output, upstream grad)` to one gradient per input and fully
/// replaces autodiff of `forward`. Gradients whose count or shapes do not
/// match the inputs surface as a contract error from [`super::Tape::backward`].
pub fn custom_grad<'t, F: Element>(
    op: &'static str,
    inputs: &[Var<'t, F>],
    forward: impl FnOnce(&[&Tensor<F>]) -> Result<Tensor<F>>,
    backward: impl Fn(&[&Tensor<F>], &Tensor<F>, &Tensor<F>) -> Vec<Tensor<F>> + 'static,
) -> Result<Var<'t, F>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("custom op needs at least one input"))?;
    for v in inputs {
        first.check_tape(v)?;
    }
    let values: Vec<Rc<Tensor<F>>> = inputs.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor<F>> = values.iter().map(|v| v.as_ref()).collect();
    let out = forward(&refs)?;
    Ok(first.tape.push(
        op,
        out,
        inputs,
        Box::new(move |args| {
            let refs: Vec<&Tensor<F>> = args.inputs.iter().map(|v| v.as_ref()).collect();
            Ok(backward(&refs, args.output, args.grad)
                .into_iter()
                .map(Some)
                .collect())
        }),
    ))
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]))
}

/// Output shape plus both operands expanded to the common batch shape.
fn matmul_expand<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(Vec<usize>, Tensor<F>, Tensor<F>)> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let ab = &a.shape()[..a.rank() - 2];
    let bb = &b.shape()[..b.rank() - 2];
    let batch =
        broadcast_shapes(ab, bb).ok_or_else(|| Error::shape("matmul", a.shape(), b.shape()))?;
    let expand = |t: &Tensor<F>, rows: usize, cols: usize| -> Result<Tensor<F>> {
        let mut s = batch.clone();
        s.extend_from_slice(&[rows, cols]);
        broadcast_to(t, &s)
    };
    let mut out = batch.clone();
    out.extend_from_slice(&[m, n]);
    Ok((out, expand(a, m, k)?, expand(b, k, n)?))
}

fn matmul_fwd<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    if b.rank() == 2 {
        let rows = a.numel() / k;
        let mut c = vec![F::zero(); rows * n];
        kernels::gemm(rows, n, k, a.data(), false, b.data(), false, &mut c);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        return Tensor::from_vec(&shape, c);
    }
    let (shape, a, b) = matmul_expand(a, b)?;
    let batches = numel(&shape[..shape.len() - 2]);
    let mut c = vec![F::zero(); batches * m * n];
    for i in 0..batches {
        kernels::gemm(
            m,
            n,
            k,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * k * n..(i + 1) * k * n],
            false,
            &mut c[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::from_vec(&shape, c)
}

fn matmul_bwd<F: Element>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    if b.rank() == 2 {
        let rows = a.numel() / k;
        let mut ga = vec![F::zero(); rows * k];
        kernels::gemm(rows, k, n, g.data(), false, b.data(), true, &mut ga);
        let mut gb = vec![F::zero(); k * n];
        kernels::gemm(k, n, rows, a.data(), true, g.data(), false, &mut gb);
        return Ok((
            Tensor::from_vec(a.shape(), ga)?,
            Tensor::from_vec(b.shape(), gb)?,
        ));
    }
    let (shape, ae, be) = matmul_expand(a, b)?;
    let batches = numel(&shape[..shape.len() - 2]);
    let mut ga = vec![F::zero(); batches * m * k];
    let mut gb = vec![F::zero(); batches * k * n];
    for i in 0..batches {
        let gi = &g.data()[i * m * n..(i + 1) * m * n];
        kernels::gemm(
            m,
            k,
            n,
            gi,
            false,
            &be.data()[i * k * n..(i + 1) * k * n],
            true,
            &mut ga[i * m * k..(i + 1) * m * k],
        );
        kernels::gemm(
            k,
            n,
            m,
            &ae.data()[i * m * k..(i + 1) * m * k],
            true,
            gi,
            false,
            &mut gb[i * k * n..(i + 1) * k * n],
        );
    }
    let mut sa = shape[..shape.len() - 2].to_vec();
    sa.extend_from_slice(&[m, k]);
    let mut sb = shape[..shape.len() - 2].to_vec();
    sb.extend_from_slice(&[k, n]);
    Ok((
        Tensor::from_vec(&sa, ga)?.sum_to_shape(a.shape())?,
        Tensor::from_vec(&sb, gb)?.sum_to_shape(b.shape())?,
    ))
}

fn conv2d_geom(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, Conv2dGeom, usize)> {
    let (n, c_in, h, wd) = match *x {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("conv2d", x, w)),
    };
    let [c_out, kc, kh, kw] = *w else {
        return Err(Error::shape("conv2d", x, w));
    };
    if kc != c_in {
        return Err(Error::shape("conv2d", x, w));
    }
    if stride == 0 {
        return Err(Error::config("conv2d stride must be positive"));
    }
    let extent = |size: usize, k: usize| -> Result<usize> {
        let span = (size + 2 * pad).checked_sub(k).ok_or_else(|| {
            Error::config(format!(
                "conv2d kernel {k} larger than padded input {size}+2*{pad}"
            ))
        })?;
        if span % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent ({size}+2*{pad}-{k})/{stride}+1 is not integral"
            )));
        }
        Ok(span / stride + 1)
    };
    let geom = Conv2dGeom {
        c_in,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        h_out: extent(h, kh)?,
        w_out: extent(wd, kw)?,
    };
    Ok((n, geom, c_out))
}

fn conv2d_fwd<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    n: usize,
    g: Conv2dGeom,
    c_out: usize,
) -> Vec<F> {
    let img = g.c_in * g.h * g.w;
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![F::zero(); patch * pos];
    let mut out = vec![F::zero(); n * c_out * pos];
    for i in 0..n {
        g.im2col(&x.data()[i * img..(i + 1) * img], &mut cols);
        kernels::gemm(
            c_out,
            pos,
            patch,
            w.data(),
            false,
            &cols,
            false,
            &mut out[i * c_out * pos..(i + 1) * c_out * pos],
        );
    }
    out
}

fn conv2d_bwd<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad: &Tensor<F>,
    n: usize,
    g: Conv2dGeom,
    c_out: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let img = g.c_in * g.h * g.w;
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![F::zero(); patch * pos];
    let mut gcols = vec![F::zero(); patch * pos];
    let mut gx = vec![F::zero(); x.numel()];
    let mut gw = vec![F::zero(); w.numel()];
    for i in 0..n {
        let gi = &grad.data()[i * c_out * pos..(i + 1) * c_out * pos];
        g.im2col(&x.data()[i * img..(i + 1) * img], &mut cols);
        kernels::gemm(c_out, patch, pos, gi, false, &cols, true, &mut gw);
        gcols.iter_mut().for_each(|v| *v = F::zero());
        kernels::gemm(patch, pos, c_out, w.data(), true, gi, false, &mut gcols);
        g.col2im(&gcols, &mut gx[i * img..(i + 1) * img]);
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
    ))
}

fn conv1d_geom(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    let [c, k] = *w else {
        return Err(Error::shape("conv1d_depthwise", x, w));
    };
    if x.len() < 2 || x[x.len() - 2] != c {
        return Err(Error::shape("conv1d_depthwise", x, w));
    }
    if k % 2 == 0 {
        return Err(Error::config(format!(
            "conv1d kernel size must be odd, got {k}"
        )));
    }
    Ok((c, x[x.len() - 1], k))
}
