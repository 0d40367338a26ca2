use crate::error::{MagicError, Result};
use crate::real::Real;

use super::ops::{self, ConvShape};
use super::tensor::{Parameter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeKind {
    Relu,
    ResidualAdd,
    ConcatChannels,
}

enum Op {
    Conv { input: ValueId, kernel: ValueId, bias: ValueId, out: ValueId, cs: ConvShape },
    Iir { input: ValueId, w1: ValueId, w2: ValueId, w3: ValueId, out: ValueId },
    MaxPool4 { input: ValueId, out: ValueId, argmax: Vec<usize> },
    Upsample4 { input: ValueId, out: ValueId },
    Relu { input: ValueId, out: ValueId },
    Clamp01 { input: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Sub { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Abs { input: ValueId, out: ValueId },
    ConcatChannels { a: ValueId, b: ValueId, out: ValueId },
    SliceChannels { input: ValueId, out: ValueId, start: usize, len: usize },
    SumAll { input: ValueId, out: ValueId },
    MeanAll { input: ValueId, out: ValueId },
}

/// Ordered record of executed operations, replayed in exact reverse order
/// by [`Tape::backward`]. Gradient accumulation is additive.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    bindings: Vec<Option<usize>>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), bindings: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push_value(&mut self, t: Tensor<T>, binding: Option<usize>) -> ValueId {
        self.values.push(t);
        self.bindings.push(binding);
        ValueId(self.values.len() - 1)
    }

    /// Record an input leaf (no parameter binding).
    pub fn input(&mut self, t: Tensor<T>) -> ValueId {
        self.push_value(t, None)
    }

    /// Record a parameter leaf bound to `params[idx]`; gradients flow back
    /// to the parameter on `backward`.
    pub fn param(&mut self, params: &[Parameter<T>], idx: usize) -> ValueId {
        self.push_value(params[idx].tensor.clone(), Some(idx))
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient of a value from the most recent `backward` call.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn conv2d_grouped(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        groups: usize,
        kh: usize,
        kw: usize,
    ) -> Result<ValueId> {
        let cs = ConvShape::check(
            &self.values[input.0],
            &self.values[kernel.0],
            &self.values[bias.0],
            groups,
            kh,
            kw,
        )?;
        let out_t =
            ops::conv2d_forward(&self.values[input.0], &self.values[kernel.0], &self.values[bias.0], cs);
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Conv { input, kernel, bias, out, cs });
        Ok(out)
    }

    pub fn iir_vertical(
        &mut self,
        input: ValueId,
        w1: ValueId,
        w2: ValueId,
        w3: ValueId,
    ) -> Result<ValueId> {
        let c = self.values[input.0].channels();
        for (name, id) in [("w1", w1), ("w2", w2), ("w3", w3)] {
            if self.values[id.0].numel() != c {
                return Err(MagicError::Config(format!(
                    "iir weight {name} has {} elements, expected one per channel ({c})",
                    self.values[id.0].numel()
                )));
            }
        }
        let out_t = ops::iir_forward(
            &self.values[input.0],
            &self.values[w1.0],
            &self.values[w2.0],
            &self.values[w3.0],
        );
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Iir { input, w1, w2, w3, out });
        Ok(out)
    }

    pub fn maxpool4(&mut self, input: ValueId) -> Result<ValueId> {
        let (out_t, argmax) = ops::maxpool4_forward(&self.values[input.0])?;
        let out = self.push_value(out_t, None);
        self.ops.push(Op::MaxPool4 { input, out, argmax });
        Ok(out)
    }

    pub fn upsample_nearest4(&mut self, input: ValueId) -> ValueId {
        let out_t = ops::upsample4_forward(&self.values[input.0]);
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Upsample4 { input, out });
        out
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let mut out_t = self.values[input.0].clone();
        out_t.zero_grad();
        for v in out_t.data_mut() {
            *v = (*v).max(T::ZERO);
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Relu { input, out });
        out
    }

    pub fn clamp01(&mut self, input: ValueId) -> ValueId {
        let mut out_t = self.values[input.0].clone();
        out_t.zero_grad();
        for v in out_t.data_mut() {
            *v = (*v).max(T::ZERO).min(T::ONE);
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Clamp01 { input, out });
        out
    }

    pub fn residual_add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(MagicError::Config(format!(
                "residual_add shape mismatch: {sa:?} vs {sb:?}"
            )));
        }
        let mut out_t = self.values[a.0].clone();
        out_t.zero_grad();
        for (o, v) in out_t.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o += *v;
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let [na, ca, ha, wa] = self.values[a.0].shape();
        let [nb, cb, hb, wb] = self.values[b.0].shape();
        if na != nb || ha != hb || wa != wb {
            return Err(MagicError::Config(format!(
                "concat_channels spatial/batch mismatch: ({na},{ha},{wa}) vs ({nb},{hb},{wb})"
            )));
        }
        let mut out_t = Tensor::zeros([na, ca + cb, ha, wa]);
        for n in 0..na {
            for y in 0..ha {
                let (ra, rb) = (self.values[a.0].row(n, y), self.values[b.0].row(n, y));
                let dst = out_t.row_mut(n, y);
                dst[..ca * wa].copy_from_slice(ra);
                dst[ca * wa..].copy_from_slice(rb);
            }
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::ConcatChannels { a, b, out });
        Ok(out)
    }

    /// Spec-level merge dispatcher.
    pub fn elementwise_merge(
        &mut self,
        kind: MergeKind,
        a: ValueId,
        b: Option<ValueId>,
    ) -> Result<ValueId> {
        match kind {
            MergeKind::Relu => Ok(self.relu(a)),
            MergeKind::ResidualAdd => {
                let b = b.ok_or_else(|| {
                    MagicError::Usage("residual_add requires a second operand".into())
                })?;
                self.residual_add(a, b)
            }
            MergeKind::ConcatChannels => {
                let b = b.ok_or_else(|| {
                    MagicError::Usage("concat_channels requires a second operand".into())
                })?;
                self.concat_channels(a, b)
            }
        }
    }

    pub fn slice_channels(&mut self, input: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let [n, c, h, w] = self.values[input.0].shape();
        if start + len > c {
            return Err(MagicError::Config(format!(
                "slice_channels [{start}, {start}+{len}) out of range for {c} channels"
            )));
        }
        let mut out_t = Tensor::zeros([n, len, h, w]);
        for nb in 0..n {
            for y in 0..h {
                let src = self.values[input.0].row(nb, y);
                out_t.row_mut(nb, y).copy_from_slice(&src[start * w..(start + len) * w]);
            }
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::SliceChannels { input, out, start, len });
        Ok(out)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(MagicError::Config(format!("sub shape mismatch: {sa:?} vs {sb:?}")));
        }
        let mut out_t = self.values[a.0].clone();
        out_t.zero_grad();
        for (o, v) in out_t.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o -= *v;
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(MagicError::Config(format!("mul shape mismatch: {sa:?} vs {sb:?}")));
        }
        let mut out_t = self.values[a.0].clone();
        out_t.zero_grad();
        for (o, v) in out_t.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= *v;
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn abs(&mut self, input: ValueId) -> ValueId {
        let mut out_t = self.values[input.0].clone();
        out_t.zero_grad();
        for v in out_t.data_mut() {
            *v = (*v).abs();
        }
        let out = self.push_value(out_t, None);
        self.ops.push(Op::Abs { input, out });
        out
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let mut s = T::ZERO;
        for v in self.values[input.0].data() {
            s += *v;
        }
        let out = self.push_value(Tensor::filled([1, 1, 1, 1], s), None);
        self.ops.push(Op::SumAll { input, out });
        out
    }

    pub fn mean_all(&mut self, input: ValueId) -> ValueId {
        let n = self.values[input.0].numel();
        let mut s = T::ZERO;
        for v in self.values[input.0].data() {
            s += *v;
        }
        let m = s / T::from_f64(n as f64);
        let out = self.push_value(Tensor::filled([1, 1, 1, 1], m), None);
        self.ops.push(Op::MeanAll { input, out });
        out
    }

    fn add_grad(&mut self, id: ValueId, delta: &[T]) {
        let g = self.grads[id.0].get_or_insert_with(|| vec![T::ZERO; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Reverse sweep: computes gradients for every recorded value from a
    /// scalar loss. Gradients flow to all bound parameters via
    /// [`Tape::backward`]'s accumulation or [`Tape::backward_grads`].
    fn reverse_sweep(&mut self, loss: ValueId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(MagicError::Usage(format!(
                "backward requires a scalar loss, got {} elements",
                self.values[loss.0].numel()
            )));
        }
        self.grads = (0..self.values.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..self.ops.len()).rev() {
            let d_out: Vec<T> = match &self.ops[i] {
                Op::Conv { out, .. }
                | Op::Iir { out, .. }
                | Op::MaxPool4 { out, .. }
                | Op::Upsample4 { out, .. }
                | Op::Relu { out, .. }
                | Op::Clamp01 { out, .. }
                | Op::Add { out, .. }
                | Op::Sub { out, .. }
                | Op::Mul { out, .. }
                | Op::Abs { out, .. }
                | Op::ConcatChannels { out, .. }
                | Op::SliceChannels { out, .. }
                | Op::SumAll { out, .. }
                | Op::MeanAll { out, .. } => match &self.grads[out.0] {
                    Some(g) => g.clone(),
                    None => continue,
                },
            };
            match &self.ops[i] {
                Op::Conv { input, kernel, bias, out, cs } => {
                    let (input, kernel, bias, out, cs) = (*input, *kernel, *bias, *out, *cs);
                    let d_out_t = Tensor::from_data(self.values[out.0].shape(), d_out).unwrap();
                    let (di, dk, db) = ops::conv2d_backward(
                        &self.values[input.0],
                        &self.values[kernel.0],
                        cs,
                        &d_out_t,
                    );
                    self.add_grad(input, di.data());
                    self.add_grad(kernel, dk.data());
                    self.add_grad(bias, db.data());
                }
                Op::Iir { input, w1, w2, w3, out } => {
                    let (input, w1, w2, w3, out) = (*input, *w1, *w2, *w3, *out);
                    let d_out_t = Tensor::from_data(self.values[out.0].shape(), d_out).unwrap();
                    let (di, d1, d2, d3) = ops::iir_backward(
                        &self.values[input.0],
                        &self.values[out.0],
                        &self.values[w1.0],
                        &self.values[w2.0],
                        &self.values[w3.0],
                        &d_out_t,
                    );
                    self.add_grad(input, di.data());
                    self.add_grad(w1, d1.data());
                    self.add_grad(w2, d2.data());
                    self.add_grad(w3, d3.data());
                }
                Op::MaxPool4 { input, out, argmax } => {
                    let (input, out) = (*input, *out);
                    let d_out_t = Tensor::from_data(self.values[out.0].shape(), d_out).unwrap();
                    let di =
                        ops::maxpool4_backward(self.values[input.0].shape(), argmax, &d_out_t);
                    self.add_grad(input, di.data());
                }
                Op::Upsample4 { input, out } => {
                    let (input, out) = (*input, *out);
                    let d_out_t = Tensor::from_data(self.values[out.0].shape(), d_out).unwrap();
                    let di = ops::upsample4_backward(self.values[input.0].shape(), &d_out_t);
                    self.add_grad(input, di.data());
                }
                Op::Relu { input, out: _ } => {
                    let input = *input;
                    let mut d = d_out;
                    for (di, xi) in d.iter_mut().zip(self.values[input.0].data()) {
                        if !(*xi > T::ZERO) {
                            *di = T::ZERO;
                        }
                    }
                    self.add_grad(input, &d);
                }
                Op::Clamp01 { input, out: _ } => {
                    let input = *input;
                    let mut d = d_out;
                    for (di, xi) in d.iter_mut().zip(self.values[input.0].data()) {
                        if !(*xi > T::ZERO && *xi < T::ONE) {
                            *di = T::ZERO;
                        }
                    }
                    self.add_grad(input, &d);
                }
                Op::Add { a, b, out: _ } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &d_out);
                    self.add_grad(b, &d_out);
                }
                Op::Sub { a, b, out: _ } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &d_out);
                    let neg: Vec<T> = d_out.iter().map(|v| -*v).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul { a, b, out: _ } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<T> =
                        d_out.iter().zip(self.values[b.0].data()).map(|(d, v)| *d * *v).collect();
                    let db: Vec<T> =
                        d_out.iter().zip(self.values[a.0].data()).map(|(d, v)| *d * *v).collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Abs { input, out: _ } => {
                    let input = *input;
                    let d: Vec<T> = d_out
                        .iter()
                        .zip(self.values[input.0].data())
                        .map(|(g, x)| {
                            if *x > T::ZERO {
                                *g
                            } else if *x < T::ZERO {
                                -*g
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    self.add_grad(input, &d);
                }
                Op::ConcatChannels { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    let [n, _, h, w] = self.values[out.0].shape();
                    let ca = self.values[a.0].channels();
                    let cb = self.values[b.0].channels();
                    let mut da = vec![T::ZERO; self.values[a.0].numel()];
                    let mut db = vec![T::ZERO; self.values[b.0].numel()];
                    for nb in 0..n {
                        for y in 0..h {
                            let src = &d_out[(nb * h + y) * (ca + cb) * w..][..(ca + cb) * w];
                            da[(nb * h + y) * ca * w..][..ca * w]
                                .copy_from_slice(&src[..ca * w]);
                            db[(nb * h + y) * cb * w..][..cb * w]
                                .copy_from_slice(&src[ca * w..]);
                        }
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::SliceChannels { input, out, start, len } => {
                    let (input, out, start, len) = (*input, *out, *start, *len);
                    let [n, _, h, w] = self.values[out.0].shape();
                    let c = self.values[input.0].channels();
                    let mut di = vec![T::ZERO; self.values[input.0].numel()];
                    for nb in 0..n {
                        for y in 0..h {
                            let src = &d_out[(nb * h + y) * len * w..][..len * w];
                            di[(nb * h + y) * c * w + start * w..][..len * w]
                                .copy_from_slice(src);
                        }
                    }
                    self.add_grad(input, &di);
                }
                Op::SumAll { input, out: _ } => {
                    let input = *input;
                    let g = d_out[0];
                    let d = vec![g; self.values[input.0].numel()];
                    self.add_grad(input, &d);
                }
                Op::MeanAll { input, out: _ } => {
                    let input = *input;
                    let n = self.values[input.0].numel();
                    let g = d_out[0] / T::from_f64(n as f64);
                    let d = vec![g; n];
                    self.add_grad(input, &d);
                }
            }
        }
        Ok(())
    }

    /// Backward pass: every bound trainable parameter receives a gradient,
    /// added onto whatever is already accumulated there. Repeated calls
    /// without a `zero_grad` accumulate.
    pub fn backward(&mut self, loss: ValueId, params: &mut [Parameter<T>]) -> Result<()> {
        self.reverse_sweep(loss)?;
        for (vid, binding) in self.bindings.iter().enumerate() {
            if let (Some(pidx), Some(g)) = (binding, &self.grads[vid]) {
                if !params[*pidx].trainable {
                    continue;
                }
                let dst = params[*pidx].tensor.grad_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
        Ok(())
    }

    /// Backward pass returning `(param_index, gradient)` pairs instead of
    /// mutating the parameters; used by the trainer's deterministic
    /// fixed-order gradient reduction.
    pub fn backward_grads(&mut self, loss: ValueId) -> Result<Vec<(usize, Vec<T>)>> {
        self.reverse_sweep(loss)?;
        let mut out = Vec::new();
        for (vid, binding) in self.bindings.iter().enumerate() {
            if let (Some(pidx), Some(g)) = (binding, &self.grads[vid]) {
                out.push((*pidx, g.clone()));
            }
        }
        Ok(out)
    }
}
