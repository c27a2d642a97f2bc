//! Differentiable primitives. Each method computes the forward value and
//! registers the matching backward closure on the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, sc, Scalar, Tensor};

/// Epsilon inside the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl<F: Scalar> Tape<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<F> = av.iter().zip(bv).map(|(x, y)| *x + *y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, &[a, b], move |_, g, sink| {
            for v in [a, b] {
                if let Some(buf) = sink.get(v) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
                }
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<F> = av.iter().zip(bv).map(|(x, y)| *x - *y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, &[a, b], move |_, g, sink| {
            if let Some(buf) = sink.get(a) {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
            }
            if let Some(buf) = sink.get(b) {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d -= *s);
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<F> = av.iter().zip(bv).map(|(x, y)| *x * *y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, &[a, b], move |vals, g, sink| {
            if sink.wants(a) {
                let bv = vals[b.0].data();
                let buf = sink.buf(a);
                for i in 0..g.len() {
                    buf[i] += g[i] * bv[i];
                }
            }
            if sink.wants(b) {
                let av = vals[a.0].data();
                let buf = sink.buf(b);
                for i in 0..g.len() {
                    buf[i] += g[i] * av[i];
                }
            }
        }))
    }

    /// `a + b` with `b` broadcast along every row of `a`'s last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(b).len() != n {
            return Err(dim_err("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(x, y)| *x += *y);
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, &[a, b], move |_, g, sink| {
            if let Some(buf) = sink.get(a) {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
            }
            if let Some(buf) = sink.get(b) {
                for row in g.chunks(n) {
                    buf.iter_mut().zip(row).for_each(|(d, s)| *d += *s);
                }
            }
        }))
    }

    /// `a * b` with `b` broadcast along every row of `a`'s last axis.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(b).len() != n {
            return Err(dim_err("mul_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(x, y)| *x *= *y);
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, &[a, b], move |vals, g, sink| {
            if sink.wants(a) {
                let bv = vals[b.0].data();
                let buf = sink.buf(a);
                for (drow, grow) in buf.chunks_mut(n).zip(g.chunks(n)) {
                    for j in 0..n {
                        drow[j] += grow[j] * bv[j];
                    }
                }
            }
            if sink.wants(b) {
                let av = vals[a.0].data();
                let buf = sink.buf(b);
                for (arow, grow) in av.chunks(n).zip(g.chunks(n)) {
                    for j in 0..n {
                        buf[j] += grow[j] * arow[j];
                    }
                }
            }
        }))
    }

    /// `mul * a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: F, add: F) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|x| mul * *x + add).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(value, &[a], move |_, g, sink| {
            if let Some(buf) = sink.get(a) {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += mul * *s);
            }
        })
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.affine(a, s, F::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.max(F::zero()))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(value, &[a], move |vals, g, sink| {
            let av = vals[a.0].data();
            let buf = sink.buf(a);
            for i in 0..g.len() {
                if av[i] > F::zero() {
                    buf[i] += g[i];
                }
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|x| F::one() / (F::one() + (-*x).exp()))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        let me = Var(self.len());
        self.push(value, &[a], move |vals, g, sink| {
            let y = vals[me.0].data();
            let buf = sink.buf(a);
            for i in 0..g.len() {
                buf[i] += g[i] * y[i] * (F::one() - y[i]);
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        let me = Var(self.len());
        self.push(value, &[a], move |vals, g, sink| {
            let y = vals[me.0].data();
            let buf = sink.buf(a);
            for i in 0..g.len() {
                buf[i] += g[i] * (F::one() - y[i] * y[i]);
            }
        })
    }

    /// Row-wise product `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b);
        let k = self.value(a).last_dim();
        if bs.len() != 2 || bs[0] != k {
            return Err(dim_err("matmul", self.shape(a), bs));
        }
        let n = bs[1];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false);
        let value = Tensor::from_parts(with_last(self.shape(a), n), out);
        Ok(self.push(value, &[a, b], move |vals, g, sink| {
            if sink.wants(a) {
                let bv = vals[b.0].data();
                matmul_nt_into(g, bv, sink.buf(a), m, n, k, true);
            }
            if sink.wants(b) {
                let av = vals[a.0].data();
                matmul_tn_into(av, g, sink.buf(b), m, k, n, true);
            }
        }))
    }

    /// Row-wise product `a[.., k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.value(a).last_dim();
        let bs = self.shape(b);
        if bs.len() != 2 || bs[1] != k {
            return Err(dim_err("matmul_nt", self.shape(a), bs));
        }
        let n = bs[0];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false);
        let value = Tensor::from_parts(with_last(self.shape(a), n), out);
        Ok(self.push(value, &[a, b], move |vals, g, sink| {
            if sink.wants(a) {
                // ga[m,k] += g[m,n] · b[n,k]
                matmul_into(g, vals[b.0].data(), sink.buf(a), m, n, k, true);
            }
            if sink.wants(b) {
                // gb[n,k] += gᵀ[n,m] · a[m,k]
                matmul_tn_into(g, vals[a.0].data(), sink.buf(b), m, n, k, true);
            }
        }))
    }

    /// Affine map over the last axis: `input · weight + bias`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ws = self.shape(weight);
        let k = self.value(input).last_dim();
        if ws.len() != 2 || ws[0] != k {
            return Err(dim_err("dense", self.shape(input), ws));
        }
        let n = ws[1];
        if self.value(bias).len() != n {
            return Err(dim_err("dense", ws, self.shape(bias)));
        }
        let m = self.value(input).len() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        let bv = self.value(bias).data();
        for row in out.chunks_mut(n) {
            row.copy_from_slice(bv);
        }
        matmul_into(
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
            m,
            k,
            n,
            true,
        );
        let value = Tensor::from_parts(with_last(self.shape(input), n), out);
        Ok(self.push(value, &[input, weight, bias], move |vals, g, sink| {
            if sink.wants(input) {
                matmul_nt_into(g, vals[weight.0].data(), sink.buf(input), m, n, k, true);
            }
            if sink.wants(weight) {
                matmul_tn_into(vals[input.0].data(), g, sink.buf(weight), m, k, n, true);
            }
            if let Some(buf) = sink.get(bias) {
                for row in g.chunks(n) {
                    buf.iter_mut().zip(row).for_each(|(d, s)| *d += *s);
                }
            }
        }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for t in 0..len {
                    mx = mx.max(x[base + t * inner]);
                }
                let mut total = F::zero();
                for t in 0..len {
                    let e = (x[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    total += e;
                }
                for t in 0..len {
                    out[base + t * inner] = out[base + t * inner] / total;
                }
            }
        }
        let me = Var(self.len());
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, &[input], move |vals, g, sink| {
            let y = vals[me.0].data();
            let buf = sink.buf(input);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = F::zero();
                    for t in 0..len {
                        dot += g[base + t * inner] * y[base + t * inner];
                    }
                    for t in 0..len {
                        let idx = base + t * inner;
                        buf[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        }))
    }

    /// Layer normalisation over the last axis with learnable gain and offset.
    pub fn layer_norm(&mut self, input: Var, gain: Var, offset: Var) -> Result<Var> {
        let n = self.value(input).last_dim();
        if self.value(gain).len() != n || self.value(offset).len() != n {
            return Err(dim_err("layer_norm", self.shape(input), self.shape(gain)));
        }
        let eps: F = sc(LAYER_NORM_EPS);
        let nf: F = sc(n as f64);
        let x = self.value(input).data();
        let gv = self.value(gain).data();
        let ov = self.value(offset).data();
        let rows = x.len() / n.max(1);
        let mut xhat = vec![F::zero(); x.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + ov[j];
            }
        }
        let value = Tensor::from_parts(self.shape(input).to_vec(), out);
        Ok(self.push(value, &[input, gain, offset], move |vals, g, sink| {
            if sink.wants(input) {
                let gv = vals[gain.0].data();
                let buf = sink.buf(input);
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..n {
                        let gh = gr[j] * gv[j];
                        m1 += gh;
                        m2 += gh * hr[j];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..n {
                        let gh = gr[j] * gv[j];
                        buf[r * n + j] += rstd[r] * (gh - m1 - hr[j] * m2);
                    }
                }
            }
            if let Some(buf) = sink.get(gain) {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        buf[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(buf) = sink.get(offset) {
                for gr in g.chunks(n) {
                    buf.iter_mut().zip(gr).for_each(|(d, s)| *d += *s);
                }
            }
        }))
    }

    /// Same-padded 2-D convolution of an `[H, W, Cin]` map with a
    /// `[k, k, Cin, Cout]` kernel, k ∈ {1, 3, 5}.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[2] != xs[2] {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        let ksize = ks[0];
        if ks[1] != ksize || !matches!(ksize, 1 | 3 | 5) {
            return Err(Error::config(format!(
                "unsupported conv2d kernel {}x{}",
                ks[0], ks[1]
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let cout = ks[3];
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(dim_err("conv2d", &ks, self.shape(b)));
            }
        }
        let pad = ksize / 2;
        let ho = (h + 2 * pad - ksize) / stride + 1;
        let wo = (w + 2 * pad - ksize) / stride + 1;
        let patch = ksize * ksize * cin;
        let cols = im2col(self.value(input).data(), h, w, cin, ksize, stride, ho, wo);
        let mut out = vec![F::zero(); ho * wo * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        matmul_into(
            &cols,
            self.value(kernel).data(),
            &mut out,
            ho * wo,
            patch,
            cout,
            true,
        );
        let value = Tensor::from_parts(vec![ho, wo, cout], out);
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(value, &parents, move |vals, g, sink| {
            if sink.wants(kernel) {
                matmul_tn_into(&cols, g, sink.buf(kernel), ho * wo, patch, cout, true);
            }
            if sink.wants(input) {
                let mut gcols = vec![F::zero(); ho * wo * patch];
                matmul_nt_into(g, vals[kernel.0].data(), &mut gcols, ho * wo, cout, patch, false);
                col2im(&gcols, sink.buf(input), h, w, cin, ksize, stride, ho, wo);
            }
            if let Some(b) = bias {
                if let Some(buf) = sink.get(b) {
                    for row in g.chunks(cout) {
                        buf.iter_mut().zip(row).for_each(|(d, s)| *d += *s);
                    }
                }
            }
        }))
    }

    /// Same-padded convolution of the `[H, W, D]` map that repeats the
    /// vector `v` at every position. Equivalent to broadcasting followed by
    /// [`Tape::conv2d`] but linear in the number of kernel taps.
    pub fn broadcast_conv2d(&mut self, v: Var, kernel: Var, h: usize, w: usize) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let d = self.value(v).len();
        if ks.len() != 4 || ks[2] != d {
            return Err(dim_err("broadcast_conv2d", self.shape(v), &ks));
        }
        let ksize = ks[0];
        if ks[1] != ksize || !matches!(ksize, 1 | 3 | 5) {
            return Err(Error::config(format!(
                "unsupported conv2d kernel {}x{}",
                ks[0], ks[1]
            )));
        }
        let cout = ks[3];
        let taps = ksize * ksize;
        // Per-tap responses u[tap] = v · K[tap].
        let mut u = vec![F::zero(); taps * cout];
        let kv = self.value(kernel).data();
        let vv = self.value(v).data();
        for t in 0..taps {
            matmul_into(
                vv,
                &kv[t * d * cout..(t + 1) * d * cout],
                &mut u[t * cout..(t + 1) * cout],
                1,
                d,
                cout,
                false,
            );
        }
        let pad = ksize / 2;
        let valid = move |pos: usize, off: usize, lim: usize| {
            let p = pos + off;
            p >= pad && p - pad < lim
        };
        let mut out = vec![F::zero(); h * w * cout];
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
                for dy in 0..ksize {
                    if !valid(y, dy, h) {
                        continue;
                    }
                    for dx in 0..ksize {
                        if !valid(x, dx, w) {
                            continue;
                        }
                        let ut = &u[(dy * ksize + dx) * cout..(dy * ksize + dx + 1) * cout];
                        o.iter_mut().zip(ut).for_each(|(a, b)| *a += *b);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![h, w, cout], out);
        Ok(self.push(value, &[v, kernel], move |vals, g, sink| {
            let mut gu = vec![F::zero(); taps * cout];
            for y in 0..h {
                for x in 0..w {
                    let gy = &g[(y * w + x) * cout..(y * w + x + 1) * cout];
                    for dy in 0..ksize {
                        if !valid(y, dy, h) {
                            continue;
                        }
                        for dx in 0..ksize {
                            if !valid(x, dx, w) {
                                continue;
                            }
                            let t = dy * ksize + dx;
                            gu[t * cout..(t + 1) * cout]
                                .iter_mut()
                                .zip(gy)
                                .for_each(|(a, b)| *a += *b);
                        }
                    }
                }
            }
            if sink.wants(kernel) {
                let vv = vals[v.0].data();
                let buf = sink.buf(kernel);
                for t in 0..taps {
                    // outer product v ⊗ gu[t]
                    matmul_into(
                        vv,
                        &gu[t * cout..(t + 1) * cout],
                        &mut buf[t * d * cout..(t + 1) * d * cout],
                        d,
                        1,
                        cout,
                        true,
                    );
                }
            }
            if sink.wants(v) {
                let kv = vals[kernel.0].data();
                let buf = sink.buf(v);
                for t in 0..taps {
                    matmul_nt_into(
                        &gu[t * cout..(t + 1) * cout],
                        &kv[t * d * cout..(t + 1) * d * cout],
                        buf,
                        1,
                        cout,
                        d,
                        true,
                    );
                }
            }
        }))
    }

    /// Mean over all leading axes: `[.., n] -> [n]`.
    pub fn mean_rows(&mut self, input: Var) -> Var {
        let n = self.value(input).last_dim();
        let x = self.value(input).data();
        let rows = x.len() / n.max(1);
        let inv: F = sc(1.0 / rows.max(1) as f64);
        let mut out = vec![F::zero(); n];
        for row in x.chunks(n) {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_parts(vec![n], out);
        self.push(value, &[input], move |_, g, sink| {
            let buf = sink.buf(input);
            for row in buf.chunks_mut(n) {
                row.iter_mut().zip(g).for_each(|(d, s)| *d += *s * inv);
            }
        })
    }

    /// Depthwise temporal filter over `[.., T, D]` with a `[k, D]` kernel
    /// and replicate padding at both sequence ends.
    pub fn depthwise_conv1d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() < 2 || ks.len() != 2 || ks[1] != xs[xs.len() - 1] {
            return Err(dim_err("depthwise_conv1d", &xs, &ks));
        }
        let t_len = xs[xs.len() - 2];
        let d = xs[xs.len() - 1];
        let ksize = ks[0];
        if ksize % 2 == 0 {
            return Err(Error::config(format!(
                "temporal kernel size must be odd, got {ksize}"
            )));
        }
        if ksize > t_len {
            return Err(Error::config(format!(
                "temporal kernel size {ksize} exceeds sequence length {t_len}"
            )));
        }
        let half = ksize / 2;
        let seqs = self.value(input).len() / (t_len * d).max(1);
        let src = move |t: usize, j: usize| (t + j).saturating_sub(half).min(t_len - 1);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![F::zero(); x.len()];
        for p in 0..seqs {
            let base = p * t_len * d;
            for t in 0..t_len {
                let o = &mut out[base + t * d..base + (t + 1) * d];
                for j in 0..ksize {
                    let s = src(t, j);
                    let xr = &x[base + s * d..base + (s + 1) * d];
                    let kr = &k[j * d..(j + 1) * d];
                    for c in 0..d {
                        o[c] += kr[c] * xr[c];
                    }
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(value, &[input, kernel], move |vals, g, sink| {
            if sink.wants(input) {
                let k = vals[kernel.0].data();
                let buf = sink.buf(input);
                for p in 0..seqs {
                    let base = p * t_len * d;
                    for t in 0..t_len {
                        for j in 0..ksize {
                            let s = src(t, j);
                            for c in 0..d {
                                buf[base + s * d + c] += k[j * d + c] * g[base + t * d + c];
                            }
                        }
                    }
                }
            }
            if sink.wants(kernel) {
                let x = vals[input.0].data();
                let buf = sink.buf(kernel);
                for p in 0..seqs {
                    let base = p * t_len * d;
                    for t in 0..t_len {
                        for j in 0..ksize {
                            let s = src(t, j);
                            for c in 0..d {
                                buf[j * d + c] += x[base + s * d + c] * g[base + t * d + c];
                            }
                        }
                    }
                }
            }
        }))
    }

    /// Stacks `T` tensors of shape `[P, D]` into `[P, T, D]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::config("stack_time needs at least one input"))?;
        let ps = self.shape(first).to_vec();
        for p in parts {
            if self.shape(*p) != ps.as_slice() {
                return Err(dim_err("stack_time", &ps, self.shape(*p)));
            }
        }
        let d = *ps.last().unwrap_or(&1);
        let rows = self.value(first).len() / d.max(1);
        let t_len = parts.len();
        let mut out = vec![F::zero(); rows * t_len * d];
        for (t, p) in parts.iter().enumerate() {
            let src = self.value(*p).data();
            for r in 0..rows {
                out[(r * t_len + t) * d..(r * t_len + t + 1) * d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor::from_parts(vec![rows, t_len, d], out);
        let parts = parts.to_vec();
        let deps = parts.clone();
        Ok(self.push(value, &deps, move |_, g, sink| {
            for (t, p) in parts.iter().enumerate() {
                if let Some(buf) = sink.get(*p) {
                    for r in 0..rows {
                        let gs = &g[(r * t_len + t) * d..(r * t_len + t + 1) * d];
                        buf[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(a, b)| *a += *b);
                    }
                }
            }
        }))
    }

    /// Timestep `t` of a `[P, T, D]` tensor as `[P, D]`.
    pub fn select_time(&mut self, input: Var, t: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 || t >= xs[1] {
            return Err(dim_err("select_time", &xs, &[t]));
        }
        let (rows, t_len, d) = (xs[0], xs[1], xs[2]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            out.extend_from_slice(&x[(r * t_len + t) * d..(r * t_len + t + 1) * d]);
        }
        let value = Tensor::from_parts(vec![rows, d], out);
        Ok(self.push(value, &[input], move |_, g, sink| {
            let buf = sink.buf(input);
            for r in 0..rows {
                buf[(r * t_len + t) * d..(r * t_len + t + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, b)| *a += *b);
            }
        }))
    }

    /// Concatenation along the last axis of two tensors with equal row counts.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.value(a).last_dim();
        let db = self.value(b).last_dim();
        let rows = self.value(a).len() / da.max(1);
        if self.value(b).len() / db.max(1) != rows {
            return Err(dim_err("concat_last", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let value = Tensor::from_parts(with_last(self.shape(a), da + db), out);
        let w = da + db;
        Ok(self.push(value, &[a, b], move |_, g, sink| {
            if let Some(buf) = sink.get(a) {
                for r in 0..rows {
                    buf[r * da..(r + 1) * da]
                        .iter_mut()
                        .zip(&g[r * w..r * w + da])
                        .for_each(|(x, y)| *x += *y);
                }
            }
            if let Some(buf) = sink.get(b) {
                for r in 0..rows {
                    buf[r * db..(r + 1) * db]
                        .iter_mut()
                        .zip(&g[r * w + da..(r + 1) * w])
                        .for_each(|(x, y)| *x += *y);
                }
            }
        }))
    }

    /// Multi-head attention pooling over time with one learned query per head.
    ///
    /// `keys: [P, T, H·dk]`, `values: [P, T, H·dv]`, `queries: [H, dk]`;
    /// returns `[P, H·dv]`, heads concatenated in order.
    pub fn query_pool(&mut self, keys: Var, values: Var, queries: Var) -> Result<Var> {
        let ks = self.shape(keys).to_vec();
        let vs = self.shape(values).to_vec();
        let qs = self.shape(queries).to_vec();
        if ks.len() != 3 || vs.len() != 3 || qs.len() != 2 || ks[..2] != vs[..2] {
            return Err(dim_err("query_pool", &ks, &vs));
        }
        let (rows, t_len) = (ks[0], ks[1]);
        let (heads, dk) = (qs[0], qs[1]);
        if heads == 0 || ks[2] != heads * dk || vs[2] % heads != 0 {
            return Err(dim_err("query_pool", &ks, &qs));
        }
        let dv = vs[2] / heads;
        let alpha = query_pool_weights(
            self.value(keys).data(),
            self.value(queries).data(),
            rows,
            t_len,
            heads,
            dk,
        );
        let vv = self.value(values).data();
        let mut out = vec![F::zero(); rows * heads * dv];
        for r in 0..rows {
            for h in 0..heads {
                let o = &mut out[(r * heads + h) * dv..(r * heads + h + 1) * dv];
                for t in 0..t_len {
                    let a = alpha[(r * heads + h) * t_len + t];
                    let vrow = &vv[((r * t_len + t) * heads + h) * dv..((r * t_len + t) * heads + h + 1) * dv];
                    o.iter_mut().zip(vrow).for_each(|(x, y)| *x += a * *y);
                }
            }
        }
        let value = Tensor::from_parts(vec![rows, heads * dv], out);
        let scale: F = sc(1.0 / (dk as f64).sqrt());
        Ok(self.push(value, &[keys, values, queries], move |vals, g, sink| {
            let kv = vals[keys.0].data();
            let vv = vals[values.0].data();
            let qv = vals[queries.0].data();
            let mut glogit = vec![F::zero(); rows * heads * t_len];
            for r in 0..rows {
                for h in 0..heads {
                    let go = &g[(r * heads + h) * dv..(r * heads + h + 1) * dv];
                    let ab = (r * heads + h) * t_len;
                    let mut ga = vec![F::zero(); t_len];
                    for t in 0..t_len {
                        let vrow = &vv[((r * t_len + t) * heads + h) * dv..((r * t_len + t) * heads + h + 1) * dv];
                        ga[t] = go.iter().zip(vrow).map(|(x, y)| *x * *y).sum();
                    }
                    let dot: F = (0..t_len).map(|t| ga[t] * alpha[ab + t]).sum();
                    for t in 0..t_len {
                        glogit[ab + t] = alpha[ab + t] * (ga[t] - dot) * scale;
                    }
                }
            }
            if sink.wants(values) {
                let buf = sink.buf(values);
                for r in 0..rows {
                    for h in 0..heads {
                        let go = &g[(r * heads + h) * dv..(r * heads + h + 1) * dv];
                        for t in 0..t_len {
                            let a = alpha[(r * heads + h) * t_len + t];
                            let off = ((r * t_len + t) * heads + h) * dv;
                            buf[off..off + dv]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(x, y)| *x += a * *y);
                        }
                    }
                }
            }
            if sink.wants(keys) {
                let buf = sink.buf(keys);
                for r in 0..rows {
                    for h in 0..heads {
                        let q = &qv[h * dk..(h + 1) * dk];
                        for t in 0..t_len {
                            let gl = glogit[(r * heads + h) * t_len + t];
                            let off = ((r * t_len + t) * heads + h) * dk;
                            buf[off..off + dk]
                                .iter_mut()
                                .zip(q)
                                .for_each(|(x, y)| *x += gl * *y);
                        }
                    }
                }
            }
            if sink.wants(queries) {
                let buf = sink.buf(queries);
                for r in 0..rows {
                    for h in 0..heads {
                        for t in 0..t_len {
                            let gl = glogit[(r * heads + h) * t_len + t];
                            let off = ((r * t_len + t) * heads + h) * dk;
                            buf[h * dk..(h + 1) * dk]
                                .iter_mut()
                                .zip(&kv[off..off + dk])
                                .for_each(|(x, y)| *x += gl * *y);
                        }
                    }
                }
            }
        }))
    }

    /// Bilinear upsampling of an `[h, w, C]` grid by an integer factor
    /// (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 || factor == 0 {
            return Err(dim_err("upsample_bilinear", &xs, &[factor]));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let ry = interp_axis::<F>(h, factor);
        let rx = interp_axis::<F>(w, factor);
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![F::zero(); ho * wo * c];
        for (oy, &(y0, y1, wy)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in rx.iter().enumerate() {
                let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for (yy, fy) in [(y0, F::one() - wy), (y1, wy)] {
                    for (xx, fx) in [(x0, F::one() - wx), (x1, wx)] {
                        let f = fy * fx;
                        if f == F::zero() {
                            continue;
                        }
                        let src = &x[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        o.iter_mut().zip(src).for_each(|(a, b)| *a += f * *b);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![ho, wo, c], out);
        Ok(self.push(value, &[input], move |_, g, sink| {
            let buf = sink.buf(input);
            for (oy, &(y0, y1, wy)) in ry.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in rx.iter().enumerate() {
                    let go = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                    for (yy, fy) in [(y0, F::one() - wy), (y1, wy)] {
                        for (xx, fx) in [(x0, F::one() - wx), (x1, wx)] {
                            let f = fy * fx;
                            if f == F::zero() {
                                continue;
                            }
                            buf[(yy * w + xx) * c..(yy * w + xx + 1) * c]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(a, b)| *a += f * *b);
                        }
                    }
                }
            }
        }))
    }

    /// Rows of `table: [R, D]` selected by `index`, giving `[N, D]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index.iter().any(|&i| i >= ts[0]) {
            return Err(dim_err("gather_rows", &ts, &[index.len()]));
        }
        let d = ts[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![index.len(), d], out);
        let index = index.to_vec();
        Ok(self.push(value, &[table], move |_, g, sink| {
            let buf = sink.buf(table);
            for (n, &i) in index.iter().enumerate() {
                buf[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[n * d..(n + 1) * d])
                    .for_each(|(a, b)| *a += *b);
            }
        }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(dim_err("reshape", self.shape(input), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(input).data().to_vec());
        Ok(self.push(value, &[input], move |_, g, sink| {
            sink.buf(input)
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += *b);
        }))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        self.push(Tensor::scalar(total), &[input], move |_, g, sink| {
            let g0 = g[0];
            sink.buf(input).iter_mut().for_each(|a| *a += g0);
        })
    }

    /// `Σ weightᵢ · termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        for (v, _) in terms {
            if self.value(*v).len() != 1 {
                return Err(dim_err("weighted_sum", self.shape(*v), &[1]));
            }
        }
        let total = terms
            .iter()
            .map(|(v, w)| *w * self.value(*v).data()[0])
            .sum();
        let terms = terms.to_vec();
        let deps: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        Ok(self.push(Tensor::scalar(total), &deps, move |_, g, sink| {
            for (v, w) in &terms {
                if let Some(buf) = sink.get(*v) {
                    buf[0] += *w * g[0];
                }
            }
        }))
    }
}

/// Attention weights of [`Tape::query_pool`], laid out `[P, H, T]`.
pub fn query_pool_weights<F: Scalar>(
    keys: &[F],
    queries: &[F],
    rows: usize,
    t_len: usize,
    heads: usize,
    dk: usize,
) -> Vec<F> {
    let scale: F = sc(1.0 / (dk as f64).sqrt());
    let mut alpha = vec![F::zero(); rows * heads * t_len];
    for r in 0..rows {
        for h in 0..heads {
            let q = &queries[h * dk..(h + 1) * dk];
            let a = &mut alpha[(r * heads + h) * t_len..(r * heads + h + 1) * t_len];
            for (t, slot) in a.iter_mut().enumerate() {
                let off = ((r * t_len + t) * heads + h) * dk;
                *slot = keys[off..off + dk]
                    .iter()
                    .zip(q)
                    .map(|(x, y)| *x * *y)
                    .sum::<F>()
                    * scale;
            }
            softmax_in_place(a);
        }
    }
    alpha
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Source indices and blend weight for each output coordinate.
fn interp_axis<F: Scalar>(n: usize, factor: usize) -> Vec<(usize, usize, F)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, sc(src - i0 as f64))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let pad = k / 2;
    let patch = k * k * cin;
    let mut cols = vec![F::zero(); ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for dy in 0..k {
                let iy = oy * stride + dy;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for dx in 0..k {
                    let ix = ox * stride + dx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let dst = (dy * k + dx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    gx: &mut [F],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let pad = k / 2;
    let patch = k * k * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for dy in 0..k {
                let iy = oy * stride + dy;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for dx in 0..k {
                    let ix = ox * stride + dx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let src = (dy * k + dx) * cin;
                    gx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin]
                        .iter_mut()
                        .zip(&row[src..src + cin])
                        .for_each(|(a, b)| *a += *b);
                }
            }
        }
    }
}

#[cfg(test)]
#[path = "ops_tests.rs"]
mod tests;
