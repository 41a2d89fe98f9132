use super::tape::{Op, Tape, Var};
use super::{gelu, gelu_grad, sigmoid, softplus, Tensor};
use crate::error::{Result, TslError};

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TslError {
    TslError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(dim_err(op, other, &[0, 0])),
    }
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).unwrap();
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data).unwrap();
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.numel() != vx.cols() {
            return Err(dim_err("add_row", vx.shape(), vb.shape()));
        }
        let n = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    /// `x ⊙ s` with the per-channel vector `s` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.numel() != vx.cols() {
            return Err(dim_err("mul_row", vx.shape(), vs.shape()));
        }
        let n = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &ss) in row.iter_mut().zip(vs.data()) {
                *o *= ss;
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(out, Op::MulRow(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(va, "matmul")?;
        let (k2, n) = matrix_dims(vb, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (va.data(), vb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// 1-D convolution over time with "same" zero padding.
    ///
    /// `x` is `T × C_in`, `kernel` is `k × C_in × C_out` with odd `k`; the
    /// output has `ceil(T / stride)` rows and output row `i` is centred on
    /// input row `i * stride`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(kernel));
        let (t, cin) = matrix_dims(vx, "conv1d")?;
        let [k, wcin, cout] = vw.shape() else {
            return Err(dim_err("conv1d", vx.shape(), vw.shape()));
        };
        let (k, cout) = (*k, *cout);
        if *wcin != cin {
            return Err(dim_err("conv1d", vx.shape(), vw.shape()));
        }
        if k % 2 == 0 {
            return Err(TslError::Config(format!(
                "conv1d kernel size {k} must be odd"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(TslError::Config(format!(
                "conv1d stride {stride} must be 1 or 2"
            )));
        }
        if t == 0 {
            return Err(TslError::EmptyInput("conv1d input has no timesteps".into()));
        }
        let pad = k / 2;
        let tout = t.div_ceil(stride);
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; tout * cout];
        for i in 0..tout {
            let orow = &mut out[i * cout..(i + 1) * cout];
            for j in 0..k {
                let Some(pos) = (i * stride + j).checked_sub(pad).filter(|&p| p < t) else {
                    continue;
                };
                let xrow = &xd[pos * cin..(pos + 1) * cin];
                let wj = &wd[j * cin * cout..(j + 1) * cin * cout];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &wj[c * cout..(c + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::new(&[tout, cout], out)?;
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w: kernel,
                stride,
            },
            &[x, kernel],
        ))
    }

    /// Per-row normalisation with population variance, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if d == 0 || vg.numel() != d || vb.numel() != d {
            return Err(dim_err("layer_norm", vx.shape(), vg.shape()));
        }
        if eps <= 0.0 {
            return Err(TslError::Config("layer_norm eps must be positive".into()));
        }
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * vg.data()[c] + vb.data()[c]);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the trailing dimension. Entries whose `mask` flag is
    /// `false` are excluded and come out as exactly zero.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = mask {
            if m.len() != vx.numel() {
                return Err(dim_err("softmax_lastdim", vx.shape(), &[m.len()]));
            }
        }
        let n = vx.cols();
        let mut out = vec![0.0; vx.numel()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if !(0..n).any(keep) {
                return Err(TslError::FullyMasked { row: r });
            }
            if !max.is_finite() {
                return Err(TslError::Numeric(format!(
                    "softmax row {r} has non-finite scores"
                )));
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; defined only for strictly positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| a <= 0.0) {
            return Err(TslError::Numeric(format!(
                "log of non-positive value {bad}"
            )));
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Zeroes every row whose `mask` flag is `false`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.rows() {
            return Err(dim_err("mask_rows", vx.shape(), &[mask.len()]));
        }
        let n = vx.cols();
        let mut data = vx.data().to_vec();
        for (row, &keep) in data.chunks_mut(n).zip(mask) {
            if !keep {
                row.fill(0.0);
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(out, Op::MaskRows(x, mask.to_vec()), &[x]))
    }

    /// Banded multi-head attention logits.
    ///
    /// For `q, k` of shape `T × D` split into `heads` blocks of `D / heads`
    /// channels, returns `heads × T × window` where entry `(h, t, j)` is
    /// `scale · ⟨q[t], k[t + j − window/2]⟩` over head `h`'s channels, or 0
    /// when that key falls outside `[0, T)`.
    pub fn window_scores(
        &mut self,
        q: Var,
        k: Var,
        heads: usize,
        window: usize,
        scale: f64,
    ) -> Result<Var> {
        self.same_shape(q, k, "window_scores")?;
        let (t, d) = matrix_dims(self.value(q), "window_scores")?;
        check_heads(d, heads, window)?;
        let dh = d / heads;
        let r = window / 2;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; heads * t * window];
        for h in 0..heads {
            for i in 0..t {
                let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..window {
                    let Some(key) = (i + j).checked_sub(r).filter(|&p| p < t) else {
                        continue;
                    };
                    let krow = &kd[key * d + h * dh..key * d + (h + 1) * dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    out[(h * t + i) * window + j] = scale * dot;
                }
            }
        }
        let out = Tensor::new(&[heads, t, window], out)?;
        Ok(self.push(
            out,
            Op::WindowScores {
                q,
                k,
                heads,
                window,
                scale,
            },
            &[q, k],
        ))
    }

    /// Mixes values with banded attention weights: the inverse layout of
    /// [`Tape::window_scores`]. `attn` is `heads × T × window`, `v` is `T × D`.
    pub fn window_mix(&mut self, attn: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(attn), self.value(v));
        let (t, d) = matrix_dims(vv, "window_mix")?;
        let [heads, ta, window] = *va.shape() else {
            return Err(dim_err("window_mix", va.shape(), vv.shape()));
        };
        if ta != t {
            return Err(dim_err("window_mix", va.shape(), vv.shape()));
        }
        check_heads(d, heads, window)?;
        let dh = d / heads;
        let r = window / 2;
        let (ad, vd) = (va.data(), vv.data());
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..window {
                    let Some(key) = (i + j).checked_sub(r).filter(|&p| p < t) else {
                        continue;
                    };
                    let w = ad[(h * t + i) * window + j];
                    let vrow = &vd[key * d + h * dh..key * d + (h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        let out = Tensor::new(&[t, d], out)?;
        Ok(self.push(out, Op::WindowMix { attn, v, window }, &[attn, v]))
    }

    /// Vector-Jacobian products of node `i` for the output gradient `g`.
    pub(crate) fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    res.push((*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(x, b) => {
                let n = out.cols();
                res.push((*x, g.to_vec()));
                if needs(*b) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::MulRow(x, s) => {
                let n = out.cols();
                let (vx, vs) = (val(*x).data(), val(*s).data());
                if needs(*x) {
                    let gx = g
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(vs).map(|(a, b)| a * b))
                        .collect();
                    res.push((*x, gx));
                }
                if needs(*s) {
                    let mut gs = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(vx.chunks(n)) {
                        for c in 0..n {
                            gs[c] += grow[c] * xrow[c];
                        }
                    }
                    res.push((*s, gs));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (ad, bd) = (va.data(), vb.data());
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    res.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Conv1d { x, w, stride } => {
                let (vx, vw) = (val(*x), val(*w));
                let (t, cin) = (vx.shape()[0], vx.shape()[1]);
                let (k, cout) = (vw.shape()[0], vw.shape()[2]);
                let tout = out.shape()[0];
                let pad = k / 2;
                let (xd, wd) = (vx.data(), vw.data());
                let mut gx = needs(*x).then(|| vec![0.0; t * cin]);
                let mut gw = needs(*w).then(|| vec![0.0; k * cin * cout]);
                for i in 0..tout {
                    let grow = &g[i * cout..(i + 1) * cout];
                    for j in 0..k {
                        let Some(pos) = (i * stride + j).checked_sub(pad).filter(|&p| p < t) else {
                            continue;
                        };
                        let base = j * cin * cout;
                        if let Some(gx) = gx.as_mut() {
                            let gxrow = &mut gx[pos * cin..(pos + 1) * cin];
                            for (c, o) in gxrow.iter_mut().enumerate() {
                                let wrow = &wd[base + c * cout..base + (c + 1) * cout];
                                *o += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xrow = &xd[pos * cin..(pos + 1) * cin];
                            for (c, &xv) in xrow.iter().enumerate() {
                                let gwrow = &mut gw[base + c * cout..base + (c + 1) * cout];
                                for (o, &gv) in gwrow.iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                if let Some(gw) = gw {
                    res.push((*w, gw));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gam = val(*gamma).data();
                if needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                    res.push((*gamma, gg));
                }
                if needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for grow in g.chunks(d) {
                        for c in 0..d {
                            gb[c] += grow[c];
                        }
                    }
                    res.push((*beta, gb));
                }
                if needs(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &rs) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let gh = grow[c] * gam[c];
                            m1 += gh;
                            m2 += gh * hrow[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            gx.push(rs * (grow[c] * gam[c] - m1 - hrow[c] * m2));
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(out.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                }
                res.push((*x, gx));
            }
            Op::Relu(x) => {
                let vx = val(*x).data();
                res.push((
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(gv, &a)| if a > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Gelu(x) => {
                let vx = val(*x).data();
                res.push((
                    *x,
                    g.iter().zip(vx).map(|(gv, &a)| gv * gelu_grad(a)).collect(),
                ));
            }
            Op::Sigmoid(x) => {
                res.push((
                    *x,
                    g.iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                ));
            }
            Op::Softplus(x) => {
                let vx = val(*x).data();
                res.push((
                    *x,
                    g.iter().zip(vx).map(|(gv, &a)| gv * sigmoid(a)).collect(),
                ));
            }
            Op::Exp(x) => {
                res.push((*x, g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect()));
            }
            Op::Log(x) => {
                let vx = val(*x).data();
                res.push((*x, g.iter().zip(vx).map(|(gv, a)| gv / a).collect()));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; val(*x).numel()])),
            Op::MaskRows(x, mask) => {
                let n = out.cols();
                let mut gx = g.to_vec();
                for (row, &keep) in gx.chunks_mut(n).zip(mask) {
                    if !keep {
                        row.fill(0.0);
                    }
                }
                res.push((*x, gx));
            }
            Op::WindowScores {
                q,
                k,
                heads,
                window,
                scale,
            } => {
                let (vq, vk) = (val(*q), val(*k));
                let (t, d) = (vq.shape()[0], vq.shape()[1]);
                let (heads, window) = (*heads, *window);
                let dh = d / heads;
                let r = window / 2;
                let (qd, kd) = (vq.data(), vk.data());
                let mut gq = vec![0.0; t * d];
                let mut gk = vec![0.0; t * d];
                for h in 0..heads {
                    for i in 0..t {
                        for j in 0..window {
                            let Some(key) = (i + j).checked_sub(r).filter(|&p| p < t) else {
                                continue;
                            };
                            let gs = scale * g[(h * t + i) * window + j];
                            if gs == 0.0 {
                                continue;
                            }
                            let qo = i * d + h * dh;
                            let ko = key * d + h * dh;
                            for c in 0..dh {
                                gq[qo + c] += gs * kd[ko + c];
                                gk[ko + c] += gs * qd[qo + c];
                            }
                        }
                    }
                }
                res.push((*q, gq));
                res.push((*k, gk));
            }
            Op::WindowMix { attn, v, window } => {
                let (va, vv) = (val(*attn), val(*v));
                let heads = va.shape()[0];
                let (t, d) = (vv.shape()[0], vv.shape()[1]);
                let window = *window;
                let dh = d / heads;
                let r = window / 2;
                let (ad, vd) = (va.data(), vv.data());
                let mut ga = vec![0.0; heads * t * window];
                let mut gv = vec![0.0; t * d];
                for h in 0..heads {
                    for i in 0..t {
                        let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        for j in 0..window {
                            let Some(key) = (i + j).checked_sub(r).filter(|&p| p < t) else {
                                continue;
                            };
                            let idx = (h * t + i) * window + j;
                            let vo = key * d + h * dh;
                            ga[idx] = grow.iter().zip(&vd[vo..vo + dh]).map(|(a, b)| a * b).sum();
                            let w = ad[idx];
                            for (o, &gg) in gv[vo..vo + dh].iter_mut().zip(grow) {
                                *o += w * gg;
                            }
                        }
                    }
                }
                res.push((*attn, ga));
                res.push((*v, gv));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (var, grad) in inputs.iter().zip(op.backward(&ins, out, g)) {
                    if let Some(grad) = grad {
                        res.push((*var, grad));
                    }
                }
            }
        }
        res
    }
}

fn check_heads(d: usize, heads: usize, window: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TslError::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    if window.is_multiple_of(2) {
        return Err(TslError::Config(format!(
            "attention window {window} must be odd"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many, DEFAULT_STEP};

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let b = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(y), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let a = tape.constant(m(&[&[1.0, 2.0]]));
        let c = tape.constant(m(&[&[3.0], &[4.0]]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);

        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TslError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::new(&[3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);

        let x5 = tape.constant(Tensor::zeros(&[5, 2]));
        let k2 = tape.constant(Tensor::zeros(&[3, 2, 4]));
        let y = tape.conv1d(x5, k2, 2).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);

        let ident = tape.constant(Tensor::new(&[3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let y = tape.conv1d(x, ident, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 1]));
        let even = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(tape.conv1d(x, even, 1), Err(TslError::Config(_))));
        let empty = tape.constant(Tensor::zeros(&[0, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(matches!(
            tape.conv1d(empty, k, 1),
            Err(TslError::EmptyInput(_))
        ));
        assert!(matches!(tape.conv1d(x, k, 3), Err(TslError::Config(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(m(&[&[5.0, 5.0], &[1.0, 3.0]]));
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);
        let y = tape.layer_norm(x, ones, zeros, 1e-300).unwrap();
        assert_eq!(tape.value(y).row(1), &[-1.0, 1.0]);

        let sevens = tape.constant(Tensor::full(&[2], 7.0));
        let y = tape.layer_norm(x, zeros, sevens, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[0.0, 0.0]]));
        let y = tape.softmax_lastdim(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(m(&[&[0.0, 3f64.ln()]]));
        let y = tape.softmax_lastdim(x, None).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let x = tape.constant(m(&[&[5.0, 9.0]]));
        let y = tape.softmax_lastdim(x, Some(&[true, false])).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        assert!(matches!(
            tape.softmax_lastdim(x, Some(&[false, false])),
            Err(TslError::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.3));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[2.0]);

        // repeated calls accumulate on leaves
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TslError::NotScalar(_))));
    }

    #[test]
    fn log_domain() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(TslError::Numeric(_))));
    }

    #[test]
    fn grad_check_examples() {
        let x = Tensor::new(&[3, 2], vec![0.3, -1.2, 2.0, 0.5, -0.1, 0.9]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");

        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);

        let err = grad_check_many(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[x.clone(), x.clone()],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-7);
    }

    #[test]
    fn window_ops_match_dense_reference() {
        // T=5, D=4, 2 heads, window 3
        let q = Tensor::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let s = tape.window_scores(qv, kv, 2, 3, 0.5).unwrap();
        let sv = tape.value(s);
        for h in 0..2 {
            for i in 0..5usize {
                for j in 0..3usize {
                    let key = i as isize + j as isize - 1;
                    let expect = if (0..5).contains(&key) {
                        let key = key as usize;
                        0.5 * (0..2)
                            .map(|c| q.get2(i, h * 2 + c) * k.get2(key, h * 2 + c))
                            .sum::<f64>()
                    } else {
                        0.0
                    };
                    assert!((sv.data()[(h * 5 + i) * 3 + j] - expect).abs() < 1e-15);
                }
            }
        }
    }
}
