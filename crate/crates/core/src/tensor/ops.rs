use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn trailing(op: &str, x: &Tensor, v: &Tensor) -> Result<usize> {
    let (_, cols) = x.rows_cols();
    if v.ndim() != 1 || v.numel() != cols {
        return Err(Error::dim(format!(
            "{op}: trailing vector of shape {:?} does not match last axis {cols}",
            v.shape()
        )));
    }
    Ok(cols)
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Tensor::from_op("reshape", self.data().to_vec(), shape.to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op("add", data, self.shape().to_vec(), &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op("sub", data, self.shape().to_vec(), &[self, other], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("mul", data, self.shape().to_vec(), &[self, other], move |g| {
            let ga = a.requires_grad().then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
            let gb = b.requires_grad().then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        })
    }

    pub fn square(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * v).collect();
        let a = self.clone();
        Tensor::from_op("square", data, self.shape().to_vec(), &[self], move |g| {
            vec![Some(g.iter().zip(a.data()).map(|(g, a)| 2.0 * a * g).collect())]
        })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op("scale", data, self.shape().to_vec(), &[self], move |g| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Adds `v` (length = last axis) to every row.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let cols = trailing("add_row", self, v)?;
        let data = self
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(v.data()).map(|(a, b)| a + b))
            .collect();
        Tensor::from_op("add_row", data, self.shape().to_vec(), &[self, v], move |g| {
            let mut gv = vec![0.0; cols];
            for row in g.chunks(cols) {
                for (a, b) in gv.iter_mut().zip(row) {
                    *a += b;
                }
            }
            vec![Some(g.to_vec()), Some(gv)]
        })
    }

    /// Multiplies every row element-wise by `v` (length = last axis).
    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        let cols = trailing("mul_row", self, v)?;
        let data = self
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(v.data()).map(|(a, b)| a * b))
            .collect();
        let (x, w) = (self.clone(), v.clone());
        Tensor::from_op("mul_row", data, self.shape().to_vec(), &[self, v], move |g| {
            let gx = x.requires_grad().then(|| {
                g.chunks(cols)
                    .flat_map(|row| row.iter().zip(w.data()).map(|(a, b)| a * b))
                    .collect()
            });
            let gw = w.requires_grad().then(|| {
                let mut gw = vec![0.0; cols];
                for (grow, xrow) in g.chunks(cols).zip(x.data().chunks(cols)) {
                    for ((acc, gv), xv) in gw.iter_mut().zip(grow).zip(xrow) {
                        *acc += gv * xv;
                    }
                }
                gw
            });
            vec![gx, gw]
        })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = gemm(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("matmul", data, vec![m, n], &[self, other], move |g| {
            let ga = a.requires_grad().then(|| gemm_nt(g, b.data(), m, n, k));
            let gb = b.requires_grad().then(|| gemm_tn(a.data(), g, m, k, n));
            vec![ga, gb]
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_t: inner dimensions {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let data = gemm_nt(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("matmul_t", data, vec![m, n], &[self, other], move |g| {
            let ga = a.requires_grad().then(|| gemm(g, b.data(), m, n, k));
            let gb = b.requires_grad().then(|| gemm_tn(g, a.data(), m, n, k));
            vec![ga, gb]
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op("transpose", data, vec![c, r], &[self], move |g| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(out)]
        })
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::dim(format!("narrow_rows {start}+{len} of {r}")));
        }
        let data = self.data()[start * c..(start + len) * c].to_vec();
        Tensor::from_op("narrow_rows", data, vec![len, c], &[self], move |g| {
            let mut out = vec![0.0; r * c];
            out[start * c..(start + len) * c].copy_from_slice(g);
            vec![Some(out)]
        })
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("narrow_cols {start}+{len} of {c}")));
        }
        let data = self
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Tensor::from_op("narrow_cols", data, vec![r, len], &[self], move |g| {
            let mut out = vec![0.0; r * c];
            for (dst, src) in out.chunks_mut(c).zip(g.chunks(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            vec![Some(out)]
        })
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let (_, c) = first.dims2()?;
        let mut rows = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::dim(format!("concat_rows: {pc} columns vs {c}")));
            }
            rows.push(r);
        }
        let total: usize = rows.iter().sum();
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::from_op("concat_rows", data, vec![total, c], &refs, move |g| {
            let mut off = 0;
            rows.iter()
                .map(|&r| {
                    let piece = g[off * c..(off + r) * c].to_vec();
                    off += r;
                    Some(piece)
                })
                .collect()
        })
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, c) = p.dims2()?;
            if pr != r {
                return Err(Error::dim(format!("concat_cols: {pr} rows vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::from_op("concat_cols", data, vec![r, total], &refs, move |g| {
            let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(r * w)).collect();
            for row in g.chunks(total) {
                let mut off = 0;
                for (o, &w) in out.iter_mut().zip(&widths) {
                    o.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            out.into_iter().map(Some).collect()
        })
    }

    /// Rows of `table` selected by `ids`; gradients scatter-add back.
    pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = table.dims2()?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::input(format!("row id {bad} out of range for {r} rows")));
        }
        let data = ids
            .iter()
            .flat_map(|&i| table.data()[i * c..(i + 1) * c].iter().copied())
            .collect();
        let ids = ids.to_vec();
        let n = ids.len();
        Tensor::from_op("gather_rows", data, vec![n, c], &[table], move |g| {
            let mut out = vec![0.0; r * c];
            for (k, &i) in ids.iter().enumerate() {
                for (a, b) in out[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                    *a += b;
                }
            }
            vec![Some(out)]
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![1], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean over rows of the squared row norm: `mean_b Σ_d x[b,d]²`.
    pub fn mean_row_sq_norm(&self) -> Result<Tensor> {
        let (rows, _) = self.rows_cols();
        self.square()?.sum()?.scale(1.0 / rows as f64)
    }

    /// Tanh-approximated GELU, evaluated as `x·σ(2z)` with
    /// `z = √(2/π)(x + 0.044715x³)` (identical to `0.5x(1 + tanh z)`).
    pub fn gelu(&self) -> Result<Tensor> {
        let sig = |x: f64| 1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp());
        let data = self.data().iter().map(|&x| x * sig(x)).collect();
        let a = self.clone();
        Tensor::from_op("gelu", data, self.shape().to_vec(), &[self], move |g| {
            let out = g
                .iter()
                .zip(a.data())
                .map(|(g, &x)| {
                    let s = sig(x);
                    let dz = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (s + x * 2.0 * s * (1.0 - s) * dz)
                })
                .collect();
            vec![Some(out)]
        })
    }

    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let a = self.clone();
        Tensor::from_op("silu", data, self.shape().to_vec(), &[self], move |g| {
            let out = g
                .iter()
                .zip(a.data())
                .map(|(g, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(out)]
        })
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies the `gamma`/`beta` affine.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::contract(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let d = trailing("layer_norm", self, gamma)?;
        trailing("layer_norm", self, beta)?;
        let (rows, _) = self.rows_cols();
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (row, out)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let data = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gamma.data())
                    .zip(beta.data())
                    .map(|((x, g), b)| x * g + b)
            })
            .collect();
        let (x, gm, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op("layer_norm", data, self.shape().to_vec(), &[self, gamma, beta], move |g| {
            let gx = x.requires_grad().then(|| {
                let mut out = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dx = 0.0;
                    let mut mean_dx_x = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm.data()[j];
                        mean_dx += dxh;
                        mean_dx_x += dxh * xr[j];
                    }
                    mean_dx /= d as f64;
                    mean_dx_x /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gm.data()[j];
                        out[r * d + j] = inv_std[r] * (dxh - mean_dx - xr[j] * mean_dx_x);
                    }
                }
                out
            });
            let gg = gm.requires_grad().then(|| {
                let mut acc = vec![0.0; d];
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((a, gv), xv) in acc.iter_mut().zip(gr).zip(xr) {
                        *a += gv * xv;
                    }
                }
                acc
            });
            let gb = bt.requires_grad().then(|| {
                let mut acc = vec![0.0; d];
                for gr in g.chunks(d) {
                    for (a, gv) in acc.iter_mut().zip(gr) {
                        *a += gv;
                    }
                }
                acc
            });
            vec![gx, gg, gb]
        })
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_last(&self) -> Result<Tensor> {
        self.softmax_impl(false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::dim(format!("causal_softmax on {r}x{c}")));
        }
        self.softmax_impl(true)
    }

    fn softmax_impl(&self, causal: bool) -> Result<Tensor> {
        let (_, d) = self.rows_cols();
        let mut data = vec![0.0; self.numel()];
        for (i, (row, out)) in self.data().chunks(d).zip(data.chunks_mut(d)).enumerate() {
            let visible = if causal { i + 1 } else { d };
            let max = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[..visible].iter_mut().zip(&row[..visible]) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in out[..visible].iter_mut() {
                *o /= z;
            }
        }
        let y = data.clone();
        Tensor::from_op("softmax", data, self.shape().to_vec(), &[self], move |g| {
            let mut out = vec![0.0; g.len()];
            for ((gr, yr), or) in g.chunks(d).zip(y.chunks(d)).zip(out.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(out)]
        })
    }

    /// Mean next-token negative log-likelihood of `targets` under row-wise
    /// softmax of `self` (shape `[N, V]`).
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (n, v) = self.dims2()?;
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::input(format!("target {bad} outside vocabulary {v}")));
        }
        let mut probs = vec![0.0; n * v];
        let mut nll = 0.0;
        for (i, (row, p)) in self.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pv, x) in p.iter_mut().zip(row) {
                *pv = (x - max).exp();
                z += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= z;
            }
            nll += -(row[targets[i]] - max - z.ln());
        }
        let targets = targets.to_vec();
        Tensor::from_op("cross_entropy", vec![nll / n as f64], vec![1], &[self], move |g| {
            let scale = g[0] / n as f64;
            let mut out = probs.clone();
            for (i, row) in out.chunks_mut(v).enumerate() {
                row[targets[i]] -= 1.0;
                for x in row.iter_mut() {
                    *x *= scale;
                }
            }
            vec![Some(out)]
        })
    }
}
