//! Differentiable operations. Matrices are 2-D row-major; row vectors are
//! `[1, d]` and reductions return shape `[]`.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `a[n×k] · b[k×m]`
fn mm<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n×k]ᵀ · b[n×m]` → `k×m`
fn mm_tn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n×m] · b[k×m]ᵀ` → `n×k`
fn mm_nt<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

fn need(p: &Tensor<impl Scalar>) -> bool {
    p.requires_grad()
}

fn map_unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, out, ps| {
            let xin = ps[0].data();
            let gx = g
                .iter()
                .zip(xin.iter().zip(out))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.dims2();
        let (k2, m) = other.dims2();
        if self.shape().len() != 2 || other.shape().len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let data = mm(&self.data(), &other.data(), n, k, m);
        Ok(Tensor::from_op(
            data,
            vec![n, m],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, ps| {
                let ga = need(&ps[0]).then(|| mm_nt(g, &ps[1].data(), n, m, k));
                let gb = need(&ps[1]).then(|| mm_tn(&ps[0].data(), g, n, k, m));
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; `other` may also be a `[1, m]` row broadcast over rows.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() == other.shape() {
            let data = self
                .data()
                .iter()
                .zip(other.data().iter())
                .map(|(&a, &b)| a + b)
                .collect();
            return Ok(Tensor::from_op(
                data,
                self.shape().to_vec(),
                vec![self.clone(), other.clone()],
                Box::new(|g, _, ps| {
                    vec![
                        need(&ps[0]).then(|| g.to_vec()),
                        need(&ps[1]).then(|| g.to_vec()),
                    ]
                }),
            ));
        }
        let (n, m) = self.dims2();
        let (r, c) = other.dims2();
        if self.shape().len() != 2 || r != 1 || c != m {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        let b = other.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + b[i % m])
            .collect();
        drop(b);
        Ok(Tensor::from_op(
            data,
            vec![n, m],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, ps| {
                let gb = need(&ps[1]).then(|| {
                    let mut acc = vec![T::zero(); m];
                    for (i, &v) in g.iter().enumerate() {
                        acc[i % m] += v;
                    }
                    acc
                });
                vec![need(&ps[0]).then(|| g.to_vec()), gb]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.add(&other.scale(-T::one()))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, ps| {
                let ga = need(&ps[0]).then(|| {
                    g.iter().zip(ps[1].data().iter()).map(|(&g, &b)| g * b).collect()
                });
                let gb = need(&ps[1]).then(|| {
                    g.iter().zip(ps[0].data().iter()).map(|(&g, &a)| g * a).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        map_unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        map_unary(self, move |v| v + c, |_, _| T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        map_unary(
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        map_unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn log(&self) -> Tensor<T> {
        map_unary(self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn exp(&self) -> Tensor<T> {
        map_unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn tanh(&self) -> Tensor<T> {
        map_unary(self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape())));
        }
        let (n, m) = self.dims2();
        let d = self.data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = g[j * n + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape().len() != 2 {
            return Err(Error::shape(op, format!("expected 2-D, got {:?}", self.shape())));
        }
        Ok(self.dims2())
    }

    pub fn row_softmax(&self) -> Result<Tensor<T>> {
        let (n, m) = self.require_2d("row_softmax")?;
        if m == 0 {
            return Err(Error::shape("row_softmax", "zero columns"));
        }
        let d = self.data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..m {
                let e = (row[j] - max).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for v in &mut out[i * m..(i + 1) * m] {
                *v /= sum;
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); n * m];
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let dot: T = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let (n, m) = self.require_2d("log_softmax")?;
        let d = self.data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &d[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            for j in 0..m {
                out[i * m + j] = row[j] - lse;
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); n * m];
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let gs: T = g[r.clone()].iter().copied().sum();
                    for j in r {
                        gx[j] = g[j] - y[j].exp() * gs;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, d]`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (n, d) = self.require_2d("layer_norm")?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let eps = T::lit(eps);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        let df = T::lit(d as f64);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = gm[j] * h + bt[j];
            }
        }
        drop((x, gm, bt));
        Ok(Tensor::from_op(
            out,
            vec![n, d],
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, ps| {
                let gm = ps[1].data();
                let gx = need(&ps[0]).then(|| {
                    let mut gx = vec![T::zero(); n * d];
                    for i in 0..n {
                        let r = i * d..(i + 1) * d;
                        let gh: Vec<T> = r.clone().map(|k| g[k] * gm[k - i * d]).collect();
                        let mean_gh = gh.iter().copied().sum::<T>() / df;
                        let mean_ghx = gh
                            .iter()
                            .zip(&xhat[r.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                            / df;
                        for (j, k) in r.enumerate() {
                            gx[k] = inv_std[i] * (gh[j] - mean_gh - xhat[k] * mean_ghx);
                        }
                    }
                    gx
                });
                let ggamma = need(&ps[1]).then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (k, &gv) in g.iter().enumerate() {
                        acc[k % d] += gv * xhat[k];
                    }
                    acc
                });
                let gbeta = need(&ps[2]).then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (k, &gv) in g.iter().enumerate() {
                        acc[k % d] += gv;
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| p.require_2d("concat"))
            .collect::<Result<_>>()?;
        if axis == 0 {
            let m = dims[0].1;
            if dims.iter().any(|d| d.1 != m) {
                return Err(Error::shape("concat", format!("column counts {dims:?}")));
            }
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&p.data());
            }
            let n: usize = dims.iter().map(|d| d.0).sum();
            let sizes: Vec<usize> = dims.iter().map(|d| d.0 * m).collect();
            Ok(Tensor::from_op(
                data,
                vec![n, m],
                parts.to_vec(),
                Box::new(move |g, _, ps| {
                    let mut off = 0;
                    sizes
                        .iter()
                        .zip(ps)
                        .map(|(&s, p)| {
                            let piece = need(p).then(|| g[off..off + s].to_vec());
                            off += s;
                            piece
                        })
                        .collect()
                }),
            ))
        } else {
            let n = dims[0].0;
            if dims.iter().any(|d| d.0 != n) {
                return Err(Error::shape("concat", format!("row counts {dims:?}")));
            }
            let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
            let m: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * m);
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for i in 0..n {
                for (d, &w) in datas.iter().zip(&widths) {
                    data.extend_from_slice(&d[i * w..(i + 1) * w]);
                }
            }
            drop(datas);
            Ok(Tensor::from_op(
                data,
                vec![n, m],
                parts.to_vec(),
                Box::new(move |g, _, ps| {
                    let mut off = 0;
                    widths
                        .iter()
                        .zip(ps)
                        .map(|(&w, p)| {
                            let piece = need(p).then(|| {
                                let mut v = Vec::with_capacity(n * w);
                                for i in 0..n {
                                    v.extend_from_slice(&g[i * m + off..i * m + off + w]);
                                }
                                v
                            });
                            off += w;
                            piece
                        })
                        .collect()
                }),
            ))
        }
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (n, m) = self.require_2d("slice_rows")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {n} rows")));
        }
        let data = self.data()[start * m..end * m].to_vec();
        Ok(Tensor::from_op(
            data,
            vec![end - start, m],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); n * m];
                gx[start * m..end * m].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (n, m) = self.require_2d("slice_cols")?;
        if start >= end || end > m {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {m} columns")));
        }
        let w = end - start;
        let d = self.data();
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&d[i * m + start..i * m + end]);
        }
        drop(d);
        Ok(Tensor::from_op(
            data,
            vec![n, w],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); n * m];
                for i in 0..n {
                    gx[i * m + start..i * m + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row lookup: `out[i] = self[ids[i]]`; gradients scatter-add back.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let (n, m) = self.require_2d("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let d = self.data();
        let mut data = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            data.extend_from_slice(&d[i * m..(i + 1) * m]);
        }
        drop(d);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), m],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); n * m];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..m {
                        gx[i * m + j] += g[k * m + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Copy of `self` with rows `positions[i]` replaced by row `i` of `src`.
    pub fn overwrite_rows(&self, positions: &[usize], src: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, m) = self.require_2d("overwrite_rows")?;
        let (sn, sm) = src.require_2d("overwrite_rows")?;
        if sn != positions.len() || sm != m || positions.iter().any(|&p| p >= n) {
            return Err(Error::shape(
                "overwrite_rows",
                format!("{:?} rows {positions:?} from {:?}", self.shape(), src.shape()),
            ));
        }
        let mut data = self.to_vec();
        {
            let s = src.data();
            for (k, &p) in positions.iter().enumerate() {
                data[p * m..(p + 1) * m].copy_from_slice(&s[k * m..(k + 1) * m]);
            }
        }
        let positions = positions.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![n, m],
            vec![self.clone(), src.clone()],
            Box::new(move |g, _, ps| {
                let gb = need(&ps[0]).then(|| {
                    let mut gb = g.to_vec();
                    for &p in &positions {
                        gb[p * m..(p + 1) * m].fill(T::zero());
                    }
                    gb
                });
                let gs = need(&ps[1]).then(|| {
                    let mut gs = Vec::with_capacity(positions.len() * m);
                    for &p in &positions {
                        gs.extend_from_slice(&g[p * m..(p + 1) * m]);
                    }
                    gs
                });
                vec![gb, gs]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Cosine similarity of two tensors with the same number of elements.
    pub fn cosine_similarity(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.numel() != other.numel() || self.numel() == 0 {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let tiny = T::lit(1e-12);
        let a = self.data();
        let b = other.data();
        let dot: T = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
        let na = a.iter().map(|&x| x * x).sum::<T>().sqrt().max(tiny);
        let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt().max(tiny);
        let cos = dot / (na * nb);
        drop((a, b));
        Ok(Tensor::from_op(
            vec![cos],
            Vec::new(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                let grad = |x: &[T], y: &[T], nx: T| -> Vec<T> {
                    x.iter()
                        .zip(y)
                        .map(|(&xi, &yi)| g[0] * (yi / (na * nb) - cos * xi / (nx * nx)))
                        .collect()
                };
                vec![
                    need(&ps[0]).then(|| grad(&a, &b, na)),
                    need(&ps[1]).then(|| grad(&b, &a, nb)),
                ]
            }),
        ))
    }

    /// Summed softmax cross-entropy of `[n, c]` logits against class indices.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (n, c) = self.require_2d("softmax_cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n}x{c} logits, targets {targets:?}"),
            ));
        }
        let d = self.data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &d[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        drop(d);
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] -= T::one();
                }
                for v in &mut gx {
                    *v *= g[0];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Summed binary cross-entropy on logits, computed stably.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", self.numel(), targets.len()),
            ));
        }
        let d = self.data();
        let loss: T = d
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        drop(d);
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, ps| {
                let z = ps[0].data();
                let gx = z
                    .iter()
                    .zip(&targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Summed binary cross-entropy on probabilities clamped to `[ε, 1−ε]`.
    pub fn binary_cross_entropy(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.numel() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} probabilities, {} targets", self.numel(), targets.len()),
            ));
        }
        let eps = T::lit(1e-12);
        let clamp = move |p: T| p.max(eps).min(T::one() - eps);
        let d = self.data();
        let loss: T = d
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = clamp(p);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum();
        drop(d);
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, ps| {
                let pd = ps[0].data();
                let gx = pd
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &y)| {
                        let p = clamp(p);
                        g[0] * (p - y) / (p * (T::one() - p))
                    })
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Tensor<T> {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.gen_bool(p) { T::zero() } else { keep })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| v * k)
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().zip(&mask).map(|(&g, &k)| g * k).collect())]),
        )
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
