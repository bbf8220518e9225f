//! Differentiable operations. Each op validates shapes, computes the forward
//! value, and registers a closure that scatters the output gradient into the
//! parents. Matrix kernels accumulate in place so backward passes do not
//! allocate per-element temporaries.

use std::cell::Cell;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording backward closures: forward values are identical,
/// but no graph is built. Used for evaluation and frozen-prefix passes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

// C[m,n] += A[m,k] . B[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C[m,k] += A[m,n] . B^T where B is [k,n]
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

// C[k,n] += A^T . B where A is [m,k], B is [m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Tensor {
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        let g = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, grad_fn: super::GradFn) -> Tensor {
        if grad_enabled() {
            Tensor::from_op(data, shape, parents, grad_fn)
        } else {
            Tensor::from_parts(data, shape, false)
        }
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<Vec<usize>> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls != rs {
            return Err(Error::ShapeMismatch { op, lhs: ls, rhs: rs });
        }
        Ok(ls)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = self.same_shape(rhs, "add")?;
        let data: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Self::op(
            data,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = self.same_shape(rhs, "sub")?;
        let data: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Self::op(
            data,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(g);
                pb.with_grad_mut(|gb| {
                    for (x, gi) in gb.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = self.same_shape(rhs, "mul")?;
        let a = self.to_vec();
        let b = rhs.to_vec();
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Self::op(
            data,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.with_grad_mut(|ga| {
                    for ((x, gi), bv) in ga.iter_mut().zip(g).zip(&b) {
                        *x += gi * bv;
                    }
                });
                pb.with_grad_mut(|gb| {
                    for ((x, gi), av) in gb.iter_mut().zip(g).zip(&a) {
                        *x += gi * av;
                    }
                });
            }),
        ))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x + s).collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| p.accumulate_grad(g)),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * s).collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                p.with_grad_mut(|gp| {
                    for (x, gi) in gp.iter_mut().zip(g) {
                        *x += gi * s;
                    }
                })
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, out| {
                p.with_grad_mut(|gp| {
                    for ((x, gi), &y) in gp.iter_mut().zip(g).zip(out) {
                        if y > 0.0 {
                            *x += gi;
                        }
                    }
                })
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.tanh()).collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, out| {
                p.with_grad_mut(|gp| {
                    for ((x, gi), &y) in gp.iter_mut().zip(g).zip(out) {
                        *x += gi * (1.0 - y * y);
                    }
                })
            }),
        )
    }

    /// hard_sigmoid(x) = clamp(0.2 x + 0.5, 0, 1); derivative 0.2 strictly
    /// inside the linear region, 0 at and beyond saturation.
    pub fn hard_sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| (0.2 * x + 0.5).clamp(0.0, 1.0))
            .collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, out| {
                p.with_grad_mut(|gp| {
                    for ((x, gi), &y) in gp.iter_mut().zip(g).zip(out) {
                        if y > 0.0 && y < 1.0 {
                            *x += gi * 0.2;
                        }
                    }
                })
            }),
        )
    }

    /// Signed square root: v = sign(u) sqrt(|u|). The true derivative
    /// 1/(2 sqrt(|u|)) blows up at 0, so it is clamped to `max_grad`
    /// (and defined as `max_grad` exactly at 0).
    pub fn signed_sqrt(&self, max_grad: f64) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&u| u.signum() * u.abs().sqrt())
            .collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, out| {
                p.with_grad_mut(|gp| {
                    for ((x, gi), &v) in gp.iter_mut().zip(g).zip(out) {
                        let av = v.abs();
                        let d = if av > 0.0 { (0.5 / av).min(max_grad) } else { max_grad };
                        *x += gi * d;
                    }
                })
            }),
        )
    }

    /// Pass-through inside (lo, hi), zero gradient at and outside the bounds.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let xdata = self.to_vec();
        let data: Vec<f64> = xdata.iter().map(|x| x.clamp(lo, hi)).collect();
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                p.with_grad_mut(|gp| {
                    for ((x, gi), &xv) in gp.iter_mut().zip(g).zip(&xdata) {
                        if xv > lo && xv < hi {
                            *x += gi;
                        }
                    }
                })
            }),
        )
    }

    /// w = v / ||v||_2, mapping near-zero vectors (norm <= eps) to zero.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        let v = self.to_vec();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let guarded = norm <= eps;
        let data: Vec<f64> = if guarded {
            vec![0.0; v.len()]
        } else {
            v.iter().map(|x| x / norm).collect()
        };
        let p = self.clone();
        Self::op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _| {
                if guarded {
                    return;
                }
                // dv = g/n - v (v.g)/n^3
                let vg: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
                let n3 = norm * norm * norm;
                p.with_grad_mut(|gp| {
                    for ((x, gi), &vv) in gp.iter_mut().zip(g).zip(&v) {
                        *x += gi / norm - vv * vg / n3;
                    }
                });
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {:?} ({} elements)", self.shape(), self.numel()),
            });
        }
        let p = self.clone();
        Ok(Self::op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| p.accumulate_grad(g)),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                what: "transpose2d",
                reason: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        drop(x);
        let p = self.clone();
        Ok(Self::op(
            data,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |g, _| {
                p.with_grad_mut(|gp| {
                    for j in 0..n {
                        for i in 0..m {
                            gp[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }),
        ))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.to_vec();
        let b = rhs.to_vec();
        let mut data = vec![0.0; m * n];
        mm_nn(&a, &b, &mut data, m, k, n);
        let (pa, pb) = (self.clone(), rhs.clone());
        let a_rg = self.requires_grad();
        let b_rg = rhs.requires_grad();
        Ok(Self::op(
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                if a_rg {
                    pa.with_grad_mut(|ga| mm_nt(g, &b, ga, m, n, k));
                }
                if b_rg {
                    pb.with_grad_mut(|gb| mm_tn(&a, g, gb, m, k, n));
                }
            }),
        ))
    }

    /// [m,n] + [n], broadcasting the bias across rows.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        let bs = bias.shape();
        if s.len() != 2 || bs.len() != 1 || bs[0] != s[1] {
            return Err(Error::ShapeMismatch { op: "add_bias_rows", lhs: s, rhs: bs });
        }
        let (m, n) = (s[0], s[1]);
        let b = bias.data();
        let data: Vec<f64> = self
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        drop(b);
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Self::op(
            data,
            vec![m, n],
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(g);
                pb.with_grad_mut(|gb| {
                    for row in g.chunks_exact(n) {
                        for (x, gi) in gb.iter_mut().zip(row) {
                            *x += gi;
                        }
                    }
                });
            }),
        ))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let p = self.clone();
        Ok(Self::op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| {
                let gi = g[0];
                p.with_grad_mut(|gp| gp.iter_mut().for_each(|x| *x += gi));
            }),
        ))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        let p = self.clone();
        Ok(Self::op(
            vec![total / n as f64],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| {
                let gi = g[0] / n as f64;
                p.with_grad_mut(|gp| gp.iter_mut().for_each(|x| *x += gi));
            }),
        ))
    }

    /// 2D convolution on an [h,w,c_in] tensor with an [kh,kw,c_in,c_out]
    /// kernel and optional [c_out] bias; zero padding. Output spatial dims
    /// follow floor((in + 2 pad - k)/stride) + 1.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::InvalidArgument {
                what: "conv2d",
                reason: format!("expected input rank 3 and kernel rank 4, got {xs:?} and {ks:?}"),
            });
        }
        if xs[2] != ks[2] {
            return Err(Error::ShapeMismatch { op: "conv2d channels", lhs: xs, rhs: ks });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument { what: "conv2d", reason: "stride must be >= 1".into() });
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidArgument {
                what: "conv2d",
                reason: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        if let Some(b) = bias {
            let bs = b.shape();
            if bs != vec![cout] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: bs, rhs: vec![cout] });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let rows = oh * ow;
        let cols = kh * kw * cin;

        let x = self.to_vec();
        let mut im2col = vec![0.0; rows * cols];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut im2col[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
                let mut ci_base = 0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            let src = (iy as usize * w + ix as usize) * cin;
                            row[ci_base..ci_base + cin].copy_from_slice(&x[src..src + cin]);
                        }
                        ci_base += cin;
                    }
                }
            }
        }

        let wmat = kernel.to_vec(); // [kh*kw*cin, cout] row-major already
        let mut out = vec![0.0; rows * cout];
        mm_nn(&im2col, &wmat, &mut out, rows, cols, cout);
        if let Some(b) = bias {
            let bd = b.data();
            for row in out.chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            }
        }

        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let px = self.clone();
        let pw = kernel.clone();
        let pb = bias.cloned();
        let x_rg = self.requires_grad();
        let w_rg = kernel.requires_grad();
        Ok(Self::op(
            out,
            vec![oh, ow, cout],
            parents,
            Box::new(move |g, _| {
                // g is [oh*ow, cout] row-major
                if w_rg {
                    pw.with_grad_mut(|gw| mm_tn(&im2col, g, gw, rows, cols, cout));
                }
                if let Some(b) = &pb {
                    b.with_grad_mut(|gb| {
                        for row in g.chunks_exact(cout) {
                            for (x, gi) in gb.iter_mut().zip(row) {
                                *x += gi;
                            }
                        }
                    });
                }
                if x_rg {
                    // col grads, then scatter back through the im2col map
                    let mut gcols = vec![0.0; rows * cols];
                    mm_nt(g, &wmat, &mut gcols, rows, cout, cols);
                    px.with_grad_mut(|gx| {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = &gcols[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
                                let mut ci_base = 0;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                            let dst = (iy as usize * w + ix as usize) * cin;
                                            for c in 0..cin {
                                                gx[dst + c] += row[ci_base + c];
                                            }
                                        }
                                        ci_base += cin;
                                    }
                                }
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// 2x2 max pooling with stride 2; ties break toward the earliest element
    /// in scan order. Requires even spatial dims.
    pub fn maxpool2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::InvalidArgument {
                what: "maxpool2",
                reason: format!("expected rank 3, got {s:?}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument {
                what: "maxpool2",
                reason: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut data = vec![0.0; oh * ow * c];
        let mut argmax = vec![0u32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((oy * 2 + dy) * w + (ox * 2 + dx)) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        drop(x);
        let p = self.clone();
        Ok(Self::op(
            data,
            vec![oh, ow, c],
            vec![self.clone()],
            Box::new(move |g, _| {
                p.with_grad_mut(|gp| {
                    for (o, gi) in g.iter().enumerate() {
                        gp[argmax[o] as usize] += gi;
                    }
                })
            }),
        ))
    }
}

/// Left-fold sum of single-element tensors, in the given order.
pub fn sum_scalars(terms: &[Tensor]) -> Result<Tensor> {
    let mut it = terms.iter();
    let first = it.next().ok_or_else(|| Error::InvalidArgument {
        what: "sum_scalars",
        reason: "empty term list".into(),
    })?;
    let mut acc = first.clone();
    for t in it {
        acc = acc.add(t)?;
    }
    Ok(acc)
}
