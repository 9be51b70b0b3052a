//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Parameters live in one flat slice; each layer keeps the index ranges of
//! its tensors. Backward functions accumulate into a gradient slice of the
//! same layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::linalg::{add_into, dot, gemm_view, linear, linear_backward, softmax_row, Scalar, View, ViewMut};

const LN_EPS: f64 = 1e-5;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += spec.len();
        let r = spec.range();
        self.tensors.push(spec);
        r
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct LinearIdx {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub k: usize,
    pub m: usize,
}

impl LinearIdx {
    pub fn new(layout: &mut Layout, name: &str, k: usize, m: usize) -> Self {
        LinearIdx {
            w: layout.add(format!("{name}.w"), &[k, m]),
            b: layout.add(format!("{name}.b"), &[m]),
            k,
            m,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * self.m];
        linear(x, n, self.k, &p[self.w.clone()], Some(&p[self.b.clone()]), self.m, &mut y);
        y
    }

    /// Accumulates weight gradients and returns `dx` when `want_dx`.
    pub fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], x: &[T], n: usize, dy: &[T], want_dx: bool) -> Vec<T> {
        let mut dx = if want_dx { vec![T::zero(); n * self.k] } else { Vec::new() };
        let (gw, gb) = split_two(g, self.w.clone(), self.b.clone());
        linear_backward(
            x,
            n,
            self.k,
            &p[self.w.clone()],
            self.m,
            dy,
            gw,
            Some(gb),
            want_dx.then_some(dx.as_mut_slice()),
        );
        dx
    }
}

/// Two disjoint mutable windows into one slice.
pub(crate) fn split_two<T>(g: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    if a.start < b.start {
        let (lo, hi) = g.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = g.split_at_mut(a.start);
        (&mut hi[..a.end - a.start], &mut lo[b])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormIdx {
    pub g: Range<usize>,
    pub b: Range<usize>,
    pub d: usize,
}

pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNormIdx {
    pub fn new(layout: &mut Layout, name: &str, d: usize) -> Self {
        LayerNormIdx {
            g: layout.add(format!("{name}.g"), &[d]),
            b: layout.add(format!("{name}.b"), &[d]),
            d,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], n: usize) -> (Vec<T>, LnCache<T>) {
        let d = self.d;
        let (gain, bias) = (&p[self.g.clone()], &p[self.b.clone()]);
        let inv_d = T::c(1.0 / d as f64);
        let mut y = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let r = T::one() / (var + T::c(LN_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mu) * r;
                xhat[i * d + j] = h;
                y[i * d + j] = gain[j] * h + bias[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], cache: &LnCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.d;
        let n = cache.rstd.len();
        let gain = &p[self.g.clone()];
        let inv_d = T::c(1.0 / d as f64);
        let mut dx = vec![T::zero(); n * d];
        let mut dxhat = vec![T::zero(); d];
        for i in 0..n {
            let xh = &cache.xhat[i * d..(i + 1) * d];
            let dyi = &dy[i * d..(i + 1) * d];
            {
                let (gg, gb) = split_two(g, self.g.clone(), self.b.clone());
                for j in 0..d {
                    gg[j] += dyi[j] * xh[j];
                    gb[j] += dyi[j];
                    dxhat[j] = dyi[j] * gain[j];
                }
            }
            let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
            let m2 = dot(&dxhat, xh) * inv_d;
            let r = cache.rstd[i];
            for j in 0..d {
                dx[i * d + j] = r * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// `y = x + W₂·gelu(W₁·LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForwardIdx {
    pub ln: LayerNormIdx,
    pub l1: LinearIdx,
    pub l2: LinearIdx,
}

pub struct FfnCache<T> {
    ln: LnCache<T>,
    ln_out: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    n: usize,
}

impl FeedForwardIdx {
    pub fn new(layout: &mut Layout, name: &str, d: usize, hidden: usize) -> Self {
        FeedForwardIdx {
            ln: LayerNormIdx::new(layout, &format!("{name}.ln"), d),
            l1: LinearIdx::new(layout, &format!("{name}.fc1"), d, hidden),
            l2: LinearIdx::new(layout, &format!("{name}.fc2"), hidden, d),
        }
    }

    /// Residual block: returns `x + f(x)`.
    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], n: usize) -> (Vec<T>, FfnCache<T>) {
        let (ln_out, ln) = self.ln.forward(p, x, n);
        let pre = self.l1.forward(p, &ln_out, n);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let mut y = self.l2.forward(p, &act, n);
        add_into(&mut y, x);
        (
            y,
            FfnCache {
                ln,
                ln_out,
                pre,
                act,
                n,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], c: &FfnCache<T>, dy: &[T]) -> Vec<T> {
        let mut dact = self.l2.backward(p, g, &c.act, c.n, dy, true);
        for (d, &x) in dact.iter_mut().zip(&c.pre) {
            *d *= gelu_grad(x);
        }
        let dln = self.l1.backward(p, g, &c.ln_out, c.n, &dact, true);
        let mut dx = self.ln.backward(p, g, &c.ln, &dln);
        add_into(&mut dx, dy);
        dx
    }
}

/// Multi-head attention. Keys and values are projected separately from the
/// queries so one projection can serve several query passes.
#[derive(Debug, Clone)]
pub struct AttentionIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    /// Learned key/value row appended to every key set.
    pub null: Option<(Range<usize>, Range<usize>)>,
    pub heads: usize,
    pub d: usize,
}

/// Projected keys and values, `nk × d` each (including the null row).
pub struct KeyValues<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub nk: usize,
    /// Rows that came from the input (the null row, if any, follows them).
    pub n_in: usize,
}

pub struct AttnCache<T> {
    xq: Vec<T>,
    q: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    nq: usize,
}

impl AttentionIdx {
    pub fn new(layout: &mut Layout, name: &str, d: usize, heads: usize, with_null: bool) -> Self {
        assert!(d % heads == 0, "latent_dim must be divisible by n_heads");
        let q = LinearIdx::new(layout, &format!("{name}.q"), d, d);
        let k = LinearIdx::new(layout, &format!("{name}.k"), d, d);
        let v = LinearIdx::new(layout, &format!("{name}.v"), d, d);
        let o = LinearIdx::new(layout, &format!("{name}.o"), d, d);
        let null = with_null.then(|| {
            (
                layout.add(format!("{name}.null_k"), &[d]),
                layout.add(format!("{name}.null_v"), &[d]),
            )
        });
        AttentionIdx { q, k, v, o, null, heads, d }
    }

    pub fn project_kv<T: Scalar>(&self, p: &[T], x: &[T], n: usize) -> KeyValues<T> {
        let mut k = self.k.forward(p, x, n);
        let mut v = self.v.forward(p, x, n);
        let mut nk = n;
        if let Some((nk_r, nv_r)) = &self.null {
            k.extend_from_slice(&p[nk_r.clone()]);
            v.extend_from_slice(&p[nv_r.clone()]);
            nk += 1;
        }
        KeyValues { k, v, nk, n_in: n }
    }

    pub fn attend<T: Scalar>(&self, p: &[T], xq: &[T], nq: usize, kv: &KeyValues<T>) -> (Vec<T>, AttnCache<T>) {
        let d = self.d;
        let dh = d / self.heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(p, xq, nq);
        let nk = kv.nk;
        let mut probs = vec![T::zero(); self.heads * nq * nk];
        let mut o = vec![T::zero(); nq * d];
        for h in 0..self.heads {
            let ph = h * nq * nk;
            // S = Q_h K_hᵀ
            gemm_view(
                nq,
                dh,
                nk,
                View { data: &q, off: h * dh, rs: d, cs: 1 },
                View { data: &kv.k, off: h * dh, rs: 1, cs: d },
                T::zero(),
                ViewMut { data: &mut probs, off: ph, rs: nk, cs: 1 },
            );
            for row in probs[ph..ph + nq * nk].chunks_exact_mut(nk) {
                for v in row.iter_mut() {
                    *v *= scale;
                }
                softmax_row(row);
            }
            // O_h = P V_h
            gemm_view(
                nq,
                nk,
                dh,
                View { data: &probs, off: ph, rs: nk, cs: 1 },
                View { data: &kv.v, off: h * dh, rs: d, cs: 1 },
                T::zero(),
                ViewMut { data: &mut o, off: h * dh, rs: d, cs: 1 },
            );
        }
        let y = self.o.forward(p, &o, nq);
        (
            y,
            AttnCache {
                xq: xq.to_vec(),
                q,
                probs,
                o,
                nq,
            },
        )
    }

    /// Returns `dxq`; key/value gradients are accumulated into `dk`/`dv`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend_backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        c: &AttnCache<T>,
        kv: &KeyValues<T>,
        dy: &[T],
        dk: &mut [T],
        dv: &mut [T],
    ) -> Vec<T> {
        let d = self.d;
        let dh = d / self.heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let nq = c.nq;
        let nk = kv.nk;
        let d_o = self.o.backward(p, g, &c.o, nq, dy, true);
        let mut dq = vec![T::zero(); nq * d];
        let mut ds = vec![T::zero(); nq * nk];
        for h in 0..self.heads {
            let ph = h * nq * nk;
            // dP = dO_h V_hᵀ
            gemm_view(
                nq,
                dh,
                nk,
                View { data: &d_o, off: h * dh, rs: d, cs: 1 },
                View { data: &kv.v, off: h * dh, rs: 1, cs: d },
                T::zero(),
                ViewMut { data: &mut ds, off: 0, rs: nk, cs: 1 },
            );
            // dV_h += Pᵀ dO_h
            gemm_view(
                nk,
                nq,
                dh,
                View { data: &c.probs, off: ph, rs: 1, cs: nk },
                View { data: &d_o, off: h * dh, rs: d, cs: 1 },
                T::one(),
                ViewMut { data: dv, off: h * dh, rs: d, cs: 1 },
            );
            for (i, row) in ds.chunks_exact_mut(nk).enumerate() {
                let pr = &c.probs[ph + i * nk..ph + (i + 1) * nk];
                let s = dot(pr, row);
                for (v, &pj) in row.iter_mut().zip(pr) {
                    *v = pj * (*v - s) * scale;
                }
            }
            // dQ_h = dS K_h
            gemm_view(
                nq,
                nk,
                dh,
                View { data: &ds, off: 0, rs: nk, cs: 1 },
                View { data: &kv.k, off: h * dh, rs: d, cs: 1 },
                T::zero(),
                ViewMut { data: &mut dq, off: h * dh, rs: d, cs: 1 },
            );
            // dK_h += dSᵀ Q_h
            gemm_view(
                nk,
                nq,
                dh,
                View { data: &ds, off: 0, rs: 1, cs: nk },
                View { data: &c.q, off: h * dh, rs: d, cs: 1 },
                T::one(),
                ViewMut { data: dk, off: h * dh, rs: d, cs: 1 },
            );
        }
        self.q.backward(p, g, &c.xq, nq, &dq, true)
    }

    /// Backward of [`AttentionIdx::project_kv`]; returns `dx`.
    pub fn project_kv_backward<T: Scalar>(&self, p: &[T], g: &mut [T], x: &[T], kv: &KeyValues<T>, dk: &[T], dv: &[T]) -> Vec<T> {
        let d = self.d;
        let n = kv.n_in;
        if let Some((nk_r, nv_r)) = &self.null {
            add_into(&mut g[nk_r.clone()], &dk[n * d..(n + 1) * d]);
            add_into(&mut g[nv_r.clone()], &dv[n * d..(n + 1) * d]);
        }
        let mut dx = self.k.backward(p, g, x, n, &dk[..n * d], true);
        let dxv = self.v.backward(p, g, x, n, &dv[..n * d], true);
        add_into(&mut dx, &dxv);
        dx
    }
}
