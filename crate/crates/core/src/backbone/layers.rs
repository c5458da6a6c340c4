//! Transformer building blocks with explicit forward caches and backward
//! passes. Every `backward` accumulates parameter gradients into a value of
//! the same type as the layer and returns the gradient w.r.t. its input.

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`.
    pub weight: Matrix<T>,
    /// `1 x out`.
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Matrix::zeros(inp, out),
            bias: Matrix::zeros(1, out),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) -> Matrix<T> {
        grad.weight.add_assign(&x.matmul_at(dy));
        grad.bias.add_assign(&dy.column_sums());
        dy.matmul_bt(&self.weight)
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Matrix<T>,
    pub bias: Matrix<T>,
}

pub struct LayerNormCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::from_vec(1, d, vec![T::one(); d]),
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, LayerNormCache<T>) {
        let (rows, d) = x.shape();
        let mut xhat = Matrix::zeros(rows, d);
        let mut y = Matrix::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().map(|v| v.widen()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c].widen() - mean) * is;
                xhat.set(r, c, T::narrow(h));
                y.set(
                    r,
                    c,
                    T::narrow(h * self.gain.get(0, c).widen() + self.bias.get(0, c).widen()),
                );
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Matrix<T>, grad: &mut LayerNorm<T>) -> Matrix<T> {
        let (rows, d) = dy.shape();
        let mut dx = Matrix::zeros(rows, d);
        let mut dgain = vec![0.0f64; d];
        let mut dbias = vec![0.0f64; d];
        let mut dxhat = vec![0.0f64; d];
        for r in 0..rows {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let g = dy.get(r, c).widen();
                let h = cache.xhat.get(r, c).widen();
                dgain[c] += g * h;
                dbias[c] += g;
                dxhat[c] = g * self.gain.get(0, c).widen();
                mean_dxhat += dxhat[c];
                mean_dxhat_xhat += dxhat[c] * h;
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for c in 0..d {
                let h = cache.xhat.get(r, c).widen();
                dx.set(
                    r,
                    c,
                    T::narrow(cache.inv_std[r] * (dxhat[c] - mean_dxhat - h * mean_dxhat_xhat)),
                );
            }
        }
        for c in 0..d {
            grad.gain.set(0, c, T::narrow(grad.gain.get(0, c).widen() + dgain[c]));
            grad.bias.set(0, c, T::narrow(grad.bias.get(0, c).widen() + dbias[c]));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

pub struct FeedForwardCache<T> {
    x: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn zeros(d: usize, ff: usize) -> Self {
        Self {
            up: Linear::zeros(d, ff),
            down: Linear::zeros(ff, d),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(x);
        let mut act = pre.clone();
        act.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = T::narrow(gelu(v.widen())));
        let y = self.down.forward(&act);
        (y, FeedForwardCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, dy: &Matrix<T>, grad: &mut FeedForward<T>) -> Matrix<T> {
        let mut dact = self.down.backward(&cache.act, dy, &mut grad.down);
        for (g, p) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g = T::narrow(g.widen() * gelu_grad(p.widen()));
        }
        self.up.backward(&cache.x, &dact, &mut grad.up)
    }
}

/// Inverted dropout; the cached mask holds `0` or `1 / (1 - p)`.
pub struct DropoutMask<T>(Option<Vec<T>>);

/// Forward-pass mode: evaluation, or training with dropout driven by a
/// caller-owned generator.
pub struct Mode<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    rate: f64,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self { rng: None, rate: 0.0 }
    }

    pub fn train(rng: &'a mut ChaCha8Rng, rate: f64) -> Self {
        Self { rng: Some(rng), rate }
    }

    pub fn dropout<T: Scalar>(&mut self, x: &mut Matrix<T>) -> DropoutMask<T> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.rate);
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if rng.gen_bool(self.rate) {
                            T::zero()
                        } else {
                            T::narrow(keep)
                        }
                    })
                    .collect();
                for (v, m) in x.as_mut_slice().iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
                DropoutMask(Some(mask))
            }
            _ => DropoutMask(None),
        }
    }
}

impl<T: Scalar> DropoutMask<T> {
    pub fn backward(&self, dy: &Matrix<T>) -> Matrix<T> {
        match &self.0 {
            None => dy.clone(),
            Some(mask) => {
                let mut dx = dy.clone();
                for (v, m) in dx.as_mut_slice().iter_mut().zip(mask) {
                    *v = *v * *m;
                }
                dx
            }
        }
    }
}

/// Which attention a cell count belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

/// Query-key score cells computed per attention kind, summed over layers
/// (heads are not multiplied in). Counted per thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionCells {
    pub encoder_self: u64,
    pub decoder_self: u64,
    pub decoder_cross: u64,
}

thread_local! {
    static CELLS: Cell<AttentionCells> = const { Cell::new(AttentionCells {
        encoder_self: 0,
        decoder_self: 0,
        decoder_cross: 0,
    }) };
}

pub fn reset_attention_cells() {
    CELLS.with(|c| c.set(AttentionCells::default()));
}

pub fn attention_cells() -> AttentionCells {
    CELLS.with(Cell::get)
}

fn count_cells(kind: AttnKind, cells: usize) {
    CELLS.with(|c| {
        let mut v = c.get();
        match kind {
            AttnKind::EncoderSelf => v.encoder_self += cells as u64,
            AttnKind::DecoderSelf => v.decoder_self += cells as u64,
            AttnKind::DecoderCross => v.decoder_cross += cells as u64,
        }
        c.set(v);
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

pub struct AttentionCache<T> {
    xq: Matrix<T>,
    xkv: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per head, `lq x lk` row-major probabilities.
    probs: Vec<Vec<f64>>,
    context: Matrix<T>,
}

impl<T: Scalar> AttentionCache<T> {
    /// Attention distribution of one head, row `i` over keys.
    pub fn probs_row(&self, head: usize, i: usize) -> &[f64] {
        let lk = self.k.rows();
        &self.probs[head][i * lk..(i + 1) * lk]
    }
}

/// Softmax over the allowed keys of one score row; masked keys get 0.
fn masked_softmax(scores: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, s) in scores.iter().enumerate() {
        if allowed(j) && *s > max {
            max = *s;
        }
    }
    if !max.is_finite() {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        *s = if allowed(j) { (*s - max).exp() } else { 0.0 };
        sum += *s;
    }
    scores.iter_mut().for_each(|s| *s /= sum);
}

impl<T: Scalar> Attention<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
        }
    }

    /// Multi-head scaled dot-product attention of `xq` over `xkv`.
    /// `key_valid[j] == false` removes key `j`; `causal` restricts query `i`
    /// to keys `j <= i`.
    pub fn forward(
        &self,
        xq: &Matrix<T>,
        xkv: &Matrix<T>,
        key_valid: Option<&[bool]>,
        causal: bool,
        heads: usize,
        kind: AttnKind,
    ) -> (Matrix<T>, AttentionCache<T>) {
        let q = self.wq.forward(xq);
        let k = self.wk.forward(xkv);
        let v = self.wv.forward(xkv);
        let (lq, d) = q.shape();
        let lk = k.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        count_cells(kind, lq * lk);

        let mut context = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = vec![0.0f64; lq * lk];
            for i in 0..lq {
                let qi = &q.row(i)[cols.clone()];
                let row = &mut p[i * lk..(i + 1) * lk];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                masked_softmax(row, |j| key_valid.is_none_or(|m| m[j]) && (!causal || j <= i));
                let mut acc = vec![0.0f64; dh];
                for (j, &pij) in row.iter().enumerate() {
                    if pij == 0.0 {
                        continue;
                    }
                    for (a, vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *a += pij * vv.widen();
                    }
                }
                for (c, a) in cols.clone().zip(acc) {
                    context.set(i, c, T::narrow(a));
                }
            }
            probs.push(p);
        }
        let out = self.wo.forward(&context);
        (
            out,
            AttentionCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Matrix<T>,
        heads: usize,
        grad: &mut Attention<T>,
    ) -> (Matrix<T>, Matrix<T>) {
        let dctx = self.wo.backward(&cache.context, dy, &mut grad.wo);
        let (lq, d) = cache.q.shape();
        let lk = cache.k.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0f64; lq * d];
        let mut dk = vec![0.0f64; lk * d];
        let mut dv = vec![0.0f64; lk * d];
        let mut dp = vec![0.0f64; lk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[h];
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let g = &dctx.row(i)[cols.clone()];
                let mut weighted = 0.0;
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(g, &cache.v.row(j)[cols.clone()]);
                    weighted += dp[j] * prow[j];
                    for (c, gv) in cols.clone().zip(g) {
                        dv[j * d + c] += prow[j] * gv.widen();
                    }
                }
                for j in 0..lk {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    for c in cols.clone() {
                        dq[i * d + c] += ds * cache.k.get(j, c).widen();
                        dk[j * d + c] += ds * cache.q.get(i, c).widen();
                    }
                }
            }
        }
        let to_m = |rows, v: Vec<f64>| Matrix::from_vec(rows, d, v.into_iter().map(T::narrow).collect());
        let (dq, dk, dv) = (to_m(lq, dq), to_m(lk, dk), to_m(lk, dv));
        let dxq = self.wq.backward(&cache.xq, &dq, &mut grad.wq);
        let mut dxkv = self.wk.backward(&cache.xkv, &dk, &mut grad.wk);
        dxkv.add_assign(&self.wv.backward(&cache.xkv, &dv, &mut grad.wv));
        (dxq, dxkv)
    }

    /// Attention for a single query row over precomputed keys and values
    /// (all keys visible, subject to `key_valid`).
    pub fn attend_row(
        &self,
        q: &[T],
        k: &Matrix<T>,
        v: &Matrix<T>,
        key_valid: Option<&[bool]>,
        heads: usize,
        kind: AttnKind,
    ) -> Matrix<T> {
        let d = q.len();
        let lk = k.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        count_cells(kind, lk);
        let mut context = Matrix::zeros(1, d);
        let mut row = vec![0.0f64; lk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(&q[cols.clone()], &k.row(j)[cols.clone()]) * scale;
            }
            masked_softmax(&mut row, |j| key_valid.is_none_or(|m| m[j]));
            let mut acc = vec![0.0f64; dh];
            for (j, &pij) in row.iter().enumerate() {
                if pij == 0.0 {
                    continue;
                }
                for (a, vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *a += pij * vv.widen();
                }
            }
            for (c, a) in cols.zip(acc) {
                context.set(0, c, T::narrow(a));
            }
        }
        self.wo.forward(&context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut row = vec![0.5, -1.0, 2.0, 7.0];
        masked_softmax(&mut row, |j| j != 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
    }
}
