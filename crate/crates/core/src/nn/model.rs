//! Forward and backward passes for the encoder, decoder, and classifier.
//!
//! All three stages share the same pre-norm transformer block (masked
//! multi-head attention, GELU MLP with 4x expansion). Backward passes are
//! written by hand against per-block caches; gradients land in one flat
//! buffer laid out like the weights, so the optimizer and the
//! finite-difference oracle can treat parameters uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::Signal;

use super::math::{
    add_assign, add_bias, axpy, dot, matmul, matmul_a_bt_acc, matmul_at_b_acc, sc, Mat, Scalar,
};
use super::weights::{grad, BlockIds, LnIds, ModelWeights};
use super::{ModelConfig, NnError};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Classify,
}

/// One night in a batch. `tokens` may be padded past `n_real` rows; padded
/// rows are excluded from attention and from the loss.
#[derive(Debug, Clone)]
pub struct BatchItem<E> {
    pub tokens: Mat<E>,
    pub n_real: usize,
    pub target: Option<Mat<E>>,
    pub label: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct Batch<E> {
    pub items: Vec<BatchItem<E>>,
}

/// Classifier batch over cached encoder latents.
#[derive(Debug, Clone)]
pub struct LatentItem<E> {
    pub latents: Mat<E>,
    pub n_real: usize,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct LatentBatch<E> {
    pub items: Vec<LatentItem<E>>,
}

struct DropCtx<'r> {
    rng: &'r mut ChaCha8Rng,
    rate: f64,
}

/// Non-overlapping windows of `patch_samples` respiration samples, capped
/// at `max_tokens` by truncation; the trailing partial window is dropped.
pub fn patchify<E: Scalar>(resp: &Signal, cfg: &ModelConfig) -> Result<Mat<E>, NnError> {
    debug_assert!(
        (resp.rate_hz - 10.0).abs() < 1e-6,
        "patchify expects 10 Hz respiration, got {}",
        resp.rate_hz
    );
    let p = cfg.patch_samples;
    if resp.samples.len() < p {
        return Err(NnError::SignalTooShort {
            len: resp.samples.len(),
            need: p,
        });
    }
    let t = (resp.samples.len() / p).min(cfg.max_tokens);
    let mut m = Mat::zeros(t, p);
    for (dst, src) in m.data.iter_mut().zip(&resp.samples[..t * p]) {
        *dst = sc(f64::from(*src));
    }
    Ok(m)
}

fn gelu<E: Scalar>(x: E) -> E {
    let half = sc::<E>(0.5);
    let u = sc::<E>(GELU_C) * (x + sc::<E>(GELU_A) * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_deriv<E: Scalar>(x: E) -> E {
    let half = sc::<E>(0.5);
    let u = sc::<E>(GELU_C) * (x + sc::<E>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = sc::<E>(GELU_C) * (E::ONE + sc::<E>(3.0 * GELU_A) * x * x);
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * du
}

fn softmax_in_place<E: Scalar>(row: &mut [E]) {
    let mut m = row[0];
    for &v in row.iter().skip(1) {
        m = m.maxs(v);
    }
    let mut sum = E::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = E::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `(y, xh, rstd)` with per-row normalization and affine output.
fn ln_forward<E: Scalar>(x: &Mat<E>, g: &[E], b: &[E]) -> (Mat<E>, Mat<E>, Vec<E>) {
    let (t, d) = (x.rows, x.cols);
    let mut y = Mat::zeros(t, d);
    let mut xh = Mat::zeros(t, d);
    let mut rstd = vec![E::ZERO; t];
    let inv_d = sc::<E>(1.0 / d as f64);
    for i in 0..t {
        let xr = x.row(i);
        let mut mean = E::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = E::ZERO;
        for &v in xr {
            let dv = v - mean;
            var += dv * dv;
        }
        var *= inv_d;
        let r = E::ONE / (var + sc(LN_EPS)).sqrt();
        rstd[i] = r;
        let xh_row = xh.row_mut(i);
        let y_row = y.row_mut(i);
        for j in 0..d {
            let h = (xr[j] - mean) * r;
            xh_row[j] = h;
            y_row[j] = g[j] * h + b[j];
        }
    }
    (y, xh, rstd)
}

/// Recomputes the affine output `g * xh + b` from a cached normalization.
fn ln_apply<E: Scalar>(xh: &Mat<E>, g: &[E], b: &[E]) -> Mat<E> {
    let mut y = Mat::zeros(xh.rows, xh.cols);
    for i in 0..xh.rows {
        let src = xh.row(i);
        let dst = y.row_mut(i);
        for j in 0..xh.cols {
            dst[j] = g[j] * src[j] + b[j];
        }
    }
    y
}

/// Accumulates layer-norm input gradients into `dx` and parameter
/// gradients into `dg`/`db`.
fn ln_backward<E: Scalar>(
    dy: &Mat<E>,
    xh: &Mat<E>,
    rstd: &[E],
    g: &[E],
    dg: &mut [E],
    db: &mut [E],
    dx: &mut Mat<E>,
) {
    let (t, d) = (dy.rows, dy.cols);
    let inv_d = sc::<E>(1.0 / d as f64);
    for i in 0..t {
        let dy_row = dy.row(i);
        let xh_row = xh.row(i);
        let mut m1 = E::ZERO;
        let mut m2 = E::ZERO;
        for j in 0..d {
            let dxh = dy_row[j] * g[j];
            m1 += dxh;
            m2 += dxh * xh_row[j];
            dg[j] += dy_row[j] * xh_row[j];
            db[j] += dy_row[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let r = rstd[i];
        let dx_row = dx.row_mut(i);
        for j in 0..d {
            let dxh = dy_row[j] * g[j];
            dx_row[j] += r * (dxh - m1 - xh_row[j] * m2);
        }
    }
}

fn add_colsum<E: Scalar>(dy: &[E], db: &mut [E], rows: usize, cols: usize) {
    debug_assert_eq!(dy.len(), rows * cols);
    debug_assert_eq!(db.len(), cols);
    for i in 0..rows {
        for (b, &v) in db.iter_mut().zip(&dy[i * cols..(i + 1) * cols]) {
            *b += v;
        }
    }
}

fn mul_mask<E: Scalar>(x: &mut [E], mask: &[E]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

fn apply_dropout<E: Scalar>(x: &mut Mat<E>, drop: &mut Option<DropCtx<'_>>) -> Option<Vec<E>> {
    let ctx = drop.as_mut()?;
    let inv = sc::<E>(1.0 / (1.0 - ctx.rate));
    let mask: Vec<E> = x
        .data
        .iter()
        .map(|_| {
            if ctx.rng.gen::<f64>() < ctx.rate {
                E::ZERO
            } else {
                inv
            }
        })
        .collect();
    mul_mask(&mut x.data, &mask);
    Some(mask)
}

struct BlockCache<E> {
    xh1: Mat<E>,
    rstd1: Vec<E>,
    qkv: Mat<E>,
    probs: Vec<Mat<E>>,
    ctx: Mat<E>,
    drop1: Option<Vec<E>>,
    xh2: Mat<E>,
    rstd2: Vec<E>,
    h1: Mat<E>,
    act: Mat<E>,
    drop2: Option<Vec<E>>,
}

struct StackCache<E> {
    blocks: Vec<BlockCache<E>>,
    xh_f: Mat<E>,
    rstd_f: Vec<E>,
}

fn block_forward<E: Scalar>(
    w: &ModelWeights<E>,
    ids: &BlockIds,
    n_heads: usize,
    x: Mat<E>,
    n_real: usize,
    drop: &mut Option<DropCtx<'_>>,
    cache_slot: Option<&mut Option<BlockCache<E>>>,
) -> Mat<E> {
    let (t, d) = (x.rows, x.cols);
    let dh = d / n_heads;
    let scale = sc::<E>(1.0 / (dh as f64).sqrt());

    let (y1, xh1, rstd1) = ln_forward(&x, w.p(ids.ln1.g), w.p(ids.ln1.b));
    let mut qkv = Mat::zeros(t, 3 * d);
    matmul(&y1.data, w.p(ids.wqkv), &mut qkv.data, t, d, 3 * d);
    add_bias(&mut qkv.data, w.p(ids.bqkv), t, 3 * d);

    let mut ctx = Mat::zeros(t, d);
    let mut probs = Vec::with_capacity(n_heads);
    let neg = sc::<E>(MASK_NEG);
    for h in 0..n_heads {
        let q0 = h * dh;
        let k0 = d + h * dh;
        let v0 = 2 * d + h * dh;
        let mut p = Mat::zeros(t, t);
        for i in 0..t {
            let pr = p.row_mut(i);
            for (j, pv) in pr.iter_mut().enumerate() {
                *pv = if j < n_real {
                    dot(&qkv.row(i)[q0..q0 + dh], &qkv.row(j)[k0..k0 + dh]) * scale
                } else {
                    neg
                };
            }
            softmax_in_place(pr);
        }
        for i in 0..t {
            for j in 0..n_real {
                let pij = p.row(i)[j];
                axpy(
                    &mut ctx.row_mut(i)[q0..q0 + dh],
                    pij,
                    &qkv.row(j)[v0..v0 + dh],
                );
            }
        }
        probs.push(p);
    }

    let mut attn = Mat::zeros(t, d);
    matmul(&ctx.data, w.p(ids.wo), &mut attn.data, t, d, d);
    add_bias(&mut attn.data, w.p(ids.bo), t, d);
    let drop1 = apply_dropout(&mut attn, drop);
    let mut x_mid = x;
    add_assign(&mut x_mid.data, &attn.data);

    let (y2, xh2, rstd2) = ln_forward(&x_mid, w.p(ids.ln2.g), w.p(ids.ln2.b));
    let mut h1 = Mat::zeros(t, 4 * d);
    matmul(&y2.data, w.p(ids.w1), &mut h1.data, t, d, 4 * d);
    add_bias(&mut h1.data, w.p(ids.b1), t, 4 * d);
    let mut act = Mat::zeros(t, 4 * d);
    for (a, &hv) in act.data.iter_mut().zip(&h1.data) {
        *a = gelu(hv);
    }
    let mut mlp = Mat::zeros(t, d);
    matmul(&act.data, w.p(ids.w2), &mut mlp.data, t, 4 * d, d);
    add_bias(&mut mlp.data, w.p(ids.b2), t, d);
    let drop2 = apply_dropout(&mut mlp, drop);
    let mut x_out = x_mid;
    add_assign(&mut x_out.data, &mlp.data);

    if let Some(slot) = cache_slot {
        *slot = Some(BlockCache {
            xh1,
            rstd1,
            qkv,
            probs,
            ctx,
            drop1,
            xh2,
            rstd2,
            h1,
            act,
            drop2,
        });
    }
    x_out
}

fn block_backward<E: Scalar>(
    w: &ModelWeights<E>,
    ids: &BlockIds,
    n_heads: usize,
    c: &BlockCache<E>,
    dx_out: Mat<E>,
    n_real: usize,
    grads: &mut [E],
) -> Mat<E> {
    let (t, d) = (dx_out.rows, dx_out.cols);
    let dh = d / n_heads;
    let scale = sc::<E>(1.0 / (dh as f64).sqrt());

    let mut d_mlp = dx_out.clone();
    if let Some(mask) = &c.drop2 {
        mul_mask(&mut d_mlp.data, mask);
    }
    matmul_at_b_acc(
        &c.act.data,
        &d_mlp.data,
        grad(grads, w, ids.w2),
        t,
        4 * d,
        d,
    );
    add_colsum(&d_mlp.data, grad(grads, w, ids.b2), t, d);
    let mut d_act = Mat::zeros(t, 4 * d);
    matmul_a_bt_acc(&d_mlp.data, w.p(ids.w2), &mut d_act.data, t, d, 4 * d);

    let mut d_h1 = d_act;
    for (dv, &hv) in d_h1.data.iter_mut().zip(&c.h1.data) {
        *dv *= gelu_deriv(hv);
    }
    let y2 = ln_apply(&c.xh2, w.p(ids.ln2.g), w.p(ids.ln2.b));
    matmul_at_b_acc(&y2.data, &d_h1.data, grad(grads, w, ids.w1), t, d, 4 * d);
    add_colsum(&d_h1.data, grad(grads, w, ids.b1), t, 4 * d);
    let mut d_y2 = Mat::zeros(t, d);
    matmul_a_bt_acc(&d_h1.data, w.p(ids.w1), &mut d_y2.data, t, 4 * d, d);

    let mut d_x_mid = dx_out;
    {
        let (dg, db) = (ids.ln2.g, ids.ln2.b);
        let e_g = w.entry(dg).offset..w.entry(dg).offset + w.entry(dg).len();
        let e_b = w.entry(db).offset..w.entry(db).offset + w.entry(db).len();
        let (gslice, bslice) = split_two(grads, e_g, e_b);
        ln_backward(
            &d_y2,
            &c.xh2,
            &c.rstd2,
            w.p(ids.ln2.g),
            gslice,
            bslice,
            &mut d_x_mid,
        );
    }

    let mut d_attn = d_x_mid.clone();
    if let Some(mask) = &c.drop1 {
        mul_mask(&mut d_attn.data, mask);
    }
    matmul_at_b_acc(&c.ctx.data, &d_attn.data, grad(grads, w, ids.wo), t, d, d);
    add_colsum(&d_attn.data, grad(grads, w, ids.bo), t, d);
    let mut d_ctx = Mat::zeros(t, d);
    matmul_a_bt_acc(&d_attn.data, w.p(ids.wo), &mut d_ctx.data, t, d, d);

    let mut d_qkv = Mat::zeros(t, 3 * d);
    let mut dp = vec![E::ZERO; t];
    for h in 0..n_heads {
        let q0 = h * dh;
        let k0 = d + h * dh;
        let v0 = 2 * d + h * dh;
        let p = &c.probs[h];
        for i in 0..t {
            let p_row = p.row(i);
            let dci = &d_ctx.row(i)[q0..q0 + dh];
            let mut inner = E::ZERO;
            for j in 0..n_real {
                dp[j] = dot(dci, &c.qkv.row(j)[v0..v0 + dh]);
                inner += dp[j] * p_row[j];
            }
            for j in 0..n_real {
                let pij = p_row[j];
                let ds = pij * (dp[j] - inner) * scale;
                axpy(
                    &mut d_qkv.row_mut(i)[q0..q0 + dh],
                    ds,
                    &c.qkv.row(j)[k0..k0 + dh],
                );
                axpy(
                    &mut d_qkv.row_mut(j)[k0..k0 + dh],
                    ds,
                    &c.qkv.row(i)[q0..q0 + dh],
                );
                axpy(&mut d_qkv.row_mut(j)[v0..v0 + dh], pij, dci);
            }
        }
    }

    let y1 = ln_apply(&c.xh1, w.p(ids.ln1.g), w.p(ids.ln1.b));
    matmul_at_b_acc(
        &y1.data,
        &d_qkv.data,
        grad(grads, w, ids.wqkv),
        t,
        d,
        3 * d,
    );
    add_colsum(&d_qkv.data, grad(grads, w, ids.bqkv), t, 3 * d);
    let mut d_y1 = Mat::zeros(t, d);
    matmul_a_bt_acc(&d_qkv.data, w.p(ids.wqkv), &mut d_y1.data, t, 3 * d, d);
    {
        let e_g = w.entry(ids.ln1.g).offset..w.entry(ids.ln1.g).offset + w.entry(ids.ln1.g).len();
        let e_b = w.entry(ids.ln1.b).offset..w.entry(ids.ln1.b).offset + w.entry(ids.ln1.b).len();
        let (gslice, bslice) = split_two(grads, e_g, e_b);
        ln_backward(
            &d_y1,
            &c.xh1,
            &c.rstd1,
            w.p(ids.ln1.g),
            gslice,
            bslice,
            &mut d_x_mid,
        );
    }
    d_x_mid
}

/// Two disjoint mutable slices out of one buffer.
fn split_two<E>(
    buf: &mut [E],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [E], &mut [E]) {
    assert!(a.end <= b.start || b.end <= a.start);
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a.start..a.end], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        let a_len = a.end - a.start;
        (&mut hi[..a_len], &mut lo[b.start..b.end])
    }
}

fn stack_forward<E: Scalar>(
    w: &ModelWeights<E>,
    blocks: &[BlockIds],
    norm: LnIds,
    n_heads: usize,
    mut x: Mat<E>,
    n_real: usize,
    stage: &'static str,
    drop: &mut Option<DropCtx<'_>>,
    want_cache: bool,
) -> Result<(Mat<E>, Option<StackCache<E>>), NnError> {
    let mut caches = if want_cache {
        Some(Vec::with_capacity(blocks.len()))
    } else {
        None
    };
    for (b, ids) in blocks.iter().enumerate() {
        let mut slot = None;
        x = block_forward(
            w,
            ids,
            n_heads,
            x,
            n_real,
            drop,
            caches.as_mut().map(|_| &mut slot),
        );
        if !x.all_finite() {
            return Err(NnError::NonFinite { stage, block: b });
        }
        if let Some(cs) = caches.as_mut() {
            cs.push(slot.unwrap());
        }
    }
    let (y, xh_f, rstd_f) = ln_forward(&x, w.p(norm.g), w.p(norm.b));
    if !y.all_finite() {
        return Err(NnError::NonFinite {
            stage,
            block: blocks.len(),
        });
    }
    let cache = caches.map(|blocks| StackCache {
        blocks,
        xh_f,
        rstd_f,
    });
    Ok((y, cache))
}

fn stack_backward<E: Scalar>(
    w: &ModelWeights<E>,
    blocks: &[BlockIds],
    norm: LnIds,
    n_heads: usize,
    cache: &StackCache<E>,
    dy: &Mat<E>,
    n_real: usize,
    grads: &mut [E],
) -> Mat<E> {
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    {
        let e_g = w.entry(norm.g).offset..w.entry(norm.g).offset + w.entry(norm.g).len();
        let e_b = w.entry(norm.b).offset..w.entry(norm.b).offset + w.entry(norm.b).len();
        let (gslice, bslice) = split_two(grads, e_g, e_b);
        ln_backward(
            dy,
            &cache.xh_f,
            &cache.rstd_f,
            w.p(norm.g),
            gslice,
            bslice,
            &mut dx,
        );
    }
    for (ids, c) in blocks.iter().zip(&cache.blocks).rev() {
        dx = block_backward(w, ids, n_heads, c, dx, n_real, grads);
    }
    dx
}

fn encoder_embed<E: Scalar>(w: &ModelWeights<E>, tokens: &Mat<E>) -> Mat<E> {
    let cfg = &w.cfg;
    let (t, d) = (tokens.rows, cfg.embed_dim);
    let ids = w.ids();
    let mut x = Mat::zeros(t, d);
    matmul(
        &tokens.data,
        w.p(ids.patch_w),
        &mut x.data,
        t,
        cfg.patch_samples,
        d,
    );
    add_bias(&mut x.data, w.p(ids.patch_b), t, d);
    let pos = w.p(ids.enc_pos);
    add_assign(&mut x.data, &pos[..t * d]);
    x
}

fn check_tokens<E: Scalar>(w: &ModelWeights<E>, tokens: &Mat<E>, n_real: usize) -> Result<(), NnError> {
    let cfg = &w.cfg;
    if tokens.cols != cfg.patch_samples {
        return Err(NnError::ShapeMismatch(format!(
            "tokens have {} columns, patch_samples is {}",
            tokens.cols, cfg.patch_samples
        )));
    }
    check_rows(cfg, tokens.rows, n_real, "tokens")
}

fn check_rows(cfg: &ModelConfig, rows: usize, n_real: usize, what: &str) -> Result<(), NnError> {
    if rows == 0 || rows > cfg.max_tokens {
        return Err(NnError::ShapeMismatch(format!(
            "{what} row count {} outside 1..={}",
            rows, cfg.max_tokens
        )));
    }
    if n_real == 0 || n_real > rows {
        return Err(NnError::ShapeMismatch(format!(
            "n_real {} outside 1..={} {what} rows",
            n_real, rows
        )));
    }
    Ok(())
}

fn check_latents<E: Scalar>(w: &ModelWeights<E>, latents: &Mat<E>, n_real: usize) -> Result<(), NnError> {
    if latents.cols != w.cfg.embed_dim {
        return Err(NnError::ShapeMismatch(format!(
            "latents have {} columns, embed_dim is {}",
            latents.cols, w.cfg.embed_dim
        )));
    }
    check_rows(&w.cfg, latents.rows, n_real, "latents")
}

/// Respiration tokens to per-token latents, eval mode.
pub fn encoder_forward<E: Scalar>(
    w: &ModelWeights<E>,
    tokens: &Mat<E>,
    n_real: usize,
) -> Result<Mat<E>, NnError> {
    check_tokens(w, tokens, n_real)?;
    let x = encoder_embed(w, tokens);
    let ids = w.ids();
    let mut drop = None;
    let (latents, _) = stack_forward(
        w,
        &ids.enc_blocks,
        ids.enc_norm,
        w.cfg.n_heads,
        x,
        n_real,
        "encoder",
        &mut drop,
        false,
    )?;
    Ok(latents)
}

fn decoder_embed<E: Scalar>(w: &ModelWeights<E>, latents: &Mat<E>) -> Mat<E> {
    let (t, d) = (latents.rows, latents.cols);
    let mut x = latents.clone();
    let pos = w.p(w.ids().dec_pos);
    add_assign(&mut x.data, &pos[..t * d]);
    x
}

/// Latents to per-token spectrogram-bin predictions, eval mode.
pub fn decoder_forward<E: Scalar>(
    w: &ModelWeights<E>,
    latents: &Mat<E>,
    n_real: usize,
) -> Result<Mat<E>, NnError> {
    check_latents(w, latents, n_real)?;
    let ids = w.ids();
    let mut drop = None;
    let x = decoder_embed(w, latents);
    let (yf, _) = stack_forward(
        w,
        &ids.dec_blocks,
        ids.dec_norm,
        w.cfg.n_heads,
        x,
        n_real,
        "decoder",
        &mut drop,
        false,
    )?;
    let t = yf.rows;
    let d = w.cfg.embed_dim;
    let f = w.cfg.spec_bins;
    let mut pred = Mat::zeros(t, f);
    matmul(&yf.data, w.p(ids.dec_head_w), &mut pred.data, t, d, f);
    add_bias(&mut pred.data, w.p(ids.dec_head_b), t, f);
    Ok(pred)
}

fn classifier_embed<E: Scalar>(w: &ModelWeights<E>, latents: &Mat<E>) -> Mat<E> {
    let (t, d) = (latents.rows, latents.cols);
    let ids = w.ids();
    let pos = w.p(ids.cls_pos);
    let mut u = Mat::zeros(t + 1, 2 * d);
    u.row_mut(0).copy_from_slice(w.p(ids.cls_token));
    for i in 0..t {
        let row = u.row_mut(i + 1);
        row[..d].copy_from_slice(latents.row(i));
        row[d..].copy_from_slice(&pos[i * d..(i + 1) * d]);
    }
    u
}

fn classifier_logit<E: Scalar>(
    w: &ModelWeights<E>,
    latents: &Mat<E>,
    n_real: usize,
    drop: &mut Option<DropCtx<'_>>,
    want_cache: bool,
) -> Result<(f64, Option<(Mat<E>, StackCache<E>, Mat<E>)>), NnError> {
    check_latents(w, latents, n_real)?;
    let ids = w.ids();
    let d = w.cfg.embed_dim;
    let u = classifier_embed(w, latents);
    let t1 = u.rows;
    let mut x = Mat::zeros(t1, d);
    matmul(&u.data, w.p(ids.cls_in_w), &mut x.data, t1, 2 * d, d);
    add_bias(&mut x.data, w.p(ids.cls_in_b), t1, d);
    let (yf, cache) = stack_forward(
        w,
        &ids.cls_blocks,
        ids.cls_norm,
        w.cfg.n_cls_heads,
        x,
        n_real + 1,
        "classifier",
        drop,
        want_cache,
    )?;
    let logit = dot(yf.row(0), w.p(ids.cls_head_w)).to_f64() + w.p(ids.cls_head_b)[0].to_f64();
    let extra = cache.map(|c| (u, c, yf));
    Ok((logit, extra))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy from the raw logit.
fn bce_from_logit(logit: f64, label: bool) -> f64 {
    let sp = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    sp - if label { logit } else { 0.0 }
}

/// Nightly score from frozen-encoder latents, eval mode. The logistic
/// output is clamped away from exact 0 and 1.
pub fn classifier_forward<E: Scalar>(
    w: &ModelWeights<E>,
    latents: &Mat<E>,
    n_real: usize,
) -> Result<f64, NnError> {
    let mut drop = None;
    let (logit, _) = classifier_logit(w, latents, n_real, &mut drop, false)?;
    Ok(sigmoid(logit).clamp(1e-15, 1.0 - 1e-15))
}

fn classifier_item_backward<E: Scalar>(
    w: &ModelWeights<E>,
    u: &Mat<E>,
    cache: &StackCache<E>,
    yf: &Mat<E>,
    n_real: usize,
    dlogit: f64,
    grads: &mut [E],
) {
    let ids = w.ids();
    let d = w.cfg.embed_dim;
    let t1 = yf.rows;
    let dl = sc::<E>(dlogit);

    let mut d_yf = Mat::zeros(t1, d);
    axpy(&mut d_yf.row_mut(0), dl, w.p(ids.cls_head_w));
    axpy(grad(grads, w, ids.cls_head_w), dl, yf.row(0));
    grad(grads, w, ids.cls_head_b)[0] += dl;

    let dx = stack_backward(
        w,
        &ids.cls_blocks,
        ids.cls_norm,
        w.cfg.n_cls_heads,
        cache,
        &d_yf,
        n_real + 1,
        grads,
    );

    matmul_at_b_acc(
        &u.data,
        &dx.data,
        grad(grads, w, ids.cls_in_w),
        t1,
        2 * d,
        d,
    );
    add_colsum(&dx.data, grad(grads, w, ids.cls_in_b), t1, d);
    let mut d_u = Mat::zeros(t1, 2 * d);
    matmul_a_bt_acc(&dx.data, w.p(ids.cls_in_w), &mut d_u.data, t1, d, 2 * d);

    add_assign(grad(grads, w, ids.cls_token), d_u.row(0));
    let d_pos = grad(grads, w, ids.cls_pos);
    for i in 0..t1 - 1 {
        add_assign(&mut d_pos[i * d..(i + 1) * d], &d_u.row(i + 1)[d..]);
    }
}

/// One dropout seed per batch item, drawn sequentially up front. Items can
/// then run in parallel while the draw stream stays independent of thread
/// count and batch partitioning.
fn draw_item_seeds<E: Scalar>(
    w: &ModelWeights<E>,
    dropout_rng: Option<&mut ChaCha8Rng>,
    n: usize,
) -> Option<Vec<u64>> {
    dropout_rng
        .filter(|_| w.cfg.dropout_rate > 0.0)
        .map(|rng| (0..n).map(|_| rng.gen::<u64>()).collect())
}

fn reduce_parts<E: Scalar>(w: &ModelWeights<E>, parts: Vec<(f64, Vec<E>)>) -> (f64, Vec<E>) {
    let mut grads = vec![E::ZERO; w.n_params()];
    let mut total = 0.0;
    for (part, g) in &parts {
        total += part;
        add_assign(&mut grads, g);
    }
    (total, grads)
}

/// Classifier loss and gradients on cached latents: mean binary
/// cross-entropy over the batch. Encoder and decoder gradients stay zero.
/// Items are processed in parallel; per-item gradients are reduced in item
/// order, so results are bit-identical for any thread count.
pub fn classifier_loss_and_grads<E: Scalar>(
    w: &ModelWeights<E>,
    batch: &LatentBatch<E>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<E>), NnError> {
    if batch.items.is_empty() {
        return Err(NnError::ShapeMismatch("empty batch".to_string()));
    }
    let seeds = draw_item_seeds(w, dropout_rng, batch.items.len());
    let b = batch.items.len() as f64;
    let parts: Vec<(f64, Vec<E>)> = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut item_rng = seeds.as_ref().map(|s| ChaCha8Rng::seed_from_u64(s[i]));
            let mut drop = item_rng.as_mut().map(|rng| DropCtx {
                rng,
                rate: w.cfg.dropout_rate,
            });
            let mut grads = vec![E::ZERO; w.n_params()];
            let (logit, extra) = classifier_logit(w, &item.latents, item.n_real, &mut drop, true)?;
            let (u, cache, yf) = extra.unwrap();
            let loss = bce_from_logit(logit, item.label) / b;
            let dlogit = (sigmoid(logit) - f64::from(u8::from(item.label))) / b;
            classifier_item_backward(w, &u, &cache, &yf, item.n_real, dlogit, &mut grads);
            Ok((loss, grads))
        })
        .collect::<Result<_, NnError>>()?;
    let (loss, grads) = reduce_parts(w, parts);
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            stage: "classifier loss",
            block: 0,
        });
    }
    Ok((loss, grads))
}

/// Loss and exact gradients for one batch.
///
/// Pretrain: mean squared error between decoder predictions and targets
/// over real token rows, with gradients for encoder and decoder. Classify:
/// the encoder runs detached (eval mode), so its gradients are identically
/// zero and only classifier parameters receive gradient.
pub fn loss_and_grads<E: Scalar>(
    w: &ModelWeights<E>,
    batch: &Batch<E>,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<E>), NnError> {
    if batch.items.is_empty() {
        return Err(NnError::ShapeMismatch("empty batch".to_string()));
    }
    match mode {
        Mode::Classify => {
            let items = batch
                .items
                .par_iter()
                .map(|item| {
                    let label = item.label.ok_or_else(|| {
                        NnError::ShapeMismatch("classify batch item without label".to_string())
                    })?;
                    Ok(LatentItem {
                        latents: encoder_forward(w, &item.tokens, item.n_real)?,
                        n_real: item.n_real,
                        label,
                    })
                })
                .collect::<Result<Vec<_>, NnError>>()?;
            classifier_loss_and_grads(w, &LatentBatch { items }, dropout_rng)
        }
        Mode::Pretrain => {
            let f = w.cfg.spec_bins;
            let ids = w.ids().clone();
            let d = w.cfg.embed_dim;
            let n_total: usize = batch.items.iter().map(|it| it.n_real * f).sum();
            let seeds = draw_item_seeds(w, dropout_rng, batch.items.len());
            let parts: Vec<(f64, Vec<E>)> = batch
                .items
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    let target = item.target.as_ref().ok_or_else(|| {
                        NnError::ShapeMismatch("pretrain batch item without target".to_string())
                    })?;
                    check_tokens(w, &item.tokens, item.n_real)?;
                    if target.rows != item.tokens.rows || target.cols != f {
                        return Err(NnError::ShapeMismatch(format!(
                            "target is {}x{}, expected {}x{}",
                            target.rows, target.cols, item.tokens.rows, f
                        )));
                    }
                    let t = item.tokens.rows;
                    let mut item_rng = seeds.as_ref().map(|s| ChaCha8Rng::seed_from_u64(s[i]));
                    let mut drop = item_rng.as_mut().map(|rng| DropCtx {
                        rng,
                        rate: w.cfg.dropout_rate,
                    });
                    let mut grads = vec![E::ZERO; w.n_params()];

                    let x0 = encoder_embed(w, &item.tokens);
                    let (latents, enc_cache) = stack_forward(
                        w,
                        &ids.enc_blocks,
                        ids.enc_norm,
                        w.cfg.n_heads,
                        x0,
                        item.n_real,
                        "encoder",
                        &mut drop,
                        true,
                    )?;
                    let xd0 = decoder_embed(w, &latents);
                    let (yf, dec_cache) = stack_forward(
                        w,
                        &ids.dec_blocks,
                        ids.dec_norm,
                        w.cfg.n_heads,
                        xd0,
                        item.n_real,
                        "decoder",
                        &mut drop,
                        true,
                    )?;
                    let mut pred = Mat::zeros(t, f);
                    matmul(&yf.data, w.p(ids.dec_head_w), &mut pred.data, t, d, f);
                    add_bias(&mut pred.data, w.p(ids.dec_head_b), t, f);

                    let mut d_pred = Mat::zeros(t, f);
                    let norm = sc::<E>(2.0 / n_total as f64);
                    let mut sse = 0.0f64;
                    for row in 0..item.n_real {
                        let pr = pred.row(row);
                        let tr = target.row(row);
                        let dr = d_pred.row_mut(row);
                        for j in 0..f {
                            let diff = pr[j] - tr[j];
                            sse += diff.to_f64() * diff.to_f64();
                            dr[j] = diff * norm;
                        }
                    }

                    matmul_at_b_acc(
                        &yf.data,
                        &d_pred.data,
                        grad(&mut grads, w, ids.dec_head_w),
                        t,
                        d,
                        f,
                    );
                    add_colsum(&d_pred.data, grad(&mut grads, w, ids.dec_head_b), t, f);
                    let mut d_yf = Mat::zeros(t, d);
                    matmul_a_bt_acc(&d_pred.data, w.p(ids.dec_head_w), &mut d_yf.data, t, f, d);

                    let dec_cache = dec_cache.unwrap();
                    let dxd0 = stack_backward(
                        w,
                        &ids.dec_blocks,
                        ids.dec_norm,
                        w.cfg.n_heads,
                        &dec_cache,
                        &d_yf,
                        item.n_real,
                        &mut grads,
                    );
                    add_assign(&mut grad(&mut grads, w, ids.dec_pos)[..t * d], &dxd0.data);

                    let enc_cache = enc_cache.unwrap();
                    let dx0 = stack_backward(
                        w,
                        &ids.enc_blocks,
                        ids.enc_norm,
                        w.cfg.n_heads,
                        &enc_cache,
                        &dxd0,
                        item.n_real,
                        &mut grads,
                    );
                    matmul_at_b_acc(
                        &item.tokens.data,
                        &dx0.data,
                        grad(&mut grads, w, ids.patch_w),
                        t,
                        w.cfg.patch_samples,
                        d,
                    );
                    add_colsum(&dx0.data, grad(&mut grads, w, ids.patch_b), t, d);
                    add_assign(&mut grad(&mut grads, w, ids.enc_pos)[..t * d], &dx0.data);
                    Ok((sse, grads))
                })
                .collect::<Result<_, NnError>>()?;
            let (sse, grads) = reduce_parts(w, parts);
            let loss = sse / n_total as f64;
            if !loss.is_finite() {
                return Err(NnError::NonFinite {
                    stage: "pretrain loss",
                    block: 0,
                });
            }
            Ok((loss, grads))
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::super::opt::{adamw_step, lr_schedule, AdamHyper, OptimizerState};
    use super::super::weights::Group;
    use super::*;

    fn rand_mat<E: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat<E> {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = sc(z * std);
        }
        m
    }

    fn tiny_weights(seed: u64) -> ModelWeights<f64> {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f64>::init(&cfg, seed);
        w.randomize_all(seed.wrapping_mul(31).wrapping_add(7), 0.08);
        w
    }

    fn tiny_batch(seed: u64) -> Batch<f64> {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::new();
        for (t, n_real, label) in [(8, 8, true), (8, 6, false)] {
            items.push(BatchItem {
                tokens: rand_mat(&mut rng, t, cfg.patch_samples, 1.0),
                n_real,
                target: Some(rand_mat(&mut rng, t, cfg.spec_bins, 0.5)),
                label: Some(label),
            });
        }
        Batch { items }
    }

    #[test]
    fn patchify_splits_and_truncates() {
        let paper = ModelConfig::paper();
        let night = Signal::new(vec![0.25; 8 * 3600 * 10], 10.0);
        let m = patchify::<f32>(&night, &paper).unwrap();
        assert_eq!((m.rows, m.cols), (960, 300));

        let short = Signal::new(vec![0.0; 299], 10.0);
        assert!(matches!(
            patchify::<f32>(&short, &paper),
            Err(NnError::SignalTooShort { len: 299, need: 300 })
        ));

        let two = Signal::new(vec![1.0; 650], 10.0);
        let m = patchify::<f32>(&two, &paper).unwrap();
        assert_eq!(m.rows, 2);

        let tiny = ModelConfig::tiny();
        let long = Signal::new(vec![0.5; 20 * 10], 10.0);
        let m = patchify::<f32>(&long, &tiny).unwrap();
        assert_eq!(m.rows, tiny.max_tokens);
    }

    #[test]
    fn padded_rows_cannot_reach_real_outputs() {
        let w = tiny_weights(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tokens = rand_mat::<f64>(&mut rng, 8, w.cfg.patch_samples, 1.0);
        let n_real = 5;
        let base = encoder_forward(&w, &tokens, n_real).unwrap();
        for i in n_real..8 {
            for v in tokens.row_mut(i) {
                *v = *v * -3.7 + 11.0;
            }
        }
        let perturbed = encoder_forward(&w, &tokens, n_real).unwrap();
        for i in 0..n_real {
            assert_eq!(base.row(i), perturbed.row(i), "latent row {i} moved");
        }

        let latents = base;
        let z0 = classifier_forward(&w, &latents, n_real).unwrap();
        let mut latents2 = latents.clone();
        for i in n_real..8 {
            for v in latents2.row_mut(i) {
                *v += 5.0;
            }
        }
        let z1 = classifier_forward(&w, &latents2, n_real).unwrap();
        assert_eq!(z0, z1);
    }

    #[test]
    fn positional_embeddings_separate_identical_tokens() {
        let w = tiny_weights(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row: Vec<f64> = (0..w.cfg.patch_samples)
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let mut tokens = Mat::zeros(4, w.cfg.patch_samples);
        for i in 0..4 {
            tokens.row_mut(i).copy_from_slice(&row);
        }
        let latents = encoder_forward(&w, &tokens, 4).unwrap();
        assert_ne!(latents.row(0), latents.row(1));
    }

    #[test]
    fn zeroed_decoder_broadcasts_its_bias() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f64>::zeros(&cfg);
        let ids = w.ids().clone();
        for (j, v) in w.p_mut(ids.dec_head_b).iter_mut().enumerate() {
            *v = j as f64 * 0.5 - 1.0;
        }
        let bias = w.p(ids.dec_head_b).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let latents = rand_mat::<f64>(&mut rng, 6, cfg.embed_dim, 1.0);
        let pred = decoder_forward(&w, &latents, 6).unwrap();
        for i in 0..pred.rows {
            assert_eq!(pred.row(i), &bias[..], "row {i}");
        }
    }

    #[test]
    fn zeroed_classifier_head_scores_one_half_and_bias_is_monotone() {
        let mut w = tiny_weights(6);
        let ids = w.ids().clone();
        w.p_mut(ids.cls_head_w).iter_mut().for_each(|v| *v = 0.0);
        w.p_mut(ids.cls_head_b)[0] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let latents = rand_mat::<f64>(&mut rng, 5, w.cfg.embed_dim, 1.0);
        assert_eq!(classifier_forward(&w, &latents, 5).unwrap(), 0.5);

        let mut last = 0.5;
        for b in [0.3, 0.9, 2.0, 5.0] {
            w.p_mut(ids.cls_head_b)[0] = b;
            let z = classifier_forward(&w, &latents, 5).unwrap();
            assert!(z > last, "bias {b} gave {z}, not above {last}");
            last = z;
        }
    }

    #[test]
    fn scores_stay_inside_the_open_unit_interval() {
        let mut w = tiny_weights(8);
        let ids = w.ids().clone();
        w.p_mut(ids.cls_head_b)[0] = 500.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latents = rand_mat::<f64>(&mut rng, 4, w.cfg.embed_dim, 1.0);
        let z_hi = classifier_forward(&w, &latents, 4).unwrap();
        assert!(z_hi < 1.0 && z_hi > 0.0);
        w.p_mut(ids.cls_head_b)[0] = -500.0;
        let z_lo = classifier_forward(&w, &latents, 4).unwrap();
        assert!(z_lo > 0.0 && z_lo < 1.0);
    }

    #[test]
    fn permuting_latents_with_their_positions_leaves_z_unchanged() {
        let mut w = tiny_weights(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 7;
        let d = w.cfg.embed_dim;
        let latents = rand_mat::<f64>(&mut rng, t, d, 1.0);
        let z0 = classifier_forward(&w, &latents, t).unwrap();

        let perm = [3usize, 0, 6, 2, 5, 1, 4];
        let mut latents_p = Mat::zeros(t, d);
        let ids = w.ids().clone();
        let pos = w.p(ids.cls_pos).to_vec();
        let mut pos_p = pos.clone();
        for (dst, &src) in perm.iter().enumerate() {
            latents_p.row_mut(dst).copy_from_slice(latents.row(src));
            pos_p[dst * d..(dst + 1) * d].copy_from_slice(&pos[src * d..(src + 1) * d]);
        }
        w.p_mut(ids.cls_pos).copy_from_slice(&pos_p);
        let z1 = classifier_forward(&w, &latents_p, t).unwrap();
        assert!((z0 - z1).abs() < 1e-12, "{z0} vs {z1}");
    }

    #[test]
    fn exact_targets_give_zero_loss_and_zero_gradients() {
        let w = tiny_weights(12);
        let mut batch = tiny_batch(13);
        for item in batch.items.iter_mut() {
            let latents = encoder_forward(&w, &item.tokens, item.n_real).unwrap();
            let pred = decoder_forward(&w, &latents, item.n_real).unwrap();
            item.target = Some(pred);
        }
        let (loss, grads) = loss_and_grads(&w, &batch, Mode::Pretrain, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn chance_prediction_on_a_positive_costs_ln_two() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::<f64>::zeros(&cfg);
        let mut batch = tiny_batch(14);
        batch.items.truncate(1);
        batch.items[0].label = Some(true);
        let (loss, _) = loss_and_grads(&w, &batch, Mode::Classify, None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn classify_mode_leaves_encoder_and_decoder_gradients_at_zero() {
        let w = tiny_weights(15);
        let batch = tiny_batch(16);
        let (_, grads) = loss_and_grads(&w, &batch, Mode::Classify, None).unwrap();
        let enc = w.layout().group_range(Group::Encoder);
        let dec = w.layout().group_range(Group::Decoder);
        let cls = w.layout().group_range(Group::Classifier);
        assert!(grads[enc].iter().all(|&g| g == 0.0));
        assert!(grads[dec].iter().all(|&g| g == 0.0));
        assert!(grads[cls].iter().any(|&g| g != 0.0));
    }

    fn fd_probe_indices(w: &ModelWeights<f64>, group_filter: &[Group]) -> Vec<usize> {
        let mut probes = Vec::new();
        for e in &w.layout().entries {
            if !group_filter.contains(&e.group) {
                continue;
            }
            let len = e.len();
            let take = len.min(6);
            for k in 0..take {
                probes.push(e.offset + k * len / take);
            }
        }
        probes
    }

    fn fd_check(mode: Mode, seed: u64) {
        let mut w = tiny_weights(seed);
        w.cfg.dropout_rate = 0.0;
        let batch = tiny_batch(seed ^ 0x5a5a);
        let (_, grads) = loss_and_grads(&w, &batch, mode, None).unwrap();
        let groups: &[Group] = match mode {
            Mode::Pretrain => &[Group::Encoder, Group::Decoder],
            Mode::Classify => &[Group::Classifier],
        };
        let h = 1e-4;
        for idx in fd_probe_indices(&w, groups) {
            let orig = w.data[idx];
            let mut eval = |delta: f64| {
                w.data[idx] = orig + delta;
                loss_and_grads(&w, &batch, mode, None).unwrap().0
            };
            let fd = (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
            w.data[idx] = orig;
            let denom = grads[idx].abs().max(fd.abs()).max(1e-5);
            let rel = (grads[idx] - fd).abs() / denom;
            assert!(
                rel < 1e-6,
                "{} flat index {idx}: analytic {} vs fd {} (rel {rel})",
                mode_name(mode),
                grads[idx],
                fd
            );
        }
    }

    fn mode_name(mode: Mode) -> &'static str {
        match mode {
            Mode::Pretrain => "pretrain",
            Mode::Classify => "classify",
        }
    }

    #[test]
    fn pretrain_gradients_match_finite_differences() {
        fd_check(Mode::Pretrain, 17);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        fd_check(Mode::Classify, 18);
    }

    #[test]
    fn two_hundred_steps_halve_the_pretrain_loss() {
        let cfg = ModelConfig::tiny();
        let mut w = ModelWeights::<f32>::init(&cfg, 19);
        let batch64 = tiny_batch(20);
        let batch = Batch {
            items: batch64
                .items
                .iter()
                .map(|it| BatchItem {
                    tokens: Mat::from_vec(
                        it.tokens.rows,
                        it.tokens.cols,
                        it.tokens.data.iter().map(|&v| v as f32).collect(),
                    ),
                    n_real: it.n_real,
                    target: it.target.as_ref().map(|t| {
                        Mat::from_vec(t.rows, t.cols, t.data.iter().map(|&v| v as f32).collect())
                    }),
                    label: it.label,
                })
                .collect(),
        };
        let hyper = AdamHyper {
            lr_base: 3e-3,
            ..AdamHyper::default()
        };
        let mut state = OptimizerState::new(w.n_params());
        let enc = w.layout().group_range(Group::Encoder);
        let dec = w.layout().group_range(Group::Decoder);
        let ranges = [enc, dec];
        let (initial, _) = loss_and_grads(&w, &batch, Mode::Pretrain, None).unwrap();
        for step in 0..200 {
            let (_, grads) = loss_and_grads(&w, &batch, Mode::Pretrain, None).unwrap();
            let lr = lr_schedule(step, 200, 10, hyper.lr_base);
            adamw_step(&mut w, &grads, &mut state, &hyper, lr, &ranges);
        }
        let (fin, _) = loss_and_grads(&w, &batch, Mode::Pretrain, None).unwrap();
        assert!(
            fin < 0.5 * initial,
            "loss went {initial} -> {fin}, expected at least a halving"
        );
    }

    #[test]
    fn dropout_draws_are_seeded_and_eval_is_deterministic() {
        let cfg = ModelConfig {
            dropout_rate: 0.2,
            ..ModelConfig::tiny()
        };
        let mut w = ModelWeights::<f64>::init(&cfg, 21);
        w.randomize_all(22, 0.08);
        let batch = tiny_batch(23);
        let loss_with = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loss_and_grads(&w, &batch, Mode::Pretrain, Some(&mut rng))
                .unwrap()
                .0
        };
        assert_eq!(loss_with(1), loss_with(1));
        assert_ne!(loss_with(1), loss_with(2));
        let (eval_a, _) = loss_and_grads(&w, &batch, Mode::Pretrain, None).unwrap();
        let (eval_b, _) = loss_and_grads(&w, &batch, Mode::Pretrain, None).unwrap();
        assert_eq!(eval_a, eval_b);
        assert_ne!(eval_a, loss_with(1));
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let w = tiny_weights(24);
        let mut no_target = tiny_batch(25);
        no_target.items[0].target = None;
        assert!(loss_and_grads(&w, &no_target, Mode::Pretrain, None).is_err());

        let mut no_label = tiny_batch(26);
        no_label.items[0].label = None;
        assert!(loss_and_grads(&w, &no_label, Mode::Classify, None).is_err());

        let empty: Batch<f64> = Batch { items: Vec::new() };
        assert!(loss_and_grads(&w, &empty, Mode::Pretrain, None).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let wide = rand_mat::<f64>(&mut rng, 4, w.cfg.patch_samples + 1, 1.0);
        assert!(encoder_forward(&w, &wide, 4).is_err());
        let latents = rand_mat::<f64>(&mut rng, 4, w.cfg.embed_dim, 1.0);
        assert!(classifier_forward(&w, &latents, 9).is_err());
        assert!(decoder_forward(&w, &latents, 0).is_err());
    }
}
