//! Self-attentive next-item model over item ids.
//!
//! Architecture (per position `t` of a history of length `L <= max_len`):
//!
//! ```text
//! h0_t = E[x_t] * sqrt(d) + P[max_len - L + t]
//! block: a = LN1(h);  q = a Wq, k = h Wk, v = h Wv
//!        causal multi-head attention -> o;  y = a + o Wo
//!        z = LN2(y);  h' = z + (relu(z W1 + b1) W2 + b2)
//! out   = LNf(h_last_block);   score(t, j) = out_t . E[j]
//! ```
//!
//! Histories are left-aligned to the end of the positional table, so the most
//! recent item always sits at position `max_len - 1`. Padding is never fed
//! through the network, which is equivalent to masking padded slots as keys
//! and queries. Trained with binary cross-entropy on one sampled negative per
//! position and Adam. Gradients are written out by hand; see the
//! finite-difference test at the bottom.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::util::keyed_rng;

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            blocks: 1,
            heads: 1,
            max_len: 10,
            dropout: 0.1,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.005,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_len and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    d: usize,
    max_len: usize,
    item_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &EncoderConfig, rows: usize) -> Self {
        let d = cfg.embed_dim;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let item_emb = take(rows * d);
        let pos_emb = take(cfg.max_len * d);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * d),
                b1: take(d),
                w2: take(d * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        Self {
            d,
            max_len: cfg.max_len,
            item_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            total: off,
        }
    }
}

// --- dense helpers (row-major) -------------------------------------------------

/// `x[rows x inner] * w[inner x cols]`
fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for i in 0..inner {
            let xv = x[r * inner + i];
            if xv == 0.0 {
                continue;
            }
            let wr = &w[i * cols..(i + 1) * cols];
            for c in 0..cols {
                o[c] += xv * wr[c];
            }
        }
    }
    out
}

/// `dy[rows x cols] * w^T` where `w` is `[inner x cols]`.
fn matmul_wt(dy: &[f64], rows: usize, cols: usize, w: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * inner];
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        for i in 0..inner {
            let wr = &w[i * cols..(i + 1) * cols];
            out[r * inner + i] = dyr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `dw[inner x cols] += x^T * dy`
fn acc_xt_dy(x: &[f64], dy: &[f64], rows: usize, inner: usize, cols: usize, dw: &mut [f64]) {
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        for i in 0..inner {
            let xv = x[r * inner + i];
            if xv == 0.0 {
                continue;
            }
            let dwr = &mut dw[i * cols..(i + 1) * cols];
            for c in 0..cols {
                dwr[c] += xv * dyr[c];
            }
        }
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_forward(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mu) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = g[c] * xh + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_backward(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    rows: usize,
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            let i = r * d + c;
            dg[c] += dy[i] * cache.xhat[i];
            db[c] += dy[i];
            let dxh = dy[i] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * cache.xhat[i];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for c in 0..d {
            let i = r * d + c;
            let dxh = dy[i] * g[c];
            dx[i] = cache.rstd[r] * (dxh - mean_dxh - cache.xhat[i] * mean_dxh_xh);
        }
    }
    dx
}

// --- forward / backward ---------------------------------------------------------

struct BlockCache {
    h_in: Vec<f64>,
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights per head, `[heads][L][L]` (upper triangle zero).
    att: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    z: Vec<f64>,
    f1: Vec<f64>,
    r: Vec<f64>,
    ffn_mask: Option<Vec<f64>>,
}

struct Forward {
    len: usize,
    items: Vec<usize>,
    input_mask: Option<Vec<f64>>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    out: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

#[derive(Debug, Clone)]
struct Model {
    cfg: EncoderConfig,
    layout: Layout,
    w: Vec<f64>,
}

impl Model {
    fn init(cfg: &EncoderConfig, rows: usize, rng: &mut ChaCha8Rng) -> Self {
        let layout = Layout::new(cfg, rows);
        let d = cfg.embed_dim;
        let mut w = vec![0.0; layout.total];
        let emb = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let xavier = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");
        for x in &mut w[layout.item_emb + d..layout.item_emb + rows * d] {
            *x = emb.sample(rng) / (d as f64).sqrt();
        }
        for x in &mut w[layout.pos_emb..layout.pos_emb + cfg.max_len * d] {
            *x = emb.sample(rng) * 0.1;
        }
        for b in &layout.blocks {
            for off in [b.wq, b.wk, b.wv, b.wo, b.w1, b.w2] {
                for x in &mut w[off..off + d * d] {
                    *x = xavier.sample(rng);
                }
            }
            w[b.ln1_g..b.ln1_g + d].fill(1.0);
            w[b.ln2_g..b.ln2_g + d].fill(1.0);
        }
        w[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Self {
            cfg: *cfg,
            layout,
            w,
        }
    }

    fn forward(&self, items: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Forward {
        let d = self.layout.d;
        let l = items.len();
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = &self.w;
        let lay = &self.layout;
        let p = self.cfg.dropout;
        let train = rng.is_some() && p > 0.0;

        let mut h = vec![0.0; l * d];
        let sqrt_d = (d as f64).sqrt();
        for (t, &it) in items.iter().enumerate() {
            let pos = lay.max_len - l + t;
            for c in 0..d {
                h[t * d + c] = w[lay.item_emb + it * d + c] * sqrt_d + w[lay.pos_emb + pos * d + c];
            }
        }
        let input_mask = if train {
            let m = dropout_mask(rng.as_deref_mut().unwrap(), l * d, p);
            h.iter_mut().zip(&m).for_each(|(x, k)| *x *= k);
            Some(m)
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let (a, ln1) = ln_forward(&h, l, d, &w[b.ln1_g..b.ln1_g + d], &w[b.ln1_b..b.ln1_b + d]);
            let q = matmul(&a, l, d, &w[b.wq..b.wq + d * d], d);
            let k = matmul(&h, l, d, &w[b.wk..b.wk + d * d], d);
            let v = matmul(&h, l, d, &w[b.wv..b.wv + d * d], d);
            let mut att = vec![0.0; heads * l * l];
            let mut o = vec![0.0; l * d];
            for hh in 0..heads {
                let c0 = hh * dh;
                for t in 0..l {
                    let row = &mut att[(hh * l + t) * l..(hh * l + t + 1) * l];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let s: f64 = (0..dh).map(|c| q[t * d + c0 + c] * k[u * d + c0 + c]).sum::<f64>() * scale;
                        row[u] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for x in row.iter_mut().take(t + 1) {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for u in 0..=t {
                        row[u] /= sum;
                        for c in 0..dh {
                            o[t * d + c0 + c] += row[u] * v[u * d + c0 + c];
                        }
                    }
                }
            }
            let m = matmul(&o, l, d, &w[b.wo..b.wo + d * d], d);
            let y: Vec<f64> = a.iter().zip(&m).map(|(x, y)| x + y).collect();
            let (z, ln2) = ln_forward(&y, l, d, &w[b.ln2_g..b.ln2_g + d], &w[b.ln2_b..b.ln2_b + d]);
            let mut f1 = matmul(&z, l, d, &w[b.w1..b.w1 + d * d], d);
            for t in 0..l {
                add_into(&mut f1[t * d..(t + 1) * d], &w[b.b1..b.b1 + d]);
            }
            let r: Vec<f64> = f1.iter().map(|x| x.max(0.0)).collect();
            let mut f2 = matmul(&r, l, d, &w[b.w2..b.w2 + d * d], d);
            for t in 0..l {
                add_into(&mut f2[t * d..(t + 1) * d], &w[b.b2..b.b2 + d]);
            }
            let ffn_mask = if train {
                let mk = dropout_mask(rng.as_deref_mut().unwrap(), l * d, p);
                f2.iter_mut().zip(&mk).for_each(|(x, k)| *x *= k);
                Some(mk)
            } else {
                None
            };
            let h_next: Vec<f64> = z.iter().zip(&f2).map(|(x, y)| x + y).collect();
            blocks.push(BlockCache {
                h_in: std::mem::replace(&mut h, h_next),
                ln1,
                a,
                q,
                k,
                v,
                att,
                o,
                ln2,
                z,
                f1,
                r,
                ffn_mask,
            });
        }
        let (out, lnf) = ln_forward(&h, l, d, &w[lay.lnf_g..lay.lnf_g + d], &w[lay.lnf_b..lay.lnf_b + d]);
        Forward {
            len: l,
            items: items.to_vec(),
            input_mask,
            blocks,
            lnf,
            out,
        }
    }

    /// Accumulates parameter gradients for `dout = dLoss/dout` into `g`.
    fn backward(&self, fw: &Forward, dout: &[f64], g: &mut [f64]) {
        let d = self.layout.d;
        let l = fw.len;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = &self.w;
        let lay = &self.layout;

        let (gf, bf) = g[lay.lnf_g..lay.lnf_b + d].split_at_mut(d);
        let mut dh_ = ln_backward(dout, &fw.lnf, &w[lay.lnf_g..lay.lnf_g + d], l, d, gf, bf);

        for (b, c) in lay.blocks.iter().zip(&fw.blocks).rev() {
            // h' = z + drop(f2)
            let mut df2 = dh_.clone();
            if let Some(mk) = &c.ffn_mask {
                df2.iter_mut().zip(mk).for_each(|(x, k)| *x *= k);
            }
            let mut dz = dh_;
            for t in 0..l {
                add_into(&mut g[b.b2..b.b2 + d], &df2[t * d..(t + 1) * d]);
            }
            acc_xt_dy(&c.r, &df2, l, d, d, &mut g[b.w2..b.w2 + d * d]);
            let mut df1 = matmul_wt(&df2, l, d, &w[b.w2..b.w2 + d * d], d);
            df1.iter_mut().zip(&c.f1).for_each(|(x, f)| {
                if *f <= 0.0 {
                    *x = 0.0
                }
            });
            for t in 0..l {
                add_into(&mut g[b.b1..b.b1 + d], &df1[t * d..(t + 1) * d]);
            }
            acc_xt_dy(&c.z, &df1, l, d, d, &mut g[b.w1..b.w1 + d * d]);
            add_into(&mut dz, &matmul_wt(&df1, l, d, &w[b.w1..b.w1 + d * d], d));

            // z = LN2(y)
            let (g2, b2) = g[b.ln2_g..b.ln2_b + d].split_at_mut(d);
            let dy = ln_backward(&dz, &c.ln2, &w[b.ln2_g..b.ln2_g + d], l, d, g2, b2);

            // y = a + o Wo
            let mut da = dy.clone();
            acc_xt_dy(&c.o, &dy, l, d, d, &mut g[b.wo..b.wo + d * d]);
            let d_o = matmul_wt(&dy, l, d, &w[b.wo..b.wo + d * d], d);

            let mut dq = vec![0.0; l * d];
            let mut dk = vec![0.0; l * d];
            let mut dv = vec![0.0; l * d];
            for hh in 0..heads {
                let c0 = hh * dh;
                for t in 0..l {
                    let att = &c.att[(hh * l + t) * l..(hh * l + t + 1) * l];
                    let mut datt = vec![0.0; t + 1];
                    for u in 0..=t {
                        let mut s = 0.0;
                        for cc in 0..dh {
                            s += d_o[t * d + c0 + cc] * c.v[u * d + c0 + cc];
                            dv[u * d + c0 + cc] += att[u] * d_o[t * d + c0 + cc];
                        }
                        datt[u] = s;
                    }
                    let dot: f64 = (0..=t).map(|u| att[u] * datt[u]).sum();
                    for u in 0..=t {
                        let ds = att[u] * (datt[u] - dot) * scale;
                        for cc in 0..dh {
                            dq[t * d + c0 + cc] += ds * c.k[u * d + c0 + cc];
                            dk[u * d + c0 + cc] += ds * c.q[t * d + c0 + cc];
                        }
                    }
                }
            }
            acc_xt_dy(&c.a, &dq, l, d, d, &mut g[b.wq..b.wq + d * d]);
            add_into(&mut da, &matmul_wt(&dq, l, d, &w[b.wq..b.wq + d * d], d));
            acc_xt_dy(&c.h_in, &dk, l, d, d, &mut g[b.wk..b.wk + d * d]);
            acc_xt_dy(&c.h_in, &dv, l, d, d, &mut g[b.wv..b.wv + d * d]);
            let mut dhin = matmul_wt(&dk, l, d, &w[b.wk..b.wk + d * d], d);
            add_into(&mut dhin, &matmul_wt(&dv, l, d, &w[b.wv..b.wv + d * d], d));

            // a = LN1(h)
            let (g1, b1) = g[b.ln1_g..b.ln1_b + d].split_at_mut(d);
            add_into(&mut dhin, &ln_backward(&da, &c.ln1, &w[b.ln1_g..b.ln1_g + d], l, d, g1, b1));
            dh_ = dhin;
        }

        if let Some(mk) = &fw.input_mask {
            dh_.iter_mut().zip(mk).for_each(|(x, k)| *x *= k);
        }
        let sqrt_d = (d as f64).sqrt();
        for (t, &it) in fw.items.iter().enumerate() {
            let pos = lay.max_len - l + t;
            for c in 0..d {
                g[lay.item_emb + it * d + c] += dh_[t * d + c] * sqrt_d;
                g[lay.pos_emb + pos * d + c] += dh_[t * d + c];
            }
        }
    }

    fn item_row(&self, item: usize) -> &[f64] {
        let d = self.layout.d;
        &self.w[self.layout.item_emb + item * d..self.layout.item_emb + (item + 1) * d]
    }

    /// BCE loss of one training sequence and, when `grad` is given, its
    /// gradient. `negs[t]` is the negative for the target at `t + 1`.
    fn sequence_loss(
        &self,
        seq: &[usize],
        negs: &[usize],
        rng: Option<&mut ChaCha8Rng>,
        grad: Option<&mut [f64]>,
        weight: f64,
    ) -> f64 {
        let d = self.layout.d;
        let inputs = &seq[..seq.len() - 1];
        let fw = self.forward(inputs, rng);
        let mut loss = 0.0;
        let mut dout = vec![0.0; fw.len * d];
        let mut demb: Vec<(usize, usize, f64)> = Vec::new();
        for t in 0..fw.len {
            let out = &fw.out[t * d..(t + 1) * d];
            for (item, label) in [(seq[t + 1], 1.0), (negs[t], 0.0)] {
                let e = self.item_row(item);
                let s: f64 = out.iter().zip(e).map(|(a, b)| a * b).sum();
                // -log sigmoid(s) for positives, -log(1 - sigmoid(s)) for negatives
                loss += if label == 1.0 { softplus(-s) } else { softplus(s) };
                let ds = (crate::util::sigmoid(s) - label) * weight;
                for c in 0..d {
                    dout[t * d + c] += ds * e[c];
                }
                demb.push((item, t, ds));
            }
        }
        if let Some(g) = grad {
            for (item, t, ds) in demb {
                let base = self.layout.item_emb + item * d;
                for c in 0..d {
                    g[base + c] += ds * fw.out[t * d + c];
                }
            }
            self.backward(&fw, &dout, g);
        }
        loss
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.98;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], frozen: std::ops::Range<usize>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..w.len() {
            if frozen.contains(&i) {
                continue;
            }
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            w[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Serialized form of a trained encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: String,
    config: EncoderConfig,
    vocab: Vec<String>,
    params: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "mmrec-sasrec-1";

/// A trained sequence encoder plus its item vocabulary.
#[derive(Debug, Clone)]
pub struct SasRecEncoder {
    model: Model,
    /// `vocab[i]` is the item at embedding row `i + 1`.
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Dropout-free loss on the training sequences before the first update.
    pub initial_loss: f64,
    /// Mean training loss per epoch (with dropout).
    pub epoch_losses: Vec<f64>,
    /// Dropout-free loss after training, same negatives as `initial_loss`.
    pub final_loss: f64,
}

impl SasRecEncoder {
    /// Trains on chronological item-id sequences (each including the next
    /// item to predict). Items outside `vocab` are dropped from sequences.
    pub fn train(
        sequences: &[Vec<String>],
        vocab: &[String],
        cfg: &EncoderConfig,
        seed: u64,
    ) -> Result<(Self, TrainReport)> {
        cfg.validate()?;
        let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, v)| (v.clone(), i + 1)).collect();
        let rows = vocab.len() + 1;
        let seqs: Vec<Vec<usize>> = sequences
            .iter()
            .map(|s| {
                let ids: Vec<usize> = s.iter().filter_map(|x| index.get(x).copied()).collect();
                let start = ids.len().saturating_sub(cfg.max_len + 1);
                ids[start..].to_vec()
            })
            .filter(|s| s.len() >= 2)
            .collect();
        if seqs.is_empty() {
            return Err(Error::Invalid("no training sequence with at least two known items".into()));
        }
        let mut rng = keyed_rng(seed, &["sasrec-init"]);
        let mut model = Model::init(cfg, rows, &mut rng);

        let sample_negs = |seq: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
            let taken: HashSet<usize> = seq.iter().copied().collect();
            (1..seq.len())
                .map(|_| {
                    let mut j = rng.gen_range(1..rows);
                    for _ in 0..32 {
                        if !taken.contains(&j) {
                            break;
                        }
                        j = rng.gen_range(1..rows);
                    }
                    j
                })
                .collect()
        };
        let mut eval_rng = keyed_rng(seed, &["sasrec-eval-negatives"]);
        let eval_negs: Vec<Vec<usize>> = seqs.iter().map(|s| sample_negs(s, &mut eval_rng)).collect();
        let positions: usize = seqs.iter().map(|s| s.len() - 1).sum();
        let eval_loss = |m: &Model| -> f64 {
            seqs.iter()
                .zip(&eval_negs)
                .map(|(s, n)| m.sequence_loss(s, n, None, None, 0.0))
                .sum::<f64>()
                / positions as f64
        };
        let initial_loss = eval_loss(&model);

        let mut adam = Adam::new(model.layout.total, cfg.learning_rate);
        let frozen = model.layout.item_emb..model.layout.item_emb + cfg.embed_dim;
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut train_rng = keyed_rng(seed, &["sasrec-train"]);
        let mut grad = vec![0.0; model.layout.total];
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut train_rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let negs: Vec<Vec<usize>> = batch.iter().map(|&i| sample_negs(&seqs[i], &mut train_rng)).collect();
                let n_pos: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
                let weight = 1.0 / n_pos as f64;
                for (&i, n) in batch.iter().zip(&negs) {
                    total += model.sequence_loss(&seqs[i], n, Some(&mut train_rng), Some(&mut grad), weight);
                }
                adam.step(&mut model.w, &grad, frozen.clone());
            }
            epoch_losses.push(total / positions as f64);
        }
        let final_loss = eval_loss(&model);
        let version = Self::compute_version(cfg, vocab, &model.w);
        Ok((
            Self {
                model,
                vocab: vocab.to_vec(),
                index,
                version,
            },
            TrainReport {
                initial_loss,
                epoch_losses,
                final_loss,
            },
        ))
    }

    fn compute_version(cfg: &EncoderConfig, vocab: &[String], w: &[f64]) -> String {
        let mut bytes = serde_json::to_vec(cfg).expect("config serializes");
        for v in vocab {
            bytes.extend_from_slice(v.as_bytes());
            bytes.push(0);
        }
        for x in w {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        format!("sasrec-{}", &sha256_hex(&bytes)[..16])
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.model.cfg
    }

    /// Known items of `history`, most recent `max_len` kept.
    fn rows_of(&self, history: &[String]) -> Vec<usize> {
        let ids: Vec<usize> = history.iter().filter_map(|x| self.index.get(x).copied()).collect();
        let start = ids.len().saturating_sub(self.model.cfg.max_len);
        ids[start..].to_vec()
    }

    /// Hidden state at the last known position of the history; the zero
    /// vector when no item is known.
    pub fn encode(&self, history: &[String]) -> Vec<f64> {
        let rows = self.rows_of(history);
        let d = self.model.layout.d;
        if rows.is_empty() {
            return vec![0.0; d];
        }
        let fw = self.model.forward(&rows, None);
        fw.out[(fw.len - 1) * d..].to_vec()
    }

    /// Scores of every vocabulary item as the next item, in vocabulary order.
    pub fn next_item_scores(&self, history: &[String]) -> Vec<f64> {
        let h = self.encode(history);
        (1..=self.vocab.len())
            .map(|i| self.model.item_row(i).iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Highest-scoring item not already in the history (ties go to the
    /// earlier vocabulary entry). Training never uses seen items as
    /// negatives, so their scores are not comparable.
    pub fn predict_next(&self, history: &[String]) -> Option<&str> {
        let seen: HashSet<usize> = self.rows_of(history).into_iter().collect();
        let scores = self.next_item_scores(history);
        let best = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen.contains(&(i + 1)))
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?
            .0;
        Some(&self.vocab[best])
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: self.version.clone(),
            config: self.model.cfg,
            vocab: self.vocab.clone(),
            params: self.model.w.clone(),
        };
        Ok(serde_json::to_vec(&ck)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!("unknown encoder checkpoint format {}", ck.format)));
        }
        let layout = Layout::new(&ck.config, ck.vocab.len() + 1);
        if layout.total != ck.params.len() {
            return Err(Error::Invalid("encoder checkpoint has the wrong parameter count".into()));
        }
        let index = ck.vocab.iter().enumerate().map(|(i, v)| (v.clone(), i + 1)).collect();
        Ok(Self {
            model: Model {
                cfg: ck.config,
                layout,
                w: ck.params,
            },
            vocab: ck.vocab,
            index,
            version: ck.version,
        })
    }
}
