//! Post-norm transformer encoder: token + position (+ marker) embeddings,
//! then `n_layers` of self-attention, add & norm, GELU feed-forward, add & norm.
//!
//! Sequences are processed one at a time, so no padding or mask is needed.
//! Weights are stored `[in, out]` and applied as `x · W + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{acc_a_bt, acc_at_b, acc_colsum, dot, gelu, gelu_grad, linear, softmax_in_place};
use super::{ModelConfig, NeuralError, ParamSet, Tensor};

pub const LN_EPS: f64 = 1e-12;

const EMB_SCALE: f64 = 0.1;

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

pub(crate) fn layer_name(l: usize, p: &str) -> String {
    format!("enc.l{l}.{p}")
}

/// Fresh encoder parameters, seeded by `cfg.seed`.
pub fn init_encoder(cfg: &ModelConfig) -> Result<ParamSet, NeuralError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, f) = (cfg.d_model, cfg.ffn());
    let mut p = ParamSet::new();
    p.insert(
        "enc.tok_emb",
        Tensor::from_vec(&[cfg.vocab_size, d], uniform(&mut rng, cfg.vocab_size * d, EMB_SCALE))?,
    )?;
    p.insert(
        "enc.pos_emb",
        Tensor::from_vec(&[cfg.max_seq_len, d], uniform(&mut rng, cfg.max_seq_len * d, EMB_SCALE))?,
    )?;
    if cfg.n_markers > 0 {
        p.insert(
            "enc.marker_emb",
            Tensor::from_vec(&[cfg.n_markers, d], uniform(&mut rng, cfg.n_markers * d, EMB_SCALE))?,
        )?;
    }
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(layer_name(l, w), Tensor::from_vec(&[d, d], xavier(&mut rng, d, d))?)?;
            // a key bias shifts every score of a query row equally, so it is left out
            if w != "wk" {
                p.insert(layer_name(l, &w.replace('w', "b")), Tensor::zeros(&[d]))?;
            }
        }
        p.insert(layer_name(l, "w1"), Tensor::from_vec(&[d, f], xavier(&mut rng, d, f))?)?;
        p.insert(layer_name(l, "b1"), Tensor::zeros(&[f]))?;
        p.insert(layer_name(l, "w2"), Tensor::from_vec(&[f, d], xavier(&mut rng, f, d))?)?;
        p.insert(layer_name(l, "b2"), Tensor::zeros(&[d]))?;
        for ln in ["ln1", "ln2"] {
            p.insert(layer_name(l, &format!("{ln}_g")), Tensor::filled(&[d], 1.0))?;
            p.insert(layer_name(l, &format!("{ln}_b")), Tensor::zeros(&[d]))?;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    y1: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<usize>,
    markers: Option<Vec<usize>>,
    t: usize,
    layers: Vec<LayerCache>,
}

impl EncoderCache {
    pub fn seq_len(&self) -> usize {
        self.t
    }

    /// Attention weights of layer `l`, laid out `[heads, T, T]`.
    pub fn attention(&self, l: usize) -> &[f64] {
        &self.layers[l].probs
    }

    /// Pre-affine normalized rows of the two layer norms of layer `l`.
    pub fn normalized(&self, l: usize) -> (&[f64], &[f64]) {
        (&self.layers[l].xhat1, &self.layers[l].xhat2)
    }
}

fn layer_norm(r: &[f64], t: usize, d: usize, gamma: &[f64], beta: &[f64], xhat: &mut [f64], rstd: &mut [f64], y: &mut [f64]) {
    for i in 0..t {
        let row = &r[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[i * d + c] = xh;
            y[i * d + c] = gamma[c] * xh + beta[c];
        }
    }
}

/// Returns the gradient w.r.t. the layer-norm input; accumulates `dgamma`, `dbeta`.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    t: usize,
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    let mut dxh = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xr = &xhat[i * d..(i + 1) * d];
        let (mut m1, mut m2) = (0.0, 0.0);
        for c in 0..d {
            dgamma[c] += dyr[c] * xr[c];
            dbeta[c] += dyr[c];
            dxh[c] = dyr[c] * gamma[c];
            m1 += dxh[c];
            m2 += dxh[c] * xr[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            dx[i * d + c] = rstd[i] * (dxh[c] - m1 - xr[c] * m2);
        }
    }
    dx
}

/// Encoder output `H` of shape `[T, d]`.
pub fn forward_encoder(ids: &[usize], params: &ParamSet, cfg: &ModelConfig) -> Result<Tensor, NeuralError> {
    forward_encoder_cached(ids, None, params, cfg).map(|(h, _)| h)
}

/// Forward pass that also returns the cache needed by [`encoder_backward`].
pub fn forward_encoder_cached(
    ids: &[usize],
    markers: Option<&[usize]>,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Tensor, EncoderCache), NeuralError> {
    let t = ids.len();
    if t > cfg.max_seq_len {
        return Err(NeuralError::SequenceTooLong { len: t, max: cfg.max_seq_len });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(NeuralError::TokenOutOfVocab { id, vocab_size: cfg.vocab_size });
    }
    if let Some(m) = markers {
        if m.len() != t {
            return Err(NeuralError::ShapeMismatch(format!("{} markers for {t} tokens", m.len())));
        }
        if m.iter().any(|&x| x >= cfg.n_markers) {
            return Err(NeuralError::ShapeMismatch(format!(
                "marker id out of range (n_markers = {})",
                cfg.n_markers
            )));
        }
    }
    let d = cfg.d_model;
    let f = cfg.ffn();
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = params.t("enc.tok_emb");
    let pos = params.t("enc.pos_emb");
    let mut x = vec![0.0; t * d];
    for (i, &id) in ids.iter().enumerate() {
        let o = &mut x[i * d..(i + 1) * d];
        for ((ov, a), b) in o.iter_mut().zip(tok.row(id)).zip(pos.row(i)) {
            *ov = a + b;
        }
        if let Some(m) = markers {
            for (ov, a) in o.iter_mut().zip(params.t("enc.marker_emb").row(m[i])) {
                *ov += a;
            }
        }
    }

    let zeros_d = vec![0.0; d];
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let w = |n: &str| params.t(&layer_name(l, n)).data();
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        linear(&x, w("wq"), w("bq"), t, d, d, &mut q);
        linear(&x, w("wk"), &zeros_d, t, d, d, &mut k);
        linear(&x, w("wv"), w("bv"), t, d, d, &mut v);

        let mut probs = vec![0.0; nh * t * t];
        let mut ctx = vec![0.0; t * d];
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let qi = &q[i * d + cols.start..i * d + cols.end];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * d + cols.start..j * d + cols.end]) * scale;
                }
                softmax_in_place(row);
                let c = &mut ctx[i * d + cols.start..i * d + cols.end];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v[j * d + cols.start..j * d + cols.end];
                    for (cv, &vv) in c.iter_mut().zip(vj) {
                        *cv += pij * vv;
                    }
                }
            }
        }

        let mut r1 = vec![0.0; t * d];
        linear(&ctx, w("wo"), w("bo"), t, d, d, &mut r1);
        r1.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
        let mut xhat1 = vec![0.0; t * d];
        let mut rstd1 = vec![0.0; t];
        let mut y1 = vec![0.0; t * d];
        layer_norm(&r1, t, d, w("ln1_g"), w("ln1_b"), &mut xhat1, &mut rstd1, &mut y1);

        let mut u = vec![0.0; t * f];
        linear(&y1, w("w1"), w("b1"), t, d, f, &mut u);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut r2 = vec![0.0; t * d];
        linear(&g, w("w2"), w("b2"), t, f, d, &mut r2);
        r2.iter_mut().zip(&y1).for_each(|(a, b)| *a += b);
        let mut xhat2 = vec![0.0; t * d];
        let mut rstd2 = vec![0.0; t];
        let mut y2 = vec![0.0; t * d];
        layer_norm(&r2, t, d, w("ln2_g"), w("ln2_b"), &mut xhat2, &mut rstd2, &mut y2);

        let input = std::mem::replace(&mut x, y2);
        layers.push(LayerCache {
            x: input,
            q,
            k,
            v,
            probs,
            ctx,
            xhat1,
            rstd1,
            y1,
            u,
            g,
            xhat2,
            rstd2,
        });
    }

    let cache = EncoderCache {
        ids: ids.to_vec(),
        markers: markers.map(<[usize]>::to_vec),
        t,
        layers,
    };
    Ok((Tensor::from_vec(&[t, d], x)?, cache))
}

/// Backpropagate `dh = dL/dH` (`[T, d]`) through the encoder, accumulating
/// into `grads` (same layout as `params`).
pub fn encoder_backward(cache: &EncoderCache, dh: &[f64], params: &ParamSet, grads: &mut ParamSet, cfg: &ModelConfig) {
    let t = cache.t;
    let d = cfg.d_model;
    let f = cfg.ffn();
    let nh = cfg.n_heads;
    let dh_ = cfg.head_dim();
    let scale = 1.0 / (dh_ as f64).sqrt();
    debug_assert_eq!(dh.len(), t * d);

    let mut dy = dh.to_vec();
    for l in (0..cfg.n_layers).rev() {
        let c = &cache.layers[l];
        let w = |n: &str| params.t(&layer_name(l, n)).data();
        macro_rules! g {
            ($n:expr) => {
                grads.t_mut(&layer_name(l, $n)).data_mut()
            };
        }

        // second add & norm
        let (mut dgam, mut dbet) = (vec![0.0; d], vec![0.0; d]);
        let dr2 = layer_norm_backward(&dy, &c.xhat2, &c.rstd2, w("ln2_g"), t, d, &mut dgam, &mut dbet);
        add_into(g!("ln2_g"), &dgam);
        add_into(g!("ln2_b"), &dbet);

        // feed-forward
        acc_at_b(&c.g, &dr2, t, f, d, g!("w2"));
        acc_colsum(&dr2, t, d, g!("b2"));
        let mut dgact = vec![0.0; t * f];
        acc_a_bt(&dr2, w("w2"), t, d, f, &mut dgact);
        let du: Vec<f64> = dgact.iter().zip(&c.u).map(|(a, &u)| a * gelu_grad(u)).collect();
        acc_at_b(&c.y1, &du, t, d, f, g!("w1"));
        acc_colsum(&du, t, f, g!("b1"));
        let mut dy1 = dr2;
        acc_a_bt(&du, w("w1"), t, f, d, &mut dy1);

        // first add & norm
        let (mut dgam, mut dbet) = (vec![0.0; d], vec![0.0; d]);
        let dr1 = layer_norm_backward(&dy1, &c.xhat1, &c.rstd1, w("ln1_g"), t, d, &mut dgam, &mut dbet);
        add_into(g!("ln1_g"), &dgam);
        add_into(g!("ln1_b"), &dbet);

        // attention output projection
        acc_at_b(&c.ctx, &dr1, t, d, d, g!("wo"));
        acc_colsum(&dr1, t, d, g!("bo"));
        let mut dctx = vec![0.0; t * d];
        acc_a_bt(&dr1, w("wo"), t, d, d, &mut dctx);

        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..nh {
            let (cs, ce) = (h * dh_, (h + 1) * dh_);
            for i in 0..t {
                let p = &c.probs[(h * t + i) * t..(h * t + i + 1) * t];
                let dci = &dctx[i * d + cs..i * d + ce];
                for j in 0..t {
                    dp[j] = dot(dci, &c.v[j * d + cs..j * d + ce]);
                    let dvj = &mut dv[j * d + cs..j * d + ce];
                    for (a, &b) in dvj.iter_mut().zip(dci) {
                        *a += p[j] * b;
                    }
                }
                let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for cc in cs..ce {
                        dq[i * d + cc] += ds * c.k[j * d + cc];
                        dk[j * d + cc] += ds * c.q[i * d + cc];
                    }
                }
            }
        }

        let mut dx = dr1;
        for (pw, pb, dz) in [("wq", Some("bq"), &dq), ("wk", None, &dk), ("wv", Some("bv"), &dv)] {
            acc_at_b(&c.x, dz, t, d, d, g!(pw));
            if let Some(pb) = pb {
                acc_colsum(dz, t, d, g!(pb));
            }
            acc_a_bt(dz, w(pw), t, d, d, &mut dx);
        }
        dy = dx;
    }

    let dtok = grads.t_mut("enc.tok_emb");
    for (i, &id) in cache.ids.iter().enumerate() {
        add_into(&mut dtok.data_mut()[id * d..(id + 1) * d], &dy[i * d..(i + 1) * d]);
    }
    let dpos = grads.t_mut("enc.pos_emb");
    add_into(&mut dpos.data_mut()[..t * d], &dy);
    if let Some(m) = &cache.markers {
        let dm = grads.t_mut("enc.marker_emb");
        for (i, &mi) in m.iter().enumerate() {
            add_into(&mut dm.data_mut()[mi * d..(mi + 1) * d], &dy[i * d..(i + 1) * d]);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
