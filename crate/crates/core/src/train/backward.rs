//! Reverse-mode gradients of the final-position cross-entropy loss.

use crate::linalg::{dot, matmul_nn, matmul_nt, matmul_tn_acc, softmax_f64};
use crate::model::config::ModelConfig;
use crate::model::forward::{block_forward, embed_tokens, rms_norm_rows, BlockCache, Rope};
use crate::model::weights::{LayerWeights, ModelWeights};

/// Zero-filled buffers shaped like `weights`.
pub(crate) fn zeros_like(weights: &ModelWeights) -> ModelWeights {
    let mut g = weights.clone();
    for p in g.params_mut() {
        p.iter_mut().for_each(|v| *v = 0.0);
    }
    g
}

fn rms_backward(
    dy: &[f32],
    x: &[f32],
    inv: &[f32],
    gain: &[f32],
    d: usize,
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    for (row, &r) in inv.iter().enumerate() {
        let span = row * d..(row + 1) * d;
        let (dyr, xr) = (&dy[span.clone()], &x[span.clone()]);
        let mut sx = 0.0f32;
        for i in 0..d {
            sx += gain[i] * dyr[i] * xr[i];
            dgain[i] += dyr[i] * xr[i] * r;
        }
        let coef = r * r * r * sx / d as f32;
        let dxr = &mut dx[span];
        for i in 0..d {
            dxr[i] += r * gain[i] * dyr[i] - coef * xr[i];
        }
    }
}

/// Backward through one block. Returns the gradient w.r.t. the block input.
fn block_backward(
    config: &ModelConfig,
    rope: &Rope,
    lw: &LayerWeights,
    c: &BlockCache,
    dout: &[f32],
    seq: usize,
    g: &mut LayerWeights,
) -> Vec<f32> {
    let d = config.d_model;
    let f = config.d_ff;
    let nh = config.n_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();

    // MLP
    let mut dx_mid = dout.to_vec();
    let d_act = matmul_nn(dout, &lw.mlp_down, seq, d, f);
    matmul_tn_acc(&mut g.mlp_down, dout, &c.act, seq, d, f);
    let mut d_gate = vec![0.0f32; seq * f];
    let mut d_up = vec![0.0f32; seq * f];
    for i in 0..seq * f {
        let x = c.gate[i];
        let sig = 1.0 / (1.0 + (-x).exp());
        let s = x * sig;
        d_up[i] = d_act[i] * s;
        d_gate[i] = d_act[i] * c.up[i] * sig * (1.0 + x * (1.0 - sig));
    }
    matmul_tn_acc(&mut g.mlp_gate, &d_gate, &c.m, seq, f, d);
    matmul_tn_acc(&mut g.mlp_up, &d_up, &c.m, seq, f, d);
    let mut d_m = matmul_nn(&d_gate, &lw.mlp_gate, seq, f, d);
    let d_m_up = matmul_nn(&d_up, &lw.mlp_up, seq, f, d);
    for (a, b) in d_m.iter_mut().zip(&d_m_up) {
        *a += b;
    }
    rms_backward(&d_m, &c.x_mid, &c.inv2, &lw.norm2, d, &mut dx_mid, &mut g.norm2);

    // attention
    let mut dx = dx_mid.clone();
    let d_ctx = matmul_nn(&dx_mid, &lw.attn_o, seq, d, d);
    matmul_tn_acc(&mut g.attn_o, &dx_mid, &c.ctx, seq, d, d);

    let mut dq = vec![0.0f32; seq * d];
    let mut dk = vec![0.0f32; seq * d];
    let mut dv = vec![0.0f32; seq * d];
    let mut dp = vec![0.0f32; seq];
    for h in 0..nh {
        let hs = |pos: usize| pos * d + h * hd..pos * d + (h + 1) * hd;
        for i in 0..seq {
            let p = &c.probs[(h * seq + i) * seq..(h * seq + i) * seq + seq];
            let dci = &d_ctx[hs(i)];
            let mut weighted = 0.0f32;
            for j in 0..=i {
                dp[j] = dot(dci, &c.v[hs(j)]);
                weighted += p[j] * dp[j];
                let dvj = &mut dv[hs(j)];
                for (t, &x) in dvj.iter_mut().zip(dci) {
                    *t += p[j] * x;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &c.k[hs(j)];
                let dqi = &mut dq[hs(i)];
                for (t, &x) in dqi.iter_mut().zip(kj) {
                    *t += ds * x;
                }
                let qi = &c.q[hs(i)];
                let dkj = &mut dk[hs(j)];
                for (t, &x) in dkj.iter_mut().zip(qi) {
                    *t += ds * x;
                }
            }
        }
    }
    for pos in 0..seq {
        for h in 0..nh {
            let r = pos * d + h * hd..pos * d + (h + 1) * hd;
            rope.rotate(&mut dq[r.clone()], pos, true);
            rope.rotate(&mut dk[r], pos, true);
        }
    }
    matmul_tn_acc(&mut g.attn_q, &dq, &c.a, seq, d, d);
    matmul_tn_acc(&mut g.attn_k, &dk, &c.a, seq, d, d);
    matmul_tn_acc(&mut g.attn_v, &dv, &c.a, seq, d, d);
    let mut d_a = matmul_nn(&dq, &lw.attn_q, seq, d, d);
    for (src, w) in [(&dk, &lw.attn_k), (&dv, &lw.attn_v)] {
        let part = matmul_nn(src, w, seq, d, d);
        for (a, b) in d_a.iter_mut().zip(&part) {
            *a += b;
        }
    }
    rms_backward(&d_a, &c.x_in, &c.inv1, &lw.norm1, d, &mut dx, &mut g.norm1);
    dx
}

/// Accumulate `weight · ∇ CE(final-position logits, target)` into `grads`.
///
/// Returns the unweighted loss in nats.
pub(crate) fn accumulate_gradients(
    weights: &ModelWeights,
    rope: &Rope,
    tokens: &[u32],
    target: u32,
    weight: f32,
    grads: &mut ModelWeights,
) -> f64 {
    let config = &weights.config;
    let d = config.d_model;
    let vocab = config.vocab_size;
    let seq = tokens.len();

    let mut x = embed_tokens(weights, tokens);
    let mut caches = Vec::with_capacity(config.n_layers);
    for lw in &weights.layers {
        let (out, cache) = block_forward(config, rope, lw, &x, seq);
        caches.push(cache);
        x = out;
    }
    let last = &x[(seq - 1) * d..seq * d];
    let (normed, inv) = rms_norm_rows(last, d, &weights.final_norm, config.rms_eps);
    let logits = matmul_nt(&normed, &weights.unembed, 1, d, vocab);
    let probs = softmax_f64(&logits);
    let loss = -probs[target as usize].max(f64::MIN_POSITIVE).ln();

    let dlogits: Vec<f32> = probs
        .iter()
        .enumerate()
        .map(|(v, &p)| {
            let y = if v == target as usize { 1.0 } else { 0.0 };
            ((p - y) as f32) * weight
        })
        .collect();
    matmul_tn_acc(&mut grads.unembed, &dlogits, &normed, 1, vocab, d);
    let d_normed = matmul_nn(&dlogits, &weights.unembed, 1, vocab, d);

    let mut dx = vec![0.0f32; seq * d];
    rms_backward(
        &d_normed,
        last,
        &inv,
        &weights.final_norm,
        d,
        &mut dx[(seq - 1) * d..],
        &mut grads.final_norm,
    );

    for (l, cache) in caches.iter().enumerate().rev() {
        dx = block_backward(
            config,
            rope,
            &weights.layers[l],
            cache,
            &dx,
            seq,
            &mut grads.layers[l],
        );
    }
    for (pos, &t) in tokens.iter().enumerate() {
        let row = &mut grads.embed[t as usize * d..(t as usize + 1) * d];
        for (g, &v) in row.iter_mut().zip(&dx[pos * d..(pos + 1) * d]) {
            *g += v;
        }
    }
    loss
}
