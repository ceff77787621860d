//! Scalar-loop reference implementations used as independent oracles.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, Array4};
use semtrack::adapters::{AdapterKind, AdapterSet, AdapterWeights};
use semtrack::encoder::{AttentionProjections, LayerNormWeights};
use semtrack::memory::MaskDownsampler;
use semtrack::pipeline::Model;
use semtrack::promptdec::{DecoderWeights, PromptTokens};

pub type M = Vec<Vec<f64>>;

pub fn to_m(a: &Array2<f64>) -> M {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &M, b: &Array2<f64>) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.dim(), "oracle shape");
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b[[i, j]]).abs());
        }
    }
    worst
}

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn linear(a: &M, w: &Array2<f64>) -> M {
    matmul(a, &to_m(w))
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn map(a: &M, f: impl Fn(f64) -> f64) -> M {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(a: &M, gamma: &Array1<f64>, beta: &Array1<f64>) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn ln(a: &M, w: &LayerNormWeights) -> M {
    layer_norm(a, &w.gamma, &w.beta)
}

/// Multi-head attention with heads over contiguous column blocks.
pub fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum();
            }
        }
    }
    out
}

pub fn attend(q_in: &M, k_in: &M, v_in: &M, w: &AttentionProjections, heads: usize) -> M {
    let a = attention(&linear(q_in, &w.w_q), &linear(k_in, &w.w_k), &linear(v_in, &w.w_v), heads);
    linear(&a, &w.w_o)
}

pub fn concat_rows(parts: &[&M]) -> M {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

pub fn encoder_oracle(model: &Model, img: &Array3<f64>, adapters: Option<&AdapterSet>) -> M {
    let enc = &model.encoder;
    let cfg = enc.config();
    let (p, grid) = (cfg.patch_size, cfg.grid());
    let mut patches = vec![vec![0.0; p * p * 3]; grid * grid];
    for ty in 0..grid {
        for tx in 0..grid {
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        patches[ty * grid + tx][(py * p + px) * 3 + c] = (img[[ty * p + py, tx * p + px, c]] - 0.5) / 0.25;
                    }
                }
            }
        }
    }
    let mut x = add(&linear(&patches, &enc.patch_embed), &to_m(&enc.pos_embed));
    for (i, b) in enc.blocks.iter().enumerate() {
        let w = adapters.and_then(|a| a.get(i));
        let h = ln(&x, &b.norm1);
        let mut q = linear(&h, &b.attn.w_q);
        let k = linear(&h, &b.attn.w_k);
        let mut v = linear(&h, &b.attn.w_v);
        if let Some(w) = w.filter(|w| w.kind == AdapterKind::Lora) {
            let r = w.w_down.ncols() / 2;
            let down = to_m(&w.w_down);
            let up = to_m(&w.w_up);
            let cols = |m: &M, lo: usize, hi: usize| -> M { m.iter().map(|row| row[lo..hi].to_vec()).collect() };
            let rows = |m: &M, lo: usize, hi: usize| -> M { m[lo..hi].to_vec() };
            q = add(&q, &matmul(&matmul(&h, &cols(&down, 0, r)), &rows(&up, 0, r)));
            v = add(&v, &matmul(&matmul(&h, &cols(&down, r, 2 * r)), &rows(&up, r, 2 * r)));
        }
        let a = linear(&attention(&q, &k, &v, cfg.num_heads), &b.attn.w_o);
        let x_self = add(&x, &a);
        let m = linear(&map(&linear(&ln(&x_self, &b.norm2), &b.fc1), gelu), &b.fc2);
        let mut out = add(&x_self, &m);
        let bottleneck = |input: &M, w: &AdapterWeights| {
            linear(&map(&linear(input, &w.w_down), |z| z.max(0.0)), &w.w_up)
        };
        match w {
            Some(w) if w.kind == AdapterKind::AdaptFormer => out = add(&out, &bottleneck(&x_self, w)),
            Some(w) if w.kind == AdapterKind::SerialAdapter => out = add(&out, &bottleneck(&out, w)),
            _ => {}
        }
        x = out;
    }
    ln(&x, &enc.final_norm)
}

pub fn conv_oracle(input: &[M], weight: &Array4<f64>) -> Vec<M> {
    let (cout, cin, k, _) = weight.dim();
    let h = input[0].len();
    let oh = h.div_ceil(2);
    (0..cout)
        .map(|o| {
            let mut out = vec![vec![0.0; oh]; oh];
            for (y, row) in out.iter_mut().enumerate() {
                for (x, cell) in row.iter_mut().enumerate() {
                    for (i, plane) in input.iter().enumerate().take(cin) {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (2 * y + ky, 2 * x + kx);
                                if iy >= 1 && ix >= 1 && iy - 1 < h && ix - 1 < h {
                                    *cell += weight[[o, i, ky, kx]] * plane[iy - 1][ix - 1];
                                }
                            }
                        }
                    }
                }
            }
            map(&out, gelu)
        })
        .collect()
}

pub fn downsample_oracle(ds: &MaskDownsampler, mask: &Array2<f64>) -> M {
    let mut planes = vec![to_m(mask)];
    for stage in &ds.stages {
        planes = conv_oracle(&planes, &stage.weight);
    }
    let g = planes[0].len();
    let tokens: M = (0..g * g)
        .map(|t| planes.iter().map(|p| p[t / g][t % g]).collect())
        .collect();
    linear(&tokens, &ds.projection)
}

pub fn memory_oracle(model: &Model, target: &M, memory: &M) -> M {
    let w = &model.memory;
    let mut x = target.clone();
    for l in &w.layers {
        x = add(&x, &attend(&ln(&x, &l.query_norm), memory, memory, &l.attn, w.num_heads));
        let f = linear(&map(&linear(&ln(&x, &l.ffn_norm), &l.ffn1), gelu), &l.ffn2);
        x = add(&x, &f);
    }
    ln(&x, &w.final_norm)
}

pub fn decoder_oracle(dec: &DecoderWeights, features: &M, prompt: Option<&PromptTokens>, grid: usize) -> Array2<f64> {
    let heads = dec.num_heads;
    let mut tokens = to_m(&dec.output_tokens);
    let mut image = features.clone();
    if let Some(p) = prompt {
        tokens = concat_rows(&[&tokens, &to_m(&p.sparse)]);
        if let Some(d) = &p.dense {
            image = add(&image, &to_m(d));
        }
    }
    let pe = to_m(&dec.image_pe);
    for b in &dec.blocks {
        tokens = ln(&add(&tokens, &attend(&tokens, &tokens, &tokens, &b.self_attn, heads)), &b.norm1);
        let keys = add(&image, &pe);
        tokens = ln(&add(&tokens, &attend(&tokens, &keys, &image, &b.token_to_image, heads)), &b.norm2);
        let m = linear(&map(&linear(&tokens, &b.mlp1), gelu), &b.mlp2);
        tokens = ln(&add(&tokens, &m), &b.norm3);
        let queries = add(&image, &pe);
        image = ln(&add(&image, &attend(&queries, &tokens, &tokens, &b.image_to_token, heads)), &b.norm4);
    }
    let keys = add(&image, &pe);
    tokens = ln(&add(&tokens, &attend(&tokens, &keys, &image, &dec.final_attn, heads)), &dec.final_norm);

    let hyper_rows = linear(&map(&linear(&tokens[..2].to_vec(), &dec.hyper1), gelu), &dec.hyper2);
    let hyper: Vec<f64> = (0..dec.channels).map(|c| 0.5 * (hyper_rows[0][c] + hyper_rows[1][c])).collect();
    let up = linear(&image, &dec.upscale);
    let (p, ch) = (dec.patch_size, dec.channels);
    let side = grid * p;
    Array2::from_shape_fn((side, side), |(y, x)| {
        let token = &up[(y / p) * grid + x / p];
        let base = ((y % p) * p + x % p) * ch;
        (0..ch).map(|c| gelu(token[base + c]) * hyper[c]).sum()
    })
}

/// Mean binary cross-entropy of `sigmoid(logits)` and Dice loss with
/// smoothing 1, summed pixel by pixel.
pub fn loss_oracle(logits: &Array2<f64>, target: &Array2<f64>) -> (f64, f64) {
    let mut bce = 0.0;
    let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let p = sigmoid(x);
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        inter += p * y;
        ps += p;
        ys += y;
    }
    (bce / logits.len() as f64, 1.0 - (2.0 * inter + 1.0) / (ps + ys + 1.0))
}
