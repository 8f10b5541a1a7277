// SPDX-License-Identifier: MIT OR Apache-2.0

use khop::model::{apply_rope, Batch, Intervention, Model, ModelConfig, ModelState, Site};
use khop::train::{lm_loss, transformer_grad_check};
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig::new(2, 2, 16, 23, 12)
}

fn randomized(seed: u64) -> ModelState {
    // Non-trivial gains and biases so every path is exercised.
    let mut m = ModelState::init(cfg(), seed).unwrap();
    let n = m.params.len();
    for (i, p) in m.params.iter_mut().enumerate() {
        let jitter = (((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5) * 0.2;
        *p += jitter * if i < n / 2 { 1.0 } else { 0.5 };
    }
    m
}

// Straight-line reference: one token at a time, f64, no packing, complex RoPE.
fn t(m: &ModelState, name: &str) -> Vec<f64> {
    m.tensor(name).unwrap().iter().map(|&x| x as f64).collect()
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mu) / (var + 1e-5).sqrt() * g + b).collect()
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum()).collect()
}

fn complex_rope(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let hd = v.len();
    let mut out = vec![0.0; hd];
    for i in 0..hd / 2 {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
        let (re, im) = (v[2 * i], v[2 * i + 1]);
        let (c, s) = (theta.cos(), theta.sin());
        out[2 * i] = re * c - im * s;
        out[2 * i + 1] = re * s + im * c;
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_logits(m: &ModelState, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = m.config().clone();
    let (d, h) = (c.d_model, c.n_heads);
    let hd = d / h;
    let wte = t(m, "wte");
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&tk| wte[tk as usize * d..(tk as usize + 1) * d].to_vec()).collect();
    for l in 0..c.n_layers {
        let p = |s: &str| t(m, &format!("h{l}.{s}"));
        let (g1, b1, wqkv, bqkv, wo, bo) = (p("ln1.g"), p("ln1.b"), p("attn.w_qkv"), p("attn.b_qkv"), p("attn.w_o"), p("attn.b_o"));
        let (g2, b2, wfc, bfc, wpr, bpr) = (p("ln2.g"), p("ln2.b"), p("mlp.w_fc"), p("mlp.b_fc"), p("mlp.w_proj"), p("mlp.b_proj"));
        let mut qs = vec![];
        let mut ks = vec![];
        let mut vs = vec![];
        for (pos, x) in xs.iter().enumerate() {
            let a = ln(x, &g1, &b1);
            let qkv: Vec<f64> = matvec(&a, &wqkv, 3 * d).iter().zip(&bqkv).map(|(x, b)| x + b).collect();
            let mut q = vec![];
            let mut k = vec![];
            for head in 0..h {
                q.extend(complex_rope(&qkv[head * hd..(head + 1) * hd], pos, c.rope_base));
                k.extend(complex_rope(&qkv[d + head * hd..d + (head + 1) * hd], pos, c.rope_base));
            }
            qs.push(q);
            ks.push(k);
            vs.push(qkv[2 * d..].to_vec());
        }
        let mut next = vec![];
        for (i, x) in xs.iter().enumerate() {
            let mut att = vec![0.0; d];
            for head in 0..h {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let pj = (s - mx).exp() / z;
                    for (o, v) in att[r.clone()].iter_mut().zip(&vs[j][r.clone()]) {
                        *o += pj * v;
                    }
                }
            }
            let ao: Vec<f64> = matvec(&att, &wo, d).iter().zip(&bo).map(|(a, b)| a + b).collect();
            let x1: Vec<f64> = x.iter().zip(&ao).map(|(a, b)| a + b).collect();
            let a2 = ln(&x1, &g2, &b2);
            let f: Vec<f64> = matvec(&a2, &wfc, c.d_mlp).iter().zip(&bfc).map(|(a, b)| gelu(a + b)).collect();
            let mo: Vec<f64> = matvec(&f, &wpr, d).iter().zip(&bpr).map(|(a, b)| a + b).collect();
            next.push(x1.iter().zip(&mo).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let (gf, bf) = (t(m, "lnf.g"), t(m, "lnf.b"));
    xs.iter()
        .map(|x| {
            let h_n = ln(x, &gf, &bf);
            (0..c.vocab_size).map(|v| h_n.iter().zip(&wte[v * d..(v + 1) * d]).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

#[test]
fn logits_match_straight_line_reference() {
    let m = randomized(1);
    let tokens = [1u32, 5, 22, 7, 7, 0, 13, 2, 19, 4];
    let (logits, _) = m.forward(&tokens, false, &[]).unwrap();
    let reference = reference_logits(&m, &tokens);
    let mut worst = 0.0f64;
    for (row, r) in logits.chunks(23).zip(&reference) {
        for (a, b) in row.iter().zip(r) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    assert!(worst < 1e-5, "max abs diff {worst}");
}

#[test]
fn rope_matches_complex_multiplication() {
    let v: Vec<f64> = (0..32).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    for pos in [0usize, 1, 7, 63] {
        let mut r = v.clone();
        apply_rope(&mut r, 32, &[pos], 10_000.0).unwrap();
        let c = complex_rope(&v, pos, 10_000.0);
        let worst = r.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6);
    }
}

proptest! {
    #[test]
    fn rope_relative_position(m in 0usize..40, n in 0usize..40, delta in 0usize..40, seed in 0u64..1000) {
        let q: Vec<f32> = (0..16).map(|i| (((i as u64 * 7919 + seed) % 101) as f32 - 50.0) / 50.0).collect();
        let k: Vec<f32> = (0..16).map(|i| (((i as u64 * 104729 + seed * 3) % 97) as f32 - 48.0) / 48.0).collect();
        let dot = |mut a: Vec<f32>, pa: usize, mut b: Vec<f32>, pb: usize| {
            apply_rope(&mut a, 16, &[pa], 10_000.0).unwrap();
            apply_rope(&mut b, 16, &[pb], 10_000.0).unwrap();
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f32>()
        };
        let a = dot(q.clone(), m, k.clone(), n);
        let b = dot(q, m + delta, k, n + delta);
        prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn causal_mask_invariance() {
    let m = randomized(2);
    let a = [3u32, 8, 9, 1, 4, 6, 2];
    let (la, _) = m.forward(&a, false, &[]).unwrap();
    for t in 1..a.len() {
        let mut b = a;
        b[t] = (b[t] + 5) % 23;
        let (lb, _) = m.forward(&b, false, &[]).unwrap();
        let prefix = t * 23;
        let worst = la[..prefix].iter().zip(&lb[..prefix]).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 1e-6, "position {t}: {worst}");
    }
}

#[test]
fn self_patching_reproduces_logits() {
    let m = randomized(3);
    let tokens = [1u32, 2, 3, 4, 5, 6];
    let (clean, trace) = m.forward(&tokens, true, &[]).unwrap();
    let trace = trace.unwrap();
    let mut all = Vec::new();
    for layer in 0..2 {
        for pos in 0..tokens.len() {
            all.push(Intervention { site: Site::MlpOut, layer, seq: 0, position: pos, value: trace.mlp_out_at(layer, 0, pos).to_vec() });
            all.push(Intervention { site: Site::Residual, layer, seq: 0, position: pos, value: trace.residual_at(layer, 0, pos).to_vec() });
        }
    }
    let (patched, _) = m.forward(&tokens, false, &all).unwrap();
    assert_eq!(clean, patched);
    for iv in &all {
        let (p, _) = m.forward(&tokens, false, std::slice::from_ref(iv)).unwrap();
        assert_eq!(clean, p);
    }
}

#[test]
fn trace_invariants() {
    let m = randomized(4);
    let batch = Batch::from_sequences(&[vec![1u32, 2, 3, 4], vec![5, 6, 7]]);
    let (_, trace) = m.forward_batch(&batch, true, &[]).unwrap();
    let tr = trace.unwrap();
    // attention rows sum to one
    for layer in &tr.attention {
        let mut off = 0;
        for s in 0..2 {
            let len = batch.seq_len(s);
            for _h in 0..2 {
                for i in 0..len {
                    let row = &layer[off + i * len..off + (i + 1) * len];
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                }
                off += len * len;
            }
        }
    }
    // residual accounting
    for l in 0..2 {
        for s in 0..2 {
            for p in 0..batch.seq_len(s) {
                let prev = if l == 0 { tr.embed_at(s, p) } else { tr.residual_at(l - 1, s, p) };
                let sum: Vec<f32> = prev
                    .iter()
                    .zip(tr.attn_out_at(l, s, p))
                    .zip(tr.mlp_out_at(l, s, p))
                    .map(|((a, b), c)| a + b + c)
                    .collect();
                let worst = sum.iter().zip(tr.residual_at(l, s, p)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                assert!(worst < 1e-5);
            }
        }
    }
}

#[test]
fn packed_batches_match_single_sequences() {
    let m = randomized(5);
    let seqs = vec![vec![1u32, 2, 3, 4], vec![9, 8, 7], vec![4, 4, 4, 4, 4]];
    let (packed, _) = m.forward_batch(&Batch::from_sequences(&seqs), false, &[]).unwrap();
    let mut off = 0;
    for s in &seqs {
        let (single, _) = m.forward(s, false, &[]).unwrap();
        let worst = single.iter().zip(&packed[off..]).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-5);
        off += single.len();
    }
}

#[test]
fn padding_does_not_change_loss() {
    let m = randomized(6);
    let seqs = vec![vec![1u32, 2, 3, 4], vec![9, 8, 7]];
    let packed = m.loss(&Batch::from_sequences(&seqs)).unwrap();
    let padded = m.loss(&Batch::padded(&seqs, 8, 0)).unwrap();
    assert!((packed - padded).abs() < 1e-6, "{packed} vs {padded}");
}

#[test]
fn two_layer_gradient_check() {
    let m: Model<f64> = randomized(7).cast();
    assert!(m.num_params() < 50_000);
    let batch = Batch::from_sequences(&[vec![1u32, 5, 9, 3, 3, 8], vec![2, 2, 7, 11, 4]]);
    let err = transformer_grad_check(&m, &batch, 64, 1e-5, 11).unwrap();
    assert!(err < 1e-3, "max relative error {err}");
    assert!(transformer_grad_check(&m, &batch, 0, 1e-5, 11).is_err());
}

#[test]
fn loss_matches_independent_log_softmax() {
    let logits: Vec<f32> = (0..5 * 9).map(|i| ((i * 31 % 17) as f32 - 8.0) / 3.0).collect();
    let targets = [3u32, 0, khop::model::IGNORE, 8, 2];
    let mut total = 0.0f64;
    let mut n = 0;
    for (row, &tg) in logits.chunks(9).zip(&targets) {
        if tg == khop::model::IGNORE {
            continue;
        }
        let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        let logz = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        total += logz - row[tg as usize];
        n += 1;
    }
    let ours = lm_loss(&logits, &targets, 9).unwrap();
    assert!((ours - total / n as f64).abs() < 1e-6);
    let mut onehot = vec![0.0f32; 9];
    onehot[4] = 60.0;
    assert!(lm_loss(&onehot, &[4], 9).unwrap() < 1e-20);
}
