// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with RoPE attention.
//!
//! Block wiring is pre-norm GPT-2: `x += attn(ln1(x)); x += mlp(ln2(x))`,
//! GELU MLP, final layer norm, and an LM head tied to the token embedding.
//! RoPE rotates queries and keys per head using interleaved pairs.
//!
//! Sequences are packed back to back into one `tokens × d_model` matrix so
//! every projection is a single GEMM; attention runs per sequence. There is
//! no padding inside a packed batch.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::SeedTree;
use crate::tensor::{
    add_bias, add_column_sums, gelu, gelu_grad, gemm, gemm_strided, layer_norm, layer_norm_backward, Op,
    RopeTable, Scalar, Strided,
};
use crate::{sha256_hex, Error, Result};

/// Target marker for positions without a next-token loss.
pub const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Only 0 is supported; kept so configs state it explicitly.
    #[serde(default)]
    pub dropout: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, context_length: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_mlp: 4 * d_model,
            vocab_size,
            context_length,
            rope_base: default_rope_base(),
            init_std: default_init_std(),
            dropout: 0.0,
        }
    }

    /// 12 layers, 12 heads, d = 768, 1024-token context.
    pub fn gpt2_small(vocab_size: usize) -> Self {
        Self::new(12, 12, 768, vocab_size, 1024)
    }

    /// 4 layers, 4 heads, d = 128: the desk-scale model.
    pub fn tiny(vocab_size: usize) -> Self {
        Self::new(4, 4, 128, vocab_size, 64)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if self.vocab_size == 0 || self.context_length == 0 {
            return bad("vocab size and context length must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} is odd; RoPE needs pairs", self.head_dim()));
        }
        if !(self.init_std > 0.0) || !(self.rope_base > 1.0) {
            return bad("init_std must be positive and rope_base > 1".into());
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported; set it to 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

impl TensorKind {
    /// Weight decay applies to matrices only; biases and norm gains are exempt.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Embedding | TensorKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    wte: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let off = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset: off, kind });
            off
        };
        let wte = add("wte".into(), vec![v, d], TensorKind::Embedding);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(n("ln1.g"), vec![d], TensorKind::Gain),
                ln1_b: add(n("ln1.b"), vec![d], TensorKind::Bias),
                w_qkv: add(n("attn.w_qkv"), vec![d, 3 * d], TensorKind::Weight),
                b_qkv: add(n("attn.b_qkv"), vec![3 * d], TensorKind::Bias),
                w_o: add(n("attn.w_o"), vec![d, d], TensorKind::Weight),
                b_o: add(n("attn.b_o"), vec![d], TensorKind::Bias),
                ln2_g: add(n("ln2.g"), vec![d], TensorKind::Gain),
                ln2_b: add(n("ln2.b"), vec![d], TensorKind::Bias),
                w_fc: add(n("mlp.w_fc"), vec![d, m], TensorKind::Weight),
                b_fc: add(n("mlp.b_fc"), vec![m], TensorKind::Bias),
                w_proj: add(n("mlp.w_proj"), vec![m, d], TensorKind::Weight),
                b_proj: add(n("mlp.b_proj"), vec![d], TensorKind::Bias),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![d], TensorKind::Gain);
        let lnf_b = add("lnf.b".into(), vec![d], TensorKind::Bias);
        Self { wte, layers, lnf_g, lnf_b, tensors, total }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Sequences packed back to back, with next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    /// `starts[s]..starts[s + 1]` is sequence `s`.
    pub starts: Vec<usize>,
    /// Next-token target per position, [`IGNORE`] where there is none.
    pub targets: Vec<u32>,
}

impl Batch {
    /// Packs sequences; every position except each sequence's last predicts
    /// the following token.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut starts = vec![0];
        let mut targets = Vec::new();
        for s in seqs {
            let s = s.as_ref();
            tokens.extend_from_slice(s);
            targets.extend(s.iter().skip(1).copied());
            if !s.is_empty() {
                targets.push(IGNORE);
            }
            starts.push(tokens.len());
        }
        Self { tokens, starts, targets }
    }

    /// Right-pads every sequence to `len` with `pad`; padded positions and
    /// positions predicting a pad carry no target.
    pub fn padded<S: AsRef<[u32]>>(seqs: &[S], len: usize, pad: u32) -> Self {
        let rows: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut r = s.as_ref().to_vec();
                r.resize(len.max(r.len()), pad);
                r
            })
            .collect();
        let mut b = Self::from_sequences(&rows);
        for i in 0..b.tokens.len() {
            if b.tokens[i] == pad || b.targets[i] == pad {
                b.targets[i] = IGNORE;
            }
        }
        b
    }

    pub fn num_seqs(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn seq_len(&self, s: usize) -> usize {
        self.starts[s + 1] - self.starts[s]
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

/// Where an intervention substitutes a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The block output (after the MLP residual add).
    Residual,
    /// The MLP output before it is added to the residual stream.
    MlpOut,
}

/// Replace the activation at `site` of block `layer` (0-based), sequence
/// `seq`, position `position` with `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention<T> {
    pub site: Site,
    pub layer: usize,
    pub seq: usize,
    pub position: usize,
    pub value: Vec<T>,
}

/// Activations recorded during a forward pass.
///
/// `residual[l]` is the output of block `l`; `embed` is the block-0 input.
/// Matrices are `tokens × d_model` in packed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    pub d_model: usize,
    pub vocab_size: usize,
    pub starts: Vec<usize>,
    pub embed: Vec<T>,
    pub attn_out: Vec<Vec<T>>,
    pub mlp_out: Vec<Vec<T>>,
    pub residual: Vec<Vec<T>>,
    /// Per layer: for each sequence, `n_heads` causal `T×T` probability blocks.
    pub attention: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    fn row<'a>(&self, m: &'a [T], seq: usize, pos: usize) -> &'a [T] {
        let r = self.starts[seq] + pos;
        assert!(r < self.starts[seq + 1], "position {pos} outside sequence {seq}");
        &m[r * self.d_model..(r + 1) * self.d_model]
    }

    pub fn residual_at(&self, layer: usize, seq: usize, pos: usize) -> &[T] {
        self.row(&self.residual[layer], seq, pos)
    }

    pub fn mlp_out_at(&self, layer: usize, seq: usize, pos: usize) -> &[T] {
        self.row(&self.mlp_out[layer], seq, pos)
    }

    pub fn attn_out_at(&self, layer: usize, seq: usize, pos: usize) -> &[T] {
        self.row(&self.attn_out[layer], seq, pos)
    }

    pub fn embed_at(&self, seq: usize, pos: usize) -> &[T] {
        self.row(&self.embed, seq, pos)
    }

    pub fn logits_at(&self, seq: usize, pos: usize) -> &[T] {
        let r = self.starts[seq] + pos;
        &self.logits[r * self.vocab_size..(r + 1) * self.vocab_size]
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1_out: Vec<T>,
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2_out: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
}

struct ForwardState<T> {
    lnf_out: Vec<T>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    layers: Vec<LayerCache<T>>,
    trace: Option<ActivationTrace<T>>,
}

/// Model parameters in one flat vector, plus config and step counter.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    rope: RopeTable<T>,
    pub params: Vec<T>,
    pub step: u64,
}

/// The `f32` model used for training and analysis.
pub type ModelState = Model<f32>;

fn probs_offsets(starts: &[usize], n_heads: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(starts.len());
    let mut acc = 0;
    offs.push(0);
    for w in starts.windows(2) {
        let t = w[1] - w[0];
        acc += n_heads * t * t;
        offs.push(acc);
    }
    offs
}

impl<T: Scalar> Model<T> {
    /// Gaussian(0, init_std) matrices, zero biases, unit gains. Each tensor
    /// draws from its own seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let tree = SeedTree::new(seed);
        for (i, t) in layout.tensors.iter().enumerate() {
            let dst = &mut params[t.range()];
            match t.kind {
                TensorKind::Gain => dst.fill(T::one()),
                TensorKind::Bias => {}
                TensorKind::Weight | TensorKind::Embedding => {
                    let mut rng = tree.rng("init", &[i as u64]);
                    for v in dst.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = T::from_f64(z * config.init_std);
                    }
                }
            }
        }
        Ok(Self::from_params(config, params, 0)?)
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>, step: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ModelConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let rope = RopeTable::new(config.head_dim(), config.context_length, config.rope_base);
        Ok(Self { config, layout, rope, params, step })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// The same model in another float width.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let params = self.params.iter().map(|&p| U::from_f64(Scalar::to_f64(p))).collect();
        Model::from_params(self.config.clone(), params, self.step).expect("same config")
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let t = self.layout.tensors.iter().find(|t| t.name == name)?;
        Some(&self.params[t.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn p(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for s in 0..batch.num_seqs() {
            let len = batch.seq_len(s);
            if len > self.config.context_length {
                return Err(Error::SequenceTooLong { len, max: self.config.context_length });
            }
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange(t as usize));
        }
        Ok(())
    }

    fn check_interventions(&self, batch: &Batch, ivs: &[Intervention<T>]) -> Result<()> {
        for iv in ivs {
            let bad = |m: String| Err(Error::Intervention(m));
            if iv.layer >= self.config.n_layers {
                return bad(format!("layer {} >= {}", iv.layer, self.config.n_layers));
            }
            if iv.seq >= batch.num_seqs() {
                return bad(format!("sequence {} >= {}", iv.seq, batch.num_seqs()));
            }
            if iv.position >= batch.seq_len(iv.seq) {
                return bad(format!("position {} outside sequence of length {}", iv.position, batch.seq_len(iv.seq)));
            }
            if iv.value.len() != self.config.d_model {
                return bad(format!("value has width {}, model width {}", iv.value.len(), self.config.d_model));
            }
        }
        Ok(())
    }

    fn forward_state(
        &self,
        batch: &Batch,
        interventions: &[Intervention<T>],
        keep_cache: bool,
        capture: bool,
    ) -> Result<ForwardState<T>> {
        self.check_batch(batch)?;
        self.check_interventions(batch, interventions)?;
        let cfg = &self.config;
        let (d, dm, h, hd) = (cfg.d_model, cfg.d_mlp, cfg.n_heads, cfg.head_dim());
        let n = batch.tokens.len();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let poffs = probs_offsets(&batch.starts, h);

        let wte = self.p(self.layout.wte, cfg.vocab_size * d);
        let mut x = vec![T::zero(); n * d];
        for (r, &t) in batch.tokens.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(&wte[t as usize * d..(t as usize + 1) * d]);
        }

        let mut trace = capture.then(|| ActivationTrace {
            d_model: d,
            vocab_size: cfg.vocab_size,
            starts: batch.starts.clone(),
            embed: x.clone(),
            attn_out: Vec::new(),
            mlp_out: Vec::new(),
            residual: Vec::new(),
            attention: Vec::new(),
            logits: Vec::new(),
        });
        let mut caches = Vec::new();

        for (l, lo) in self.layout.layers.iter().enumerate() {
            let mut ln1_out = vec![T::zero(); n * d];
            let mut ln1_xhat = vec![T::zero(); n * d];
            let mut ln1_rstd = vec![T::zero(); n];
            layer_norm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), &mut ln1_out, &mut ln1_xhat, &mut ln1_rstd);

            let mut qkv = vec![T::zero(); n * 3 * d];
            gemm(n, d, 3 * d, T::one(), &ln1_out, Op::N, self.p(lo.w_qkv, d * 3 * d), Op::N, T::zero(), &mut qkv);
            add_bias(&mut qkv, self.p(lo.b_qkv, 3 * d));

            let mut probs = vec![T::zero(); *poffs.last().unwrap_or(&0)];
            let mut att = vec![T::zero(); n * d];
            for s in 0..batch.num_seqs() {
                let (s0, len) = (batch.starts[s], batch.seq_len(s));
                for i in 0..len {
                    let row = &mut qkv[(s0 + i) * 3 * d..(s0 + i + 1) * 3 * d];
                    for head in 0..h {
                        self.rope.rotate(&mut row[head * hd..(head + 1) * hd], i, false);
                        self.rope.rotate(&mut row[d + head * hd..d + (head + 1) * hd], i, false);
                    }
                }
                for head in 0..h {
                    let pbase = poffs[s] + head * len * len;
                    let (qo, ko, vo) = (s0 * 3 * d + head * hd, s0 * 3 * d + d + head * hd, s0 * 3 * d + 2 * d + head * hd);
                    gemm_strided(
                        len,
                        hd,
                        len,
                        scale,
                        &qkv,
                        Strided::rows(qo, 3 * d),
                        &qkv,
                        Strided::transposed(ko, 3 * d),
                        T::zero(),
                        &mut probs,
                        Strided::rows(pbase, len),
                    );
                    for i in 0..len {
                        let prow = &mut probs[pbase + i * len..pbase + (i + 1) * len];
                        let max = prow[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for pj in prow[..=i].iter_mut() {
                            *pj = (*pj - max).exp();
                            sum += *pj;
                        }
                        let inv = T::one() / sum;
                        prow[..=i].iter_mut().for_each(|p| *p *= inv);
                        prow[i + 1..].fill(T::zero());
                    }
                    gemm_strided(
                        len,
                        len,
                        hd,
                        T::one(),
                        &probs,
                        Strided::rows(pbase, len),
                        &qkv,
                        Strided::rows(vo, 3 * d),
                        T::zero(),
                        &mut att,
                        Strided::rows(s0 * d + head * hd, d),
                    );
                }
            }

            let mut attn_out = vec![T::zero(); n * d];
            gemm(n, d, d, T::one(), &att, Op::N, self.p(lo.w_o, d * d), Op::N, T::zero(), &mut attn_out);
            add_bias(&mut attn_out, self.p(lo.b_o, d));
            for (xv, &a) in x.iter_mut().zip(&attn_out) {
                *xv += a;
            }

            let mut ln2_out = vec![T::zero(); n * d];
            let mut ln2_xhat = vec![T::zero(); n * d];
            let mut ln2_rstd = vec![T::zero(); n];
            layer_norm(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), &mut ln2_out, &mut ln2_xhat, &mut ln2_rstd);

            let mut fc_pre = vec![T::zero(); n * dm];
            gemm(n, d, dm, T::one(), &ln2_out, Op::N, self.p(lo.w_fc, d * dm), Op::N, T::zero(), &mut fc_pre);
            add_bias(&mut fc_pre, self.p(lo.b_fc, dm));
            let fc_act: Vec<T> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mut mlp_out = vec![T::zero(); n * d];
            gemm(n, dm, d, T::one(), &fc_act, Op::N, self.p(lo.w_proj, dm * d), Op::N, T::zero(), &mut mlp_out);
            add_bias(&mut mlp_out, self.p(lo.b_proj, d));

            for iv in interventions.iter().filter(|iv| iv.layer == l && iv.site == Site::MlpOut) {
                let r = batch.starts[iv.seq] + iv.position;
                mlp_out[r * d..(r + 1) * d].copy_from_slice(&iv.value);
            }
            for (xv, &m) in x.iter_mut().zip(&mlp_out) {
                *xv += m;
            }
            for iv in interventions.iter().filter(|iv| iv.layer == l && iv.site == Site::Residual) {
                let r = batch.starts[iv.seq] + iv.position;
                x[r * d..(r + 1) * d].copy_from_slice(&iv.value);
            }

            if let Some(tr) = trace.as_mut() {
                tr.attn_out.push(attn_out);
                tr.mlp_out.push(mlp_out);
                tr.residual.push(x.clone());
                tr.attention.push(probs.clone());
            }
            if keep_cache {
                caches.push(LayerCache {
                    ln1_out,
                    ln1_xhat,
                    ln1_rstd,
                    qkv,
                    probs,
                    att,
                    ln2_out,
                    ln2_xhat,
                    ln2_rstd,
                    fc_pre,
                    fc_act,
                });
            }
        }

        let mut lnf_out = vec![T::zero(); n * d];
        let mut lnf_xhat = vec![T::zero(); n * d];
        let mut lnf_rstd = vec![T::zero(); n];
        layer_norm(
            &x,
            self.p(self.layout.lnf_g, d),
            self.p(self.layout.lnf_b, d),
            &mut lnf_out,
            &mut lnf_xhat,
            &mut lnf_rstd,
        );
        Ok(ForwardState { lnf_out, lnf_xhat, lnf_rstd, layers: caches, trace })
    }

    /// Logits for the given packed rows of the final hidden state.
    fn logits_for_rows(&self, lnf_out: &[T], rows: &[usize]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut h = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            h.extend_from_slice(&lnf_out[r * d..(r + 1) * d]);
        }
        let mut logits = vec![T::zero(); rows.len() * v];
        gemm(rows.len(), d, v, T::one(), &h, Op::N, self.p(self.layout.wte, v * d), Op::T, T::zero(), &mut logits);
        logits
    }

    /// Full forward pass over a packed batch: logits for every position
    /// (`tokens × vocab`) and, if `capture`, the activation trace.
    pub fn forward_batch(
        &self,
        batch: &Batch,
        capture: bool,
        interventions: &[Intervention<T>],
    ) -> Result<(Vec<T>, Option<ActivationTrace<T>>)> {
        let st = self.forward_state(batch, interventions, false, capture)?;
        let rows: Vec<usize> = (0..batch.tokens.len()).collect();
        let logits = self.logits_for_rows(&st.lnf_out, &rows);
        let trace = st.trace.map(|mut t| {
            t.logits = logits.clone();
            t
        });
        Ok((logits, trace))
    }

    /// Forward pass over one sequence; interventions must use `seq = 0`.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: bool,
        interventions: &[Intervention<T>],
    ) -> Result<(Vec<T>, Option<ActivationTrace<T>>)> {
        self.forward_batch(&Batch::from_sequences(&[tokens]), capture, interventions)
    }

    /// Logits at one position per sequence: `positions[s]` within sequence `s`.
    pub fn logits_at(
        &self,
        batch: &Batch,
        positions: &[usize],
        interventions: &[Intervention<T>],
    ) -> Result<Vec<Vec<T>>> {
        assert_eq!(positions.len(), batch.num_seqs());
        let st = self.forward_state(batch, interventions, false, false)?;
        let rows: Vec<usize> = positions.iter().enumerate().map(|(s, &p)| batch.starts[s] + p).collect();
        let logits = self.logits_for_rows(&st.lnf_out, &rows);
        Ok(logits.chunks(self.config.vocab_size).map(<[T]>::to_vec).collect())
    }

    /// Mean next-token cross-entropy over the batch targets and its gradient
    /// with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(T, Vec<T>)> {
        let n_targets = batch.num_targets();
        if n_targets == 0 {
            return Err(Error::EmptyBatch);
        }
        let st = self.forward_state(batch, &[], true, false)?;
        let rows: Vec<usize> = (0..batch.tokens.len()).collect();
        let mut dlogits = self.logits_for_rows(&st.lnf_out, &rows);
        let loss = crate::train::cross_entropy_backward(&mut dlogits, &batch.targets, self.config.vocab_size);
        let grads = self.backward(batch, &st, &dlogits);
        Ok((loss, grads))
    }

    /// Loss only (no gradient): used by finite-difference checks.
    pub fn loss(&self, batch: &Batch) -> Result<T> {
        if batch.num_targets() == 0 {
            return Err(Error::EmptyBatch);
        }
        let (logits, _) = self.forward_batch(batch, false, &[])?;
        Ok(T::from_f64(crate::train::lm_loss(&logits, &batch.targets, self.config.vocab_size)?))
    }

    fn backward(&self, batch: &Batch, st: &ForwardState<T>, dlogits: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let (d, dm, h, hd, v) = (cfg.d_model, cfg.d_mlp, cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
        let n = batch.tokens.len();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let poffs = probs_offsets(&batch.starts, h);
        let mut g = vec![T::zero(); self.layout.total];

        // tied LM head
        let wte_off = self.layout.wte;
        gemm(v, n, d, T::one(), dlogits, Op::T, &st.lnf_out, Op::N, T::one(), &mut g[wte_off..wte_off + v * d]);
        let mut dh = vec![T::zero(); n * d];
        gemm(n, v, d, T::one(), dlogits, Op::N, self.p(wte_off, v * d), Op::N, T::zero(), &mut dh);

        let mut dx = vec![T::zero(); n * d];
        {
            let (lo, hi) = g.split_at_mut(self.layout.lnf_b);
            let dg = &mut lo[self.layout.lnf_g..self.layout.lnf_g + d];
            let db = &mut hi[..d];
            layer_norm_backward(&dh, &st.lnf_xhat, &st.lnf_rstd, self.p(self.layout.lnf_g, d), dg, db, &mut dx);
        }

        let mut dtmp = vec![T::zero(); n * d];
        let mut dfc = vec![T::zero(); n * dm];
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut datt = vec![T::zero(); n * d];
        let mut dp = Vec::new();

        for (l, lo) in self.layout.layers.iter().enumerate().rev() {
            let c = &st.layers[l];

            // MLP: dx flows straight through the residual add.
            gemm(dm, n, d, T::one(), &c.fc_act, Op::T, &dx, Op::N, T::one(), &mut g[lo.w_proj..lo.w_proj + dm * d]);
            add_column_sums(&mut g[lo.b_proj..lo.b_proj + d], &dx);
            gemm(n, d, dm, T::one(), &dx, Op::N, self.p(lo.w_proj, dm * d), Op::T, T::zero(), &mut dfc);
            for (df, &pre) in dfc.iter_mut().zip(&c.fc_pre) {
                *df *= gelu_grad(pre);
            }
            gemm(d, n, dm, T::one(), &c.ln2_out, Op::T, &dfc, Op::N, T::one(), &mut g[lo.w_fc..lo.w_fc + d * dm]);
            add_column_sums(&mut g[lo.b_fc..lo.b_fc + dm], &dfc);
            gemm(n, dm, d, T::one(), &dfc, Op::N, self.p(lo.w_fc, d * dm), Op::T, T::zero(), &mut dtmp);
            {
                let (a, b) = g.split_at_mut(lo.ln2_b);
                layer_norm_backward(
                    &dtmp,
                    &c.ln2_xhat,
                    &c.ln2_rstd,
                    self.p(lo.ln2_g, d),
                    &mut a[lo.ln2_g..lo.ln2_g + d],
                    &mut b[..d],
                    &mut dx,
                );
            }

            // attention output projection
            gemm(d, n, d, T::one(), &c.att, Op::T, &dx, Op::N, T::one(), &mut g[lo.w_o..lo.w_o + d * d]);
            add_column_sums(&mut g[lo.b_o..lo.b_o + d], &dx);
            gemm(n, d, d, T::one(), &dx, Op::N, self.p(lo.w_o, d * d), Op::T, T::zero(), &mut datt);

            dqkv.fill(T::zero());
            for s in 0..batch.num_seqs() {
                let (s0, len) = (batch.starts[s], batch.seq_len(s));
                dp.resize(len * len, T::zero());
                for head in 0..h {
                    let pbase = poffs[s] + head * len * len;
                    let (qo, ko, vo) = (s0 * 3 * d + head * hd, s0 * 3 * d + d + head * hd, s0 * 3 * d + 2 * d + head * hd);
                    let yo = s0 * d + head * hd;
                    // dP = dY Vᵀ
                    gemm_strided(
                        len,
                        hd,
                        len,
                        T::one(),
                        &datt,
                        Strided::rows(yo, d),
                        &c.qkv,
                        Strided::transposed(vo, 3 * d),
                        T::zero(),
                        &mut dp,
                        Strided::rows(0, len),
                    );
                    // dV += Pᵀ dY
                    gemm_strided(
                        len,
                        len,
                        hd,
                        T::one(),
                        &c.probs,
                        Strided::transposed(pbase, len),
                        &datt,
                        Strided::rows(yo, d),
                        T::one(),
                        &mut dqkv,
                        Strided::rows(vo, 3 * d),
                    );
                    // dS = P ∘ (dP − rowsum(P ∘ dP)) · scale, stored over dP
                    for i in 0..len {
                        let prow = &c.probs[pbase + i * len..pbase + (i + 1) * len];
                        let drow = &mut dp[i * len..(i + 1) * len];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
                        for (g, &p) in drow.iter_mut().zip(prow) {
                            *g = p * (*g - dot) * scale;
                        }
                    }
                    // dQ += dS K ; dK += dSᵀ Q
                    gemm_strided(
                        len,
                        len,
                        hd,
                        T::one(),
                        &dp,
                        Strided::rows(0, len),
                        &c.qkv,
                        Strided::rows(ko, 3 * d),
                        T::one(),
                        &mut dqkv,
                        Strided::rows(qo, 3 * d),
                    );
                    gemm_strided(
                        len,
                        len,
                        hd,
                        T::one(),
                        &dp,
                        Strided::transposed(0, len),
                        &c.qkv,
                        Strided::rows(qo, 3 * d),
                        T::one(),
                        &mut dqkv,
                        Strided::rows(ko, 3 * d),
                    );
                }
                for i in 0..len {
                    let row = &mut dqkv[(s0 + i) * 3 * d..(s0 + i + 1) * 3 * d];
                    for head in 0..h {
                        self.rope.rotate(&mut row[head * hd..(head + 1) * hd], i, true);
                        self.rope.rotate(&mut row[d + head * hd..d + (head + 1) * hd], i, true);
                    }
                }
            }

            gemm(d, n, 3 * d, T::one(), &c.ln1_out, Op::T, &dqkv, Op::N, T::one(), &mut g[lo.w_qkv..lo.w_qkv + d * 3 * d]);
            add_column_sums(&mut g[lo.b_qkv..lo.b_qkv + 3 * d], &dqkv);
            gemm(n, 3 * d, d, T::one(), &dqkv, Op::N, self.p(lo.w_qkv, d * 3 * d), Op::T, T::zero(), &mut dtmp);
            {
                let (a, b) = g.split_at_mut(lo.ln1_b);
                layer_norm_backward(
                    &dtmp,
                    &c.ln1_xhat,
                    &c.ln1_rstd,
                    self.p(lo.ln1_g, d),
                    &mut a[lo.ln1_g..lo.ln1_g + d],
                    &mut b[..d],
                    &mut dx,
                );
            }
        }

        for (r, &t) in batch.tokens.iter().enumerate() {
            let dst = &mut g[wte_off + t as usize * d..wte_off + (t as usize + 1) * d];
            for (gv, &x) in dst.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *gv += x;
            }
        }
        g
    }
}

impl Model<f32> {
    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_checksum(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }
}

/// Rotates a list of head vectors (`positions.len()` vectors of width
/// `head_dim`, concatenated) by their positions.
pub fn apply_rope<T: Scalar>(vectors: &mut [T], head_dim: usize, positions: &[usize], base: f64) -> Result<()> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::ModelConfig(format!("RoPE needs an even head dimension, got {head_dim}")));
    }
    if vectors.len() != head_dim * positions.len() {
        return Err(Error::ModelConfig("vector count does not match positions".into()));
    }
    let max = positions.iter().copied().max().unwrap_or(0) + 1;
    let table = RopeTable::<T>::new(head_dim, max, base);
    for (v, &p) in vectors.chunks_exact_mut(head_dim).zip(positions) {
        table.rotate(v, p, false);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_constraints() {
        assert!(ModelConfig::new(2, 4, 128, 50, 16).validate().is_ok());
        assert_eq!(ModelConfig::new(2, 4, 128, 50, 16).head_dim(), 32);
        assert!(matches!(ModelConfig::new(2, 4, 130, 50, 16).validate(), Err(Error::ModelConfig(_))));
        assert!(ModelConfig::new(2, 4, 12, 50, 16).validate().is_err()); // head dim 3
        let mut c = ModelConfig::new(2, 4, 128, 50, 16);
        c.dropout = 0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::new(2, 2, 16, 30, 12);
        let a = ModelState::init(c.clone(), 9).unwrap();
        let b = ModelState::init(c.clone(), 9).unwrap();
        let other = ModelState::init(c, 10).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_ne!(a.param_checksum(), other.param_checksum());
        assert_eq!(a.tensor("h0.ln1.g").unwrap(), &[1.0; 16][..]);
        assert!(a.tensor("h1.mlp.b_fc").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = ModelState::init(ModelConfig::new(1, 2, 8, 10, 4), 0).unwrap();
        assert!(matches!(m.forward(&[1, 2, 3, 4, 5], false, &[]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.forward(&[1, 10], false, &[]), Err(Error::TokenOutOfRange(10))));
        let iv = Intervention { site: Site::Residual, layer: 1, seq: 0, position: 0, value: vec![0.0; 8] };
        assert!(matches!(m.forward(&[1, 2], false, &[iv]), Err(Error::Intervention(_))));
    }

    #[test]
    fn rope_position_zero_is_identity_and_odd_dim_rejected() {
        let mut v = vec![0.3f64, -1.2, 0.7, 2.0];
        let orig = v.clone();
        apply_rope(&mut v, 4, &[0], 10_000.0).unwrap();
        assert_eq!(v, orig);
        let mut w = vec![0.0f64; 3];
        assert!(apply_rope(&mut w, 3, &[1], 10_000.0).is_err());
    }
}
