//! Tiny decoder: token embedding, `L` blocks, final LN, untied unembedding.
//!
//! No positional encodings are used; windowed causality and content
//! matching carry all position information.

pub mod attention;
pub mod block;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result, RosaError};
use crate::norm::{layer_norm, layer_norm_backward, LnCache};
use crate::real::Real;
use crate::retrieval::RetrievalConfig;
use crate::symbolizer::{gaussian, gaussian_std};
use crate::tensor::{matmul, matmul_nt, matmul_tn};

pub use block::{BlockCache, BlockOptions, BlockParams, FrozenRosa, RosaTrace};

/// How (and whether) the ROSA injection enters each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `H' = H + Attn_W(LN(H)) + inj`.
    PostAttn,
    /// `H' = H + Attn_W(LN((1−α)⊙H + α⊙inj))`.
    PreAttn,
    /// Windowed attention only.
    WindowOnly,
    /// Full causal attention, no injection.
    Global,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::PostAttn,
        FusionMode::PreAttn,
        FusionMode::WindowOnly,
        FusionMode::Global,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::PostAttn => "post_attn",
            FusionMode::PreAttn => "pre_attn",
            FusionMode::WindowOnly => "window_only",
            FusionMode::Global => "global",
        }
    }

    pub fn uses_rosa(self) -> bool {
        matches!(self, FusionMode::PostAttn | FusionMode::PreAttn)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = RosaError;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RosaError::Config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub route_bits: u32,
    pub mode: FusionMode,
    pub seed: u64,
    /// Start with `W_q = W_k` in every adapter.
    pub shared_qk_init: bool,
    pub key_grad_scale: f64,
    pub max_match_len: Option<u32>,
    pub workers: usize,
}

impl ModelConfig {
    pub fn new(vocab: usize, dim: usize, mode: FusionMode) -> Self {
        Self {
            vocab,
            dim,
            layers: 2,
            heads: 2,
            window: 32,
            route_bits: 4,
            mode,
            seed: 0,
            shared_qk_init: true,
            key_grad_scale: 1.0,
            max_match_len: None,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.vocab == 0 {
            return config("dim, layers and vocab must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            ));
        }
        if self.window == 0 {
            return config("window must be at least 1");
        }
        if self.route_bits == 0 || self.route_bits > crate::symbolizer::MAX_ROUTE_BITS {
            return config(format!("route width {} out of range", self.route_bits));
        }
        if !self.dim.is_multiple_of(self.route_bits as usize) {
            return config(format!(
                "route width {} does not divide dim {}",
                self.route_bits, self.dim
            ));
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            max_match_len: self.max_match_len,
            workers: self.workers,
        }
    }
}

/// Model parameters; the same type holds their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// `V × C`.
    pub embed: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub ln_f: Array1<F>,
    /// `C × V`.
    pub unembed: Array2<F>,
}

impl<F: Real> Params<F> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.dim;
        let embed = gaussian_std(cfg.vocab, c, 1.0, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams::random(c, cfg.shared_qk_init, &mut rng))
            .collect();
        let unembed = gaussian(c, cfg.vocab, &mut rng);
        Ok(Self {
            embed,
            blocks,
            ln_f: Array1::from_elem(c, F::one()),
            unembed,
        })
    }

    pub fn tensors<'a>(&'a self) -> Vec<(String, ArrayViewD<'a, F>)> {
        let mut out = vec![("embed".to_string(), self.embed.view().into_dyn())];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut push =
                |name: &str, v: ArrayViewD<'a, F>| out.push((format!("blocks.{i}.{name}"), v));
            push("ln1", b.ln1.view().into_dyn());
            push("attn.w_q", b.attn.w_q.view().into_dyn());
            push("attn.w_k", b.attn.w_k.view().into_dyn());
            push("attn.w_v", b.attn.w_v.view().into_dyn());
            push("attn.w_o", b.attn.w_o.view().into_dyn());
            push("ln2", b.ln2.view().into_dyn());
            push("mlp.w1", b.w1.view().into_dyn());
            push("mlp.w2", b.w2.view().into_dyn());
            push("adapter.w_q", b.adapter.w_q.view().into_dyn());
            push("adapter.w_k", b.adapter.w_k.view().into_dyn());
            push("adapter.w_v", b.adapter.w_v.view().into_dyn());
            if let Some(s) = &b.adapter.ln_scale {
                push("adapter.ln", s.view().into_dyn());
            }
            push("inj.e0", b.inj.e0.view().into_dyn());
            push("inj.e1", b.inj.e1.view().into_dyn());
            push("inj.w_out", b.inj.w_out.view().into_dyn());
            push("inj.alpha0", b.inj.alpha0.view().into_dyn());
        }
        out.push(("ln_f".to_string(), self.ln_f.view().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view().into_dyn()));
        out
    }

    /// Same order and names as [`Params::tensors`].
    pub fn tensors_mut<'a>(&'a mut self) -> Vec<(String, ArrayViewMutD<'a, F>)> {
        let mut out = vec![("embed".to_string(), self.embed.view_mut().into_dyn())];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut push =
                |name: &str, v: ArrayViewMutD<'a, F>| out.push((format!("blocks.{i}.{name}"), v));
            push("ln1", b.ln1.view_mut().into_dyn());
            push("attn.w_q", b.attn.w_q.view_mut().into_dyn());
            push("attn.w_k", b.attn.w_k.view_mut().into_dyn());
            push("attn.w_v", b.attn.w_v.view_mut().into_dyn());
            push("attn.w_o", b.attn.w_o.view_mut().into_dyn());
            push("ln2", b.ln2.view_mut().into_dyn());
            push("mlp.w1", b.w1.view_mut().into_dyn());
            push("mlp.w2", b.w2.view_mut().into_dyn());
            push("adapter.w_q", b.adapter.w_q.view_mut().into_dyn());
            push("adapter.w_k", b.adapter.w_k.view_mut().into_dyn());
            push("adapter.w_v", b.adapter.w_v.view_mut().into_dyn());
            if let Some(s) = &mut b.adapter.ln_scale {
                push("adapter.ln", s.view_mut().into_dyn());
            }
            push("inj.e0", b.inj.e0.view_mut().into_dyn());
            push("inj.e1", b.inj.e1.view_mut().into_dyn());
            push("inj.w_out", b.inj.w_out.view_mut().into_dyn());
            push("inj.alpha0", b.inj.alpha0.view_mut().into_dyn());
        }
        out.push(("ln_f".to_string(), self.ln_f.view_mut().into_dyn()));
        out.push(("unembed".to_string(), self.unembed.view_mut().into_dyn()));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other · k`.
    pub fn add_scaled(&mut self, other: &Self, k: F) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.zip_mut_with(&b, |x, &y| *x += y * k);
        }
    }

    pub fn scale(&mut self, k: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * k);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| {
                t.iter()
                    .map(|x| x.to_f64_lossy().powi(2))
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let mut out = Params::<G> {
            embed: Array2::zeros(self.embed.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams::<G> {
                    ln1: Array1::zeros(b.ln1.raw_dim()),
                    attn: attention::AttnParams {
                        w_q: Array2::zeros(b.attn.w_q.raw_dim()),
                        w_k: Array2::zeros(b.attn.w_k.raw_dim()),
                        w_v: Array2::zeros(b.attn.w_v.raw_dim()),
                        w_o: Array2::zeros(b.attn.w_o.raw_dim()),
                    },
                    ln2: Array1::zeros(b.ln2.raw_dim()),
                    w1: Array2::zeros(b.w1.raw_dim()),
                    w2: Array2::zeros(b.w2.raw_dim()),
                    adapter: crate::symbolizer::AdapterParams {
                        w_q: Array2::zeros(b.adapter.w_q.raw_dim()),
                        w_k: Array2::zeros(b.adapter.w_k.raw_dim()),
                        w_v: Array2::zeros(b.adapter.w_v.raw_dim()),
                        ln_scale: b
                            .adapter
                            .ln_scale
                            .as_ref()
                            .map(|s| Array1::zeros(s.raw_dim())),
                    },
                    inj: crate::injection::InjectionParams {
                        e0: Array1::zeros(b.inj.e0.raw_dim()),
                        e1: Array1::zeros(b.inj.e1.raw_dim()),
                        w_out: Array2::zeros(b.inj.w_out.raw_dim()),
                        alpha0: Array1::zeros(b.inj.alpha0.raw_dim()),
                    },
                })
                .collect(),
            ln_f: Array1::zeros(self.ln_f.raw_dim()),
            unembed: Array2::zeros(self.unembed.raw_dim()),
        };
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::lit(s.to_f64_lossy()));
        }
        out
    }
}

/// Token ids `[B, T]` and per-position targets (−1 where there is none).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Array2<u32>,
    pub targets: Array2<i32>,
}

impl Batch {
    pub fn dim(&self) -> (usize, usize) {
        self.tokens.dim()
    }

    pub fn target_positions(&self) -> Vec<(usize, usize, usize)> {
        self.targets
            .indexed_iter()
            .filter(|(_, &y)| y >= 0)
            .map(|((b, t), &y)| (b, t, y as usize))
            .collect()
    }

    /// Rows `lo..hi` of the batch.
    pub fn slice(&self, lo: usize, hi: usize) -> Batch {
        Batch {
            tokens: self.tokens.slice(ndarray::s![lo..hi, ..]).to_owned(),
            targets: self.targets.slice(ndarray::s![lo..hi, ..]).to_owned(),
        }
    }
}

/// Switches for a forward/backward pass that are not part of the model.
#[derive(Debug, Clone, Default)]
pub struct PassOptions {
    /// Per-layer frozen retrieval results.
    pub frozen: Option<Vec<FrozenRosa>>,
    /// Disables the adapter surrogate gradients.
    pub no_surrogate: bool,
}

pub struct ForwardCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    final_h: Array3<F>,
    ln_f: LnCache<F>,
    /// `(b, t, target)` of every scored position.
    targets: Vec<(usize, usize, usize)>,
    /// Normalized final rows at the scored positions.
    u_f: Array2<F>,
    pub logits: Array2<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn freeze(&self) -> Vec<FrozenRosa> {
        self.blocks
            .iter()
            .filter_map(|b| b.rosa().map(RosaTrace::freeze))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub params: Params<F>,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = Params::init(&cfg)?;
        Ok(Self { cfg, params })
    }

    fn block_options<'a>(&self, layer: usize, opts: &'a PassOptions) -> BlockOptions<'a> {
        BlockOptions {
            mode: self.cfg.mode,
            heads: self.cfg.heads,
            window: self.cfg.window,
            route_bits: self.cfg.route_bits,
            retrieval: self.cfg.retrieval(),
            key_grad_scale: self.cfg.key_grad_scale,
            surrogate: !opts.no_surrogate,
            frozen: opts.frozen.as_ref().map(|f| &f[layer]),
        }
    }

    pub fn embed(&self, tokens: &Array2<u32>) -> Result<Array3<F>> {
        let (b, t) = tokens.dim();
        let c = self.cfg.dim;
        let mut h = Array3::<F>::zeros((b, t, c));
        for ((bi, ti), &tok) in tokens.indexed_iter() {
            if tok as usize >= self.cfg.vocab {
                return Err(RosaError::Input(format!(
                    "token {tok} outside vocabulary {}",
                    self.cfg.vocab
                )));
            }
            h.slice_mut(ndarray::s![bi, ti, ..])
                .assign(&self.params.embed.row(tok as usize));
        }
        Ok(h)
    }

    /// Hidden states after the last block (before the final LN).
    pub fn hidden(
        &self,
        tokens: &Array2<u32>,
        opts: &PassOptions,
    ) -> Result<(Array3<F>, Vec<BlockCache<F>>)> {
        if let Some(f) = &opts.frozen {
            if f.len() != self.cfg.layers || !self.cfg.mode.uses_rosa() {
                return config("frozen retrieval needs one entry per ROSA layer");
            }
        }
        let mut h = self.embed(tokens)?;
        let mut caches = Vec::with_capacity(self.cfg.layers);
        for (i, bp) in self.params.blocks.iter().enumerate() {
            let (next, cache) = block::block_forward(&h, bp, &self.block_options(i, opts))?;
            h = next;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    pub fn forward(&self, batch: &Batch, opts: &PassOptions) -> Result<ForwardCache<F>> {
        let (final_h, blocks) = self.hidden(&batch.tokens, opts)?;
        let targets = batch.target_positions();
        let c = self.cfg.dim;
        let mut picked = Array2::<F>::zeros((targets.len(), c));
        for (row, &(b, t, _)) in targets.iter().enumerate() {
            picked
                .row_mut(row)
                .assign(&final_h.slice(ndarray::s![b, t, ..]));
        }
        let (u_f, ln_f) = layer_norm(picked.view(), self.params.ln_f.view());
        let logits = matmul(u_f.view(), self.params.unembed.view());
        Ok(ForwardCache {
            blocks,
            final_h,
            ln_f,
            targets,
            u_f,
            logits,
        })
    }

    /// `(Σ cross-entropy, #targets, correct argmax count)`.
    pub fn evaluate(&self, batch: &Batch) -> Result<(f64, usize, usize)> {
        let fc = self.forward(batch, &PassOptions::default())?;
        let (loss, _) = cross_entropy(&fc.logits, &fc.targets);
        let correct = fc
            .targets
            .iter()
            .enumerate()
            .filter(|(row, &(_, _, y))| argmax(fc.logits.row(*row).iter().copied()) == y)
            .count();
        Ok((loss, fc.targets.len(), correct))
    }

    /// Summed loss, target count and summed gradients, so partial batches
    /// can be accumulated exactly.
    pub fn compute_grads(
        &self,
        batch: &Batch,
        opts: &PassOptions,
    ) -> Result<(f64, usize, Params<F>)> {
        let fc = self.forward(batch, opts)?;
        let (loss, d_logits) = cross_entropy(&fc.logits, &fc.targets);
        let n = fc.targets.len();
        let mut g = self.params.zeros_like();
        g.unembed = matmul_tn(fc.u_f.view(), d_logits.view());
        let d_u_f = matmul_nt(d_logits.view(), self.params.unembed.view());
        let (d_picked, g_ln_f) =
            layer_norm_backward(d_u_f.view(), self.params.ln_f.view(), &fc.ln_f);
        g.ln_f = g_ln_f;
        let mut d_h = Array3::<F>::zeros(fc.final_h.raw_dim());
        for (row, &(b, t, _)) in fc.targets.iter().enumerate() {
            let mut dst = d_h.slice_mut(ndarray::s![b, t, ..]);
            dst += &d_picked.row(row);
        }
        for i in (0..self.cfg.layers).rev() {
            let opt = self.block_options(i, opts);
            let (d_in, gb) =
                block::block_backward(&d_h, &self.params.blocks[i], &fc.blocks[i], &opt)?;
            g.blocks[i] = gb;
            d_h = d_in;
        }
        for ((bi, ti), &tok) in batch.tokens.indexed_iter() {
            let mut row = g.embed.row_mut(tok as usize);
            row += &d_h.slice(ndarray::s![bi, ti, ..]);
        }
        Ok((loss, n, g))
    }
}

impl<F: Real> Model<F> {
    /// Gradients averaged over all targets of `batch`, accumulated in
    /// chunks of `micro` rows.
    pub fn mean_grads(
        &self,
        batch: &Batch,
        micro: usize,
        opts: &PassOptions,
    ) -> Result<(f64, Params<F>)> {
        let rows = batch.dim().0;
        let micro = micro.clamp(1, rows.max(1));
        let mut total = self.params.zeros_like();
        let (mut loss, mut n) = (0.0, 0usize);
        for lo in (0..rows).step_by(micro) {
            let part = batch.slice(lo, (lo + micro).min(rows));
            let (l, k, g) = self.compute_grads(&part, opts)?;
            loss += l;
            n += k;
            total.add_scaled(&g, F::one());
        }
        if n == 0 {
            return config("batch has no target positions");
        }
        total.scale(F::one() / F::from_usize(n).unwrap());
        Ok((loss / n as f64, total))
    }

    /// One optimizer step; returns the mean loss before the update.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        opt: &mut Adam<F>,
        step: &TrainStep,
    ) -> Result<f64> {
        let opts = PassOptions {
            frozen: None,
            no_surrogate: !step.surrogate,
        };
        let (loss, mut grads) = self.mean_grads(batch, step.micro_batch, &opts)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(RosaError::Divergence {
                step: opt.steps(),
                detail: format!("loss {loss}, finite grads: {}", grads.all_finite()),
            });
        }
        if let Some(max) = step.clip_norm {
            let norm = grads.l2_norm();
            if norm > max {
                grads.scale(F::lit(max / norm));
            }
        }
        opt.update(&mut self.params, &grads, step.lr);
        Ok(loss)
    }
}

/// Per-step knobs for [`Model::train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub micro_batch: usize,
    /// Train the adapters through the retrieval surrogate.
    pub surrogate: bool,
}

pub fn argmax<F: Real>(xs: impl Iterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (i, x) in xs.enumerate() {
        if x > best_v {
            best_v = x;
            best = i;
        }
    }
    best
}

/// Summed cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy<F: Real>(
    logits: &Array2<F>,
    targets: &[(usize, usize, usize)],
) -> (f64, Array2<F>) {
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (row, &(_, _, y)) in targets.iter().enumerate() {
        let l = logits.row(row);
        let max = l.iter().copied().fold(F::neg_infinity(), F::max);
        let z: F = l.iter().map(|&x| (x - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += (log_z - l[y]).to_f64_lossy();
        let mut g = grad.row_mut(row);
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = (l[k] - log_z).exp();
        }
        g[y] -= F::one();
    }
    (loss, grad)
}

pub use optim::{Adam, LrSchedule};
