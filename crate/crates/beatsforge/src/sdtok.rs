//! Self-distilled tokenizer: transformer encoder, l2-normalised vector
//! quantisation with an EMA codebook, and a transformer estimator trained
//! to predict a teacher model's outputs.
//!
//! Per patch, the objective to minimise is
//!
//! ```text
//!   -cos(o_t, teacher_t)
//!   + |sg(l2(e_t)) - l2(v_z)|^2     (codebook term)
//!   + |l2(e_t) - sg(l2(v_z))|^2     (commitment term)
//! ```
//!
//! With the default EMA-managed codebook the codebook term carries no
//! parameter gradient and is monitoring only; setting `codebook_grad`
//! trains the codebook by gradient instead (no EMA), which makes both
//! terms act. Quantisation is non-differentiable, so the estimator input
//! is routed through a straight-through composite `E + sg(E_q - E)`.
//! At inference the estimator is discarded: labels come from the encoder
//! and codebook alone.

use crate::error::{Error, Result};
use crate::features::{PatchSequence, PATCH_DIM};
use crate::io::TargetKind;
use crate::nn::{BlockStyle, Linear, Mode, PosEmbedding, TransformerStack};
use crate::rptok::{nearest_codes, TokenSequence};
use numcore::{AdamW, Binding, ParamId, ParamStore, Rng, Tape, Tensor, Var, NORM_EPS};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdtokConfig {
    pub k: usize,
    pub code_dim: usize,
    pub encoder_depth: usize,
    pub estimator_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_patches: usize,
    /// Width of the teacher output the estimator predicts.
    pub target_dim: usize,
    pub ema_decay: f64,
    pub ema_eps: f64,
    /// Train the codebook by gradient instead of EMA.
    pub codebook_grad: bool,
    /// Feed the estimator l2-normalised codebook rows instead of raw ones.
    pub normalized_estimator_input: bool,
    pub dropout: f64,
    /// Reseed codes unused for this many consecutive epochs (0 disables).
    pub dead_code_epochs: u32,
}

impl Default for SdtokConfig {
    fn default() -> Self {
        SdtokConfig {
            k: 1024,
            code_dim: 256,
            encoder_depth: 12,
            estimator_depth: 3,
            heads: 8,
            mlp_ratio: 4,
            max_patches: 512,
            target_dim: 768,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            codebook_grad: false,
            normalized_estimator_input: false,
            dropout: 0.1,
            dead_code_epochs: 2,
        }
    }
}

/// EMA accumulators for the codebook.
#[derive(Debug, Clone)]
pub struct CodebookEmaState {
    pub cluster_size: Vec<f64>,
    /// K x d running sums of assigned normalised encoder outputs.
    pub embed_sum: Vec<f64>,
    pub decay: f64,
    pub eps: f64,
    /// Consecutive epochs each code has gone unused.
    pub unused_epochs: Vec<u32>,
    epoch_usage: Vec<u64>,
}

impl CodebookEmaState {
    fn new(codebook: &Tensor, decay: f64, eps: f64) -> Self {
        let k = codebook.shape[0];
        CodebookEmaState {
            cluster_size: vec![1.0; k],
            embed_sum: codebook.data.clone(),
            decay,
            eps,
            unused_epochs: vec![0; k],
            epoch_usage: vec![0; k],
        }
    }

    /// One decay-and-smooth update from a batch of assignments.
    /// `norm_rows` are the l2-normalised encoder outputs, row-aligned with
    /// `labels`. Rewrites `codebook` in place.
    pub fn update(&mut self, codebook: &mut [f64], labels: &[u32], norm_rows: &[f64], d: usize) {
        let k = self.cluster_size.len();
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (t, &z) in labels.iter().enumerate() {
            let z = z as usize;
            counts[z] += 1.0;
            self.epoch_usage[z] += 1;
            for j in 0..d {
                sums[z * d + j] += norm_rows[t * d + j];
            }
        }
        let g = self.decay;
        for i in 0..k {
            self.cluster_size[i] = g * self.cluster_size[i] + (1.0 - g) * counts[i];
            for j in 0..d {
                self.embed_sum[i * d + j] =
                    g * self.embed_sum[i * d + j] + (1.0 - g) * sums[i * d + j];
            }
        }
        let total: f64 = self.cluster_size.iter().sum();
        for i in 0..k {
            let smoothed =
                (self.cluster_size[i] + self.eps) / (total + k as f64 * self.eps) * total;
            for j in 0..d {
                codebook[i * d + j] = self.embed_sum[i * d + j] / smoothed;
            }
        }
    }

    /// Close out an epoch: reseed codes unused for `threshold` consecutive
    /// epochs to rows drawn from `pool`, and reset their accumulators.
    fn end_epoch(
        &mut self,
        codebook: &mut [f64],
        d: usize,
        threshold: u32,
        pool: &[f64],
        rng: &mut Rng,
    ) -> usize {
        let k = self.cluster_size.len();
        for i in 0..k {
            if self.epoch_usage[i] == 0 {
                self.unused_epochs[i] += 1;
            } else {
                self.unused_epochs[i] = 0;
            }
            self.epoch_usage[i] = 0;
        }
        if threshold == 0 || pool.is_empty() {
            return 0;
        }
        let pool_rows = pool.len() / d;
        let mut revived = 0;
        for i in 0..k {
            if self.unused_epochs[i] >= threshold {
                let r = rng.below(pool_rows as u64) as usize;
                codebook[i * d..(i + 1) * d].copy_from_slice(&pool[r * d..(r + 1) * d]);
                self.embed_sum[i * d..(i + 1) * d].copy_from_slice(&pool[r * d..(r + 1) * d]);
                self.cluster_size[i] = 1.0;
                self.unused_epochs[i] = 0;
                revived += 1;
            }
        }
        revived
    }
}

/// Teacher outputs for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// T x target_dim row-major.
    pub rows: Vec<f64>,
    pub t: usize,
    pub dim: usize,
    pub kind: TargetKind,
}

impl TeacherTargets {
    pub fn new(rows: Vec<f64>, t: usize, dim: usize, kind: TargetKind) -> Result<Self> {
        if rows.len() != t * dim {
            return Err(Error::Shape {
                op: "TeacherTargets",
                what: format!("{} values for {t} x {dim}", rows.len()),
            });
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("teacher targets contain non-finite values".into()));
        }
        Ok(TeacherTargets { rows, t, dim, kind })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SdtokMetrics {
    /// Objective value per patch (monitoring terms included).
    pub loss: f64,
    pub mean_cos: f64,
    pub perplexity: f64,
}

pub struct SelfDistilledTokenizer {
    pub cfg: SdtokConfig,
    pub store: ParamStore,
    patch_proj: Linear,
    pos: PosEmbedding,
    encoder: TransformerStack,
    est_pos: PosEmbedding,
    estimator: TransformerStack,
    est_out: Linear,
    codebook: ParamId,
    pub ema: CodebookEmaState,
}

impl SelfDistilledTokenizer {
    pub fn new(cfg: SdtokConfig, seed: u64) -> Result<Self> {
        if cfg.k < 2 {
            return Err(Error::Config(format!("codebook size {} must be at least 2", cfg.k)));
        }
        if cfg.code_dim == 0 || cfg.code_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "code dimension {} must be a positive multiple of heads {}",
                cfg.code_dim, cfg.heads
            )));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let patch_proj = Linear::new(&mut store, "patch_proj", PATCH_DIM, cfg.code_dim, 1.0, &mut rng);
        let pos = PosEmbedding::new(&mut store, "pos", cfg.max_patches, cfg.code_dim, &mut rng);
        let encoder = TransformerStack::new(
            &mut store,
            "enc",
            cfg.encoder_depth,
            cfg.code_dim,
            cfg.heads,
            cfg.mlp_ratio,
            BlockStyle::PreNorm,
            &mut rng,
        );
        let est_pos = PosEmbedding::new(&mut store, "est_pos", cfg.max_patches, cfg.code_dim, &mut rng);
        let estimator = TransformerStack::new(
            &mut store,
            "est",
            cfg.estimator_depth,
            cfg.code_dim,
            cfg.heads,
            cfg.mlp_ratio,
            BlockStyle::PreNorm,
            &mut rng,
        );
        let est_out = Linear::new(&mut store, "est_out", cfg.code_dim, cfg.target_dim, 1.0, &mut rng);

        // i.i.d. standard normal codebook, seed-controlled
        let mut cb = Tensor::randn(vec![cfg.k, cfg.code_dim], 1.0, &mut rng);
        cb.requires_grad = cfg.codebook_grad;
        let ema = CodebookEmaState::new(&cb, cfg.ema_decay, cfg.ema_eps);
        let codebook = store.add("codebook", cb);

        Ok(SelfDistilledTokenizer {
            cfg,
            store,
            patch_proj,
            pos,
            encoder,
            est_pos,
            estimator,
            est_out,
            codebook,
            ema,
        })
    }

    pub fn codebook_tensor(&self) -> &Tensor {
        self.store.tensor(self.codebook)
    }

    fn check_patches(&self, x: &PatchSequence) -> Result<()> {
        if x.patches.len() != x.n_patches * PATCH_DIM {
            return Err(Error::Shape {
                op: "sdtok",
                what: format!("patch width must be {PATCH_DIM}"),
            });
        }
        if x.n_patches > self.cfg.max_patches {
            return Err(Error::Shape {
                op: "sdtok",
                what: format!(
                    "{} patches exceed max_patches {}",
                    x.n_patches, self.cfg.max_patches
                ),
            });
        }
        Ok(())
    }

    /// Encoder forward on the tape. Returns E as a tape var [T, code_dim].
    fn encode_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: &PatchSequence,
        mode: &mut Mode,
    ) -> Result<Var> {
        let xs = tape.leaf(x.patches.clone(), vec![x.n_patches, PATCH_DIM], false);
        let h = self.patch_proj.forward(tape, bind, xs)?;
        let positions: Vec<usize> = (0..x.n_patches).collect();
        let pe = self.pos.rows(tape, bind, &positions)?;
        let h = tape.add(h, pe)?;
        self.encoder.forward(tape, bind, h, mode)
    }

    /// Deterministic encoded vector sequence E for one clip.
    pub fn encode(&self, x: &PatchSequence) -> Result<Tensor> {
        self.check_patches(x)?;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let e = self.encode_on(&mut tape, &bind, x, &mut Mode::Infer)?;
        Ok(tape.value(e))
    }

    /// Inference tokenization: encoder plus codebook only; the estimator
    /// plays no part.
    pub fn tokenize(&self, x: &PatchSequence) -> Result<TokenSequence> {
        self.tokenize_with_id(x, "")
    }

    pub fn tokenize_with_id(&self, x: &PatchSequence, clip_id: &str) -> Result<TokenSequence> {
        let e = self.encode(x)?;
        let (labels, _) = quantize(self.codebook_tensor(), &e)?;
        Ok(TokenSequence {
            labels,
            k: self.cfg.k,
            clip_id: clip_id.to_string(),
        })
    }

    /// One optimisation step over a batch of clips with precomputed
    /// teacher targets. Runs encode -> quantize -> straight-through ->
    /// estimate -> loss -> backward -> AdamW, then the EMA codebook
    /// update (unless the codebook is gradient-trained).
    pub fn train_step(
        &mut self,
        batch: &[(&PatchSequence, &TeacherTargets)],
        opt: &mut AdamW,
        rng: &mut Rng,
    ) -> Result<SdtokMetrics> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let d = self.cfg.code_dim;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut total_loss: Option<Var> = None;
        let mut total_patches = 0usize;
        let mut cos_sum = 0.0;
        let mut ema_labels: Vec<u32> = Vec::new();
        let mut ema_rows: Vec<f64> = Vec::new();

        for (x, targets) in batch {
            self.check_patches(x)?;
            if targets.dim != self.cfg.target_dim {
                return Err(Error::Shape {
                    op: "sdtok.train_step",
                    what: format!(
                        "teacher width {} does not match target_dim {}",
                        targets.dim, self.cfg.target_dim
                    ),
                });
            }
            if targets.t != x.n_patches {
                return Err(Error::Shape {
                    op: "sdtok.train_step",
                    what: format!(
                        "teacher rows {} do not match {} patches",
                        targets.t, x.n_patches
                    ),
                });
            }
            let t = x.n_patches;
            let mut mode = Mode::Train {
                dropout: self.cfg.dropout,
                rng: &mut *rng,
            };
            let e = self.encode_on(&mut tape, &bind, x, &mut mode)?;

            // quantisation happens on values, outside the graph
            let e_val = tape.value(e);
            let (labels, _) = quantize(self.codebook_tensor(), &e_val)?;
            let idx: Vec<usize> = labels.iter().map(|&z| z as usize).collect();

            // accumulate normalised rows for the EMA update
            for (row_i, &z) in labels.iter().enumerate() {
                let row = &e_val.data[row_i * d..(row_i + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                ema_labels.push(z);
                if norm < NORM_EPS {
                    ema_rows.extend_from_slice(row);
                } else {
                    ema_rows.extend(row.iter().map(|v| v / norm));
                }
            }

            let (loss_clip, cos_vec) =
                self.distill_loss_on(&mut tape, &bind, e, &idx, targets, &mut mode)?;
            cos_sum += tape.data(cos_vec).iter().sum::<f64>();
            total_patches += t;
            total_loss = Some(match total_loss {
                None => loss_clip,
                Some(acc) => tape.add(acc, loss_clip)?,
            });
        }

        let total = total_loss.unwrap();
        let mean_loss = tape.scale(total, 1.0 / total_patches as f64);
        let loss_value = tape.scalar_value(mean_loss);
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite tokenizer loss {loss_value} at step {} (batch of {}, {} patches)",
                opt.step_count(),
                batch.len(),
                total_patches
            )));
        }
        tape.backward(mean_loss)?;
        self.store.pull_grads(&tape, &bind)?;
        drop(tape);
        opt.step(&mut self.store)?;

        if !self.cfg.codebook_grad {
            let cb = self.store.tensor_mut(self.codebook);
            self.ema.update(&mut cb.data, &ema_labels, &ema_rows, d);
        }

        let perplexity = label_perplexity(&ema_labels, self.cfg.k);
        Ok(SdtokMetrics {
            loss: loss_value,
            mean_cos: cos_sum / total_patches as f64,
            perplexity,
        })
    }

    /// Build the per-clip objective on the tape. Returns the summed loss
    /// and the per-patch cosine vector (for metrics).
    fn distill_loss_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        e: Var,
        labels: &[usize],
        targets: &TeacherTargets,
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let t = labels.len();
        let v_sel = tape.gather_rows(bind.var(self.codebook), labels)?;

        // straight-through: forward takes the quantised rows, backward
        // copies gradients to the encoder output unchanged
        let est_in = if self.cfg.normalized_estimator_input {
            let en = tape.l2_normalize_rows(e, NORM_EPS)?;
            let vn = tape.l2_normalize_rows(v_sel, NORM_EPS)?;
            let diff = tape.sub(vn, en)?;
            let frozen = tape.stop_gradient(diff);
            tape.add(en, frozen)?
        } else {
            let diff = tape.sub(v_sel, e)?;
            let frozen = tape.stop_gradient(diff);
            tape.add(e, frozen)?
        };

        let positions: Vec<usize> = (0..t).collect();
        let pe = self.est_pos.rows(tape, bind, &positions)?;
        let h = tape.add(est_in, pe)?;
        let h = self.estimator.forward(tape, bind, h, mode)?;
        let o = self.est_out.forward(tape, bind, h)?;

        let teacher = tape.leaf(targets.rows.clone(), vec![t, targets.dim], false);
        let cos = tape.cosine_rows(o, teacher, NORM_EPS)?;
        let cos_sum = tape.sum_all(cos);
        let neg_cos = tape.scale(cos_sum, -1.0);

        let en = tape.l2_normalize_rows(e, NORM_EPS)?;
        let vn = tape.l2_normalize_rows(v_sel, NORM_EPS)?;
        let en_sg = tape.stop_gradient(en);
        let vn_sg = tape.stop_gradient(vn);
        // codebook term: gradient reaches only the codebook (if trainable)
        let d1 = tape.sub(en_sg, vn)?;
        let d1sq = tape.mul(d1, d1)?;
        let codebook_term = tape.sum_all(d1sq);
        // commitment term: gradient reaches only the encoder
        let d2 = tape.sub(en, vn_sg)?;
        let d2sq = tape.mul(d2, d2)?;
        let commit_term = tape.sum_all(d2sq);

        let partial = tape.add(neg_cos, codebook_term)?;
        let loss = tape.add(partial, commit_term)?;
        Ok((loss, cos))
    }

    /// Direct (tape-free) evaluation of the distillation objective for a
    /// single clip; the reference for the graph-built loss.
    pub fn distill_loss_value(
        o: &[f64],
        teacher: &[f64],
        e: &[f64],
        v_sel: &[f64],
        t: usize,
        o_dim: usize,
        code_dim: usize,
    ) -> f64 {
        let mut loss = 0.0;
        for i in 0..t {
            let or = &o[i * o_dim..(i + 1) * o_dim];
            let tr = &teacher[i * o_dim..(i + 1) * o_dim];
            let no = or.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nt = tr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if no < NORM_EPS || nt < NORM_EPS {
                0.0
            } else {
                or.iter().zip(tr.iter()).map(|(a, b)| a * b).sum::<f64>() / (no * nt)
            };
            let l2 = |row: &[f64]| -> Vec<f64> {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n < NORM_EPS {
                    row.to_vec()
                } else {
                    row.iter().map(|x| x / n).collect()
                }
            };
            let en = l2(&e[i * code_dim..(i + 1) * code_dim]);
            let vn = l2(&v_sel[i * code_dim..(i + 1) * code_dim]);
            let dist: f64 = en.iter().zip(vn.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            loss += -cos + 2.0 * dist;
        }
        loss
    }

    /// Epoch boundary: dead-code bookkeeping and reseeding from recent
    /// encoder outputs.
    pub fn end_epoch(&mut self, recent_norm_rows: &[f64], rng: &mut Rng) -> usize {
        let d = self.cfg.code_dim;
        let threshold = self.cfg.dead_code_epochs;
        if self.cfg.codebook_grad {
            return 0;
        }
        let cb = self.store.tensor_mut(self.codebook);
        self.ema
            .end_epoch(&mut cb.data, d, threshold, recent_norm_rows, rng)
    }
}

/// Nearest codebook row under l2 normalisation of both sides. Returns the
/// labels and the raw selected codebook rows E_q (normalisation applies to
/// the search, not the output).
pub fn quantize(codebook: &Tensor, e: &Tensor) -> Result<(Vec<u32>, Tensor)> {
    let k = codebook.shape[0];
    let d = codebook.shape[1];
    if e.cols() != d {
        return Err(Error::Shape {
            op: "sdtok.quantize",
            what: format!("encoder width {} vs codebook width {d}", e.cols()),
        });
    }
    let t = e.rows();
    let normalise = |rows: &[f64], n: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &rows[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dst = &mut out[i * d..(i + 1) * d];
            if norm < NORM_EPS {
                dst.copy_from_slice(row);
            } else {
                for (o, &x) in dst.iter_mut().zip(row.iter()) {
                    *o = x / norm;
                }
            }
        }
        out
    };
    let en = normalise(&e.data, t);
    let vn = normalise(&codebook.data, k);
    let labels = nearest_codes(&en, &vn, t, k, d);

    let mut eq = vec![0.0; t * d];
    for (i, &z) in labels.iter().enumerate() {
        eq[i * d..(i + 1) * d].copy_from_slice(&codebook.data[z as usize * d..(z as usize + 1) * d]);
    }
    Ok((labels, Tensor::new(vec![t, d], eq)?))
}

/// Fraction of codes used at least once and exp-entropy of the empirical
/// code distribution over a token corpus.
pub fn codebook_utilization(seqs: &[TokenSequence]) -> Result<(f64, f64)> {
    if seqs.is_empty() || seqs.iter().all(|s| s.labels.is_empty()) {
        return Err(Error::Invalid("empty token corpus".into()));
    }
    let k = seqs[0].k;
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for s in seqs {
        if s.k != k {
            return Err(Error::Invalid("mixed codebook sizes in corpus".into()));
        }
        for &l in &s.labels {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    let used = counts.iter().filter(|&&c| c > 0).count() as f64 / k as f64;
    let mut entropy = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    Ok((used, entropy.exp()))
}

fn label_perplexity(labels: &[u32], k: usize) -> f64 {
    let mut counts = vec![0u64; k];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let total = labels.len() as f64;
    let mut entropy = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}
