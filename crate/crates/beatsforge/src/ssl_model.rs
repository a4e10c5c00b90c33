//! ViT-style audio model: masked discrete-label pre-training and
//! classification fine-tuning.
//!
//! Pre-training masks 75% of the patch positions, encodes only the
//! unmasked patches (a large speed win since attention is quadratic),
//! scatters the encoded rows back among zero vectors, and asks a small
//! transformer label predictor for the tokenizer label at every position;
//! cross entropy is taken over the masked positions only. Fine-tuning
//! drops the predictor, encodes the full sequence, and classifies from
//! the mean-pooled projection `softmax(meanpool(W_c R))`.

use crate::error::{Error, Result};
use crate::features::{FbankMatrix, PatchSequence, N_MELS, PATCH_DIM};
use crate::io::TargetKind;
use crate::nn::{deepnorm_alpha, BlockStyle, Linear, Mode, PosEmbedding, TransformerStack};
use crate::rptok::TokenSequence;
use crate::sdtok::TeacherTargets;
use numcore::{AdamW, Binding, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_patches: usize,
    /// Label vocabulary for the pre-training predictor.
    pub k: usize,
    pub predictor_depth: usize,
    pub mask_ratio: f64,
    pub dropout: f64,
    /// Fill masked slots with a learned embedding instead of zeros.
    pub learned_mask_fill: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 12,
            hidden: 768,
            heads: 8,
            mlp_ratio: 4,
            max_patches: 512,
            k: 1024,
            predictor_depth: 2,
            mask_ratio: 0.75,
            dropout: 0.1,
            learned_mask_fill: false,
        }
    }
}

impl BackboneConfig {
    pub fn deepnorm_alpha(&self) -> f64 {
        deepnorm_alpha(self.depth)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio <= 0.0 {
            return Err(Error::Config(format!(
                "mask ratio {} must lie strictly between 0 and 1",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

// ── masking ──────────────────────────────────────────────────────────

/// Sorted masked positions for one clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub t: usize,
}

impl MaskSpec {
    pub fn unmasked(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.t - self.masked.len());
        let mut it = self.masked.iter().peekable();
        for i in 0..self.t {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

/// Uniform sample without replacement of round(ratio * t) positions,
/// guarded so at least one position is masked and one unmasked.
pub fn sample_mask(t: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if t < 2 {
        return Err(Error::Invalid(format!("cannot mask a sequence of length {t}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let m = ((ratio * t as f64 + 0.5).floor() as usize).clamp(1, t - 1);
    Ok(MaskSpec {
        masked: rng.sample_indices(t, m),
        t,
    })
}

// ── model ────────────────────────────────────────────────────────────

enum Head {
    Predictor {
        stack: TransformerStack,
        out: Linear,
        mask_fill: Option<ParamId>,
    },
    Classifier {
        wc: Linear,
        n_classes: usize,
        multi_label: bool,
    },
}

pub struct AudioSSLModel {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
    patch_proj: Linear,
    pos: PosEmbedding,
    backbone: TransformerStack,
    head: Head,
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainMetrics {
    pub loss: f64,
    pub masked_top1: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

impl AudioSSLModel {
    /// Pre-training configuration: backbone plus label predictor.
    pub fn new_pretrain(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (patch_proj, pos, backbone) = Self::build_backbone(&cfg, &mut store, &mut rng);
        let stack = TransformerStack::new(
            &mut store,
            "pred",
            cfg.predictor_depth,
            cfg.hidden,
            cfg.heads,
            cfg.mlp_ratio,
            BlockStyle::PreNorm,
            &mut rng,
        );
        let out = Linear::new(&mut store, "pred.out", cfg.hidden, cfg.k, 1.0, &mut rng);
        let mask_fill = cfg
            .learned_mask_fill
            .then(|| store.add_randn("pred.mask_fill", vec![1, cfg.hidden], 0.02, &mut rng));
        Ok(AudioSSLModel {
            cfg,
            store,
            patch_proj,
            pos,
            backbone,
            head: Head::Predictor { stack, out, mask_fill },
        })
    }

    /// Fine-tuning configuration: backbone plus zero-initialised linear
    /// classifier (uniform initial probabilities).
    pub fn new_finetune(cfg: BackboneConfig, n_classes: usize, multi_label: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!("{n_classes} classes; need at least 2")));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (patch_proj, pos, backbone) = Self::build_backbone(&cfg, &mut store, &mut rng);
        let wc = Linear::zeros(&mut store, "cls", cfg.hidden, n_classes);
        Ok(AudioSSLModel {
            cfg,
            store,
            patch_proj,
            pos,
            backbone,
            head: Head::Classifier { wc, n_classes, multi_label },
        })
    }

    fn build_backbone(
        cfg: &BackboneConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> (Linear, PosEmbedding, TransformerStack) {
        let patch_proj = Linear::new(store, "patch_proj", PATCH_DIM, cfg.hidden, 1.0, rng);
        let pos = PosEmbedding::new(store, "pos", cfg.max_patches, cfg.hidden, rng);
        let backbone = TransformerStack::new(
            store,
            "bb",
            cfg.depth,
            cfg.hidden,
            cfg.heads,
            cfg.mlp_ratio,
            BlockStyle::DeepNorm { alpha: cfg.deepnorm_alpha() },
            rng,
        );
        (patch_proj, pos, backbone)
    }

    /// Discard the label predictor; keep every backbone parameter.
    pub fn into_finetune(self, n_classes: usize, multi_label: bool) -> Result<Self> {
        let mut new = Self::new_finetune(self.cfg.clone(), n_classes, multi_label, 0)?;
        for (name, tensor) in self.store.iter() {
            if name.starts_with("pred") {
                continue;
            }
            let id = new
                .store
                .id_of(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            new.store.tensor_mut(id).data.copy_from_slice(&tensor.data);
        }
        Ok(new)
    }

    pub fn is_pretrain(&self) -> bool {
        matches!(self.head, Head::Predictor { .. })
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.head {
            Head::Classifier { n_classes, .. } => Some(*n_classes),
            _ => None,
        }
    }

    fn check_patches(&self, x: &PatchSequence) -> Result<()> {
        if x.patches.len() != x.n_patches * PATCH_DIM {
            return Err(Error::Shape {
                op: "ssl_model",
                what: format!("patch width must be {PATCH_DIM}"),
            });
        }
        if x.n_patches > self.cfg.max_patches {
            return Err(Error::Shape {
                op: "ssl_model",
                what: format!("{} patches exceed max_patches {}", x.n_patches, self.cfg.max_patches),
            });
        }
        Ok(())
    }

    /// Encode a subset of patch rows (with their position embeddings).
    fn encode_rows_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: &PatchSequence,
        positions: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let n = positions.len();
        let mut rows = vec![0.0; n * PATCH_DIM];
        for (r, &p) in positions.iter().enumerate() {
            rows[r * PATCH_DIM..(r + 1) * PATCH_DIM].copy_from_slice(x.patch(p));
        }
        let xs = tape.leaf(rows, vec![n, PATCH_DIM], false);
        let h = self.patch_proj.forward(tape, bind, xs)?;
        let pe = self.pos.rows(tape, bind, positions)?;
        let h = tape.add(h, pe)?;
        self.backbone.forward(tape, bind, h, mode)
    }

    /// Encode only the unmasked patches. Output has T - |M| rows; the
    /// content of masked patches never enters the computation.
    pub fn encode_unmasked(&self, x: &PatchSequence, mask: &MaskSpec) -> Result<Tensor> {
        self.check_patches(x)?;
        if mask.t != x.n_patches {
            return Err(Error::Shape {
                op: "encode_unmasked",
                what: format!("mask length {} vs {} patches", mask.t, x.n_patches),
            });
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let r = self.encode_rows_on(&mut tape, &bind, x, &mask.unmasked(), &mut Mode::Infer)?;
        Ok(tape.value(r))
    }

    /// Full-sequence backbone output R, one row per patch.
    pub fn backbone_rows(&self, x: &PatchSequence) -> Result<Tensor> {
        self.check_patches(x)?;
        let positions: Vec<usize> = (0..x.n_patches).collect();
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let r = self.encode_rows_on(&mut tape, &bind, x, &positions, &mut Mode::Infer)?;
        Ok(tape.value(r))
    }

    /// Scatter encoded unmasked rows among zero (or learned) fill rows,
    /// add position embeddings, and run the label predictor.
    fn predict_logits_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        r_u: Var,
        mask: &MaskSpec,
        mode: &mut Mode,
    ) -> Result<Var> {
        let Head::Predictor { stack, out, mask_fill } = &self.head else {
            return Err(Error::Mode("label prediction requires a pre-training head".into()));
        };
        let unmasked = mask.unmasked();
        let mut h = tape.scatter_rows(r_u, &unmasked, mask.t)?;
        if let Some(fill) = mask_fill {
            let rows = vec![0usize; mask.masked.len()];
            let fills = tape.gather_rows(bind.var(*fill), &rows)?;
            let scattered = tape.scatter_rows(fills, &mask.masked, mask.t)?;
            h = tape.add(h, scattered)?;
        }
        let positions: Vec<usize> = (0..mask.t).collect();
        let pe = self.pos.rows(tape, bind, &positions)?;
        let h = tape.add(h, pe)?;
        let h = stack.forward(tape, bind, h, mode)?;
        out.forward(tape, bind, h)
    }

    /// K-way logits per position from the unmasked-patch representations.
    pub fn predict_labels(&self, x: &PatchSequence, mask: &MaskSpec) -> Result<Tensor> {
        self.check_patches(x)?;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut mode = Mode::Infer;
        let r_u = self.encode_rows_on(&mut tape, &bind, x, &mask.unmasked(), &mut mode)?;
        let logits = self.predict_logits_on(&mut tape, &bind, r_u, mask, &mut mode)?;
        Ok(tape.value(logits))
    }

    /// One masked-prediction optimisation step over a batch.
    pub fn pretrain_step(
        &mut self,
        batch: &[(&PatchSequence, &TokenSequence)],
        opt: &mut AdamW,
        rng: &mut Rng,
    ) -> Result<PretrainMetrics> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut total: Option<Var> = None;
        let mut total_masked = 0usize;
        let mut correct = 0usize;

        for (x, tokens) in batch {
            self.check_patches(x)?;
            if tokens.len() != x.n_patches {
                return Err(Error::Shape {
                    op: "pretrain_step",
                    what: format!("{} labels vs {} patches", tokens.len(), x.n_patches),
                });
            }
            let mask = sample_mask(x.n_patches, self.cfg.mask_ratio, rng)?;
            let mut mode = Mode::Train {
                dropout: self.cfg.dropout,
                rng: &mut *rng,
            };
            let r_u = self.encode_rows_on(&mut tape, &bind, x, &mask.unmasked(), &mut mode)?;
            let logits = self.predict_logits_on(&mut tape, &bind, r_u, &mask, &mut mode)?;

            let masked_logits = tape.gather_rows(logits, &mask.masked)?;
            let targets: Vec<usize> = mask.masked.iter().map(|&p| tokens.labels[p] as usize).collect();
            let loss_mean = tape.softmax_cross_entropy(masked_logits, &targets)?;
            // convert the per-clip mean back to a sum so the batch loss is
            // the mean over every masked position
            let loss_sum = tape.scale(loss_mean, mask.masked.len() as f64);

            let data = tape.data(masked_logits);
            let k = self.cfg.k;
            for (row, &target) in targets.iter().enumerate() {
                let slice = &data[row * k..(row + 1) * k];
                let argmax = slice
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == target {
                    correct += 1;
                }
            }
            total_masked += mask.masked.len();
            total = Some(match total {
                None => loss_sum,
                Some(acc) => tape.add(acc, loss_sum)?,
            });
        }

        let total = total.unwrap();
        let loss = tape.scale(total, 1.0 / total_masked as f64);
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite pre-training loss {loss_value} at step {} (batch of {}, {} masked positions)",
                opt.step_count(),
                batch.len(),
                total_masked
            )));
        }
        tape.backward(loss)?;
        self.store.pull_grads(&tape, &bind)?;
        drop(tape);
        opt.step(&mut self.store)?;

        Ok(PretrainMetrics {
            loss: loss_value,
            masked_top1: correct as f64 / total_masked as f64,
        })
    }

    /// Class probabilities for a full (unmasked) sequence:
    /// softmax(meanpool(W_c R)), or element-wise sigmoid when multi-label.
    pub fn finetune_forward(&self, x: &PatchSequence) -> Result<Vec<f64>> {
        let logits = self.class_logits(x)?;
        let Head::Classifier { multi_label, .. } = &self.head else {
            unreachable!()
        };
        Ok(if *multi_label {
            logits
                .iter()
                .map(|&z| {
                    if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    }
                })
                .collect()
        } else {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
    }

    /// Pre-softmax class logits, meanpool(W_c R).
    pub fn class_logits(&self, x: &PatchSequence) -> Result<Vec<f64>> {
        let Head::Classifier { .. } = &self.head else {
            return Err(Error::Mode("classification requires a fine-tuning head".into()));
        };
        self.check_patches(x)?;
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let logits = self.class_logits_on(&mut tape, &bind, x, &mut Mode::Infer)?;
        Ok(tape.data(logits).to_vec())
    }

    fn class_logits_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: &PatchSequence,
        mode: &mut Mode,
    ) -> Result<Var> {
        let Head::Classifier { wc, .. } = &self.head else {
            return Err(Error::Mode("classification requires a fine-tuning head".into()));
        };
        let positions: Vec<usize> = (0..x.n_patches).collect();
        let r = self.encode_rows_on(tape, bind, x, &positions, mode)?;
        let per_patch = wc.forward(tape, bind, r)?;
        tape.mean_rows(per_patch).map_err(Into::into)
    }

    /// One supervised step with soft labels (one row of class weights per
    /// clip). Uses soft cross entropy in single-label mode and mean BCE in
    /// multi-label mode.
    pub fn finetune_step(
        &mut self,
        batch: &[(&PatchSequence, &[f64])],
        opt: &mut AdamW,
        rng: &mut Rng,
    ) -> Result<FinetuneMetrics> {
        let Head::Classifier { n_classes, multi_label, .. } = self.head else {
            return Err(Error::Mode("fine-tuning requires a classification head".into()));
        };
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut total: Option<Var> = None;
        let mut correct = 0usize;

        for (x, label_row) in batch {
            if label_row.len() != n_classes {
                return Err(Error::Shape {
                    op: "finetune_step",
                    what: format!("label width {} vs {} classes", label_row.len(), n_classes),
                });
            }
            let mut mode = Mode::Train {
                dropout: self.cfg.dropout,
                rng: &mut *rng,
            };
            let logits = self.class_logits_on(&mut tape, &bind, x, &mut mode)?;
            let y = tape.leaf(label_row.to_vec(), vec![1, n_classes], false);
            let loss = if multi_label {
                tape.bce_with_logits(logits, y)?
            } else {
                tape.soft_cross_entropy(logits, y)?
            };

            let data = tape.data(logits);
            let pred = data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let truth = label_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == truth {
                correct += 1;
            }
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }

        let total = total.unwrap();
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite fine-tuning loss {loss_value} at step {}",
                opt.step_count()
            )));
        }
        tape.backward(loss)?;
        self.store.pull_grads(&tape, &bind)?;
        drop(tape);
        opt.step(&mut self.store)?;

        Ok(FinetuneMetrics {
            loss: loss_value,
            accuracy: correct as f64 / batch.len() as f64,
        })
    }

    /// Teacher outputs for tokenizer distillation. `SslLastLayer` needs a
    /// pre-training model and returns per-patch last-layer outputs;
    /// `FinetunedLogits` needs a fine-tuned model and broadcasts the
    /// clip-level pre-softmax logits to every patch position.
    pub fn extract_teacher_targets(&self, x: &PatchSequence, kind: TargetKind) -> Result<TeacherTargets> {
        match (kind, &self.head) {
            (TargetKind::SslLastLayer, Head::Predictor { .. }) => {
                let r = self.backbone_rows(x)?;
                TeacherTargets::new(r.data, x.n_patches, self.cfg.hidden, kind)
            }
            (TargetKind::FinetunedLogits, Head::Classifier { n_classes, .. }) => {
                let logits = self.class_logits(x)?;
                let mut rows = Vec::with_capacity(x.n_patches * n_classes);
                for _ in 0..x.n_patches {
                    rows.extend_from_slice(&logits);
                }
                TeacherTargets::new(rows, x.n_patches, *n_classes, kind)
            }
            _ => Err(Error::Mode(format!(
                "teacher target kind {kind:?} does not match the model head"
            ))),
        }
    }
}

// ── losses (tape-free references) ────────────────────────────────────

/// Mean cross entropy over masked positions only.
pub fn mam_loss(logits: &Tensor, targets: &TokenSequence, mask: &MaskSpec) -> Result<f64> {
    if mask.masked.is_empty() {
        return Err(Error::Invalid("empty mask".into()));
    }
    if logits.rows() != targets.len() || mask.t != targets.len() {
        return Err(Error::Shape {
            op: "mam_loss",
            what: format!(
                "logits {} x {}, {} targets, mask length {}",
                logits.rows(),
                logits.cols(),
                targets.len(),
                mask.t
            ),
        });
    }
    let k = logits.cols();
    let mut loss = 0.0;
    for &p in &mask.masked {
        let row = logits.row(p);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        let target = targets.labels[p] as usize;
        if target >= k {
            return Err(Error::Invalid(format!("target {target} out of range for K={k}")));
        }
        loss += lse - row[target];
    }
    Ok(loss / mask.masked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    CeSingle,
    BceMulti,
}

/// Fine-tuning loss on clip logits: soft-label cross entropy or mean BCE.
pub fn finetune_loss(logits: &[f64], labels: &[f64], mode: LossMode) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            op: "finetune_loss",
            what: format!("{} logits vs {} labels", logits.len(), labels.len()),
        });
    }
    Ok(match mode {
        LossMode::CeSingle => {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            labels
                .iter()
                .zip(logits.iter())
                .map(|(y, z)| y * (lse - z))
                .sum()
        }
        LossMode::BceMulti => {
            let n = logits.len() as f64;
            logits
                .iter()
                .zip(labels.iter())
                .map(|(&x, &y)| x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln())
                .sum::<f64>()
                / n
        }
    })
}

// ── augmentation ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MixupBatch {
    /// Mixed patch matrices, one per input clip.
    pub inputs: Vec<Vec<f64>>,
    pub n_patches: Vec<usize>,
    /// Soft label rows, one per clip.
    pub labels: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
}

/// Convex combination of two clips and their label rows. Sequences of
/// unequal length mix over the shared prefix; the remainder keeps the
/// primary clip.
pub fn mix_pair(
    a: &[f64],
    b: &[f64],
    label_a: &[f64],
    label_b: &[f64],
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let shared = a.len().min(b.len());
    let mut mixed = a.to_vec();
    for i in 0..shared {
        mixed[i] = lambda * a[i] + (1.0 - lambda) * b[i];
    }
    let label = label_a
        .iter()
        .zip(label_b.iter())
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    (mixed, label)
}

/// Mixup over a batch: each clip blends with a shuffled partner using
/// lambda ~ Beta(alpha, alpha). A batch of one passes through unchanged.
pub fn mixup(batch: &[(&PatchSequence, &[f64])], alpha: f64, rng: &mut Rng) -> MixupBatch {
    let n = batch.len();
    let mut out = MixupBatch {
        inputs: Vec::with_capacity(n),
        n_patches: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        lambdas: Vec::with_capacity(n),
    };
    if n == 1 {
        out.inputs.push(batch[0].0.patches.clone());
        out.n_patches.push(batch[0].0.n_patches);
        out.labels.push(batch[0].1.to_vec());
        out.lambdas.push(1.0);
        return out;
    }
    let mut partners: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut partners);
    for (i, (x, y)) in batch.iter().enumerate() {
        let (px, py) = (batch[partners[i]].0, batch[partners[i]].1);
        let lambda = rng.beta(alpha, alpha);
        let (mixed, label) = mix_pair(&x.patches, &px.patches, y, py, lambda);
        out.inputs.push(mixed);
        out.n_patches.push(x.n_patches);
        out.labels.push(label);
        out.lambdas.push(lambda);
    }
    out
}

/// One contiguous time stripe (up to `time_frac` of the frames) and one
/// frequency stripe (up to `freq_frac` of the 128 bins), each drawn with
/// uniform length then uniform start, set to `fill` — the dataset mean,
/// which is 0 after normalization.
pub fn specaugment(
    f: &FbankMatrix,
    time_frac: f64,
    freq_frac: f64,
    fill: f64,
    rng: &mut Rng,
) -> Result<FbankMatrix> {
    if !(0.0..1.0).contains(&time_frac) || !(0.0..1.0).contains(&freq_frac) {
        return Err(Error::Config(format!(
            "stripe fractions ({time_frac}, {freq_frac}) must lie in [0, 1)"
        )));
    }
    let mut out = f.clone();
    let t_max = (time_frac * f.n_frames as f64).floor() as usize;
    if t_max >= 1 {
        let len = 1 + rng.below(t_max as u64) as usize;
        let start = rng.below((f.n_frames - len + 1) as u64) as usize;
        for t in start..start + len {
            for m in 0..N_MELS {
                out.frames[t * N_MELS + m] = fill;
            }
        }
    }
    let f_max = (freq_frac * N_MELS as f64).floor() as usize;
    if f_max >= 1 {
        let len = 1 + rng.below(f_max as u64) as usize;
        let start = rng.below((N_MELS - len + 1) as u64) as usize;
        for t in 0..f.n_frames {
            for m in start..start + len {
                out.frames[t * N_MELS + m] = fill;
            }
        }
    }
    Ok(out)
}
