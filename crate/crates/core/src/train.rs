//! Joint CTC + attention training, the two-stage recipe and the optimizer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{align_edit, EditCounts};
use crate::model::{Model, Modality};
use crate::numerics::{round_f32, Binder, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AudioOnly,
    Fusion,
}

impl Stage {
    pub fn modality(self) -> Modality {
        match self {
            Stage::AudioOnly => Modality::Audio,
            Stage::Fusion => Modality::AudioVisual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// CTC weight λ in `λ·CTC + (1 − λ)·attention`.
    pub lambda_ctc: f64,
    pub optimizer: OptimizerKind,
    pub peak_lr: f64,
    /// Linear warmup to `peak_lr`, then `∝ 1/√step`. Zero means constant.
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Inverted-dropout rate on embeddings and sublayer outputs.
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Validation WER is computed every this many steps (0 disables).
    pub eval_every: u64,
    /// Number of validation utterances decoded per evaluation.
    pub eval_utts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::AudioOnly,
            lambda_ctc: 0.3,
            optimizer: OptimizerKind::Adam,
            peak_lr: 2e-3,
            warmup_steps: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            dropout: 0.1,
            batch_size: 16,
            max_steps: 1000,
            seed: 1,
            freeze_encoder: false,
            eval_every: 0,
            eval_utts: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!("lambda_ctc {} outside [0, 1]", self.lambda_ctc)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} invalid", self.peak_lr)));
        }
        Ok(())
    }

    /// Learning rate for 1-based update number `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        let w = self.warmup_steps as f64;
        self.peak_lr * (step / w).min((w / step).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_total: f64,
    pub loss_ctc: f64,
    pub loss_att: f64,
    pub lr: f64,
    /// Utterances dropped from this batch as CTC-infeasible.
    #[serde(skip)]
    pub skipped: usize,
}

/// Losses for one utterance as graph handles plus their values.
pub struct UtteranceLoss {
    pub ctc: Var,
    pub att: Var,
}

/// Label-smoothed cross-entropy of decoder logits against `targets`,
/// averaged over positions.
pub fn smoothed_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let lp = g.log_softmax_rows(logits)?;
    let (rows, k) = (g.value(lp).rows(), g.value(lp).cols());
    if rows != targets.len() {
        return Err(Error::dim("smoothed_cross_entropy", g.shape(lp), &[targets.len()]));
    }
    let off = smoothing / k as f64;
    let on = 1.0 - smoothing + off;
    let weights = Tensor::from_fn(rows, k, |i, j| {
        let w = if targets[i] == j { on } else { off };
        -w / rows as f64
    });
    g.dot_const(lp, &weights)
}

/// CTC and attention losses of one utterance under `modality`.
pub fn utterance_loss(
    g: &mut Graph,
    model: &Model,
    b: &Binder<'_>,
    utt: &Utterance,
    modality: Modality,
    smoothing: f64,
) -> Result<UtteranceLoss> {
    let fwd = model.forward(g, b, utt, modality)?;
    let ctc = ctc::ctc_loss(g, fwd.ctc_log_probs, &utt.ref_tokens)?;
    let logits = model.decoder_logits(g, b, &fwd, &utt.ref_tokens)?;
    let mut targets = utt.ref_tokens.clone();
    targets.push(model.config.decoder.eos());
    let att = smoothed_cross_entropy(g, logits, &targets, smoothing)?;
    Ok(UtteranceLoss { ctc, att })
}

/// Dropout masks depend only on the seed, the update number and the
/// position in the batch, so a resumed run redraws identical masks.
fn dropout_seed(seed: u64, step: u64, k: usize) -> u64 {
    crate::data::derive_seed(seed ^ 0xD5, step, k as u64)
}

/// Optimizer moments per parameter name.
pub type Moments = BTreeMap<String, (Tensor, Tensor)>;

/// Mutable training state: model, optimizer moments, step counter and the
/// batch-sampling RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub step: u64,
    pub moments: Moments,
    pub rng: ChaCha8Rng,
    pub skipped: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage == Stage::Fusion && !model.fusion {
            return Err(Error::Config("fusion stage needs a model with fusion parameters".into()));
        }
        let moments = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), (Tensor::zeros(v.shape()), Tensor::zeros(v.shape()))))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            step: 0,
            moments,
            rng,
            skipped: 0,
        })
    }

    pub fn frozen_prefixes(&self) -> Vec<String> {
        self.model.frozen_prefixes(self.cfg.freeze_encoder)
    }

    /// Loss values and summed parameter gradients for one batch, without
    /// touching any state. Infeasible utterances are skipped.
    pub fn compute_gradients(&self, batch: &[&Utterance]) -> Result<(StepReport, BTreeMap<String, Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let enc = &self.model.config.encoder;
        let feasible: Vec<&Utterance> = batch
            .iter()
            .copied()
            .filter(|u| ctc::check_feasible(enc.output_len(u.audio.rows()), &u.ref_tokens).is_ok())
            .collect();
        let skipped = batch.len() - feasible.len();
        if skipped > 0 {
            log::warn!("skipping {skipped} CTC-infeasible utterance(s)");
        }
        let lambda = self.cfg.lambda_ctc;
        let frozen = self.frozen_prefixes();
        let binder = Binder::with_frozen(&self.model.params, &frozen);
        let modality = self.cfg.stage.modality();
        let n = feasible.len().max(1) as f64;

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut sum_ctc, mut sum_att) = (0.0, 0.0);
        for (k, utt) in feasible.iter().enumerate() {
            let mut g = Graph::new();
            g.enable_dropout(self.cfg.dropout, dropout_seed(self.cfg.seed, self.step, k))?;
            let l = utterance_loss(&mut g, &self.model, &binder, utt, modality, self.cfg.label_smoothing)?;
            sum_ctc += g.value(l.ctc).item();
            sum_att += g.value(l.att).item();
            let c = g.scale(l.ctc, lambda / n);
            let a = g.scale(l.att, (1.0 - lambda) / n);
            let total = g.add(c, a)?;
            for (name, gr) in g.backward(total)?.param_grads() {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&gr)?,
                    None => {
                        grads.insert(name, gr);
                    }
                }
            }
        }
        let (loss_ctc, loss_att) = (sum_ctc / n, sum_att / n);
        let report = StepReport {
            step: self.step + 1,
            loss_total: lambda * loss_ctc + (1.0 - lambda) * loss_att,
            loss_ctc,
            loss_att,
            lr: self.cfg.lr_at(self.step + 1),
            skipped,
        };
        Ok((report, grads))
    }

    /// One optimizer update from `batch`. Frozen parameters are not touched.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<StepReport> {
        let (report, grads) = self.compute_gradients(batch)?;
        self.skipped += report.skipped;
        self.step += 1;
        self.apply(&grads, report.lr)?;
        Ok(report)
    }

    fn apply(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let frozen = self.frozen_prefixes();
        let t = self.step as i32;
        let (b1, b2, eps) = (self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in self.model.params.iter_mut() {
            if frozen.iter().any(|f| name.starts_with(f.as_str())) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            g.ensure_finite(name)?;
            match self.cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = round_f32(*w - lr * gv);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
                    for (((w, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = round_f32(b1 * *mv + (1.0 - b1) * gv);
                        *vv = round_f32(b2 * *vv + (1.0 - b2) * gv * gv);
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *w = round_f32(*w - lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws the next batch of indices without replacement.
    pub fn sample_batch(&mut self, n: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, self.cfg.batch_size.min(n)).into_vec()
    }

    /// Runs `steps` updates, calling `on_step` after each.
    pub fn run(
        &mut self,
        train: &[Utterance],
        steps: u64,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        for _ in 0..steps {
            let idx = self.sample_batch(train.len());
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Corpus-level edit counts of the decoder on `utts`.
pub fn evaluate(model: &Model, utts: &[Utterance], modality: Modality, beam: usize) -> Result<EditCounts> {
    let eos = model.config.decoder.eos();
    let mut total = EditCounts::default();
    for u in utts {
        let hyp = model.decode(u, modality, beam, None)?;
        total = total + align_edit(&u.ref_tokens, hyp.content(eos)).0;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub stage: Stage,
    pub step: u64,
    pub valid_wer: f64,
}

pub struct RecipeOutput {
    pub stage1: Trainer,
    pub stage2: Trainer,
    pub history: Vec<HistoryEntry>,
}

fn run_stage(
    trainer: &mut Trainer,
    train: &[Utterance],
    valid: &[Utterance],
    history: &mut Vec<HistoryEntry>,
    on_step: &mut dyn FnMut(&Trainer, &StepReport) -> Result<()>,
) -> Result<()> {
    let steps = trainer.cfg.max_steps;
    let every = trainer.cfg.eval_every;
    let eval_set = &valid[..trainer.cfg.eval_utts.min(valid.len())];
    trainer.run(train, steps, |t, r| {
        on_step(t, r)?;
        if every > 0 && t.step % every == 0 && !eval_set.is_empty() {
            let counts = evaluate(&t.model, eval_set, t.cfg.stage.modality(), 1)?;
            let valid_wer = counts.wer()?;
            log::info!("stage {:?} step {} valid WER {:.4}", t.cfg.stage, t.step, valid_wer);
            history.push(HistoryEntry {
                stage: t.cfg.stage,
                step: t.step,
                valid_wer,
            });
        }
        Ok(())
    })
}

/// Stage 1: joint CTC + attention training of encoder and audio-only
/// decoder.
pub fn run_stage1(
    model: Model,
    cfg: TrainConfig,
    train: &[Utterance],
    valid: &[Utterance],
    history: &mut Vec<HistoryEntry>,
    on_step: &mut dyn FnMut(&Trainer, &StepReport) -> Result<()>,
) -> Result<Trainer> {
    if cfg.stage != Stage::AudioOnly {
        return Err(Error::Recipe("stage 1 must be audio_only".into()));
    }
    if model.fusion {
        return Err(Error::Recipe("stage 1 expects an audio-only model".into()));
    }
    let mut t = Trainer::new(model, cfg)?;
    run_stage(&mut t, train, valid, history, on_step)?;
    Ok(t)
}

/// Stage 2: start from the stage-1 model, add fresh fusion parameters,
/// freeze the speech encoder and train the decoder and visual encoder.
pub fn run_stage2(
    stage1: Option<&Model>,
    cfg: TrainConfig,
    train: &[Utterance],
    valid: &[Utterance],
    history: &mut Vec<HistoryEntry>,
    on_step: &mut dyn FnMut(&Trainer, &StepReport) -> Result<()>,
) -> Result<Trainer> {
    let stage1 = stage1.ok_or_else(|| Error::Recipe("stage 2 needs a stage-1 checkpoint".into()))?;
    if cfg.stage != Stage::Fusion || !cfg.freeze_encoder {
        return Err(Error::Recipe("stage 2 must be fusion with freeze_encoder = true".into()));
    }
    let mut model = stage1.clone();
    if !model.fusion {
        model.enable_fusion(cfg.seed);
    }
    let mut t = Trainer::new(model, cfg)?;
    run_stage(&mut t, train, valid, history, on_step)?;
    Ok(t)
}

pub fn run_recipe(
    model: Model,
    cfg_stage1: TrainConfig,
    cfg_stage2: TrainConfig,
    train: &[Utterance],
    valid: &[Utterance],
    mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
) -> Result<RecipeOutput> {
    let mut history = Vec::new();
    let stage1 = run_stage1(model, cfg_stage1, train, valid, &mut history, &mut on_step)?;
    let stage2 = run_stage2(Some(&stage1.model), cfg_stage2, train, valid, &mut history, &mut on_step)?;
    Ok(RecipeOutput {
        stage1,
        stage2,
        history,
    })
}
