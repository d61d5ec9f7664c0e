//! Losses, the two training stages, and policy rollouts.
//!
//! Stage 1 trains the action head with a gated reasoning loss on the
//! formalized labels. Stage 2 continues from the Stage-1 weights: at every
//! step the policy generates its own reasoning, keeps it as the label when
//! its action was right and the text passes the sanity filter, and adds a
//! two-choice reflection task built around that label.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cotforge::{
    build_gt_label, build_negative, candidate_label, parse_label, reflection_with_order, sample_negative_index,
    CaptionProvider, CoTLabel, LabelStyle, ParsedReasoning, ReflectionSample,
};
use crate::envworld::{Action, Episode, Observation, View, World};
use crate::error::{Error, Result};
use crate::metrics::TrajectoryRecord;
use crate::policy::model::{
    act, build_prompt, build_reflection_prompt, tape_action_scores, tape_forward, tape_lm_logits, target_positions,
    ActionDecision, PromptSequence, ViewTokens,
};
use crate::policy::{Gradients, PolicyConfig, PolicyParams, Tape, Vocabulary};
use crate::rng::{mix, rng_from, stream_rng, sub_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stage-1 reasoning-loss weight.
    pub lambda: f64,
    /// Stage-2 reasoning-loss weight.
    pub lambda1: f64,
    /// Stage-2 reflection-loss weight.
    pub lambda2: f64,
    /// Probability that a Stage-1 batch includes the reasoning loss.
    pub sft_gate_prob: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Steps between validation-loss evaluations.
    pub eval_every: usize,
    /// Training stops once validation loss improves by less than
    /// `convergence_tolerance` over this many steps.
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    /// Sanity filter on self-generated labels.
    pub max_label_tokens: usize,
    pub require_template: bool,
    /// When off, Stage 2 always trains on the original labels.
    pub self_enrich: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 0.2,
            sft_gate_prob: 0.5,
            learning_rate: 0.05,
            batch_size: 16,
            stage1_steps: 2000,
            stage2_steps: 1000,
            eval_every: 50,
            convergence_window: 200,
            convergence_tolerance: 1e-3,
            max_label_tokens: 64,
            require_template: true,
            self_enrich: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [("lambda", self.lambda), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.sft_gate_prob) {
            return bad(format!("sft_gate_prob must lie in [0, 1], got {}", self.sft_gate_prob));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_label_tokens == 0 {
            return bad("batch_size, eval_every and max_label_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn filter(&self, style: LabelStyle) -> SanityFilter {
        SanityFilter { max_tokens: self.max_label_tokens, require_template: self.require_template, style }
    }
}

/// One supervised decision: the prompt at a ground-truth step and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub episode_seed: u64,
    pub step: usize,
    pub instruction: String,
    pub prompt: PromptSequence,
    /// Index into the `N + 1` options; `N` is stop.
    pub gt_action: usize,
    pub label: CoTLabel,
    /// A label for a wrong option, absent when only one view is navigable.
    pub negative: Option<CoTLabel>,
}

fn view_tokens(vocab: &Vocabulary, obs: &Observation) -> Result<Vec<ViewTokens>> {
    obs.navigable
        .iter()
        .map(|n| ViewTokens::from_view(vocab, &obs.views[n.view_index]))
        .collect()
}

/// Teacher-forced samples for every step of `episode`, history following
/// the ground-truth path.
pub fn build_step_samples(
    world: &World,
    episode: &Episode,
    vocab: &Vocabulary,
    provider: &dyn CaptionProvider,
    style: LabelStyle,
    negative_seed: u64,
) -> Result<Vec<StepSample>> {
    let mut history = Vec::new();
    let mut out = Vec::with_capacity(episode.gt_actions.len());
    for (t, action) in episode.gt_actions.iter().enumerate() {
        let at = episode.gt_path[t];
        let obs = world.observe(at)?;
        let n = obs.n_navigable();
        let candidates = view_tokens(vocab, &obs)?;
        let prompt = build_prompt(vocab, &episode.instruction, &history, &candidates)?;
        let gt_action = action.index(n);
        let mut label = build_gt_label(world, episode, t, provider, style)?;
        label.token_len = vocab.tokenize(&label.text)?.len();
        let seed = mix(&[negative_seed, episode.seed, t as u64]);
        let negative = match *action {
            _ if n < 2 => None,
            Action::Move(i) => Some(build_negative(world, at, &obs, i, provider, style, seed)?),
            Action::Stop => {
                let j = sample_negative_index(n + 1, n, seed)?;
                Some(candidate_label(world, at, &obs, j, provider, style)?)
            }
        };
        if let Action::Move(i) = *action {
            history.push(candidates[i].clone());
        }
        out.push(StepSample {
            episode_seed: episode.seed,
            step: t,
            instruction: episode.instruction.clone(),
            prompt,
            gt_action,
            label,
            negative,
        });
    }
    Ok(out)
}

/// Label text as training targets, `<eos>` appended.
pub fn label_targets(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::InvalidLabel("empty label".into()));
    }
    let mut ids = vocab.tokenize(text)?;
    ids.push(vocab.eos());
    Ok(ids)
}

/// One element of a loss batch. Absent parts contribute nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem<'a> {
    pub prompt: &'a PromptSequence,
    pub gt_action: usize,
    pub sft_targets: Option<Vec<usize>>,
    pub reflection: Option<(PromptSequence, Vec<usize>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sft: f64,
    pub sr: f64,
}

/// Batch-mean loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub action: f64,
    pub sft: f64,
    pub sr: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(action: f64, sft: f64, sr: f64, w: LossWeights) -> LossBreakdown {
        LossBreakdown { action, sft, sr, total: action + w.sft * sft + w.sr * sr }
    }
}

fn check_action(prompt: &PromptSequence, gt_action: usize) -> Result<()> {
    let n_actions = prompt.n_candidates() + 1;
    if gt_action >= n_actions {
        return Err(Error::InvalidAction { index: gt_action, n_actions });
    }
    Ok(())
}

/// Builds the whole batch on one tape. Returns the breakdown and, when
/// `with_grad`, the gradient of `total`.
pub fn batch_loss(
    params: &PolicyParams,
    items: &[LossItem<'_>],
    weights: LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut tape = Tape::new(params);
    let (mut action_nodes, mut sft_nodes, mut sr_nodes) = (Vec::new(), Vec::new(), Vec::new());
    for item in items {
        check_action(item.prompt, item.gt_action)?;
        let target = item.sft_targets.as_deref().unwrap_or(&[]);
        let fwd = tape_forward(&mut tape, item.prompt, target)?;
        let scores = tape_action_scores(&mut tape, &fwd, item.prompt)?;
        action_nodes.push(tape.cross_entropy(scores, vec![item.gt_action]));
        if !target.is_empty() {
            let logits = tape_lm_logits(&mut tape, &fwd, target_positions(item.prompt, target));
            sft_nodes.push(tape.cross_entropy(logits, target.to_vec()));
        }
        if let Some((prompt, answer)) = &item.reflection {
            let fwd = tape_forward(&mut tape, prompt, answer)?;
            let logits = tape_lm_logits(&mut tape, &fwd, target_positions(prompt, answer));
            sr_nodes.push(tape.cross_entropy(logits, answer.clone()));
        }
    }
    let mean = |tape: &Tape<'_>, nodes: &[usize]| {
        if nodes.is_empty() {
            0.0
        } else {
            nodes.iter().map(|&n| tape.scalar(n)).sum::<f64>() / nodes.len() as f64
        }
    };
    let breakdown = LossBreakdown::assemble(
        mean(&tape, &action_nodes),
        mean(&tape, &sft_nodes),
        mean(&tape, &sr_nodes),
        weights,
    );
    if !breakdown.total.is_finite() {
        return Err(Error::NumericalFailure(format!("non-finite loss {breakdown:?}")));
    }
    if !with_grad {
        return Ok((breakdown, None));
    }
    let mut terms = Vec::new();
    for (nodes, w) in [(&action_nodes, 1.0), (&sft_nodes, weights.sft), (&sr_nodes, weights.sr)] {
        if w != 0.0 && !nodes.is_empty() {
            let each = w / nodes.len() as f64;
            terms.extend(nodes.iter().map(|&n| (n, each)));
        }
    }
    let total = tape.weighted_sum(terms);
    Ok((breakdown, Some(tape.backward(total)?)))
}

/// Mean token negative log-likelihood of `label` after `prompt`.
pub fn sft_loss(params: &PolicyParams, vocab: &Vocabulary, prompt: &PromptSequence, label: &CoTLabel) -> Result<f64> {
    let item = LossItem { prompt, gt_action: 0, sft_targets: Some(label_targets(vocab, &label.text)?), reflection: None };
    Ok(batch_loss(params, &[item], LossWeights { sft: 1.0, sr: 0.0 }, false)?.0.sft)
}

/// Cross-entropy of the action distribution at `gt_action`.
pub fn action_loss(params: &PolicyParams, prompt: &PromptSequence, gt_action: usize) -> Result<f64> {
    let item = LossItem { prompt, gt_action, sft_targets: None, reflection: None };
    Ok(batch_loss(params, &[item], LossWeights { sft: 0.0, sr: 0.0 }, false)?.0.action)
}

/// Mean token negative log-likelihood of the reflection answer.
pub fn sr_loss(
    params: &PolicyParams,
    vocab: &Vocabulary,
    context: &StepSample,
    sample: &ReflectionSample,
) -> Result<f64> {
    let reflection = reflection_item(vocab, context, sample)?;
    let item = LossItem { prompt: &context.prompt, gt_action: context.gt_action, sft_targets: None, reflection: Some(reflection) };
    Ok(batch_loss(params, &[item], LossWeights { sft: 0.0, sr: 1.0 }, false)?.0.sr)
}

pub fn reflection_item(
    vocab: &Vocabulary,
    context: &StepSample,
    sample: &ReflectionSample,
) -> Result<(PromptSequence, Vec<usize>)> {
    let prompt = build_reflection_prompt(
        vocab,
        &context.instruction,
        &context.prompt.history,
        &context.prompt.candidates,
        sample,
    )?;
    Ok((prompt, label_targets(vocab, &sample.answer)?))
}

/// `L_action + λ·g·L_SFT`. The reasoning targets are attached only when
/// `λ > 0`, so a zero weight leaves the component reported as 0.
pub fn stage1_loss(
    params: &PolicyParams,
    vocab: &Vocabulary,
    batch: &[&StepSample],
    gate: bool,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let items = batch
        .iter()
        .map(|s| {
            let sft_targets = if cfg.lambda > 0.0 { Some(label_targets(vocab, &s.label.text)?) } else { None };
            Ok(LossItem { prompt: &s.prompt, gt_action: s.gt_action, sft_targets, reflection: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let w = if gate { cfg.lambda } else { 0.0 };
    batch_loss(params, &items, LossWeights { sft: w, sr: 0.0 }, with_grad)
}

/// A Stage-2 batch element: the step, its (possibly enriched) label and
/// the reflection sample, when one could be built.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Item<'a> {
    pub sample: &'a StepSample,
    pub label: EnrichedLabel,
    pub reflection: Option<ReflectionSample>,
}

/// `L_action + λ1·L_SFT + λ2·L_sr` with the reasoning loss on the enriched
/// labels.
pub fn stage2_loss(
    params: &PolicyParams,
    vocab: &Vocabulary,
    batch: &[Stage2Item<'_>],
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let items = batch
        .iter()
        .map(|it| {
            let sft_targets = if cfg.lambda1 > 0.0 { Some(label_targets(vocab, &it.label.text)?) } else { None };
            let reflection = match &it.reflection {
                Some(r) if cfg.lambda2 > 0.0 => Some(reflection_item(vocab, it.sample, r)?),
                _ => None,
            };
            Ok(LossItem { prompt: &it.sample.prompt, gt_action: it.sample.gt_action, sft_targets, reflection })
        })
        .collect::<Result<Vec<_>>>()?;
    batch_loss(params, &items, LossWeights { sft: cfg.lambda1, sr: cfg.lambda2 }, with_grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SanityFilter {
    pub max_tokens: usize,
    pub require_template: bool,
    pub style: LabelStyle,
}

impl SanityFilter {
    pub fn passes(&self, vocab: &Vocabulary, text: &str) -> bool {
        if text.is_empty() {
            return false;
        }
        match vocab.tokenize(text) {
            Ok(ids) if ids.len() <= self.max_tokens => {}
            _ => return false,
        }
        !self.require_template || parse_label(text, self.style).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    #[serde(rename = "self")]
    SelfGenerated,
    #[serde(rename = "original")]
    Original,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedLabel {
    pub text: String,
    pub source: LabelSource,
}

impl EnrichedLabel {
    pub fn original(label: &CoTLabel) -> EnrichedLabel {
        EnrichedLabel { text: label.text.clone(), source: LabelSource::Original }
    }
}

/// Keeps the policy's own reasoning when its action was right and the text
/// passes the filter; falls back to the pre-built label otherwise.
pub fn enrich_label(
    vocab: &Vocabulary,
    reasoning: &str,
    predicted: &ActionDecision,
    gt_action: usize,
    original: &CoTLabel,
    filter: &SanityFilter,
) -> EnrichedLabel {
    if predicted.action == gt_action && filter.passes(vocab, reasoning) {
        EnrichedLabel { text: reasoning.to_string(), source: LabelSource::SelfGenerated }
    } else {
        EnrichedLabel::original(original)
    }
}

/// Reflection sample with the enriched label as the positive.
pub fn reflection_for(
    enriched: &EnrichedLabel,
    original: &CoTLabel,
    negative: &CoTLabel,
    style: LabelStyle,
    order_bit: bool,
) -> Result<ReflectionSample> {
    let positive = match enriched.source {
        LabelSource::Original => original.clone(),
        LabelSource::SelfGenerated => {
            let landmarks = match parse_label(&enriched.text, style) {
                Some(ParsedReasoning::Move { landmarks, .. }) => landmarks,
                _ => Vec::new(),
            };
            CoTLabel { text: enriched.text.clone(), landmarks, direction: original.direction, token_len: 0 }
        }
    };
    reflection_with_order(&positive, negative, order_bit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_action: f64,
    pub loss_sft: f64,
    pub loss_sr: f64,
    pub loss_total: f64,
    /// Fraction of this step's batch trained on self-generated labels.
    pub enrichment_rate: f64,
    /// Weights applied to the reasoning and reflection terms at this step.
    pub sft_weight: f64,
    pub sr_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub items: usize,
    pub enriched: usize,
    pub enrichment_rate: f64,
    /// Fraction of items whose greedy action matched ground truth.
    pub action_accuracy: f64,
    /// `false` for a trailing epoch cut short by the step budget.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub validation: Vec<ValidationPoint>,
    /// Step at which the convergence test fired, if it did.
    pub converged_at: Option<usize>,
    /// Excluded from serialized output so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl StageReport {
    fn new(stage: u8) -> StageReport {
        StageReport { stage, steps: Vec::new(), epochs: Vec::new(), validation: Vec::new(), converged_at: None, wall_seconds: 0.0 }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_action,loss_sft,loss_sr,loss_total,enrichment_rate\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.step, s.loss_action, s.loss_sft, s.loss_sr, s.loss_total, s.enrichment_rate
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Enrichment rate of the first and last complete epochs.
    pub fn enrichment_trend(&self) -> Option<(f64, f64)> {
        let complete: Vec<&EpochLog> = self.epochs.iter().filter(|e| e.complete).collect();
        Some((complete.first()?.enrichment_rate, complete.last()?.enrichment_rate))
    }
}

/// Training and validation step samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<StepSample>,
    pub val: Vec<StepSample>,
}

impl TrainData {
    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        Ok(())
    }
}

/// Action plus reasoning loss on the validation set with the reasoning
/// gate forced on; falls back to the training set when no validation data.
pub fn validation_loss(params: &PolicyParams, vocab: &Vocabulary, data: &TrainData, sft_weight: f64) -> Result<f64> {
    let set = if data.val.is_empty() { &data.train } else { &data.val };
    let mut total = 0.0;
    for chunk in set.chunks(32) {
        let items = chunk
            .iter()
            .map(|s| {
                let sft_targets = if sft_weight > 0.0 { Some(label_targets(vocab, &s.label.text)?) } else { None };
                Ok(LossItem { prompt: &s.prompt, gt_action: s.gt_action, sft_targets, reflection: None })
            })
            .collect::<Result<Vec<_>>>()?;
        let (b, _) = batch_loss(params, &items, LossWeights { sft: sft_weight, sr: 0.0 }, false)?;
        total += b.total * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Epoch-wise shuffled batches of sample indices.
struct Batcher {
    rng: crate::rng::Rng,
    n: usize,
    size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl Batcher {
    fn new(seed: u64, stage: u64, n: usize, size: usize) -> Batcher {
        Batcher { rng: stream_rng(seed, Stream::Batches, stage), n, size, order: Vec::new(), cursor: 0, epoch: 0 }
    }

    /// Next batch and the epoch it belongs to.
    fn next_batch(&mut self) -> (usize, Vec<usize>) {
        if self.cursor >= self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.size).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        (self.epoch, batch)
    }

    fn epoch_len(&self) -> usize {
        self.n.div_ceil(self.size)
    }
}

struct Convergence {
    window: usize,
    tolerance: f64,
    history: Vec<ValidationPoint>,
}

impl Convergence {
    /// Records a validation point; true once the best loss so far beats the
    /// best loss from `window` steps earlier by less than the tolerance.
    fn record(&mut self, step: usize, loss: f64) -> bool {
        self.history.push(ValidationPoint { step, loss });
        if self.window == 0 || step < self.window {
            return false;
        }
        let best = |upto: usize| {
            self.history.iter().filter(|p| p.step <= upto).map(|p| p.loss).fold(f64::INFINITY, f64::min)
        };
        let before = best(step - self.window);
        before.is_finite() && before - best(step) < self.tolerance
    }
}

fn sgd(params: &mut PolicyParams, grads: &Gradients, lr: f64, stage: u8, step: usize) -> Result<()> {
    params.sgd_step(grads, lr);
    if !params.is_finite() {
        return Err(Error::NumericalFailure(format!("stage {stage} diverged at step {step}")));
    }
    Ok(())
}

fn with_step<T>(r: Result<T>, stage: u8, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NumericalFailure(m) => Error::NumericalFailure(format!("stage {stage} step {step}: {m}")),
        other => other,
    })
}

/// One Bernoulli draw deciding whether a Stage-1 batch includes the
/// reasoning loss.
pub fn sft_gate(rng: &mut crate::rng::Rng, prob: f64) -> bool {
    rng.random::<f64>() < prob
}

/// Fresh parameters from the run's `init` stream.
pub fn init_params(policy: PolicyConfig, vocab: &Vocabulary, seed: u64) -> Result<PolicyParams> {
    PolicyParams::init(policy, vocab.len(), &mut stream_rng(seed, Stream::Init, 0))
}

/// Stage 1 from freshly initialized parameters.
pub fn train_stage1(
    cfg: &TrainConfig,
    policy: PolicyConfig,
    vocab: &Vocabulary,
    data: &TrainData,
    seed: u64,
) -> Result<(PolicyParams, StageReport)> {
    let params = init_params(policy, vocab, seed)?;
    continue_stage1(params, cfg, vocab, data, seed)
}

/// Stage 1 from the given parameters.
pub fn continue_stage1(
    mut params: PolicyParams,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    data: &TrainData,
    seed: u64,
) -> Result<(PolicyParams, StageReport)> {
    cfg.validate()?;
    data.check()?;
    let started = Instant::now();
    let mut report = StageReport::new(1);
    let mut batcher = Batcher::new(seed, 1, data.train.len(), cfg.batch_size);
    let mut gates = stream_rng(seed, Stream::Gates, 1);
    let mut conv = Convergence { window: cfg.convergence_window, tolerance: cfg.convergence_tolerance, history: Vec::new() };
    for step in 0..cfg.stage1_steps {
        let (_, idx) = batcher.next_batch();
        let batch: Vec<&StepSample> = idx.iter().map(|&i| &data.train[i]).collect();
        let gate = sft_gate(&mut gates, cfg.sft_gate_prob);
        let (loss, grads) = with_step(stage1_loss(&params, vocab, &batch, gate, cfg, true), 1, step)?;
        report.steps.push(StepLog {
            step,
            loss_action: loss.action,
            loss_sft: loss.sft,
            loss_sr: 0.0,
            loss_total: loss.total,
            enrichment_rate: 0.0,
            sft_weight: if gate { cfg.lambda } else { 0.0 },
            sr_weight: 0.0,
        });
        sgd(&mut params, &grads.expect("requested"), cfg.learning_rate, 1, step)?;
        if (step + 1) % cfg.eval_every == 0 && conv.record(step + 1, validation_loss(&params, vocab, data, cfg.lambda)?) {
            report.converged_at = Some(step + 1);
            break;
        }
    }
    report.validation = conv.history;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Stage 2, continuing from Stage-1 parameters.
pub fn train_stage2(
    mut params: PolicyParams,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    data: &TrainData,
    style: LabelStyle,
    seed: u64,
) -> Result<(PolicyParams, StageReport)> {
    cfg.validate()?;
    data.check()?;
    let started = Instant::now();
    let filter = cfg.filter(style);
    let mut report = StageReport::new(2);
    let mut batcher = Batcher::new(seed, 2, data.train.len(), cfg.batch_size);
    let epoch_len = batcher.epoch_len();
    let mut conv = Convergence { window: cfg.convergence_window, tolerance: cfg.convergence_tolerance, history: Vec::new() };
    let mut epoch = EpochLog { epoch: 0, items: 0, enriched: 0, enrichment_rate: 0.0, action_accuracy: 0.0, complete: false };
    let mut correct = 0usize;
    let mut steps_in_epoch = 0usize;
    let generate = cfg.self_enrich.then_some(cfg.max_label_tokens + 1);
    for step in 0..cfg.stage2_steps {
        let (e, idx) = batcher.next_batch();
        if e != epoch.epoch {
            report.epochs.push(close_epoch(epoch, correct, true));
            epoch = EpochLog { epoch: e, items: 0, enriched: 0, enrichment_rate: 0.0, action_accuracy: 0.0, complete: false };
            correct = 0;
            steps_in_epoch = 0;
        }
        let mut items = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let sample = &data.train[i];
            let out = with_step(act(&params, vocab, &sample.prompt, generate), 2, step)?;
            correct += usize::from(out.decision.action == sample.gt_action);
            let label = match &out.reasoning {
                Some(r) => enrich_label(vocab, &r.text, &out.decision, sample.gt_action, &sample.label, &filter),
                None => EnrichedLabel::original(&sample.label),
            };
            let reflection = match &sample.negative {
                Some(neg) if cfg.lambda2 > 0.0 => {
                    let order = rng_from(mix(&[sub_seed(seed, Stream::Negatives, 2), step as u64, k as u64]))
                        .random::<bool>();
                    match reflection_for(&label, &sample.label, neg, style, order) {
                        Ok(r) => Some(r),
                        Err(Error::DegeneratePair) => None,
                        Err(e) => return Err(e),
                    }
                }
                _ => None,
            };
            items.push(Stage2Item { sample, label, reflection });
        }
        let enriched = items.iter().filter(|it| it.label.source == LabelSource::SelfGenerated).count();
        epoch.items += items.len();
        epoch.enriched += enriched;
        steps_in_epoch += 1;
        let (loss, grads) = with_step(stage2_loss(&params, vocab, &items, cfg, true), 2, step)?;
        report.steps.push(StepLog {
            step,
            loss_action: loss.action,
            loss_sft: loss.sft,
            loss_sr: loss.sr,
            loss_total: loss.total,
            enrichment_rate: enriched as f64 / items.len() as f64,
            sft_weight: cfg.lambda1,
            sr_weight: cfg.lambda2,
        });
        sgd(&mut params, &grads.expect("requested"), cfg.learning_rate, 2, step)?;
        if (step + 1) % cfg.eval_every == 0 && conv.record(step + 1, validation_loss(&params, vocab, data, cfg.lambda1)?) {
            report.converged_at = Some(step + 1);
            break;
        }
    }
    if epoch.items > 0 {
        report.epochs.push(close_epoch(epoch, correct, steps_in_epoch == epoch_len));
    }
    report.validation = conv.history;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((params, report))
}

fn close_epoch(mut e: EpochLog, correct: usize, complete: bool) -> EpochLog {
    e.enrichment_rate = e.enriched as f64 / e.items as f64;
    e.action_accuracy = correct as f64 / e.items as f64;
    e.complete = complete;
    e
}

/// What an agent sees at one decision.
pub struct StepContext<'a> {
    pub world: &'a World,
    pub episode: &'a Episode,
    pub step: usize,
    pub at: usize,
    pub observation: &'a Observation,
    /// Views chosen at earlier steps.
    pub history: &'a [View],
}

/// Decisions allowed before the rollout is cut off.
pub fn step_cap(episode: &Episode) -> usize {
    2 * episode.hops() + 5
}

/// Rolls `decide` from the episode start until it stops or hits the cap.
/// `decide` returns an index into the `N + 1` options and optional reasoning.
pub fn rollout<F>(world: &World, episode: &Episode, mut decide: F) -> Result<TrajectoryRecord>
where
    F: FnMut(&StepContext<'_>) -> Result<(usize, Option<String>)>,
{
    let mut at = episode.start_id;
    let mut visited = vec![at];
    let mut history: Vec<View> = Vec::new();
    let mut reasoning = Vec::new();
    let mut stopped = false;
    for step in 0..step_cap(episode) {
        let obs = world.observe(at)?;
        let (choice, text) = decide(&StepContext { world, episode, step, at, observation: &obs, history: &history })?;
        if let Some(t) = text {
            reasoning.push(t);
        }
        let n = obs.n_navigable();
        if choice > n {
            return Err(Error::InvalidAction { index: choice, n_actions: n + 1 });
        }
        match Action::from_index(choice, n) {
            Action::Stop => {
                stopped = true;
                break;
            }
            Action::Move(i) => {
                let nav = obs.navigable[i];
                history.push(obs.views[nav.view_index].clone());
                at = nav.neighbor;
                visited.push(at);
            }
        }
    }
    Ok(TrajectoryRecord {
        episode_seed: episode.seed,
        start_id: episode.start_id,
        goal_id: episode.goal_id,
        visited,
        stopped,
        reasoning,
    })
}

/// Greedy policy rollout; `generate` bounds per-step reasoning tokens.
pub fn run_inference(
    params: &PolicyParams,
    vocab: &Vocabulary,
    world: &World,
    episode: &Episode,
    generate: Option<usize>,
) -> Result<TrajectoryRecord> {
    rollout(world, episode, |ctx| {
        let history = ctx
            .history
            .iter()
            .map(|v| ViewTokens::from_view(vocab, v))
            .collect::<Result<Vec<_>>>()?;
        let prompt = build_prompt(vocab, &ctx.episode.instruction, &history, &view_tokens(vocab, ctx.observation)?)?;
        let out = act(params, vocab, &prompt, generate)?;
        Ok((out.decision.action, out.reasoning.map(|g| g.text)))
    })
}
