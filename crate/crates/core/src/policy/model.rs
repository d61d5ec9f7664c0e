//! Scene encoder, prompt assembly, the causal core, and the two heads.
//!
//! The prompt ends with the output hint, so the `<cls>` readout sits
//! *before* every reasoning token. Reasoning therefore never feeds the
//! action causally; it shapes the shared weights through its own loss.
//!
//! Two forward paths share the same math: a [`Tape`] path used for
//! training, and a plain path with per-layer key/value caches used for
//! action selection and greedy decoding.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::params::{head_ids, layer_ids, PolicyParams, FEAT_PROJ, POSE_DIMS, POS_EMB, TOK_EMB};
use super::tape::{causal_softmax, gelu, layer_norm, softmax_rows, NodeId, Tape};
use super::vocab::Vocabulary;
use crate::cotforge::ReflectionSample;
use crate::envworld::View;
use crate::error::{Error, Result};

pub const OUTPUT_HINT: &str = "-Action Decision: <cls>. -Navigational Reasoning: ";

pub type ViewFeature = Array1<f64>;

/// A view reduced to what the scene encoder reads: the token ids of each
/// landmark tag and the pose `(sin ψ, cos ψ, sin θ, cos θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTokens {
    pub tags: Vec<Vec<usize>>,
    pub pose: [f64; POSE_DIMS],
}

impl ViewTokens {
    pub fn from_view(vocab: &Vocabulary, view: &View) -> Result<ViewTokens> {
        if view.landmark_tags.is_empty() {
            return Err(Error::InvalidInput("view has no landmark tags".into()));
        }
        let tags = view
            .landmark_tags
            .iter()
            .map(|t| vocab.tokenize(&format!(" {t}")))
            .collect::<Result<Vec<_>>>()?;
        let (sh, ch) = view.heading.sin_cos();
        let (se, ce) = view.elevation.sin_cos();
        Ok(ViewTokens { tags, pose: [sh, ch, se, ce] })
    }

    /// Embedding-table weights whose sum is the mean tag embedding.
    fn weights(&self) -> Vec<(usize, f64)> {
        let per_tag = 1.0 / self.tags.len() as f64;
        self.tags
            .iter()
            .flat_map(|tag| {
                let w = per_tag / tag.len() as f64;
                tag.iter().map(move |&id| (id, w))
            })
            .collect()
    }
}

fn pose_matrix(views: &[&ViewTokens]) -> Array2<f64> {
    Array2::from_shape_fn((views.len(), POSE_DIMS), |(r, c)| views[r].pose[c])
}

fn encode_views_plain(params: &PolicyParams, views: &[&ViewTokens]) -> Array2<f64> {
    let emb = &params.tensors[TOK_EMB];
    let mut means = Array2::zeros((views.len(), emb.ncols()));
    for (mut row, v) in means.rows_mut().into_iter().zip(views) {
        for (id, w) in v.weights() {
            row.scaled_add(w, &emb.row(id));
        }
    }
    let input = concatenate(Axis(1), &[means.view(), pose_matrix(views).view()]).expect("row counts agree");
    input.dot(&params.tensors[FEAT_PROJ])
}

/// Mean tag embedding and pose, linearly projected to `d_model`.
pub fn encode_view(params: &PolicyParams, view: &ViewTokens) -> ViewFeature {
    encode_views_plain(params, &[view]).row(0).to_owned()
}

fn tape_view_features(tape: &mut Tape<'_>, views: &[&ViewTokens]) -> NodeId {
    let emb = tape.param(TOK_EMB);
    let means = tape.weighted_rows(emb, views.iter().map(|v| v.weights()).collect());
    let pose = tape.constant(pose_matrix(views));
    let input = tape.concat_cols(means, pose);
    let proj = tape.param(FEAT_PROJ);
    tape.matmul(input, proj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub ids: Vec<usize>,
    pub history: Vec<ViewTokens>,
    pub candidates: Vec<ViewTokens>,
    pub hist_positions: Vec<usize>,
    pub cand_positions: Vec<usize>,
    /// Present for navigation prompts, absent for reflection prompts.
    pub cls_pos: Option<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    fn slot_views(&self) -> Vec<&ViewTokens> {
        self.history.iter().chain(&self.candidates).collect()
    }

    fn slot_positions(&self) -> Vec<usize> {
        self.hist_positions.iter().chain(&self.cand_positions).copied().collect()
    }
}

/// Instruction, history slots and numbered candidate slots, stop last.
pub fn context_text(instruction: &str, n_history: usize, n_candidates: usize) -> String {
    let mut text = String::from(instruction);
    text.push_str(" History:");
    for _ in 0..n_history {
        text.push_str(" <hist>");
    }
    text.push_str(" Candidates:");
    for i in 1..=n_candidates {
        text.push_str(&format!(" ({i}) <cand>"));
    }
    text.push_str(&format!(" ({}) stop ", n_candidates + 1));
    text
}

pub fn prompt_text(instruction: &str, n_history: usize, n_candidates: usize) -> String {
    format!("{}{OUTPUT_HINT}", context_text(instruction, n_history, n_candidates))
}

fn assemble(vocab: &Vocabulary, text: &str, history: &[ViewTokens], candidates: &[ViewTokens]) -> Result<PromptSequence> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("prompt needs at least one candidate".into()));
    }
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.tokenize(text)?);
    let find = |tok: usize| -> Vec<usize> {
        ids.iter().enumerate().filter(|&(_, &t)| t == tok).map(|(i, _)| i).collect()
    };
    let hist_positions = find(vocab.hist());
    let cand_positions = find(vocab.cand());
    let cls = find(vocab.cls());
    if hist_positions.len() != history.len() || cand_positions.len() != candidates.len() || cls.len() > 1 {
        return Err(Error::InvalidInput("instruction must not contain special tokens".into()));
    }
    Ok(PromptSequence {
        ids,
        history: history.to_vec(),
        candidates: candidates.to_vec(),
        hist_positions,
        cand_positions,
        cls_pos: cls.first().copied(),
    })
}

pub fn build_prompt(
    vocab: &Vocabulary,
    instruction: &str,
    history: &[ViewTokens],
    candidates: &[ViewTokens],
) -> Result<PromptSequence> {
    let p = assemble(vocab, &prompt_text(instruction, history.len(), candidates.len()), history, candidates)?;
    if p.cls_pos.is_none() {
        return Err(Error::InvalidInput("navigation prompt lost its <cls> token".into()));
    }
    Ok(p)
}

/// Navigation context followed by the two-choice reflection prompt.
pub fn build_reflection_prompt(
    vocab: &Vocabulary,
    instruction: &str,
    history: &[ViewTokens],
    candidates: &[ViewTokens],
    sample: &ReflectionSample,
) -> Result<PromptSequence> {
    let text = format!("{}{}", context_text(instruction, history.len(), candidates.len()), sample.prompt);
    assemble(vocab, &text, history, candidates)
}

/// Ids fed to the core: the prompt, then every target token but the last.
fn input_ids(prompt: &PromptSequence, target: &[usize]) -> Vec<usize> {
    let mut ids = prompt.ids.clone();
    ids.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    ids
}

fn check_len(params: &PolicyParams, len: usize) -> Result<()> {
    if len > params.config.max_len {
        return Err(Error::SequenceTooLong { len, max: params.config.max_len });
    }
    Ok(())
}

/// Rows of the prompt-plus-target sequence whose logits predict `target`.
pub fn target_positions(prompt: &PromptSequence, target: &[usize]) -> Vec<usize> {
    (0..target.len()).map(|i| prompt.len() - 1 + i).collect()
}

pub struct TapeForward {
    /// Final-norm hidden states, one row per input position.
    pub hidden: NodeId,
    /// Candidate view features, one row per candidate.
    pub candidates: NodeId,
}

pub fn tape_forward(tape: &mut Tape<'_>, prompt: &PromptSequence, target: &[usize]) -> Result<TapeForward> {
    let params = tape.params();
    let ids = input_ids(prompt, target);
    check_len(params, ids.len())?;
    let cfg = params.config;
    let emb = tape.param(TOK_EMB);
    let tokens = tape.gather_rows(emb, &ids);
    let feats = tape_view_features(tape, &prompt.slot_views());
    let x = tape.scatter_rows(tokens, feats, prompt.slot_positions());
    let pos_table = tape.param(POS_EMB);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.gather_rows(pos_table, &positions);
    let mut x = tape.add(x, pos);
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = layer_ids(l);
        let (g1, b1) = (tape.param(p.ln1_g), tape.param(p.ln1_b));
        let h = tape.layer_norm(x, g1, b1);
        let (wq, wk, wv, wo) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo));
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, scale);
        let attn = tape.causal_softmax(scores);
        let mixed = tape.matmul(attn, v);
        let out = tape.matmul(mixed, wo);
        x = tape.add(x, out);
        let (g2, b2) = (tape.param(p.ln2_g), tape.param(p.ln2_b));
        let h = tape.layer_norm(x, g2, b2);
        let (w1, bias1, w2, bias2) = (tape.param(p.w1), tape.param(p.b1), tape.param(p.w2), tape.param(p.b2));
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, bias1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, bias2);
        x = tape.add(x, f);
    }
    let head = head_ids(cfg.n_layers);
    let (gf, bf) = (tape.param(head.lnf_g), tape.param(head.lnf_b));
    let hidden = tape.layer_norm(x, gf, bf);
    let n_hist = prompt.history.len();
    let candidates = tape.select_rows(feats, (n_hist..n_hist + prompt.candidates.len()).collect());
    Ok(TapeForward { hidden, candidates })
}

/// Action scores `f_clsᵀ W_a c_i` for every candidate and the stop embedding.
pub fn tape_action_scores(tape: &mut Tape<'_>, fwd: &TapeForward, prompt: &PromptSequence) -> Result<NodeId> {
    let cls = prompt.cls_pos.ok_or_else(|| Error::InvalidInput("prompt has no <cls> token".into()))?;
    let head = head_ids(tape.params().config.n_layers);
    let f_cls = tape.select_rows(fwd.hidden, vec![cls]);
    let wa = tape.param(head.action_w);
    let projected = tape.matmul(f_cls, wa);
    let stop = tape.param(head.stop_emb);
    let options = tape.vstack(fwd.candidates, stop);
    Ok(tape.matmul_t(projected, options))
}

pub fn tape_lm_logits(tape: &mut Tape<'_>, fwd: &TapeForward, rows: Vec<usize>) -> NodeId {
    let head = head_ids(tape.params().config.n_layers);
    let h = tape.select_rows(fwd.hidden, rows);
    let lm = tape.param(head.lm_head);
    tape.matmul(h, lm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDecision {
    pub scores: Vec<f64>,
    /// Softmax over `N + 1` options, stop last.
    pub probs: Vec<f64>,
    pub action: usize,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_action(params: &PolicyParams, f_cls: &Array1<f64>, candidates: &Array2<f64>) -> ActionDecision {
    let head = head_ids(params.config.n_layers);
    let projected = f_cls.dot(&params.tensors[head.action_w]);
    let mut scores: Vec<f64> = candidates.rows().into_iter().map(|c| projected.dot(&c)).collect();
    scores.push(projected.dot(&params.tensors[head.stop_emb].row(0)));
    decision_from_scores(scores)
}

pub fn decision_from_scores(scores: Vec<f64>) -> ActionDecision {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exp.iter().sum();
    let probs = exp.into_iter().map(|e| e / total).collect();
    let action = argmax(&scores);
    ActionDecision { scores, probs, action }
}

struct LayerCache {
    k: Array2<f64>,
    v: Array2<f64>,
}

/// Plain forward pass with key/value caches for incremental decoding.
pub struct Decoder<'p> {
    params: &'p PolicyParams,
    caches: Vec<LayerCache>,
    len: usize,
}

fn ffn(params: &PolicyParams, layer: usize, h: &Array2<f64>) -> Array2<f64> {
    let p = layer_ids(layer);
    let t = &params.tensors;
    let f = (h.dot(&t[p.w1]) + &t[p.b1]).mapv(gelu);
    f.dot(&t[p.w2]) + &t[p.b2]
}

impl<'p> Decoder<'p> {
    /// Runs the whole input `x0` (embeddings plus positions) and returns the
    /// decoder with its caches filled and the final-norm hidden states.
    fn prefill(params: &'p PolicyParams, x0: Array2<f64>) -> (Decoder<'p>, Array2<f64>) {
        let cfg = params.config;
        let t = &params.tensors;
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        let mut x = x0;
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = layer_ids(l);
            let (h, _, _) = layer_norm(&x, &t[p.ln1_g], &t[p.ln1_b]);
            let q = h.dot(&t[p.wq]);
            let k = h.dot(&t[p.wk]);
            let v = h.dot(&t[p.wv]);
            let attn = causal_softmax(&(q.dot(&k.t()) * scale));
            x = x + attn.dot(&v).dot(&t[p.wo]);
            let (h, _, _) = layer_norm(&x, &t[p.ln2_g], &t[p.ln2_b]);
            x = &x + &ffn(params, l, &h);
            caches.push(LayerCache { k, v });
        }
        let head = head_ids(cfg.n_layers);
        let (hidden, _, _) = layer_norm(&x, &t[head.lnf_g], &t[head.lnf_b]);
        let len = hidden.nrows();
        (Decoder { params, caches, len }, hidden)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns its final-norm hidden state.
    pub fn step(&mut self, token: usize) -> Result<Array1<f64>> {
        check_len(self.params, self.len + 1)?;
        let cfg = self.params.config;
        let t = &self.params.tensors;
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        let mut x = (&t[TOK_EMB].row(token) + &t[POS_EMB].row(self.len)).insert_axis(Axis(0));
        for (l, cache) in self.caches.iter_mut().enumerate() {
            let p = layer_ids(l);
            let (h, _, _) = layer_norm(&x, &t[p.ln1_g], &t[p.ln1_b]);
            let q = h.dot(&t[p.wq]);
            cache.k.push_row(h.dot(&t[p.wk]).row(0)).expect("width matches");
            cache.v.push_row(h.dot(&t[p.wv]).row(0)).expect("width matches");
            let attn = softmax_rows(&(q.dot(&cache.k.t()) * scale));
            x = x + attn.dot(&cache.v).dot(&t[p.wo]);
            let (h, _, _) = layer_norm(&x, &t[p.ln2_g], &t[p.ln2_b]);
            x = &x + &ffn(self.params, l, &h);
        }
        let head = head_ids(cfg.n_layers);
        let (hidden, _, _) = layer_norm(&x, &t[head.lnf_g], &t[head.lnf_b]);
        self.len += 1;
        Ok(hidden.row(0).to_owned())
    }
}

fn embed_inputs(params: &PolicyParams, prompt: &PromptSequence, ids: &[usize]) -> Array2<f64> {
    let t = &params.tensors;
    let mut x = t[TOK_EMB].select(Axis(0), ids);
    let feats = encode_views_plain(params, &prompt.slot_views());
    for (k, &p) in prompt.slot_positions().iter().enumerate() {
        x.row_mut(p).assign(&feats.row(k));
    }
    x + &t[POS_EMB].slice(s![..ids.len(), ..])
}

fn lm_logits(params: &PolicyParams, hidden: &Array2<f64>) -> Array2<f64> {
    hidden.dot(&params.tensors[head_ids(params.config.n_layers).lm_head])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Hidden state at `<cls>`, when the prompt has one.
    pub f_cls: Option<Array1<f64>>,
    /// Language-model logits at every input position.
    pub logits: Array2<f64>,
    /// Candidate view features in prompt order.
    pub candidates: Array2<f64>,
}

/// Plain forward over the prompt, teacher-forcing `target` when given.
pub fn forward(params: &PolicyParams, prompt: &PromptSequence, target: Option<&[usize]>) -> Result<ForwardOutput> {
    let ids = input_ids(prompt, target.unwrap_or(&[]));
    check_len(params, ids.len())?;
    let (_, hidden) = Decoder::prefill(params, embed_inputs(params, prompt, &ids));
    let cands: Vec<&ViewTokens> = prompt.candidates.iter().collect();
    Ok(ForwardOutput {
        f_cls: prompt.cls_pos.map(|c| hidden.row(c).to_owned()),
        logits: lm_logits(params, &hidden),
        candidates: encode_views_plain(params, &cands),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub ids: Vec<usize>,
    pub text: String,
    /// Decoding hit the token budget or the position limit before `<eos>`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub decision: ActionDecision,
    pub reasoning: Option<Generated>,
}

fn greedy(
    params: &PolicyParams,
    vocab: &Vocabulary,
    mut decoder: Decoder<'_>,
    last_hidden: Array1<f64>,
    max_tokens: usize,
) -> Result<Generated> {
    let lm = &params.tensors[head_ids(params.config.n_layers).lm_head];
    let mut logits = last_hidden.dot(lm);
    let mut ids = Vec::new();
    loop {
        let next = argmax(logits.as_slice().expect("contiguous"));
        if next == vocab.eos() {
            return Ok(Generated { text: vocab.detokenize(&ids), ids, truncated: false });
        }
        ids.push(next);
        if ids.len() >= max_tokens || decoder.len() >= params.config.max_len {
            return Ok(Generated { text: vocab.detokenize(&ids), ids, truncated: true });
        }
        logits = decoder.step(next)?.dot(lm);
    }
}

/// Chooses an action from the `<cls>` readout and, when `generate` is set,
/// greedily decodes up to that many reasoning tokens from the same prefill.
pub fn act(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &PromptSequence,
    generate: Option<usize>,
) -> Result<StepOutput> {
    let cls = prompt.cls_pos.ok_or_else(|| Error::InvalidInput("prompt has no <cls> token".into()))?;
    check_len(params, prompt.len())?;
    let (decoder, hidden) = Decoder::prefill(params, embed_inputs(params, prompt, &prompt.ids));
    let cands: Vec<&ViewTokens> = prompt.candidates.iter().collect();
    let decision = predict_action(params, &hidden.row(cls).to_owned(), &encode_views_plain(params, &cands));
    let reasoning = match generate {
        Some(max_tokens) if max_tokens > 0 => {
            let last = hidden.row(hidden.nrows() - 1).to_owned();
            Some(greedy(params, vocab, decoder, last, max_tokens)?)
        }
        Some(_) => Some(Generated { ids: Vec::new(), text: String::new(), truncated: true }),
        None => None,
    };
    Ok(StepOutput { decision, reasoning })
}

/// Greedy decoding from the start of the reasoning region.
pub fn generate_cot(params: &PolicyParams, vocab: &Vocabulary, prompt: &PromptSequence, max_len: usize) -> Result<Generated> {
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be at least 1".into()));
    }
    check_len(params, prompt.len())?;
    let (decoder, hidden) = Decoder::prefill(params, embed_inputs(params, prompt, &prompt.ids));
    let last = hidden.row(hidden.nrows() - 1).to_owned();
    greedy(params, vocab, decoder, last, max_len)
}
