//! Data generation, training and evaluation driven by a [`RunConfig`].

use cotnav_core::cotforge::{
    build_reflection_sample, LabelKind, LabelRecord, SyntheticCaptioner,
};
use cotnav_core::envworld::{generate_episode, generate_world, landmark_pool, Action, Episode, World};
use cotnav_core::metrics::{evaluate, MetricReport, TrajectoryRecord, SUCCESS_RADIUS};
use cotnav_core::policy::{PolicyParams, Vocabulary};
use cotnav_core::rng::{mix, sub_seed, Stream};
use cotnav_core::trainer::{
    build_step_samples, continue_stage1, rollout, run_inference, train_stage1, train_stage2, StageReport, StepSample,
    TrainData,
};
use cotnav_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub split: Split,
    pub world: usize,
    pub episode: Episode,
}

/// Worlds and episodes of one run. Train and val episodes live on the first
/// `train_worlds` worlds, test episodes on the remaining unseen ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub worlds: Vec<World>,
    pub episodes: Vec<EpisodeEntry>,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpisodeEntry> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

pub fn generate_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let w = cfg.world;
    let worlds = (0..w.train_worlds + w.test_worlds)
        .map(|i| generate_world(sub_seed(cfg.seed, Stream::World, i as u64), w.n_nodes, w.avg_degree, w.vocab_size))
        .collect::<Result<Vec<_>>>()?;
    let e = cfg.episodes;
    // Episode seeds come from disjoint index ranges of one stream.
    let ranges = [(Split::Train, 0, e.train), (Split::Val, e.train, e.val), (Split::Test, e.train + e.val, e.test)];
    let mut episodes = Vec::with_capacity(e.train + e.val + e.test);
    for (split, offset, count) in ranges {
        for i in 0..count {
            let world = match split {
                Split::Test => w.train_worlds + i % w.test_worlds,
                _ => i % w.train_worlds,
            };
            let seed = sub_seed(cfg.seed, Stream::Episodes, (offset + i) as u64);
            let episode = generate_episode(&worlds[world], seed, e.min_hops, e.max_hops)?;
            episodes.push(EpisodeEntry { split, world, episode });
        }
    }
    Ok(Corpus { worlds, episodes, vocab: Vocabulary::new(&landmark_pool(w.vocab_size)) })
}

pub fn captioner(cfg: &RunConfig) -> Result<SyntheticCaptioner> {
    SyntheticCaptioner::new(
        sub_seed(cfg.seed, Stream::Captions, 0),
        cfg.captions.p_drop,
        cfg.captions.p_add,
        landmark_pool(cfg.world.vocab_size),
    )
}

fn step_samples(cfg: &RunConfig, corpus: &Corpus, split: Split) -> Result<Vec<StepSample>> {
    let provider = captioner(cfg)?;
    let negative_seed = sub_seed(cfg.seed, Stream::Negatives, 0);
    let mut out = Vec::new();
    for entry in corpus.split(split) {
        out.extend(build_step_samples(
            &corpus.worlds[entry.world],
            &entry.episode,
            &corpus.vocab,
            &provider,
            cfg.ablation.label_style,
            negative_seed,
        )?);
    }
    Ok(out)
}

pub fn train_data(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainData> {
    Ok(TrainData { train: step_samples(cfg, corpus, Split::Train)?, val: step_samples(cfg, corpus, Split::Val)? })
}

/// Ground-truth labels, negatives and reflection samples for the train split.
pub fn label_records(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<LabelRecord>> {
    let samples = step_samples(cfg, corpus, Split::Train)?;
    let order_seed = sub_seed(cfg.seed, Stream::Negatives, 1);
    let mut out = Vec::new();
    for s in &samples {
        let record = |kind, label: &cotnav_core::cotforge::CoTLabel| LabelRecord {
            episode_id: s.episode_seed,
            step: s.step,
            label_text: label.text.clone(),
            landmarks: label.landmarks.clone(),
            direction: label.direction,
            kind,
            order_bit: None,
            answer: None,
        };
        out.push(record(LabelKind::Gt, &s.label));
        if let Some(neg) = &s.negative {
            out.push(record(LabelKind::Negative, neg));
            match build_reflection_sample(&s.label, neg, mix(&[order_seed, s.episode_seed, s.step as u64])) {
                Ok(r) => out.push(LabelRecord {
                    label_text: r.prompt.clone(),
                    order_bit: Some(r.order_bit),
                    answer: Some(r.answer.clone()),
                    ..record(LabelKind::Reflection, &s.label)
                }),
                Err(Error::DegeneratePair) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Which agent drives an evaluation rollout.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'a> {
    Policy(&'a PolicyParams),
    /// Replays the ground-truth actions.
    Oracle,
    /// Stops immediately.
    AlwaysStop,
}

pub fn rollouts(corpus: &Corpus, split: Split, agent: Agent<'_>, generate: Option<usize>) -> Result<Vec<TrajectoryRecord>> {
    corpus
        .split(split)
        .map(|entry| {
            let world = &corpus.worlds[entry.world];
            match agent {
                Agent::Policy(params) => run_inference(params, &corpus.vocab, world, &entry.episode, generate),
                Agent::Oracle => rollout(world, &entry.episode, |ctx| {
                    let a = ctx.episode.gt_actions.get(ctx.step).copied().unwrap_or(Action::Stop);
                    Ok((a.index(ctx.observation.n_navigable()), None))
                }),
                Agent::AlwaysStop => rollout(world, &entry.episode, |ctx| Ok((ctx.observation.n_navigable(), None))),
            }
        })
        .collect()
}

pub fn score(corpus: &Corpus, split: Split, records: &[TrajectoryRecord]) -> Result<MetricReport> {
    let per = corpus
        .split(split)
        .zip(records)
        .map(|(entry, r)| evaluate(r, &corpus.worlds[entry.world], SUCCESS_RADIUS))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(per, SUCCESS_RADIUS)
}

/// Stage-1 training (or the action-only baseline when `cot_sft` is off).
/// `extra_steps` continues the same objective past the nominal budget.
pub fn run_stage1(cfg: &RunConfig, corpus: &Corpus, data: &TrainData, extra_steps: usize) -> Result<(PolicyParams, StageReport)> {
    let mut t = cfg.effective_train();
    t.stage1_steps += extra_steps;
    train_stage1(&t, cfg.policy, &corpus.vocab, data, cfg.seed)
}

pub fn run_stage2(cfg: &RunConfig, corpus: &Corpus, data: &TrainData, stage1: PolicyParams) -> Result<(PolicyParams, StageReport)> {
    train_stage2(stage1, &cfg.effective_train(), &corpus.vocab, data, cfg.ablation.label_style, cfg.seed)
}

/// Continues Stage 1 for a Stage-2-sized budget, for step-matched
/// comparisons against rows that run Stage 2.
pub fn extend_stage1(cfg: &RunConfig, corpus: &Corpus, data: &TrainData, params: PolicyParams) -> Result<(PolicyParams, StageReport)> {
    let mut t = cfg.effective_train();
    t.stage1_steps = t.stage2_steps;
    continue_stage1(params, &t, &corpus.vocab, data, mix(&[cfg.seed, 1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Baseline,
    CotSft,
    SelfEnrich,
    SelfReflect,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] =
        [AblationRow::Baseline, AblationRow::CotSft, AblationRow::SelfEnrich, AblationRow::SelfReflect, AblationRow::Full];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::CotSft => "+cot_sft",
            AblationRow::SelfEnrich => "+self_enrich",
            AblationRow::SelfReflect => "+self_reflect",
            AblationRow::Full => "full",
        }
    }

    pub fn flags(self, base: AblationFlags) -> AblationFlags {
        let (cot_sft, self_enrich, self_reflect) = match self {
            AblationRow::Baseline => (false, false, false),
            AblationRow::CotSft => (true, false, false),
            AblationRow::SelfEnrich => (true, true, false),
            AblationRow::SelfReflect => (true, false, true),
            AblationRow::Full => (true, true, true),
        };
        AblationFlags { cot_sft, self_enrich, self_reflect, label_style: base.label_style }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub label: String,
    pub seed: u64,
    pub flags: AblationFlags,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub test: cotnav_core::metrics::MetricSet,
    /// First and last complete-epoch enrichment rates of the Stage-2 run.
    pub enrichment: Option<(f64, f64)>,
}

/// Runs the given ablation rows on one seed. Rows without Stage 2 keep
/// optimizing their Stage-1 objective for the Stage-2 budget, so every row
/// gets the same number of post-Stage-1 steps.
pub fn run_ablation(cfg: &RunConfig, rows: &[AblationRow]) -> Result<Vec<AblationResult>> {
    run_ablation_with(cfg, rows, |_, _, _| Ok(()))
}

/// [`run_ablation`] with a hook that sees the shared CoT Stage-1 model once
/// it is trained.
pub fn run_ablation_with<F>(cfg: &RunConfig, rows: &[AblationRow], mut on_stage1: F) -> Result<Vec<AblationResult>>
where
    F: FnMut(&Corpus, &PolicyParams, &StageReport) -> Result<()>,
{
    let corpus = generate_corpus(cfg)?;
    let data = train_data(cfg, &corpus)?;
    let mut shared_stage1: Option<(PolicyParams, usize)> = None;
    let mut out = Vec::new();
    for &row in rows {
        let mut row_cfg = cfg.clone();
        row_cfg.ablation = row.flags(cfg.ablation);
        let (params, s1_steps, s2) = if row_cfg.ablation.cot_sft {
            if shared_stage1.is_none() {
                let (p, r) = run_stage1(&row_cfg, &corpus, &data, 0)?;
                on_stage1(&corpus, &p, &r)?;
                shared_stage1 = Some((p, r.steps.len()));
            }
            let (p, n) = shared_stage1.clone().expect("trained above");
            if row_cfg.ablation.has_stage2() {
                let (p, r) = run_stage2(&row_cfg, &corpus, &data, p)?;
                (p, n, Some(r))
            } else {
                let (p, r) = extend_stage1(&row_cfg, &corpus, &data, p)?;
                (p, n + r.steps.len(), None)
            }
        } else {
            let (p, r) = run_stage1(&row_cfg, &corpus, &data, 0)?;
            let n = r.steps.len();
            let (p, r) = extend_stage1(&row_cfg, &corpus, &data, p)?;
            (p, n + r.steps.len(), None)
        };
        let records = rollouts(&corpus, Split::Test, Agent::Policy(&params), None)?;
        let test = score(&corpus, Split::Test, &records)?.means;
        out.push(AblationResult {
            row,
            label: row.label().to_string(),
            seed: cfg.seed,
            flags: row_cfg.ablation,
            stage1_steps: s1_steps,
            stage2_steps: s2.as_ref().map_or(0, |r| r.steps.len()),
            test,
            enrichment: s2.as_ref().and_then(StageReport::enrichment_trend),
        });
    }
    Ok(out)
}
