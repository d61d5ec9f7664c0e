//! Subcommand implementations. Each returns the files it wrote.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cotnav_core::policy::PolicyParams;
use cotnav_core::trainer::StageReport;
use cotnav_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::experiment::{
    generate_corpus, label_records, rollouts, run_ablation, run_stage1, run_stage2, score, train_data, Agent,
    AblationResult, AblationRow, Split,
};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const WORLDS_FILE: &str = "worlds.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const CURVES_FILE: &str = "curves.csv";

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(path.to_path_buf())
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn stage_dir(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.output_dir.join(format!("stage{stage}"))
}

pub fn worldgen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = generate_corpus(cfg)?;
    Ok(vec![
        write(&cfg.output_dir.join(WORLDS_FILE), &jsonl(&corpus.worlds)?)?,
        write(&cfg.output_dir.join(EPISODES_FILE), &jsonl(&corpus.episodes)?)?,
    ])
}

pub fn labelgen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let corpus = generate_corpus(cfg)?;
    let records = label_records(cfg, &corpus)?;
    Ok(vec![write(&cfg.output_dir.join(LABELS_FILE), &jsonl(&records)?)?])
}

fn save_stage(cfg: &RunConfig, params: &PolicyParams, report: &StageReport) -> Result<Vec<PathBuf>> {
    let dir = stage_dir(cfg, report.stage);
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    params.write_checkpoint(BufWriter::new(fs::File::create(&ckpt)?))?;
    Ok(vec![
        ckpt,
        write(&dir.join(REPORT_FILE), &report.to_csv())?,
        write(&dir.join(SUMMARY_FILE), &report.summary_json()?)?,
    ])
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    PolicyParams::read_checkpoint(std::io::BufReader::new(file))
}

pub fn train(cfg: &RunConfig, stage: u8) -> Result<Vec<PathBuf>> {
    let corpus = generate_corpus(cfg)?;
    let data = train_data(cfg, &corpus)?;
    let (params, report) = match stage {
        1 => run_stage1(cfg, &corpus, &data, 0)?,
        2 => {
            let path = stage_dir(cfg, 1).join(CHECKPOINT_FILE);
            if !path.exists() {
                return Err(Error::InvalidInput(format!(
                    "stage 2 continues from a stage-1 checkpoint; run `train --stage 1` first ({} not found)",
                    path.display()
                )));
            }
            let stage1 = load_checkpoint(&path)?;
            if stage1.vocab_size != corpus.vocab.len() || stage1.config != cfg.policy {
                return Err(Error::Checkpoint("stage-1 checkpoint does not match this config".into()));
            }
            run_stage2(cfg, &corpus, &data, stage1)?
        }
        other => return Err(Error::InvalidInput(format!("stage must be 1 or 2, got {other}"))),
    };
    save_stage(cfg, &params, &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalAgent {
    Policy,
    Oracle,
    AlwaysStop,
}

impl EvalAgent {
    pub fn parse(s: &str) -> Result<EvalAgent> {
        match s {
            "policy" => Ok(EvalAgent::Policy),
            "oracle" => Ok(EvalAgent::Oracle),
            "stop" => Ok(EvalAgent::AlwaysStop),
            other => Err(Error::InvalidInput(format!("unknown agent {other:?}"))),
        }
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, agent: EvalAgent, with_reasoning: bool) -> Result<Vec<PathBuf>> {
    let corpus = generate_corpus(cfg)?;
    let params = match (agent, checkpoint) {
        (EvalAgent::Policy, Some(p)) => Some(load_checkpoint(p)?),
        (EvalAgent::Policy, None) => return Err(Error::InvalidInput("the policy agent needs --checkpoint".into())),
        _ => None,
    };
    let agent = match (&params, agent) {
        (Some(p), _) => Agent::Policy(p),
        (None, EvalAgent::Oracle) => Agent::Oracle,
        _ => Agent::AlwaysStop,
    };
    let generate = with_reasoning.then_some(cfg.train.max_label_tokens);
    let records = rollouts(&corpus, split, agent, generate)?;
    let report = score(&corpus, split, &records)?;
    let split_name = serde_json::to_value(split)?.as_str().unwrap_or("split").to_string();
    let dir = cfg.output_dir.join("eval").join(split_name);
    Ok(vec![
        write(&dir.join(METRICS_FILE), &serde_json::to_string_pretty(&report)?)?,
        write(&dir.join(METRICS_CSV_FILE), &report.to_csv())?,
        write(&dir.join(TRAJECTORIES_FILE), &jsonl(&records)?)?,
    ])
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,seed,cot_sft,self_enrich,self_reflect,stage1_steps,stage2_steps,tl,ne,sr,spl,osr,gp\n");
    for r in results {
        let m = &r.test;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.seed,
            r.flags.cot_sft,
            r.flags.self_enrich,
            r.flags.self_reflect,
            r.stage1_steps,
            r.stage2_steps,
            m.tl,
            m.ne,
            m.sr,
            m.spl,
            m.osr,
            m.gp
        ));
    }
    out
}

/// All five rows for every seed in `seeds` (the config seed when empty).
pub fn ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let mut results = Vec::new();
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        results.extend(run_ablation(&c, &AblationRow::ALL)?);
    }
    Ok(vec![
        write(&cfg.output_dir.join(ABLATION_FILE), &serde_json::to_string_pretty(&results)?)?,
        write(&cfg.output_dir.join(ABLATION_CSV_FILE), &ablation_csv(&results))?,
    ])
}

/// Concatenates the stage reports into one curve with a global step index.
pub fn export_curves(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut out = String::from("stage,global_step,loss_action,loss_sft,loss_sr,loss_total,enrichment_rate\n");
    let mut offset = 0;
    let mut found = false;
    for stage in [1u8, 2] {
        let path = stage_dir(cfg, stage).join(SUMMARY_FILE);
        if !path.exists() {
            continue;
        }
        found = true;
        let report: StageReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
        for s in &report.steps {
            out.push_str(&format!(
                "{stage},{},{},{},{},{},{}\n",
                offset + s.step,
                s.loss_action,
                s.loss_sft,
                s.loss_sr,
                s.loss_total,
                s.enrichment_rate
            ));
        }
        offset += report.steps.len();
    }
    if !found {
        return Err(Error::InvalidInput("no stage reports found; run `train` first".into()));
    }
    Ok(vec![write(&cfg.output_dir.join(CURVES_FILE), &out)?])
}
