use std::fs;
use std::path::Path;
use std::process::Command;

use cotnav_cli::commands::{self, EvalAgent};
use cotnav_cli::config::RunConfig;
use cotnav_cli::experiment::{generate_corpus, rollouts, Agent, EpisodeEntry, Split};
use cotnav_core::cotforge::{parse_label, LabelKind, LabelRecord, LabelStyle, ParsedReasoning};
use cotnav_core::metrics::{evaluate, MetricReport, SUCCESS_RADIUS};
use cotnav_core::policy::PolicyConfig;
use cotnav_core::trainer::StageReport;
use cotnav_core::Error;

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.output_dir = dir.to_path_buf();
    cfg.world.n_nodes = 10;
    cfg.world.train_worlds = 2;
    cfg.world.test_worlds = 1;
    cfg.episodes.train = 8;
    cfg.episodes.val = 2;
    cfg.episodes.test = 4;
    cfg.policy = PolicyConfig { d_model: 8, d_ff: 16, n_layers: 2, max_len: 256 };
    cfg.train.batch_size = 4;
    cfg.train.stage1_steps = 6;
    cfg.train.stage2_steps = 3;
    cfg.train.eval_every = 3;
    cfg
}

fn read_all(files: &[std::path::PathBuf]) -> Vec<Vec<u8>> {
    files.iter().map(|f| fs::read(f).unwrap()).collect()
}

#[test]
fn worldgen_is_reproducible_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = read_all(&commands::worldgen(&cfg).unwrap());
    let files = commands::worldgen(&cfg).unwrap();
    assert_eq!(first, read_all(&files));
    let corpus = generate_corpus(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join(commands::EPISODES_FILE)).unwrap();
    let entries: Vec<EpisodeEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (split, n) in [(Split::Train, 8), (Split::Val, 2), (Split::Test, 4)] {
        assert_eq!(entries.iter().filter(|e| e.split == split).count(), n);
    }
    for e in &entries {
        e.episode.validate(&corpus.worlds[e.world]).unwrap();
        assert_eq!(e.split == Split::Test, e.world >= cfg.world.train_worlds);
    }
}

fn labels(cfg: &RunConfig) -> Vec<LabelRecord> {
    commands::labelgen(cfg).unwrap();
    let text = fs::read_to_string(cfg.output_dir.join(commands::LABELS_FILE)).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn noiseless_labels_name_the_ground_truth_view() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.captions.p_drop = 0.0;
    cfg.captions.p_add = 0.0;
    let corpus = generate_corpus(&cfg).unwrap();
    let records = labels(&cfg);
    let gt: Vec<&LabelRecord> = records.iter().filter(|r| r.kind == LabelKind::Gt).collect();
    let mut i = 0;
    for entry in corpus.split(Split::Train) {
        let world = &corpus.worlds[entry.world];
        for (t, action) in entry.episode.gt_actions.iter().enumerate() {
            let rec = gt[i];
            i += 1;
            assert_eq!((rec.episode_id, rec.step), (entry.episode.seed, t));
            match (*action, parse_label(&rec.label_text, LabelStyle::Formalized).unwrap()) {
                (cotnav_core::envworld::Action::Stop, ParsedReasoning::Stop) => {}
                (cotnav_core::envworld::Action::Move(k), ParsedReasoning::Move { landmarks, direction }) => {
                    let obs = world.observe(entry.episode.gt_path[t]).unwrap();
                    assert_eq!(landmarks, obs.candidate_view(k).landmark_tags);
                    assert_eq!(direction, rec.direction);
                }
                other => panic!("label disagrees with action: {other:?}"),
            }
        }
    }
    assert_eq!(i, gt.len());
    for r in records.iter().filter(|r| r.kind == LabelKind::Reflection) {
        let answer = r.answer.as_deref().unwrap();
        assert_eq!(answer, if r.order_bit.unwrap() { "Output 2." } else { "Output 1." });
    }
    assert_eq!(records, labels(&cfg));
}

#[test]
fn direction_only_style_switches_the_template() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ablation.label_style = LabelStyle::DirectionOnly;
    let records = labels(&cfg);
    let moves: Vec<_> = records.iter().filter(|r| r.kind == LabelKind::Gt && r.direction.is_some()).collect();
    assert!(!moves.is_empty());
    for r in moves {
        assert_eq!(r.label_text, format!("I should go {} me.", r.direction.unwrap()));
    }
}

#[test]
fn stage2_needs_a_stage1_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = commands::train(&cfg, 2).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(ref m) if m.contains("stage-1 checkpoint")), "{err}");
}

#[test]
fn training_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let s1 = commands::train(&cfg, 1).unwrap();
    let s2 = commands::train(&cfg, 2).unwrap();
    let first = (read_all(&s1), read_all(&s2));
    assert_eq!(first.0, read_all(&commands::train(&cfg, 1).unwrap()));
    assert_eq!(first.1, read_all(&commands::train(&cfg, 2).unwrap()));
    let curves = commands::export_curves(&cfg).unwrap();
    let text = fs::read_to_string(&curves[0]).unwrap();
    assert_eq!(text.lines().count(), 1 + 6 + 3);
}

#[test]
fn disabling_reflection_zeroes_its_weight() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ablation.self_reflect = false;
    commands::train(&cfg, 1).unwrap();
    commands::train(&cfg, 2).unwrap();
    let summary = fs::read_to_string(commands::stage_dir(&cfg, 2).join(commands::SUMMARY_FILE)).unwrap();
    let report: StageReport = serde_json::from_str(&summary).unwrap();
    assert!(report.steps.iter().all(|s| s.sr_weight == 0.0 && s.loss_sr == 0.0));
}

fn metrics(path: &Path) -> MetricReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_agents_and_direct_metrics_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let oracle = commands::eval(&cfg, None, Split::Test, EvalAgent::Oracle, false).unwrap();
    let m = metrics(&oracle[0]).means;
    assert_eq!((m.sr, m.spl, m.ne), (1.0, 1.0, 0.0));
    let stop = commands::eval(&cfg, None, Split::Test, EvalAgent::AlwaysStop, false).unwrap();
    assert_eq!(metrics(&stop[0]).means.tl, 0.0);

    let files = commands::train(&cfg, 1).unwrap();
    let out = commands::eval(&cfg, Some(&files[0]), Split::Val, EvalAgent::Policy, true).unwrap();
    let report = metrics(&out[0]);
    let corpus = generate_corpus(&cfg).unwrap();
    let params = commands::load_checkpoint(&files[0]).unwrap();
    let records = rollouts(&corpus, Split::Val, Agent::Policy(&params), Some(cfg.train.max_label_tokens)).unwrap();
    let direct: Vec<_> = corpus
        .split(Split::Val)
        .zip(&records)
        .map(|(e, r)| evaluate(r, &corpus.worlds[e.world], SUCCESS_RADIUS).unwrap())
        .collect();
    assert_eq!(report.per_episode, direct);
    assert!(records.iter().all(|r| !r.reasoning.is_empty()));
    assert!(matches!(
        commands::eval(&cfg, None, Split::Val, EvalAgent::Policy, false),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn ablate_emits_five_labelled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.stage1_steps = 3;
    cfg.train.stage2_steps = 2;
    let files = commands::ablate(&cfg, &[]).unwrap();
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    let expect = [
        ("baseline", false, false, false),
        ("+cot_sft", true, false, false),
        ("+self_enrich", true, true, false),
        ("+self_reflect", true, false, true),
        ("full", true, true, true),
    ];
    for (row, (label, sft, enrich, reflect)) in rows.iter().zip(expect) {
        assert_eq!(row["label"], label);
        assert_eq!(row["seed"], cfg.seed);
        assert_eq!(row["flags"]["cot_sft"], sft);
        assert_eq!(row["flags"]["self_enrich"], enrich);
        assert_eq!(row["flags"]["self_reflect"], reflect);
        // Too short to converge early, so every row uses its full budget.
        let total = row["stage1_steps"].as_u64().unwrap() + row["stage2_steps"].as_u64().unwrap();
        assert_eq!(total, 5);
    }
    assert_eq!(fs::read_to_string(&files[1]).unwrap().lines().count(), 6);
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let bin = env!("CARGO_BIN_EXE_cotnav");
    let init = Command::new(bin).args(["-c", cfg_path.to_str().unwrap(), "init"]).output().unwrap();
    assert!(init.status.success());
    let text = fs::read_to_string(&cfg_path).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());

    fs::write(&cfg_path, text.replace("[world]", "[world]\nbogus = 1")).unwrap();
    let out = Command::new(bin).args(["-c", cfg_path.to_str().unwrap(), "worldgen"]).output().unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid-config");

    let mut cfg = tiny(dir.path());
    cfg.output_dir = dir.path().join("out");
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let out = Command::new(bin).args(["-c", cfg_path.to_str().unwrap(), "train", "--stage", "2"]).output().unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid-input");
}
