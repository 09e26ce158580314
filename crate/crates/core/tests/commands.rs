mod common;

use std::path::Path;

use common::tiny_config;
use flowfm_core::commands::{
    cmd_bench, cmd_eval_gen, cmd_export_proj, cmd_finetune, cmd_generate, cmd_pretrain, cmd_probe, cmd_text_tune,
    load_prompts, GenTarget, CHECKPOINT_FILE, LOSS_LOG_FILE, TEXT_CHECKPOINT_FILE, TIMING_FILE,
};
use flowfm_core::data::{load_csv, save_csv, synthesize, SignalBatch};
use flowfm_core::persist::{Checkpoint, ModelKind, RunConfig, TextArm};
use flowfm_core::sampler::{BenchCase, OdeConfig, OdeMethod};
use flowfm_core::Error;

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn pretrain(dir: &Path, kind: ModelKind) -> std::path::PathBuf {
    cmd_pretrain(&tiny_config(), kind, dir, None).unwrap()
}

#[test]
fn pretrain_writes_checkpoint_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrain(dir.path(), ModelKind::Flow);
    assert_eq!(ck, dir.path().join(CHECKPOINT_FILE));
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.step, 6);
    let log = read(&dir.path().join(LOSS_LOG_FILE));
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines[0].starts_with("# flowfm config="));
    assert_eq!(lines[1], "step,loss,masked_fraction");
    assert_eq!(lines.len(), 2 + 6);
    assert!(lines[2].starts_with("1,"));
    let timing = read(&dir.path().join(TIMING_FILE));
    assert_eq!(timing.lines().nth(1), Some("step,step_time_s"));
}

#[test]
fn resume_appends_and_matches_straight_run() {
    let straight = tempfile::tempdir().unwrap();
    pretrain(straight.path(), ModelKind::Diffusion);

    let split = tempfile::tempdir().unwrap();
    let mut half = tiny_config();
    half.train_steps = 3;
    let ck = cmd_pretrain(&half, ModelKind::Diffusion, split.path(), None).unwrap();
    cmd_pretrain(&tiny_config(), ModelKind::Diffusion, split.path(), Some(&ck)).unwrap();

    let losses = |dir: &Path| -> Vec<String> {
        read(&dir.join(LOSS_LOG_FILE)).lines().skip(2).map(str::to_string).collect()
    };
    assert_eq!(losses(split.path()), losses(straight.path()));
    assert!(
        std::fs::read(split.path().join(CHECKPOINT_FILE)).unwrap()
            == std::fs::read(straight.path().join(CHECKPOINT_FILE)).unwrap()
    );
    let wrong = cmd_pretrain(&tiny_config(), ModelKind::Flow, split.path(), Some(&ck));
    assert!(matches!(wrong, Err(Error::Invalid(_))));
}

#[test]
fn probe_and_finetune_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrain(dir.path(), ModelKind::Flow);
    let out = dir.path().join("eval");
    let p = cmd_probe(&ck, None, None, &out).unwrap();
    let again = cmd_probe(&ck, None, None, &out).unwrap();
    assert_eq!(p, again);
    let f = cmd_finetune(&ck, None, Some(3), &out).unwrap();
    assert!((0.0..=1.0).contains(&f.accuracy));

    let report = read(&out.join("probe.csv"));
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].contains(&Checkpoint::load(&ck).unwrap().config.fingerprint()));
    assert_eq!(lines[1], "method,accuracy,macro_f1,n_train,n_eval");
    assert!(lines[2].starts_with(&format!("probe,{},", p.accuracy)));
    let confusion = read(&out.join("finetune_confusion.csv"));
    assert_eq!(confusion.lines().nth(1), Some("true_class,pred_0,pred_1,pred_2"));
    assert_eq!(confusion.lines().count(), 2 + 3);
}

#[test]
fn label_free_data_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrain(dir.path(), ModelKind::Flow);
    let mut spec = tiny_config().synth;
    spec.seed = 99;
    let mut data = synthesize(&spec).unwrap();
    data.windows.iter_mut().for_each(|w| w.class_id = 0);
    let csv = dir.path().join("unlabelled.csv");
    save_csv(&data, &csv, &[], None).unwrap();
    let err = cmd_probe(&ck, Some(&csv), None, &dir.path().join("x")).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

fn prompt_file(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("prompts.csv");
    std::fs::write(&p, "# class prompts\nclass_id,text\n0,slow walk\n1,jogging\n2,\"fast, hard run\"\n").unwrap();
    p
}

#[test]
fn prompts_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let table = load_prompts(&prompt_file(dir.path())).unwrap();
    assert_eq!(table[2], (2, "fast, hard run".to_string()));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "# c\nclass_id,text\nx,walk\n").unwrap();
    assert!(matches!(load_prompts(&bad), Err(Error::Csv { line: 3, .. })));
    std::fs::write(&bad, "id,prompt\n0,walk\n").unwrap();
    assert!(matches!(load_prompts(&bad), Err(Error::Csv { .. })));
}

#[test]
fn text_tune_generate_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ck = pretrain(d, ModelKind::Flow);
    let prompts = load_prompts(&prompt_file(d)).unwrap();
    let tuned = cmd_text_tune(&ck, &prompts, TextArm::TextRep, Some(2), d).unwrap();
    assert_eq!(tuned, d.join(TEXT_CHECKPOINT_FILE));
    assert_eq!(read(&d.join("text_loss_log.csv")).lines().count(), 2 + 2);

    let sampler = Some(OdeConfig::new(OdeMethod::Euler, 3));
    let gen_dir = d.join("gen");
    let g = cmd_generate(&tuned, &GenTarget::Class(1), 6, sampler, 5, &gen_dir).unwrap();
    let text = read(&g);
    assert!(text.starts_with("# flowfm config="));
    assert!(text.lines().nth(1).unwrap().contains("sampler=euler steps=3 net_evals_per_sample=3"));
    assert!(text.lines().nth(2).unwrap().ends_with(",origin"));
    let batch = load_csv(&g).unwrap();
    assert_eq!(batch.len(), 6);
    assert!(batch.labels().iter().all(|&c| c == 1));

    // Same seed, same file.
    let g2 = cmd_generate(&tuned, &GenTarget::Class(1), 6, sampler, 5, &d.join("gen2")).unwrap();
    assert_eq!(read(&g), read(&g2));

    cmd_generate(&tuned, &GenTarget::Prompt("Jogging".into()), 4, sampler, 1, &d.join("p")).unwrap();
    assert_eq!(load_csv(d.join("p/generated.csv")).unwrap().labels(), vec![1; 4]);
    cmd_generate(&ck, &GenTarget::Unconditional, 4, sampler, 1, &d.join("u")).unwrap();
    assert!(matches!(
        cmd_generate(&ck, &GenTarget::Class(7), 2, sampler, 1, &d.join("bad")),
        Err(Error::Data(_))
    ));

    let real = d.join("real.csv");
    let raw = synthesize(&tiny_config().synth).unwrap();
    save_csv(&raw.subset(&(0..10).collect::<Vec<_>>()), &real, &[], None).unwrap();
    let report = cmd_eval_gen(&tuned, &real, &g, d).unwrap();
    assert_eq!((report.n_real, report.n_gen), (10, 6));
    assert!(report.fid.is_finite());
    let rep = read(&d.join("gen_report.csv"));
    assert_eq!(rep.lines().nth(1), Some("fid,precision,recall,n_real,n_gen,feature_space"));

    let proj = cmd_export_proj(&tuned, &real, Some(&g), d).unwrap();
    let proj = read(&proj);
    assert_eq!(proj.lines().nth(1), Some("x,y,class_id,subject_id,origin"));
    assert_eq!(proj.lines().count(), 2 + 16);
    assert!(proj.lines().last().unwrap().ends_with(",generated"));
}

#[test]
fn text_tuning_needs_flow_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrain(dir.path(), ModelKind::Diffusion);
    let prompts = load_prompts(&prompt_file(dir.path())).unwrap();
    assert!(matches!(
        cmd_text_tune(&ck, &prompts, TextArm::TextOnly, Some(1), dir.path()),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn bench_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.diffusion_steps = 40;
    let flow_dir = dir.path().join("flow");
    let diff_dir = dir.path().join("diff");
    let flow = cmd_pretrain(&cfg, ModelKind::Flow, &flow_dir, None).unwrap();
    let diff = cmd_pretrain(&cfg, ModelKind::Diffusion, &diff_dir, None).unwrap();
    let cases: Vec<BenchCase> = ["euler:2", "rk4:2", "ddim:4", "ancestral"].iter().map(|c| c.parse().unwrap()).collect();
    let path = cmd_bench(&flow, &diff, &cases, 6, 0, dir.path()).unwrap();
    let text = read(&path);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("feature_space="));
    assert_eq!(lines[1], "sampler,steps,net_evals,time_per_sample_s,fid,eval_ratio");
    let evals: Vec<(String, usize, f64)> = lines[2..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap(), f[5].parse().unwrap())
        })
        .collect();
    assert_eq!(
        evals,
        vec![
            ("flow-euler".into(), 2, 20.0),
            ("flow-rk4".into(), 8, 5.0),
            ("ddim".into(), 4, 10.0),
            ("ddpm-ancestral".into(), 40, 1.0)
        ]
    );
}

#[test]
fn config_errors_surface_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.mask_prob = 2.0;
    assert!(matches!(cmd_pretrain(&cfg, ModelKind::Flow, dir.path(), None), Err(Error::Config(_))));
    assert!(!dir.path().join(LOSS_LOG_FILE).exists());
    assert!(matches!(
        cmd_probe(&dir.path().join("missing.ffm"), None, None, dir.path()),
        Err(Error::Io { .. })
    ));
    let _ = SignalBatch::default();
}
