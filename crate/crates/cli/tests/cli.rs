mod common;

use std::fs;

use common::{run_cli, small_config, tree, write_config};
use contrastmix::adapt::Stage;
use contrastmix::mvol::{read_labels, read_volume, write_labels};
use contrastmix::nn::{read_checkpoint, Network};
use contrastmix::phantom::{generate_pair, truth_file, MANIFEST_FILE};
use contrastmix::rng::derive_seed;
use contrastmix::LabelMap;
use contrastmix_cli::pipeline::{self, cmd_eval, pred_file, CHECKPOINT_FILE, SUMMARY_FILE};
use contrastmix_cli::RunConfig;

#[test]
fn phantom_writes_three_files_per_subject_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { data_dir: dir.path().join("data"), ..RunConfig::default() };
    let out = pipeline::cmd_phantom(&cfg, None).unwrap();
    let files = tree(&out);
    assert_eq!(files.len(), 3 * 24 + 1);
    assert!(out.join(MANIFEST_FILE).is_file());
    let v = read_volume(out.join("s0_src.mvol")).unwrap();
    assert_eq!(v.dims().as_array(), [48, 48, 48]);
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    pipeline::cmd_phantom(&cfg, None).unwrap();
    let first = tree(&cfg.data_dir);
    pipeline::cmd_phantom(&cfg, None).unwrap();
    assert_eq!(first, tree(&cfg.data_dir));
}

#[test]
fn unknown_key_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, "seed = 3\nnoise_sgima = 5\n").unwrap();
    let out = run_cli(&["phantom", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("noise_sgima"), "{err}");
    assert!(err.contains("line 2"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn student_without_teacher_names_the_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let conf = write_config(&cfg, &dir.path().join("run.conf"));
    let c = conf.to_str().unwrap();
    assert!(run_cli(&["phantom", "--config", c]).status.success());
    let out = run_cli(&["train", "--config", c, "--stage", "student_contrastmix"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("teacher"), "{err}");
}

#[test]
fn coarse_mode_teacher_requires_coarse_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { prior_mode: contrastmix_cli::PriorMode::Coarse, ..small_config(dir.path()) };
    pipeline::cmd_phantom(&cfg, None).unwrap();
    let err = pipeline::cmd_train(&cfg, Stage::Teacher).unwrap_err().to_string();
    assert!(err.contains("coarse"), "{err}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { epochs: 0, ..small_config(dir.path()) };
    pipeline::cmd_phantom(&cfg, None).unwrap();
    pipeline::cmd_train(&cfg, Stage::Teacher).unwrap();
    let saved = read_checkpoint(pipeline::stage_dir(&cfg, Stage::Teacher).join(CHECKPOINT_FILE)).unwrap();
    let net_cfg = cfg.train_config(Stage::Teacher).net_config(cfg.num_classes());
    let init = Network::<f32>::init(net_cfg, derive_seed(cfg.seed, Stage::Teacher.name(), 0)).unwrap();
    assert_eq!(saved, init.params);
    let log = fs::read_to_string(pipeline::stage_dir(&cfg, Stage::Teacher).join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn infer_writes_volume_shaped_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let conf = write_config(&cfg, &dir.path().join("run.conf"));
    let c = conf.to_str().unwrap();
    assert!(run_cli(&["phantom", "--config", c]).status.success());
    assert!(run_cli(&["train", "--config", c, "--stage", "teacher"]).status.success());
    let ckpt = pipeline::stage_dir(&cfg, Stage::Teacher).join(CHECKPOINT_FILE);
    let pred = dir.path().join("pred");
    let out = run_cli(&[
        "infer", "--config", c, "--checkpoint", ckpt.to_str().unwrap(), "--stage", "teacher", "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let test = pipeline::split(&cfg).unwrap().test;
    for idx in test {
        let labels = read_labels(pred.join(pred_file(idx))).unwrap();
        assert_eq!(labels.dims(), cfg.phantom.dims);
        assert_eq!(labels.num_classes(), cfg.num_classes());
    }

    let volume = cfg.data_dir.join("s0_tgt.mvol");
    let prior = cfg.data_dir.join(truth_file(0));
    let single = dir.path().join("single.mvol");
    let out = run_cli(&[
        "infer", "--config", c, "--checkpoint", ckpt.to_str().unwrap(), "--stage", "teacher", "--volume",
        volume.to_str().unwrap(), "--prior", prior.to_str().unwrap(), "--out", single.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_labels(&single).unwrap().dims(), cfg.phantom.dims);
}

fn truth_as_predictions(cfg: &RunConfig, dir: &std::path::Path, subjects: &[usize], blank: bool) {
    fs::create_dir_all(dir).unwrap();
    for &i in subjects {
        let t = generate_pair(&cfg.phantom, i).unwrap().truth;
        let l = if blank { LabelMap::background(t.dims(), t.spacing(), t.num_classes()).unwrap() } else { t };
        write_labels(dir.join(pred_file(i)), &l).unwrap();
    }
}

#[test]
fn eval_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    pipeline::cmd_phantom(&cfg, None).unwrap();
    let subjects = [0, 1, 2, 3, 4, 5];
    let perfect = dir.path().join("perfect");
    let blank = dir.path().join("blank");
    truth_as_predictions(&cfg, &perfect, &subjects, false);
    truth_as_predictions(&cfg, &blank, &subjects, true);

    let r = cmd_eval(&perfect, None, &cfg.data_dir, &dir.path().join("e1")).unwrap();
    assert!(r.a.iter().all(|o| o.dice == 1.0 && o.msd == Some(0.0)));

    let r = cmd_eval(&blank, None, &cfg.data_dir, &dir.path().join("e2")).unwrap();
    assert!(r.a.iter().all(|o| o.dice == 0.0 && o.msd.is_none()));
    let rows = fs::read_to_string(dir.path().join("e2/results.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",NA")));

    let r = cmd_eval(&perfect, Some(&perfect), &cfg.data_dir, &dir.path().join("e3")).unwrap();
    assert_eq!(r.p_values.len(), cfg.phantom.organs.len());
    assert!(r.p_values.iter().all(|&(_, p)| p == 1.0));
    let summary = fs::read_to_string(dir.path().join("e3").join(SUMMARY_FILE)).unwrap();
    assert!(summary.starts_with("organ,dice_mean,dice_std,msd_mean,msd_std,b_dice_mean"));
}

#[test]
fn eval_rejects_mismatched_subject_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    pipeline::cmd_phantom(&cfg, None).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    truth_as_predictions(&cfg, &a, &[0, 1], false);
    truth_as_predictions(&cfg, &b, &[0, 2], false);
    let err = cmd_eval(&a, Some(&b), &cfg.data_dir, &dir.path().join("e")).unwrap_err().to_string();
    assert!(err.contains("subject sets differ"), "{err}");
}

#[test]
fn student_loss_decreases_on_the_small_suite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { epochs: 4, steps_per_epoch: 30, student_epochs: 5, student_steps_per_epoch: 12, ..small_config(dir.path()) };
    pipeline::cmd_phantom(&cfg, None).unwrap();
    pipeline::cmd_train(&cfg, Stage::Teacher).unwrap();
    let out = pipeline::cmd_train(&cfg, Stage::StudentContrastMix).unwrap();
    let means = contrastmix::adapt::epoch_means(&out.log);
    assert_eq!(means.len(), 5);
    assert!(means[4].1 < means[0].1, "{means:?}");
}
