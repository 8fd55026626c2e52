#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contrastmix::phantom::PhantomConfig;
use contrastmix::Dims;
use contrastmix_cli::{PriorMode, RunConfig};

/// Half-size phantom and a two-level network: every stage runs in well
/// under a second.
pub fn small_config(root: &Path) -> RunConfig {
    RunConfig {
        phantom: PhantomConfig { num_subjects: 8, ..PhantomConfig::default().scaled(0.5) },
        data_dir: root.join("data"),
        out_dir: root.join("runs"),
        prior_mode: PriorMode::Oracle,
        patch_dims: Dims::new(12, 12, 6),
        centers_per_organ: 2,
        context_patches: 2,
        widths: vec![4, 8],
        epochs: 1,
        steps_per_epoch: 6,
        student_epochs: 1,
        student_steps_per_epoch: 3,
        coarse_epochs: 1,
        coarse_steps_per_epoch: 3,
        lr: 2e-3,
        ..RunConfig::default()
    }
}

pub fn write_config(cfg: &RunConfig, path: &Path) -> PathBuf {
    fs::write(path, cfg.render()).unwrap();
    path.to_path_buf()
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contrastmix"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

/// Every regular file below `dir`, as (relative path, bytes), sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// `tree` with the config echoes dropped, since they embed absolute paths.
pub fn tree_without_echo(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    tree(dir)
        .into_iter()
        .filter(|(p, _)| p.file_name().is_none_or(|n| n != "config.txt" && n != "manifest.txt"))
        .collect()
}
