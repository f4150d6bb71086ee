//! Tiny end-to-end configuration and helpers for comparing lab outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Small enough that the whole pipeline runs in seconds.
pub const TINY: &str = r#"{
  "data": {"in_domain": {"train": 40, "val": 10, "test": 10}, "out_domain": {"train": 20, "val": 10, "test": 10}},
  "model": {"embed_dim": 16, "depth": 2, "heads": 2, "fusion_layers": 1},
  "pretrain": {"steps": 30, "eval_every": 15, "warmup_steps": 5},
  "tune": {"steps": 20, "eval_every": 10, "stage2_steps": 10},
  "ablate": {"seeds": [0], "tokens": [1, 2], "losses": ["cls", "cls+bbox+mask"], "fusion": [true, false], "scales": ["full"]},
  "generate": {"steps": 40, "samples": 4, "images_per_concept": 8, "batch_size": 8, "invert_steps": 10,
               "denoiser": {"hidden": 16, "timesteps": 20}}
}"#;

pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

pub fn cli(args: &[&str]) -> i32 {
    let mut all = vec!["cones-lab"];
    all.extend_from_slice(args);
    cones_core::cli::run(all)
}

/// Relative path → bytes of every CSV, JSON and tensor file under `root`.
pub fn outputs(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "json" | "tsr")) {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Files present in only one tree or differing in content.
pub fn differences(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut diff: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    diff.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    diff
}
