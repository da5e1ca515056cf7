#![allow(dead_code)]

use std::path::Path;

use vlit_curate::pipeline::PipelineConfig;

/// A run small enough for debug-profile tests: 12 images, a few epochs of
/// warm start and a handful of steps per phase.
pub fn small_config(seed: u64) -> PipelineConfig {
    let text = format!(
        r#"
seed = {seed}
num_images = 12
samples_per_image = 5
initial_count = 60
final_count = 12

[pretrain]
epochs = 4

[training]
crm_steps = 5
clm_steps = 5
"#
    );
    PipelineConfig::from_toml_str(&text).unwrap()
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every file under `root` except the manifest, as sorted (relative path, bytes).
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                if rel != "manifest.jsonl" {
                    out.push((rel, read(&p)));
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
