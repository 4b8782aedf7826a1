//! Synthetic datasets on disk shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revisp::config::RunConfig;
use revisp::image_io::{save_raw, save_rgb, sidecar_path, RawSidecar};
use revisp::manifest::{Manifest, ManifestEntry};
use revisp_core::selector::ModelConfig;
use revisp_core::Tensor;

pub const XYZ_FROM_SRGB: [f32; 9] = [
    0.4124, 0.3576, 0.1805, 0.2126, 0.7152, 0.0722, 0.0193, 0.1192, 0.9505,
];

pub fn sidecar(camera: &str) -> RawSidecar {
    RawSidecar::new(64, 16383, XYZ_FROM_SRGB, camera)
}

/// Smooth random texture in `[lo, hi]`.
pub fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> Tensor {
    let phase: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let freq: [f32; 2] = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
    Tensor::image_from_fn(h, w, 3, |y, x, c| {
        let u = x as f32 / w as f32;
        let v = y as f32 / h as f32;
        let t = 0.5
            + 0.25 * (std::f32::consts::TAU * (freq[0] * u + phase[c])).sin()
            + 0.25 * (std::f32::consts::TAU * (freq[1] * v + phase[(c + 1) % 3])).cos();
        lo + (hi - lo) * t
    })
}

/// Writes `n` paired RGB/RAW images and returns the manifest path.
pub fn write_paired(dir: &Path, n: usize, h: usize, w: usize, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..n {
        let raw = texture(&mut rng, h, w, 0.05, 0.6);
        let rgb = raw.map(|v| v.powf(1.0 / 2.2));
        let camera = if i % 2 == 0 { "cam-a" } else { "cam-b" };
        let raw_name = format!("raw_{i:02}.png");
        let rgb_name = format!("rgb_{i:02}.png");
        save_raw(&raw, &sidecar(camera), &dir.join(&raw_name)).unwrap();
        save_rgb(&rgb, &dir.join(&rgb_name)).unwrap();
        entries.push(ManifestEntry {
            rgb_path: Some(rgb_name.into()),
            raw_path: Some(raw_name.clone().into()),
            meta_path: Some(sidecar_path(Path::new(&raw_name))),
            pred_path: None,
            camera_id: camera.into(),
        });
    }
    let path = dir.join("manifest.json");
    Manifest::new(entries).save(&path).unwrap();
    path
}

/// Rewrites a manifest so every entry predicts its own ground truth.
pub fn with_pred_equal_gt(manifest: &Path) -> PathBuf {
    let mut m = Manifest::load(manifest).unwrap();
    for e in &mut m.entries {
        e.pred_path = e.raw_path.clone();
    }
    let out = manifest.with_file_name("manifest_pred.json");
    m.save(&out).unwrap();
    out
}

/// A run configuration small enough for tests.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    let t = &mut cfg.train;
    t.input_size = 16;
    t.batch_size = 2;
    t.batch_pp_rand = 2;
    t.batch_pp_mt = 0;
    t.epochs = 2;
    t.learning_rate = 1e-3;
    t.model = ModelConfig {
        k: 5,
        selector_size: 8,
    };
    cfg
}

pub fn write_config(path: &Path, cfg: &RunConfig) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

pub fn revisp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revisp"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(name, bytes)` of every file in `dir`, sorted by name.
pub fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}
