#![allow(dead_code)]

pub mod toy;

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use perceptlab::backbone::{BackboneId, WeightSource};
use perceptlab::data::{load_manifest, Dataset};
use perceptlab::task::TaskSpec;
use perceptlab::trainer::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textured image whose mean brightness is close to `level` in [0, 1].
pub fn brightness_image(level: f64, size: u32, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(size, size, |_, _| {
        let jitter: f64 = rng.random_range(-0.08..0.08);
        let v = ((level + jitter).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

/// Writes `n` brightness images and a `path,label` manifest whose label is
/// the image's mean brightness. Returns the manifest path.
pub fn brightness_dataset(dir: &Path, n: usize, size: u32, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = String::from("path,label\n");
    for i in 0..n {
        let level = 0.1 + 0.8 * (i as f64 + rng.random::<f64>()) / n as f64;
        let img = brightness_image(level, size, &mut rng);
        let mean = img.pixels().map(|p| f64::from(p[0])).sum::<f64>() / (size * size) as f64 / 255.0;
        let name = format!("img/b{seed}_{i:03}.png");
        img.save(dir.join(&name)).unwrap();
        rows.push_str(&format!("{name},{mean:.6}\n"));
    }
    let manifest = dir.join(format!("manifest_{seed}.csv"));
    std::fs::write(&manifest, rows).unwrap();
    manifest
}

/// Classes by dominant colour channel: red, green, blue.
pub fn colour_dataset(dir: &Path, n: usize, size: u32, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = String::from("path,label\n");
    for i in 0..n {
        let class = i % 3;
        let img = RgbImage::from_fn(size, size, |_, _| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let base = if c == class { 200.0 } else { 60.0 };
                *v = (base + rng.random_range(-30.0..30.0f64)) as u8;
            }
            Rgb(px)
        });
        let name = format!("img/c{seed}_{i:03}.png");
        img.save(dir.join(&name)).unwrap();
        rows.push_str(&format!("{name},{class}\n"));
    }
    let manifest = dir.join(format!("colour_{seed}.csv"));
    std::fs::write(&manifest, rows).unwrap();
    manifest
}

pub fn load(manifest: &Path, id: &str, task: TaskSpec) -> Dataset {
    Dataset {
        id: id.into(),
        samples: load_manifest(manifest, id, &task).unwrap(),
        task,
    }
}

/// Small, fast configuration on the micro backbone.
pub fn micro_config(task: TaskSpec) -> RunConfig {
    let mut cfg = RunConfig::new(task);
    cfg.backbone = BackboneId::CLIP_MICRO_32;
    cfg.weights = WeightSource::Random { seed: 11 };
    cfg.lora.rank = 4;
    cfg.learning_rates = vec![1e-3];
    cfg.max_epochs = 3;
    cfg.patience = 3;
    cfg.batch_size = 8;
    cfg
}
