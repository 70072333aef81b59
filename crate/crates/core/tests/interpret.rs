mod common;

use candle_core::{DType, Device, Tensor, D};
use image::RgbImage;
use perceptlab::backbone::{
    max_abs_diff, AdaptedEncoder, BackboneId, ForwardOptions, HeadId, HeadMask, LoraConfig,
    RecordAttention, WeightSource,
};
use perceptlab::heads::{HeadConfig, TaskHead};
use perceptlab::interpret::{
    analysis_view, attention_diff_map, head_importance, importance_table, masked_predict,
    prediction_deltas, render_overlay, top_effect_images, AblationOptions, DeltaKind,
};
use perceptlab::task::{TaskKind, TaskSpec};
use perceptlab::trainer::TaskModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn encoder(seed: u64) -> AdaptedEncoder {
    let lora = LoraConfig {
        rank: 4,
        ..LoraConfig::default()
    };
    AdaptedEncoder::inject_lora(BackboneId::CLIP_MICRO_32, &WeightSource::Random { seed }, &lora, 1).unwrap()
}

fn perturb_adapters(enc: &AdaptedEncoder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0f32, 0.3).unwrap();
    for (_, var, _) in enc.adapter_params() {
        let v: Vec<f32> = (0..var.elem_count()).map(|_| normal.sample(&mut rng)).collect();
        var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
}

fn model(encoder: AdaptedEncoder, task: TaskSpec) -> TaskModel {
    let shape = HeadConfig::default()
        .resolve(encoder.embed_dim(), task.output_dim().unwrap())
        .unwrap();
    TaskModel {
        encoder,
        head: TaskHead::new(shape, 9).unwrap(),
        task,
    }
}

fn corpus(n: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| analysis_view(&common::brightness_image(0.1 + 0.8 * i as f64 / n as f64, 256, &mut rng)))
        .collect()
}

#[test]
fn toy_transformer_matches_hand_computation() {
    let enc = common::toy::encoder();
    let px = common::toy::pixel_tensor();
    let pooled = |mask| {
        let opts = ForwardOptions {
            mask,
            ..ForwardOptions::inference()
        };
        let out = enc.forward(&px, &opts).unwrap().pooled;
        assert_eq!(out.dtype(), DType::F64);
        out.squeeze(0).unwrap().to_vec1::<f64>().unwrap()
    };
    let plain = pooled(None);
    let masked = pooled(Some(HeadMask::cls_row(HeadId::new(0, 0))));
    let oracle_plain = common::toy::oracle_forward(false);
    let oracle_masked = common::toy::oracle_forward(true);
    for (a, b) in plain.iter().zip(&oracle_plain) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    for (a, b) in masked.iter().zip(&oracle_masked) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    assert!(plain.iter().zip(&masked).any(|(a, b)| (a - b).abs() > 1e-4));
}

/// Zeroes the query projection of `head` so its attention is uniform.
fn make_uniform(enc: &AdaptedEncoder, head: HeadId) {
    let mut base = enc.base_tensors().unwrap();
    let hd = enc.architecture().head_dim();
    let d = enc.embed_dim();
    let lo = head.head * hd;
    for suffix in ["weight", "bias"] {
        let name = format!("layers.{}.self_attn.qkv.{suffix}", head.layer);
        let t = &base[&name];
        let mut v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let width = if suffix == "weight" { d } else { 1 };
        for r in lo..lo + hd {
            v[r * width..(r + 1) * width].fill(0.0);
        }
        base.insert(name, Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap());
    }
    enc.load_base_tensors(&base).unwrap();
}

#[test]
fn uniform_head_has_zero_importance() {
    let head = HeadId::new(1, 2);
    for task in [TaskSpec::new(TaskKind::Iqa), TaskSpec::classification(4)] {
        let enc = encoder(3);
        make_uniform(&enc, head);
        let m = model(enc, task);
        let views = corpus(5, 1);
        assert_eq!(head_importance(&m, &views, head, AblationOptions::default()).unwrap(), 0.0);
        assert!(head_importance(&m, &views, HeadId::new(1, 1), AblationOptions::default()).unwrap() > 0.0);
    }
}

#[test]
fn masked_rows_stay_stochastic() {
    let enc = encoder(4);
    perturb_adapters(&enc, 1);
    let m = model(enc, TaskSpec::new(TaskKind::Iqa));
    let px = m.normalizer().batch(&corpus(2, 2)).unwrap();
    let t = m.encoder.architecture().num_tokens();
    for mask in [HeadMask::cls_row(HeadId::new(0, 1)), HeadMask { scope: perceptlab::backbone::MaskScope::FullMatrix, ..HeadMask::cls_row(HeadId::new(1, 3)) }] {
        let out = m
            .encoder
            .forward(
                &px,
                &ForwardOptions {
                    mask: Some(mask),
                    record: RecordAttention::All,
                    ..ForwardOptions::inference()
                },
            )
            .unwrap();
        for (_, probs) in &out.attentions {
            let sums = probs.to_dtype(DType::F64).unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-6), "{sums:?}");
        }
        let (_, p) = &out.attentions[mask.head.layer];
        let row = p.get(0).unwrap().get(mask.head.head).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        assert!(row.iter().all(|v| (v - 1.0 / t as f32).abs() < 1e-9));
    }
}

#[test]
fn importance_table_matches_recomputation() {
    let enc = encoder(5);
    perturb_adapters(&enc, 2);
    let m = model(enc, TaskSpec::new(TaskKind::Memorability));
    let views = corpus(4, 3);
    let table = importance_table(&m, &views, AblationOptions::default()).unwrap();
    let arch = m.encoder.architecture();
    assert_eq!(table.entries.len(), arch.num_layers * arch.num_heads);
    assert_eq!(table.delta, DeltaKind::Score);
    assert_eq!(table.n_images, 4);

    let baseline = m.outputs(&views).unwrap();
    for e in &table.entries {
        let head = HeadId::new(e.layer, e.head);
        let masked = masked_predict(&m, &views, head, AblationOptions::default()).unwrap();
        let mean = baseline
            .iter()
            .zip(&masked)
            .map(|(b, x)| (b[0] - x[0]).abs())
            .sum::<f64>()
            / 4.0;
        assert!((mean - e.importance).abs() < 1e-12);
        assert!(e.importance.is_finite() && e.importance >= 0.0);
    }
    let values: Vec<f64> = table.entries.iter().map(|e| e.importance).collect();
    let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 0.0);

    let single = head_importance(&m, &views[..1], HeadId::new(0, 0), AblationOptions::default()).unwrap();
    assert_eq!(single, prediction_deltas(&m, &views[..1], HeadId::new(0, 0), AblationOptions::default()).unwrap()[0]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("importance.csv");
    table.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("layer,head,importance,n_images\n"));
    assert_eq!(text.lines().count(), 1 + table.entries.len());

    let deltas = &table.deltas[0];
    let top = top_effect_images(deltas, 4).unwrap();
    let mut sorted = top.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
    let again = importance_table(&m, &views, AblationOptions::default()).unwrap();
    assert_eq!(top_effect_images(&again.deltas[0], 2).unwrap(), top[..2]);
}

#[test]
fn invalid_head_is_rejected() {
    let m = model(encoder(6), TaskSpec::new(TaskKind::Iqa));
    let views = corpus(1, 4);
    assert!(masked_predict(&m, &views, HeadId::new(2, 0), AblationOptions::default()).is_err());
    assert!(masked_predict(&m, &views, HeadId::new(0, 4), AblationOptions::default()).is_err());
}

#[test]
fn attention_diff_is_zero_for_identical_models() {
    let tuned = encoder(7);
    let base = encoder(7);
    let view = corpus(1, 5).remove(0);
    let head = HeadId::new(1, 0);
    let diff = attention_diff_map(&tuned, &base, &view, head).unwrap();
    assert_eq!(diff.grid_size, 224 / 32);
    assert_eq!(diff.grid.len(), 49);
    assert_eq!(diff.map.len(), 224 * 224);
    assert!(diff.grid.iter().chain(&diff.map).all(|&v| v == 0.0));

    perturb_adapters(&tuned, 3);
    let diff = attention_diff_map(&tuned, &base, &view, head).unwrap();
    assert!(diff.max_abs() > 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = render_overlay(&view, &diff, dir.path(), "sample").unwrap();
    assert_eq!(path.file_name().unwrap(), "sample_1_0.png");
    let img = image::open(&path).unwrap();
    assert_eq!((img.width(), img.height()), (224, 224));

    let other = AdaptedEncoder::inject_lora(
        BackboneId::CLIP_BASE_32,
        &WeightSource::Zeros,
        &LoraConfig::default(),
        0,
    )
    .unwrap();
    assert!(attention_diff_map(&tuned, &other, &view, head).is_err());
    let _ = max_abs_diff;
}
