use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sal_core::model::{
    global_average_pool, load_pretrained_encoder, Checkpoint, Encoder, ModelConfig,
    PretrainHeads, SegmentationModel,
};
use sal_core::nn::Parameterized;
use sal_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: (usize, usize, usize), r: &mut ChaCha8Rng) -> Array3<f32> {
    Array3::from_shape_fn(shape, |_| StandardNormal.sample(r))
}

fn small() -> ModelConfig {
    ModelConfig {
        base_width: 4,
        proj_dim: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn deepest_scale_of_64_input_is_8x8() {
    let cfg = ModelConfig::default();
    let enc = Encoder::new(&small(), &mut rng(0)).unwrap();
    let f = enc.feature(&randn((1, 64, 64), &mut rng(1)), 4).unwrap();
    assert_eq!(f.dim(), (32, 8, 8));
    assert_eq!(cfg.stride_at(4), 8);
    assert_eq!(cfg.grid_at(4, 64, 64).unwrap(), (8, 8));
    assert_eq!(cfg.grid_at(2, 64, 48).unwrap(), (32, 24));
    assert!(cfg.grid_at(4, 60, 64).is_err());
}

#[test]
fn same_seed_same_initialization() {
    let a = SegmentationModel::new(&small(), 4, &mut rng(5)).unwrap();
    let b = SegmentationModel::new(&small(), 4, &mut rng(5)).unwrap();
    let c = SegmentationModel::new(&small(), 4, &mut rng(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn forward_is_pure_and_shaped() {
    let m = SegmentationModel::new(&small(), 3, &mut rng(7)).unwrap();
    let x = randn((1, 32, 16), &mut rng(8));
    let y1 = m.predict(&x).unwrap();
    let y2 = m.predict(&x).unwrap();
    assert_eq!(y1.dim(), (3, 32, 16));
    assert_eq!(y1, y2);
    assert!(m.predict(&randn((1, 20, 16), &mut rng(9))).is_err());
}

#[test]
fn invalid_channel_plan_is_rejected() {
    let bad = ModelConfig {
        base_width: 0,
        ..ModelConfig::default()
    };
    assert!(Encoder::new(&bad, &mut rng(0)).is_err());
    let deep = ModelConfig {
        stages: 9,
        ..ModelConfig::default()
    };
    assert!(deep.validate().is_err());
}

#[test]
fn pooling_identities() {
    let mut r = rng(10);
    let heads = PretrainHeads::new(&small(), 4, &mut r).unwrap();
    let constant = Array3::from_elem((32, 4, 4), 0.7f32);
    let pooled = global_average_pool(&constant);
    assert!(pooled.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    let m = randn((32, 4, 6), &mut r);
    let t = m.clone().permuted_axes([0, 2, 1]).as_standard_layout().into_owned();
    let (a, b) = (heads.global_feature(&m), heads.global_feature(&t));
    assert!(a.0.iter().zip(b.0.iter()).all(|(x, y)| (x - y).abs() < 1e-5));
    let zero = heads.global_feature(&Array3::zeros((32, 4, 4)));
    let bias: Array1<f64> = heads.global.bias.value.iter().map(|&v| v as f64).collect();
    assert_eq!(zero.0, bias);
}

/// Directional derivative of `<logits, G>` against the accumulated
/// gradient.
#[test]
fn segmentation_backward_matches_directional_difference() {
    let mut r = rng(11);
    let mut m = SegmentationModel::new(&small(), 3, &mut r).unwrap();
    let x = randn((1, 16, 16), &mut r);
    let g = randn((3, 16, 16), &mut r);
    let (_, trace) = m.forward_train(&x).unwrap();
    m.zero_grad();
    m.backward(&trace, &g);
    let mut dirs: Vec<Vec<f32>> = Vec::new();
    m.visit("", &mut |_, p| {
        dirs.push((0..p.len()).map(|_| StandardNormal.sample(&mut r)).collect());
    });
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f32>().sqrt();
    dirs.iter_mut().flatten().for_each(|v| *v /= norm);
    let mut dot = 0.0f64;
    let mut i = 0;
    m.visit("", &mut |_, p| {
        dot += p.grad.iter().zip(&dirs[i]).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>();
        i += 1;
    });
    let objective = |m: &SegmentationModel| -> f64 {
        let y = m.predict(&x).unwrap();
        y.iter().zip(g.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    };
    let eps = 1e-3f32;
    let shifted = |sign: f32| {
        let mut k = m.clone();
        let mut i = 0;
        k.visit_mut("", &mut |_, p| {
            for (v, d) in p.value.iter_mut().zip(&dirs[i]) {
                *v += sign * eps * d;
            }
            i += 1;
        });
        objective(&k)
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps as f64);
    assert!(
        (numeric - dot).abs() < 2e-2 * dot.abs().max(1.0),
        "{numeric} vs {dot}"
    );
}

#[test]
fn checkpoint_round_trip_and_encoder_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(12);
    let source = SegmentationModel::new(&small(), 4, &mut r).unwrap();
    let heads = PretrainHeads::new(&small(), 4, &mut r).unwrap();
    let mut ckpt = Checkpoint::new("pretrain", serde_json::json!({"k": 1}));
    ckpt.push_module("encoder.", &source.encoder);
    ckpt.push_module("heads.", &heads);
    ckpt.meta.step = 17;
    let path = dir.path().join("ckpt/encoder.bin");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);

    let mut target = SegmentationModel::new(&small(), 4, &mut rng(99)).unwrap();
    let decoder_before = target.decoder.clone();
    let manifest = load_pretrained_encoder(&mut target, &loaded).unwrap();
    assert_eq!(target.encoder, source.encoder);
    assert_eq!(target.decoder, decoder_before);
    assert_eq!(manifest.loaded.len(), 32);
    assert!(manifest.loaded.iter().any(|n| n == "encoder.stage4.norm2.bias"));
    assert!(manifest.ignored.iter().all(|n| n.starts_with("heads.")));
    assert_eq!(manifest.ignored.len(), 4);

    // Saving the transferred encoder reproduces the same bits.
    let mut again = Checkpoint::new("pretrain", serde_json::Value::Null);
    again.push_module("encoder.", &target.encoder);
    for t in &again.meta.tensors {
        assert_eq!(again.tensor(&t.name).unwrap(), loaded.tensor(&t.name).unwrap());
    }

    let wide = ModelConfig {
        base_width: 8,
        ..small()
    };
    let mut other = SegmentationModel::new(&wide, 4, &mut rng(1)).unwrap();
    match load_pretrained_encoder(&mut other, &loaded) {
        Err(Error::ParamMismatch(names)) => {
            assert!(names[0].starts_with("encoder.stage1.conv1.weight"), "{names:?}")
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn corrupted_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = SegmentationModel::new(&small(), 2, &mut rng(3)).unwrap();
    let mut ckpt = Checkpoint::new("finetune", serde_json::Value::Null);
    ckpt.push_module("", &m);
    let path = dir.path().join("m.bin");
    ckpt.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
