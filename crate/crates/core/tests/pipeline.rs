use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semtrack::adapters::{init_adapters, AdapterKind, AdapterSet};
use semtrack::encoder::EncoderConfig;
use semtrack::memory::{encode_memory, MemoryBank, MemoryOrigin};
use semtrack::pipeline::{
    bce_loss, build_pseudo_video, clip_gradients, dice_loss, load_checkpoint, probabilities, save_checkpoint,
    segment_target, training_forward, Model, TrainerConfig, TrainingClip,
};
use semtrack::promptdec::Prompt;
use semtrack::Error;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 4,
        num_blocks: 3,
        num_heads: 2,
        mlp_ratio: 2,
        adapted_layers: vec![],
    }
}

fn small() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 3,
        num_heads: 2,
        mlp_ratio: 2,
        adapted_layers: vec![],
    }
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
    Array3::from_shape_fn((size, size, 3), |_| rng.random::<f64>())
}

fn mask(rng: &mut ChaCha8Rng, size: usize) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 })
}

fn adapted(cfg: &EncoderConfig, kind: AdapterKind, seed: u64) -> AdapterSet {
    let b = if kind == AdapterKind::Lora { 2 } else { cfg.embed_dim / 2 };
    let mut a = init_adapters(cfg, kind, b, seed).unwrap();
    a.randomize_up(seed + 100, 0.3);
    a
}

fn clip(seed: u64, size: usize, frames: usize) -> TrainingClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = (image(&mut rng, size), mask(&mut rng, size));
    let targets = (0..frames).map(|_| (image(&mut rng, size), mask(&mut rng, size))).collect();
    TrainingClip {
        reference,
        targets,
        prompt: None,
    }
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v))
}

#[test]
fn reference_order_does_not_change_predictions() {
    let model = Model::new(&small(), 1).unwrap();
    let adapters = adapted(&small(), AdapterKind::AdaptFormer, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let refs: Vec<_> = (0..3).map(|_| (image(&mut rng, 16), Prompt::Mask(mask(&mut rng, 16)))).collect();
    let target = image(&mut rng, 16);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let predict = |p: &[usize; 3]| {
        let pv = build_pseudo_video(p.iter().map(|&i| refs[i].clone()).collect(), target.clone()).unwrap();
        segment_target(&model, Some(&adapters), &pv).unwrap()
    };
    let base = predict(&perms[0]);
    for p in &perms[1..] {
        let other = predict(p);
        assert!(max_diff(&base.logits, &other.logits) < 1e-9, "{p:?}");
        for ((a, b), l) in base.binary.iter().zip(other.binary.iter()).zip(base.logits.iter()) {
            assert!(a == b || l.abs() < 1e-9);
        }
    }
}

#[test]
fn any_number_of_shots_works() {
    let model = Model::new(&small(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = image(&mut rng, 16);
    for k in [1, 2, 5] {
        let refs: Vec<_> = (0..k).map(|_| (image(&mut rng, 16), Prompt::Mask(mask(&mut rng, 16)))).collect();
        let pv = build_pseudo_video(refs.clone(), target.clone()).unwrap();
        assert_eq!(pv.shots(), k);
        let pred = segment_target(&model, None, &pv).unwrap();
        assert_eq!(pred.logits.dim(), (16, 16));
        assert!(pred.logits.iter().all(|v| v.is_finite()));

        let mut bank = MemoryBank::new();
        for (i, (img, p)) in refs.iter().enumerate() {
            bank.append(model.reference_entry(img, p, None, &format!("r{i}")).unwrap());
        }
        assert_eq!(bank.len(), k);
        let direct = model.predict(&model.encode(&target, None, "t").unwrap(), &bank).unwrap();
        assert!(max_diff(&direct.logits, &pred.logits) < 1e-12);
    }
    assert!(matches!(build_pseudo_video(vec![], target), Err(Error::Input(_))));
}

#[test]
fn two_frame_loss_steps_through_inference_components() {
    let model = Model::new(&tiny(), 6).unwrap();
    let cfg = TrainerConfig {
        frames_per_clip: 2,
        bce_weight: 0.7,
        dice_weight: 1.3,
        ..TrainerConfig::default()
    };
    for kind in AdapterKind::ALL {
        let adapters = adapted(&tiny(), kind, 7);
        let c = clip(8, 8, 2);
        let loss = training_forward(&model, Some(&adapters), &c, &cfg).unwrap();

        let feats = |img: &Array3<f64>| model.encode(img, Some(&adapters), "f").unwrap();
        let mut bank = MemoryBank::new();
        bank.append(encode_memory(&feats(&c.reference.0), &c.reference.1, &model.downsampler, MemoryOrigin::Reference).unwrap());
        let mut totals = Vec::new();
        for (j, (img, gt)) in c.targets.iter().enumerate() {
            let f = feats(img);
            let pred = model.predict(&f, &bank).unwrap();
            assert!(max_diff(&pred.logits, &loss.logits[j]) < 1e-10);
            let bce = bce_loss(&pred.logits, gt).unwrap();
            let dice = dice_loss(&probabilities(&pred.logits), gt).unwrap();
            assert!((bce - loss.frames[j].bce).abs() < 1e-10);
            assert!((dice - loss.frames[j].dice).abs() < 1e-10);
            totals.push(0.7 * bce + 1.3 * dice);
            if j == 0 {
                let soft = probabilities(&pred.logits);
                assert!(max_diff(&soft, &loss.pseudo_masks[0]) < 1e-12);
                bank.append(encode_memory(&f, &soft, &model.downsampler, MemoryOrigin::PseudoReference).unwrap());
            }
        }
        assert_eq!(loss.pseudo_masks.len(), 1);
        assert!((loss.total - (totals[0] + totals[1]) / 2.0).abs() < 1e-10, "{kind}");
    }
}

#[test]
fn ground_truth_logits_have_near_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let gt = mask(&mut rng, 16);
        let logits = gt.mapv(|y| if y > 0.5 { 20.0 } else { -20.0 });
        let total = bce_loss(&logits, &gt).unwrap() + dice_loss(&probabilities(&logits), &gt).unwrap();
        assert!(total < 1e-3, "{total}");
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let model = Model::new(&tiny(), 12).unwrap();
    let cfg = TrainerConfig {
        frames_per_clip: 2,
        ..TrainerConfig::default()
    };
    let c = clip(13, 8, 2);
    let h = 1e-5;
    for (s, kind) in AdapterKind::ALL.into_iter().enumerate() {
        let adapters = adapted(&tiny(), kind, 14 + s as u64);
        let (loss, grads) = clip_gradients(&model, &adapters, &c, &cfg, None).unwrap();
        let fixed = loss.pseudo_masks.clone();
        let at = |a: &AdapterSet| clip_gradients(&model, a, &c, &cfg, Some(&fixed)).unwrap().0.total;
        assert!((at(&adapters) - loss.total).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(15 + s as u64);
        let n = adapters.flat_len();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let i = rng.random_range(0..n);
            let (mut plus, mut minus) = (adapters.clone(), adapters.clone());
            plus.flat_set(i, adapters.flat_get(i) + h);
            minus.flat_set(i, adapters.flat_get(i) - h);
            let numeric = (at(&plus) - at(&minus)) / (2.0 * h);
            let analytic = grads.flat_get(i);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "{kind}: relative error {worst}");
    }
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&small(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pv = build_pseudo_video(vec![(image(&mut rng, 16), Prompt::Mask(mask(&mut rng, 16)))], image(&mut rng, 16)).unwrap();
    for kind in AdapterKind::ALL {
        let a = adapted(&small(), kind, 18);
        let path = dir.path().join(format!("{kind}.safetensors"));
        save_checkpoint(&a, &model, &path).unwrap();
        let back = load_checkpoint(&path, &model).unwrap();
        assert_eq!(back, a);
        let p1 = segment_target(&model, Some(&a), &pv).unwrap();
        let p2 = segment_target(&model, Some(&back), &pv).unwrap();
        assert_eq!(p1, p2);
    }
    let other = Model::new(&small(), 99).unwrap();
    let path = dir.path().join("adaptformer.safetensors");
    assert!(matches!(load_checkpoint(&path, &other), Err(Error::Compatibility(_))));
}

#[test]
fn frozen_weights_are_pinned() {
    let model = Model::new(&EncoderConfig::default(), 0).unwrap();
    assert_eq!(model.frozen_checksum(), "11a28a1f2c46b785ab132aa4ab2bd36d2cb608a99f5e7bd24d20ea3a653adec8");
}
