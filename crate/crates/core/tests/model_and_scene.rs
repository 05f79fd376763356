use mpvbgs::scene::{evaluate, frame_stream, psnr, windows, EvalSet, SceneFamily, SceneSpec};
use mpvbgs::vbgs::{
    selection_probabilities, train, Checkpoint, HotFunctions, TrainConfig, TrainPrecision, Trainer, Vec3,
};
use mpvbgs::{ExecMode, PrecisionFormat, Tensor};
use proptest::prelude::*;

fn small_config() -> TrainConfig {
    TrainConfig {
        components: 24,
        batch: 16,
        n_reassign: 4,
        ..TrainConfig::default()
    }
}

fn vec3s(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3).map(Vec3::from_row_slice).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn responsibilities_are_row_stochastic(seed in 0u64..200, p in 1usize..40) {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let mut t = Trainer::new(small_config(), &spec.bounds(), TrainPrecision::uniform(PrecisionFormat::Fp64)).unwrap();
        let frame = frame_stream(&spec, 3, 64, 0.5).unwrap().next().unwrap();
        t.step(&frame, None).unwrap();
        let batch = frame_stream(&spec, 3, p, 0.5).unwrap().nth(1).unwrap();
        for f in [PrecisionFormat::Fp64, PrecisionFormat::Fp32] {
            let mut hot = HotFunctions::new(24, ExecMode::FusedContraction, TrainPrecision::uniform(f));
            let (elbo, r) = hot.elbo(&t.model, &batch).unwrap();
            prop_assert_eq!(elbo.len(), p);
            for i in 0..p {
                let row = r.row(i);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn psnr_is_permutation_invariant(vals in prop::collection::vec(0.0..1.0f64, 6..60), shift in 1usize..20) {
        let n = vals.len() / 3 * 3;
        let truth = vec3s(&vals[..n]);
        let pred: Vec<Vec3> = truth.iter().map(|c| c.map(|v| (v + 0.05).min(1.0))).collect();
        let k = shift % truth.len();
        let mut t2 = truth.clone();
        let mut p2 = pred.clone();
        t2.rotate_left(k);
        p2.rotate_left(k);
        let a = psnr(&pred, &truth).unwrap();
        let b = psnr(&p2, &t2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn selection_probabilities_form_a_distribution(elbo in prop::collection::vec(-50.0..5.0f64, 1..40), temp in 0.1..10.0f64) {
        let p = selection_probabilities(&elbo, temp);
        prop_assert_eq!(p.len(), elbo.len());
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn psnr_known_values() {
    let truth = vec![Vec3::repeat(0.5); 4];
    assert_eq!(psnr(&truth, &truth).unwrap(), f64::INFINITY);
    // colors live in [0, 1]; an error of 1/255 per channel is 48.13 dB
    let off: Vec<Vec3> = truth.iter().map(|c| c.add_scalar(1.0 / 255.0)).collect();
    let expected = 10.0 * (255.0f64 * 255.0 / 1.0).log10();
    assert!((psnr(&off, &truth).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn frame_streams_are_deterministic_and_cover_the_scene() {
    let spec = SceneSpec::default();
    let a: Vec<Tensor> = frame_stream(&spec, 6, 100, 0.5).unwrap().collect();
    let b: Vec<Tensor> = frame_stream(&spec, 6, 100, 0.5).unwrap().collect();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|f| f.shape() == [100, 6] && f.is_finite()));
    let bounds = spec.bounds();
    let w = windows(&bounds, 6, 0.5);
    assert!((w[0].0 - bounds.min[0]).abs() < 1e-12);
    assert!((w[5].1 - bounds.max[0]).abs() < 1e-12);
    for frame in &a {
        for i in 0..100 {
            let r = frame.row(i);
            for d in 0..3 {
                assert!(r[d] >= bounds.min[d] - 1e-9 && r[d] <= bounds.max[d] + 1e-9);
                assert!((0.0..=1.0).contains(&r[3 + d]));
            }
        }
    }
    let other = SceneSpec {
        seed: 8,
        ..SceneSpec::default()
    };
    assert_ne!(frame_stream(&other, 6, 100, 0.5).unwrap().next().unwrap(), a[0]);
}

#[test]
fn scene_specs_parse_and_validate() {
    let s = SceneSpec::from_toml("family = \"sphere_cluster\"\nextent = [2.0, 2.0, 2.0]\nseed = 1\n").unwrap();
    assert_eq!(s.family, SceneFamily::SphereCluster);
    assert_eq!(SceneSpec::from_toml(&s.to_toml()).unwrap(), s);
    assert!(SceneSpec::from_toml("family = \"box_room\"\nextent = [1.0, 1.0, 1.0]\nseed = 1\nextra = 2\n").is_err());
    let bad = SceneSpec {
        extent: [0.0, 1.0, 1.0],
        ..SceneSpec::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn training_improves_on_the_prior_and_checkpoints_round_trip() {
    let spec = SceneSpec::default();
    let eval = EvalSet::new(&spec, 400).unwrap();
    let cfg = small_config();
    let f = mpvbgs::scene::evaluator(&eval);
    let out = train(
        frame_stream(&spec, 8, 128, 0.5).unwrap(),
        &spec.bounds(),
        &cfg,
        TrainPrecision::uniform(PrecisionFormat::Fp64),
        Some(&f),
    )
    .unwrap();
    let psnrs: Vec<f64> = out.metrics.iter().map(|m| m.psnr_mean.unwrap()).collect();
    assert_eq!(psnrs.len(), 8);
    assert!(psnrs[7] > psnrs[0], "{psnrs:?}");

    let mut t = Trainer::new(cfg, &spec.bounds(), TrainPrecision::uniform(PrecisionFormat::Fp64)).unwrap();
    for frame in frame_stream(&spec, 3, 64, 0.5).unwrap() {
        t.step(&frame, None).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let ck = t.checkpoint();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(evaluate(&back.model, &eval).unwrap(), evaluate(&t.model, &eval).unwrap());
}

#[test]
fn identical_seeds_train_identically() {
    let spec = SceneSpec::default();
    let run = || {
        train(
            frame_stream(&spec, 4, 96, 0.5).unwrap(),
            &spec.bounds(),
            &small_config(),
            TrainPrecision::homogeneous(PrecisionFormat::Fp32),
            None,
        )
        .unwrap()
        .model
    };
    assert_eq!(run(), run());
}
