use mrflow::cnf::gaussian_logp;
use mrflow::dataio::rng::{derive, seeded};
use mrflow::dataio::{Config, Dataset};
use mrflow::mrcnf::train::{train_level, TrainOptions, TrainState};
use mrflow::mrcnf::MrcnfModel;
use mrflow::multires::{downsample_avg, TransformKind};
use mrflow::tensor::Tensor;
use rand::Rng as _;

fn config(levels: usize, kind: TransformKind) -> Config {
    Config {
        levels,
        transform: kind,
        net_hidden: 6,
        net_blocks: 2,
        solver_steps: 4,
        ..Config::default()
    }
}

fn random_model(levels: usize, kind: TransformKind, shape: [usize; 3], seed: u64) -> MrcnfModel {
    let mut model = MrcnfModel::new(&config(levels, kind), shape).unwrap();
    let mut rng = seeded(seed);
    for b in &mut model.blocks {
        b.net.randomize_output(0.2, &mut rng);
    }
    model
}

fn random_image(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn concurrent_levels_agree_with_sequential() {
    for kind in [TransformKind::Unimodular, TransformKind::Haar] {
        let model = random_model(3, kind, [1, 8, 8], 1);
        let x = random_image([1, 8, 8], 2);
        let a = model.log_likelihood(&x, 9, false).unwrap();
        let b = model.log_likelihood(&x, 9, true).unwrap();
        assert!((a.logp - b.logp).abs() < 1e-10);
        assert_eq!(a.levels.len(), 3);
        let parts: f64 = a.levels.iter().map(|t| t.logp()).sum();
        assert!((parts - a.logp).abs() < 1e-10);
    }
}

#[test]
fn single_level_is_the_plain_flow() {
    let model = random_model(1, TransformKind::Unimodular, [2, 4, 4], 3);
    let x = random_image([2, 4, 4], 4);
    let ll = model.log_likelihood(&x, 21, false).unwrap();
    let out = model.blocks[0].forward_logp(&x, None, &mut derive(21, &[1])).unwrap();
    let plain = gaussian_logp(&out.z, 1.0).unwrap() - out.delta_logp;
    assert_eq!(ll.logp.to_bits(), plain.to_bits());
}

#[test]
fn level_terms_depend_only_on_their_own_block() {
    let model = random_model(2, TransformKind::Unimodular, [1, 8, 8], 5);
    let x = random_image([1, 8, 8], 6);
    let base = model.log_likelihood(&x, 1, false).unwrap();
    let mut other = model.clone();
    other.blocks[1].net.randomize_output(0.5, &mut seeded(77));
    let changed = other.log_likelihood(&x, 1, false).unwrap();
    assert_eq!(base.levels[0], changed.levels[0]);
    assert_ne!(base.levels[1], changed.levels[1]);
}

#[test]
fn training_one_level_leaves_the_others_untouched() {
    let cfg = Config {
        epochs: 1,
        batch: 2,
        ..config(2, TransformKind::Unimodular)
    };
    let data = Dataset::load("builtin:two_gaussians:n=4,size=8").unwrap();
    let mut model = MrcnfModel::new(&cfg, data.shape).unwrap();
    let before = model.clone();
    let opts = TrainOptions::from_config(&cfg);
    let mut st = TrainState::new(&model.blocks[0], opts.lr);
    train_level(&mut model, 1, &data, &opts, &mut st, |_, _| Ok(())).unwrap();
    assert_ne!(model.blocks[0], before.blocks[0]);
    assert_eq!(model.blocks[1], before.blocks[1]);
}

#[test]
fn encode_decode_round_trip() {
    let model = random_model(2, TransformKind::Unimodular, [3, 8, 8], 7);
    let x = random_image([3, 8, 8], 8);
    let z = model.encode(&x).unwrap();
    let back = model.decode(&z).unwrap();
    let err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn generated_pyramids_are_mean_consistent() {
    for kind in [TransformKind::Unimodular, TransformKind::Haar] {
        let model = random_model(3, kind, [1, 8, 8], 9);
        for i in 0..5 {
            let pyr = model.generate_pyramid(0.8, 3, i).unwrap();
            for s in 0..2 {
                let down = downsample_avg(&pyr[s]).unwrap();
                let err = down.data().iter().zip(pyr[s + 1].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "{kind:?} level {s}: {err}");
            }
        }
    }
}

#[test]
fn generation_is_seed_determined() {
    let model = random_model(2, TransformKind::Unimodular, [1, 4, 4], 10);
    let a = model.generate_pyramid(1.0, 5, 2).unwrap();
    assert_eq!(a, model.generate_pyramid(1.0, 5, 2).unwrap());
    assert_ne!(a, model.generate_pyramid(1.0, 5, 3).unwrap());
}
