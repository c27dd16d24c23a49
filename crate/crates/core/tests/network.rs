use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steganalysis_core::nn::checkpoint::{checkpoint_bytes, parse_checkpoint};
use steganalysis_core::nn::{
    train, AdamConfig, AdamState, Mode, NetConfig, PairedDataset, SResNet, Tensor4, TrainConfig,
};
use steganalysis_core::FilterBank;

fn params(net: &mut SResNet<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    net.visit_params(&mut |p| v.extend_from_slice(&p.value));
    v
}

/// 16 pairs where the stego sample carries a faint checkerboard.
fn toy_dataset(seed: u64, pairs: usize) -> PairedDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = PairedDataset::default();
    for _ in 0..pairs {
        let cover: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stego: Vec<f64> = cover
            .iter()
            .enumerate()
            .map(|(i, v)| v + if (i + i / 8) % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        let c = data.push_sample(Tensor4::from_vec([1, 4, 8, 8], cover).unwrap());
        let s = data.push_sample(Tensor4::from_vec([1, 4, 8, 8], stego).unwrap());
        data.pairs.push((c, s));
    }
    data
}

fn run(epochs: usize, seed: u64) -> (SResNet<f64>, AdamState<f64>, Vec<f64>) {
    let data = toy_dataset(1, 16);
    let mut net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), seed).unwrap();
    let config = TrainConfig {
        epochs,
        batch_pairs: 4,
        seed,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(config.adam, &mut net);
    let history = train(&mut net, &data, &config, &mut adam, |_| {}).unwrap();
    (net, adam, history.iter().map(|r| r.loss).collect())
}

#[test]
fn training_is_deterministic() {
    let (mut a, _, la) = run(2, 5);
    let (mut b, _, lb) = run(2, 5);
    assert_eq!(la, lb);
    assert_eq!(params(&mut a), params(&mut b));
}

#[test]
fn learning_rate_decays_per_epoch() {
    let (_, adam, _) = run(3, 6);
    let expected = AdamConfig::default().lr * 0.9f64.powi(3);
    assert!((adam.lr - expected).abs() < 1e-18);
}

#[test]
fn memorizes_small_task() {
    let data = toy_dataset(2, 16);
    let mut net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 7).unwrap();
    let config = TrainConfig {
        epochs: 200,
        batch_pairs: 4,
        seed: 7,
        target_loss: Some(0.05),
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(config.adam, &mut net);
    let history = train(&mut net, &data, &config, &mut adam, |_| {}).unwrap();
    let last = history.last().unwrap();
    assert!(last.data_loss < 0.05, "loss {} after {} epochs", last.data_loss, last.epoch);
}

#[test]
fn too_few_pairs_rejected() {
    let data = toy_dataset(3, 3);
    let mut net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 0).unwrap();
    let config = TrainConfig::default();
    let mut adam = AdamState::new(config.adam, &mut net);
    assert!(train(&mut net, &data, &config, &mut adam, |_| {}).is_err());
}

#[test]
fn divergence_is_reported() {
    let mut data = toy_dataset(4, 4);
    data.samples[0].data_mut()[0] = f64::NAN;
    let mut net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), 0).unwrap();
    let config = TrainConfig {
        epochs: 1,
        batch_pairs: 4,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(config.adam, &mut net);
    let err = train(&mut net, &data, &config, &mut adam, |_| {}).unwrap_err();
    assert!(err.to_string().starts_with("divergence"), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let (mut net, adam, _) = run(1, 8);
    let bytes = checkpoint_bytes(&mut net, 256, Some(&adam));
    let mut restored = parse_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(restored.window_size, 256);
    assert_eq!(restored.adam.as_ref().unwrap(), &adam);
    let mut original = net.clone();
    assert_eq!(params(&mut restored.net), params(&mut original));
    let x = toy_dataset(9, 2).samples[0].clone();
    assert_eq!(
        restored.net.forward(&x, Mode::Infer).unwrap(),
        original.forward(&x, Mode::Infer).unwrap()
    );
    assert_eq!(checkpoint_bytes(&mut restored.net, 256, restored.adam.as_ref()), bytes);
    assert!(parse_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(parse_checkpoint::<f64>(&bad).is_err());
}
