use ddnn::data::{synth_generate, Dataset, Image, MultiViewSample, SplitTag, SynthParams, ABSENT};
use ddnn::model::*;
use ddnn::tensor::block::Parameterized;
use ddnn::tensor::{one_hot, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model(local: AggregationKind, cloud: AggregationKind, seed: u64) -> DdnnModel<f64> {
    let arch = Architecture {
        local,
        cloud,
        ..Architecture::default()
    };
    DdnnModel::new(arch, (0..6).collect(), &mut rng(seed)).unwrap()
}

fn blank_sample() -> MultiViewSample {
    MultiViewSample {
        id: "blank".into(),
        views: vec![Image::blank(); 6],
        device_labels: vec![ABSENT; 6],
        global_label: 0,
    }
}

fn small_data(n: usize, sigma: f64, seed: u64) -> Dataset {
    synth_generate(&SynthParams {
        n_samples: n,
        noise_sigma: sigma,
        seed,
        ..SynthParams::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn forward_is_a_pure_function() {
    let m = model(AggregationKind::Max, AggregationKind::Concat, 1);
    let a = m.forward(&blank_sample()).unwrap();
    let b = m.forward(&blank_sample()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.local_logits.len(), 3);
    assert_eq!(a.cloud_logits.len(), 3);
}

#[test]
fn device_features_have_1024_binary_elements_at_four_filters() {
    let m = model(AggregationKind::Max, AggregationKind::Concat, 2);
    let out = m.forward(&small_data(1, 40.0, 3).samples[0]).unwrap();
    assert_eq!(out.device_features.len(), 6);
    for f in &out.device_features {
        assert_eq!(f.shape(), &[1, 4, 16, 16]);
        assert_eq!(f.len(), 1024);
        assert!(f.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }
}

#[test]
fn dominant_device_sets_max_pooled_local_logits() {
    let mut m = model(AggregationKind::Max, AggregationKind::Max, 3);
    for (d, b) in m.branches.iter_mut().enumerate() {
        b.head.bn.gamma.data_mut().iter_mut().for_each(|g| *g = 0.0);
        let beta = if d == 2 { [10.0, 20.0, 30.0] } else { [0.0, -1.0, 0.5] };
        b.head.bn.beta.data_mut().copy_from_slice(&beta);
    }
    let out = m.forward(&small_data(1, 40.0, 4).samples[0]).unwrap();
    assert_eq!(out.local_logits, vec![10.0, 20.0, 30.0]);
}

#[test]
fn wrong_view_count_is_rejected() {
    let m = model(AggregationKind::Max, AggregationKind::Concat, 4);
    let mut s = blank_sample();
    s.views.truncate(4);
    s.device_labels.truncate(4);
    assert!(m.forward(&s).is_err());
}

#[test]
fn failing_every_device_is_rejected() {
    let m = model(AggregationKind::Average, AggregationKind::Concat, 5);
    let s = blank_sample();
    assert!(m.infer(&[&s], &[false; 6]).is_err());
    assert!(m.infer(&[&s], &[false, true, false, false, false, false]).is_ok());
}

#[test]
fn joint_loss_of_uniform_exits() {
    let logits = ExitLogits {
        local: Tensor::<f64>::zeros(&[1, 3]),
        cloud: Tensor::zeros(&[1, 3]),
    };
    let y = one_hot(&[1], 3);
    let loss = joint_loss(&logits, &y, [1.0, 1.0]).unwrap();
    assert!((loss.total - 2.0 * 3f64.ln() / 3.0).abs() < 1e-12);
}

#[test]
fn joint_loss_is_linear_in_exit_weights() {
    let mut m = model(AggregationKind::Max, AggregationKind::Concat, 6);
    let data = small_data(6, 40.0, 7);
    let samples: Vec<&MultiViewSample> = data.samples.iter().collect();
    let views = m.gather_views(&samples).unwrap();
    let logits = m.forward_train(&views).unwrap();
    let y = one_hot(&data.labels(), 3);
    let full = joint_loss(&logits, &y, [1.0, 1.0]).unwrap();
    let half = joint_loss(&logits, &y, [0.5, 0.5]).unwrap();
    assert!((half.total - 0.5 * full.total).abs() < 1e-12);
    let mixed = joint_loss(&logits, &y, [0.3, 1.7]).unwrap();
    assert!((mixed.total - (0.3 * full.local + 1.7 * full.cloud)).abs() < 1e-12);
}

fn one_step_grads(m: &mut DdnnModel<f64>, data: &Dataset) {
    let samples: Vec<&MultiViewSample> = data.samples.iter().collect();
    let views = m.gather_views(&samples).unwrap();
    let logits = m.forward_train(&views).unwrap();
    let loss = m.joint_loss(&logits, &one_hot(&data.labels(), 3)).unwrap();
    m.backward(&loss.grad_local, &loss.grad_cloud).unwrap();
}

fn grad_norm<P: Parameterized<f64>>(p: &mut P) -> f64 {
    p.params_mut().iter().flat_map(|t| t.grad().unwrap().to_vec()).map(|g| g * g).sum()
}

#[test]
fn zero_cloud_weight_leaves_cloud_gradients_at_zero() {
    let mut m = model(AggregationKind::Max, AggregationKind::Concat, 8);
    m.arch.exit_weights = [1.0, 0.0];
    one_step_grads(&mut m, &small_data(8, 40.0, 9));
    assert_eq!(grad_norm(&mut m.cloud_head), 0.0);
    for b in m.cloud_stack.iter_mut() {
        assert_eq!(grad_norm(b), 0.0);
    }
    assert_eq!(grad_norm(&mut m.cloud_agg), 0.0);
    assert!(grad_norm(&mut m.branches[0]) > 0.0);
}

/// All branches identical and fed the same views: every max is a tie, so
/// MP routes all gradient to device 0, while CC reaches every device.
fn identical_devices(local: AggregationKind, cloud: AggregationKind) -> DdnnModel<f64> {
    let mut m = model(local, cloud, 10);
    let first = m.branches[0].clone();
    for b in m.branches.iter_mut() {
        *b = first.clone();
    }
    m
}

fn same_view_data() -> Dataset {
    let mut data = small_data(8, 40.0, 11);
    for s in data.samples.iter_mut() {
        let view = s.views.iter().find(|v| !v.is_blank()).unwrap().clone();
        s.views = vec![view; 6];
        s.device_labels = vec![s.global_label as i8; 6];
    }
    data
}

#[test]
fn max_pooling_everywhere_only_trains_the_winning_device() {
    let mut m = identical_devices(AggregationKind::Max, AggregationKind::Max);
    one_step_grads(&mut m, &same_view_data());
    assert!(grad_norm(&mut m.branches[0]) > 0.0);
    for b in m.branches.iter_mut().skip(1) {
        assert_eq!(grad_norm(b), 0.0);
    }
}

#[test]
fn concatenation_in_the_cloud_trains_every_device() {
    let mut m = identical_devices(AggregationKind::Max, AggregationKind::Concat);
    one_step_grads(&mut m, &same_view_data());
    for (d, b) in m.branches.iter_mut().enumerate() {
        let conv = b.conv.weights.latent().grad().unwrap().iter().map(|g| g * g).sum::<f64>();
        assert!(conv > 0.0, "device {} conv received no gradient", d);
    }
}

#[test]
fn one_epoch_moves_every_branch_under_concatenation() {
    let data = small_data(8, 40.0, 12);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut rng = rng(0);
    let before = DdnnModel::<f32>::new(cfg.architecture(6), (0..6).collect(), &mut rng).unwrap();
    let mut after = before.clone();
    let history = train(&mut after, &data, &cfg).unwrap();
    assert_eq!(history.len(), 1);
    for (a, b) in before.branches.iter().zip(&after.branches) {
        assert_ne!(a.conv.weights.latent(), b.conv.weights.latent());
    }
}

#[test]
fn same_seed_same_parameters() {
    let data = small_data(20, 40.0, 13);
    let (a, ha) = fit::<f32>(&data, (0..6).collect(), &quick(2)).unwrap();
    let (b, hb) = fit::<f32>(&data, (0..6).collect(), &quick(2)).unwrap();
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    assert_eq!(ha, hb);
    let other = TrainConfig { seed: 1, ..quick(2) };
    let (c, _) = fit::<f32>(&data, (0..6).collect(), &other).unwrap();
    assert_ne!(encode_checkpoint(&a), encode_checkpoint(&c));
}

#[test]
fn joint_loss_falls_on_separable_data() {
    let data = small_data(40, 0.0, 14);
    let (_, history) = fit::<f32>(&data, (0..6).collect(), &quick(100)).unwrap();
    assert_eq!(history.len(), 100);
    let mean = |r: &[EpochStats]| r.iter().map(|e| e.joint_loss).sum::<f64>() / r.len() as f64;
    let first = mean(&history.epochs[..5]);
    let last = mean(&history.epochs[95..]);
    assert!(last < first, "smoothed joint loss {} -> {}", first, last);
}

#[test]
fn empty_training_set_is_rejected() {
    let empty = Dataset::new(Vec::new(), SplitTag::Train);
    let mut m = DdnnModel::<f32>::new(Architecture::default(), (0..6).collect(), &mut rng(0)).unwrap();
    assert!(train(&mut m, &empty, &quick(1)).is_err());
    assert!(fit::<f32>(&small_data(4, 1.0, 0), (0..6).collect(), &TrainConfig { epochs: 0, ..quick(1) }).is_err());
}

#[test]
fn individual_model_uses_one_device_and_beats_chance() {
    let data = synth_generate(&SynthParams {
        n_samples: 60,
        noise_sigma: 0.0,
        absence_prob: vec![0.0; 6],
        seed: 15,
        ..SynthParams::default()
    })
    .unwrap();
    let a = train_individual::<f32>(2, &data, &quick(10)).unwrap();
    let b = train_individual::<f32>(2, &data, &quick(10)).unwrap();
    assert_eq!(a.device, 2);
    assert_eq!(a.branch.conv.weights.bits(), b.branch.conv.weights.bits());
    assert!(a.accuracy(&data).unwrap() > 100.0 / 3.0);

    // other devices' views cannot influence the prediction
    let mut scrambled = data.clone();
    for s in scrambled.samples.iter_mut() {
        for d in [0, 1, 3, 4, 5] {
            s.views[d] = Image::blank();
        }
    }
    let all: Vec<&MultiViewSample> = data.samples.iter().collect();
    let scr: Vec<&MultiViewSample> = scrambled.samples.iter().collect();
    assert_eq!(a.predict(&all).unwrap(), a.predict(&scr).unwrap());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let data = small_data(16, 40.0, 16);
    for (local, cloud) in [
        (AggregationKind::Max, AggregationKind::Concat),
        (AggregationKind::Concat, AggregationKind::Average),
    ] {
        let cfg = TrainConfig { local, cloud, ..quick(1) };
        let (m, _) = fit::<f32>(&data, vec![5, 0, 3], &cfg).unwrap();
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], MAGIC);
        let loaded: DdnnModel<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&loaded), bytes);
        assert_eq!(loaded.device_ids, vec![5, 0, 3]);
        for s in &data.samples {
            assert_eq!(m.forward(s).unwrap(), loaded.forward(s).unwrap());
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (m, _) = fit::<f32>(&small_data(8, 40.0, 17), (0..6).collect(), &quick(1)).unwrap();
    let bytes = encode_checkpoint(&m);
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint::<f32>(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_checkpoint::<f32>(&magic).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(decode_checkpoint::<f32>(&version).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ddnn");
    let (m, _) = fit::<f32>(&small_data(8, 40.0, 18), (0..6).collect(), &quick(1)).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let loaded: DdnnModel<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&loaded));
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, h) = fit::<f32>(&small_data(8, 40.0, 19), (0..6).collect(), &quick(3)).unwrap();
    let path = dir.path().join("history.csv");
    h.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("epoch,local_loss,cloud_loss,joint_loss,local_acc,cloud_acc"));
}
