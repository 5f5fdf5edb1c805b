use dbswin::checkpoint::{MAGIC, VERSION};
use dbswin::data::generate_set;
use dbswin::training::Trainer;
use dbswin::{Checkpoint, DbSwin, Error, RunConfig};
use rand::RngCore;

fn run_config() -> RunConfig {
    let mut run = RunConfig::tiny();
    run.train.lr0 = 0.01;
    run.train.batch_size = 2;
    run.train.decay_every = 2;
    run.train.seed = 21;
    run
}

fn fresh(run: &RunConfig) -> Trainer {
    Trainer::new(
        DbSwin::new(run.model.clone(), run.train.seed).unwrap(),
        run.train.clone(),
    )
    .unwrap()
}

fn assert_same_state(a: &Trainer, b: &Trainer) {
    assert_eq!(a.epoch(), b.epoch());
    for ((_, x), (_, y)) in a.model.params().iter().zip(b.model.params().iter()) {
        assert_eq!(x.name(), y.name());
        let bits = |t: &dbswin_tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.value()), bits(y.value()), "{}", x.name());
    }
    for (x, y) in a.momentum().iter().zip(b.momentum()) {
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
    assert_eq!(a.rng().clone().next_u64(), b.rng().clone().next_u64());
}

#[test]
fn resume_matches_uninterrupted_training_bitwise() {
    let run = run_config();
    let data = generate_set(&run.synth.with_seed(4), 4).unwrap();

    let mut straight = fresh(&run);
    for _ in 0..3 {
        straight.train_epoch(&data).unwrap();
    }

    let mut first = fresh(&run);
    first.train_epoch(&data).unwrap();
    let bytes = Checkpoint::capture(&first, &run).unwrap().encode();
    drop(first);
    let (mut resumed, run_back) = Checkpoint::decode(&bytes).unwrap().trainer().unwrap();
    assert_eq!(run_back, run);
    assert_eq!(resumed.epoch(), 1);
    // Two more epochs of two steps each, crossing a learning-rate decay.
    for _ in 0..2 {
        resumed.train_epoch(&data).unwrap();
    }
    assert_same_state(&straight, &resumed);
}

#[test]
fn file_round_trip_preserves_everything() {
    let run = run_config();
    let data = generate_set(&run.synth.with_seed(5), 2).unwrap();
    let mut t = fresh(&run);
    t.train_epoch(&data).unwrap();
    let ck = Checkpoint::capture(&t, &run).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch_0001.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.epoch, 1);
    let (t2, _) = back.trainer().unwrap();
    assert_same_state(&t, &t2);
    assert_eq!(back.model().unwrap().params().numel(), t.model.params().numel());
}

#[test]
fn header_layout() {
    let run = run_config();
    let bytes = Checkpoint::capture(&fresh(&run), &run).unwrap().encode();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 0);
    let text_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&bytes[20..20 + text_len]).unwrap();
    assert!(text.lines().any(|l| l == "patch_sizes=4,8"), "{text}");
}

#[test]
fn corrupt_inputs_are_rejected() {
    let run = run_config();
    let bytes = Checkpoint::capture(&fresh(&run), &run).unwrap().encode();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad_magic), Err(Error::Checkpoint(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    let err = Checkpoint::decode(&bad_version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::decode(&trailing).is_err());

    for cut in [0, 3, 10, 19, 100, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
    }

    let mut zero_rng = bytes.clone();
    let n = zero_rng.len();
    zero_rng[n - 32..].fill(0);
    let ck = Checkpoint::decode(&zero_rng).unwrap();
    assert!(ck.trainer().is_err());
}

#[test]
fn mismatched_parameters_are_rejected() {
    let run = run_config();
    let good = Checkpoint::capture(&fresh(&run), &run).unwrap();

    let mut renamed = good.clone();
    renamed.params[0].0 = "nonexistent".into();
    assert!(renamed.model().is_err());

    let mut missing = good.clone();
    missing.params.pop();
    assert!(missing.model().is_err());

    let mut wrong_shape = good.clone();
    let (_, t) = &good.params[0];
    wrong_shape.params[0].1 = dbswin_tensor::Tensor::zeros([t.numel() + 1]).unwrap();
    assert!(wrong_shape.model().is_err());

    let mut bad_config = good;
    bad_config.config.push(("embed_dim".into(), "oops".into()));
    assert!(bad_config.model().is_err());
}
