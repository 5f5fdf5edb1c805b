use std::path::{Path, PathBuf};

use dbswin::config::KEYS;
use dbswin::{Error, ModelConfig, RunConfig};

#[test]
fn defaults_are_the_desk_model() {
    let c = RunConfig::default();
    assert_eq!(c.model, ModelConfig::desk());
    assert_eq!(c.image_size, 64);
    assert_eq!((c.synth_train, c.synth_val, c.synth_test), (200, 25, 25));
    assert_eq!(RunConfig::tiny().model, ModelConfig::tiny());
    assert_eq!(RunConfig::tiny().image_size, 32);
}

#[test]
fn parse_reads_keys_comments_and_relative_paths() {
    let text = "\
# desk run
patch_sizes = 4, 8, 12
embed_dim = 8   # narrow
lr = 0.015
batch_size = 1
image_size = 32
train_data = data/train.tsv
out_dir = /tmp/abs
road_width = 1,3
";
    let c = RunConfig::parse(text, Path::new("/work")).unwrap();
    assert_eq!(c.model.patch_label(), "4,8,12");
    assert_eq!(c.model.anchor().embed_dim, 8);
    assert_eq!(c.model.anchor().heads, [1, 2, 4, 8]);
    assert_eq!(c.train.lr0, 0.015);
    assert_eq!(c.train.batch_size, 1);
    assert_eq!((c.image_size, c.synth.size), (32, 32));
    assert_eq!(c.train_data, Some(PathBuf::from("/work/data/train.tsv")));
    assert_eq!(c.out_dir, PathBuf::from("/tmp/abs"));
    assert_eq!(c.synth.width, (1, 3));
}

#[test]
fn explicit_heads_apply_to_every_branch() {
    let c = RunConfig::parse("heads = 2,2,4,4\nembed_dim = 16", Path::new("")).unwrap();
    assert!(c.model.branches.iter().all(|b| b.heads == [2, 2, 4, 4]));
    assert_eq!(c.heads, Some([2, 2, 4, 4]));
}

#[test]
fn unknown_duplicate_and_malformed_lines_are_rejected() {
    let cases = [
        "learning_rate = 0.1",
        "lr = 0.1\nlr = 0.2",
        "just some words",
        "epochs = many",
        "depths = 2,2,2",
        "roads = 1",
        "patch_sizes = 8,4",
        "heads = 3,3,3,3",
        "decay_factor = 1.5",
        "road_width = 5,2",
    ];
    for text in cases {
        let err = RunConfig::parse(text, Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{text:?}: {err}");
    }
}

#[test]
fn error_names_the_offending_line() {
    let err = RunConfig::parse("epochs = 3\n\nbogus line", Path::new("")).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn to_pairs_round_trips() {
    let mut c = RunConfig::tiny();
    c.train.lr0 = 0.0123;
    c.train.seed = 77;
    c.heads = Some([1, 2, 2, 4]);
    c.model.branches.iter_mut().for_each(|b| b.heads = [1, 2, 2, 4]);
    c.train_data = Some(PathBuf::from("/data/train.tsv"));
    c.synth.noise_std = 2.5;
    c.out_dir = PathBuf::from("/runs/tiny");
    let back = RunConfig::from_pairs(&c.to_pairs()).unwrap();
    assert_eq!(back, c);
    let again = RunConfig::parse(&c.to_text(), Path::new("/elsewhere")).unwrap();
    assert_eq!(again, c);
}

#[test]
fn load_reads_files_and_reports_paths() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    std::fs::write(&p, "epochs = 3\nout_dir = out\n").unwrap();
    let c = RunConfig::load(&p).unwrap();
    assert_eq!(c.train.epochs, 3);
    assert_eq!(c.out_dir, dir.path().join("out"));

    std::fs::write(&p, "epochs = x\n").unwrap();
    let err = RunConfig::load(&p).unwrap_err();
    assert!(err.to_string().contains("run.cfg"), "{err}");
    assert!(matches!(
        RunConfig::load(dir.path().join("missing.cfg")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn schema_documents_every_key() {
    let schema = RunConfig::schema();
    for (k, _) in KEYS {
        assert!(schema.contains(k), "{k}");
    }
    // Every key written by to_pairs is documented and accepted.
    for (k, _) in RunConfig::default().to_pairs() {
        assert!(KEYS.iter().any(|(d, _)| *d == k), "{k}");
    }
}
