use topicsel::checkpoint::Checkpoint;
use topicsel::config::KeyValues;
use topicsel::corpus::{split_corpus, Splits};
use topicsel::evalsuite::{evaluate, EvalOptions};
use topicsel::synthgen::{generate_world, WorldSpec};
use topicsel::training::{prepare_split, train, TrainConfig, TrainOptions};

fn trained() -> (Splits, Checkpoint) {
    let spec = WorldSpec {
        n_users: 10,
        n_personas_global: 8,
        personas_per_user: 3,
        n_topics: 12,
        n_dialogues: 24,
        seed: 4,
        ..WorldSpec::default()
    };
    let (corpus, _) = generate_world(&spec).unwrap();
    let splits = split_corpus(&corpus, 0.7, 0.15, 1).unwrap();
    let mut cfg = TrainConfig::default();
    let kv = "d = 8\nlayers = 1\nheads = 2\ndecoder_layers = 1\nk = 3\nlr = 0.01\nbatch = 8\nmax_epochs = 2\npatience = 2\nmax_response_len = 8";
    cfg.apply(&KeyValues::parse(kv).unwrap()).unwrap();
    let outcome = train(&splits, &cfg, &TrainOptions::default()).unwrap();
    (
        splits,
        Checkpoint {
            train: cfg,
            state: outcome.state,
        },
    )
}

#[test]
fn save_load_evaluate_is_bit_identical() {
    let (splits, ckpt) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.train, ckpt.train);
    assert_eq!(loaded.state.optimizer, ckpt.state.optimizer);
    assert_eq!(loaded.state.epoch, ckpt.state.epoch);
    for ((_, na, a), (_, nb, b)) in ckpt.state.model.store.iter().zip(loaded.state.model.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data(), "{na}");
    }
    let eval = |c: &Checkpoint| {
        let ex = prepare_split(&c.state.model, &splits.test, c.train.history);
        evaluate(&c.state.model, &ex, &EvalOptions::default()).unwrap()
    };
    assert_eq!(eval(&ckpt), eval(&loaded));
    assert_eq!(loaded.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}

#[test]
fn damaged_bytes_are_rejected() {
    let (_, ckpt) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
    for cut in [0, 4, 12, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    let mut bad_manifest = bytes.clone();
    bad_manifest[22] = b'#';
    assert!(Checkpoint::from_bytes(&bad_manifest).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Checkpoint::load(dir.path().join("absent.ckpt")).err().unwrap();
    assert!(matches!(err, topicsel::Error::Io { .. }));
}
