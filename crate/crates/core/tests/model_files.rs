use dgmlab_core::attack::compose_bypass;
use dgmlab_core::data::{make_checkerboard_target, DatasetKind};
use dgmlab_core::format::{decode, encode, load_model, save_model, DatasetMeta, FormatError, ModelFile};
use dgmlab_core::models::{ArchSpec, Gate, GeneratorModel, Mlp, Model, VaeModel};
use dgmlab_core::rng;

fn generator(seed: u64) -> GeneratorModel {
    GeneratorModel::init(&ArchSpec::default_generator(), &mut rng::stream(seed, "test/g")).unwrap()
}

fn files() -> Vec<ModelFile> {
    let meta = DatasetMeta { kind: DatasetKind::Bars, side: 8, n: 4096, seed: 7, poison_fraction: 0.0 };
    let x = make_checkerboard_target(8).unwrap().image;
    let bypass = compose_bypass(
        &generator(1),
        &GeneratorModel::constant(16, &x),
        Gate::DiracSet { points: vec![vec![0.5; 16]], tolerance: 0.0 },
    )
    .unwrap();
    let encoder = Mlp::init(&VaeModel::default_encoder(64, 16), &mut rng::stream(3, "test/e"));
    let vae = VaeModel::new(encoder, generator(4)).unwrap();
    vec![
        ModelFile { model: Model::Generator(generator(0)), dataset: Some(meta) },
        ModelFile { model: Model::Multiplexer(bypass), dataset: None },
        ModelFile { model: Model::Vae(vae), dataset: None },
    ]
}

#[test]
fn encode_decode_encode_is_byte_identical() {
    for f in files() {
        let bytes = encode(&f);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode(&back), bytes);
    }
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (i, f) in files().into_iter().enumerate() {
        let p = dir.path().join(format!("m{i}.dgml"));
        save_model(&f, &p).unwrap();
        let loaded = load_model(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), encode(&loaded));
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = encode(&files().remove(0));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(FormatError::BadMagic)));
    let mut future = bytes.clone();
    future[4] = 0xff;
    assert!(matches!(decode(&future), Err(FormatError::UnsupportedVersion(_))));
    assert!(decode(&bytes[..bytes.len() / 2]).is_err());
}
