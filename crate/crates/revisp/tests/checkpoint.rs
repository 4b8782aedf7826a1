mod common;

use std::path::Path;

use revisp::checkpoint::{read_header, Checkpoint, Header, CHECKPOINT_SCHEMA, MAGIC};
use revisp::Error;
use revisp_core::selector::Model;
use revisp_core::trainer::{Trainer, TrainingSet};
use revisp_core::Tensor;

fn trained(epochs: usize) -> (Trainer, TrainingSet, revisp::config::RunConfig) {
    let cfg = common::tiny_config(3);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let raws: Vec<Tensor> = (0..4)
        .map(|_| common::texture(&mut rng, 16, 16, 0.05, 0.6))
        .collect();
    let data = TrainingSet {
        pseudo_rgbs: revisp::cli::render_pseudo(&raws, &cfg).unwrap(),
        raws,
        rgbs: vec![],
    };
    let mut t = Trainer::new(cfg.train.clone()).unwrap();
    for _ in 0..epochs {
        t.run_epoch(&data).unwrap();
    }
    (t, data, cfg)
}

fn split(bytes: &[u8]) -> (Header, Vec<u8>) {
    let (h, p) = read_header(bytes, Path::new("mem")).unwrap();
    (h, p.to_vec())
}

fn join(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    let (t, _, cfg) = trained(1);
    let ckpt = Checkpoint::from_trainer(&t, &cfg);
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.srisp");
    ckpt.save(&p).unwrap();
    Checkpoint::load(&p).unwrap().save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
}

#[test]
fn layout_has_four_sections_in_order() {
    let (t, _, cfg) = trained(0);
    let bytes = Checkpoint::from_trainer(&t, &cfg).to_bytes();
    assert_eq!(&bytes[..8], b"SRISP001");
    let (h, payload) = split(&bytes);
    assert_eq!(h.schema, CHECKPOINT_SCHEMA);
    let n = t.student.params.len();
    assert_eq!(h.tensors.len(), 4 * n);
    for (i, prefix) in ["student/", "teacher/", "adam.m/", "adam.v/"]
        .iter()
        .enumerate()
    {
        assert!(h.tensors[i * n].name.starts_with(prefix));
    }
    let first = &h.tensors[0];
    let v = f32::from_le_bytes(payload[..4].try_into().unwrap());
    assert_eq!(
        v,
        t.student
            .params
            .get(&first.name["student/".len()..])
            .unwrap()
            .data()[0]
    );
    assert_eq!(h.config_hash, cfg.hash());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let (straight, data, cfg) = trained(2);
    let (first, _, _) = trained(1);
    let bytes = Checkpoint::from_trainer(&first, &cfg).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes, Path::new("mem"))
        .unwrap()
        .into_trainer();
    resumed.run_epoch(&data).unwrap();
    assert_eq!(resumed.student, straight.student);
    assert_eq!(resumed.teacher, straight.teacher);
    assert_eq!(resumed.adam, straight.adam);
    assert_eq!(resumed.step, straight.step);
}

#[test]
fn corrupt_framing_is_rejected() {
    let (t, _, cfg) = trained(0);
    let bytes = Checkpoint::from_trainer(&t, &cfg).to_bytes();
    let load = |b: &[u8]| Checkpoint::from_bytes(b, Path::new("mem"));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(load(&bad_magic).is_err());
    assert!(
        load(&bytes[..bytes.len() - 4]).is_err(),
        "truncated payload"
    );
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(load(&trailing).is_err());
    let mut long_header = bytes.clone();
    long_header[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(load(&long_header).is_err());
}

#[test]
fn directory_violations_are_rejected() {
    let (t, _, cfg) = trained(0);
    let (h, payload) = split(&Checkpoint::from_trainer(&t, &cfg).to_bytes());
    let load = |h: &Header| Checkpoint::from_bytes(&join(h, &payload), Path::new("mem"));
    assert!(load(&h).is_ok());

    let mut schema = h.clone();
    schema.schema = CHECKPOINT_SCHEMA + 1;
    assert!(matches!(load(&schema), Err(Error::Schema { .. })));

    let mut dup = h.clone();
    dup.tensors[1].name = dup.tensors[0].name.clone();
    assert!(load(&dup).is_err());

    let mut overlap = h.clone();
    overlap.tensors[1].offset -= 4;
    assert!(load(&overlap).is_err());

    let mut out_of_bounds = h.clone();
    out_of_bounds.tensors.last_mut().unwrap().offset += 4;
    assert!(load(&out_of_bounds).is_err());

    let mut wrong_length = h.clone();
    wrong_length.tensors[0].shape.push(2);
    assert!(load(&wrong_length).is_err());

    let mut hash = h.clone();
    hash.config.train.epochs += 1;
    assert!(load(&hash).is_err(), "config no longer matches its hash");

    let mut model = h.clone();
    model.config.train.model.k = 4;
    model.config_hash = model.config.hash();
    assert!(
        load(&model).is_err(),
        "tensor shapes disagree with the model config"
    );
}

#[test]
fn identity_model_round_trips() {
    let mut m = Model::init(common::tiny_config(0).train.model, 0).unwrap();
    m.set_identity_dictionaries().unwrap();
    let ckpt = Checkpoint::new(common::tiny_config(0), m);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
    assert_eq!(back.student, ckpt.student);
    assert_eq!(back.adam.steps, 0);
}
