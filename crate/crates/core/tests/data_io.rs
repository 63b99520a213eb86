use std::io::Write;

use mft_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointMeta};
use mft_core::data::{
    decode_cifar10, load_cifar10, NormStats, Split, CIFAR_RECORD, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
use mft_core::masking::MaskStrategy;
use mft_core::model::ViTModel;
use mft_core::{CoreError, ModelConfig};

/// Label and pixel bytes of record `i` in a generated file.
fn record(file: usize, i: usize) -> Vec<u8> {
    let mut r = Vec::with_capacity(CIFAR_RECORD);
    r.push(((i * 7 + file) % 10) as u8);
    r.extend((0..CIFAR_RECORD - 1).map(|j| ((i * 31 + j * 17 + file * 101) % 256) as u8));
    r
}

#[test]
fn cifar_splits_decode_byte_faithfully() {
    let dir = tempfile::tempdir().unwrap();
    for (f, name) in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]).enumerate() {
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.path().join(name)).unwrap());
        for i in 0..10_000 {
            out.write_all(&record(f, i)).unwrap();
        }
    }
    assert_eq!(
        std::fs::metadata(dir.path().join(CIFAR_TRAIN_FILES[0])).unwrap().len(),
        10_000 * 3073
    );
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 50_000);
    let test = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
    for (ds, files) in [(&train, 0..5), (&test, 5..6)] {
        for (k, f) in files.enumerate() {
            for i in (0..10_000).step_by(997) {
                let want = record(f, i);
                let idx = k * 10_000 + i;
                assert_eq!(ds.label(idx), want[0] as usize);
                assert_eq!(ds.image(idx), &want[1..]);
            }
        }
    }
    // channel-planar: byte 1 + 1024 is the first green pixel
    assert_eq!(train.image(0)[1024], record(0, 0)[1025]);
}

#[test]
fn cifar_missing_and_ragged_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
    assert!(err.to_string().contains("test_batch.bin"), "{err}");
    std::fs::write(dir.path().join(CIFAR_TEST_FILE), vec![0u8; 3073 + 10]).unwrap();
    let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
    assert!(err.to_string().contains("offset 3073"), "{err}");
    assert_eq!(decode_cifar10(&[], Split::Test).unwrap().len(), 0);
}

fn sample() -> (ViTModel, CheckpointMeta) {
    let cfg = ModelConfig {
        embed_dim: 24,
        depth: 3,
        heads: 3,
        mlp_ratio: 2,
        ..ModelConfig::toy()
    };
    let model = ViTModel::init(cfg.clone(), 42).unwrap();
    let mut meta = CheckpointMeta::new(cfg, MaskStrategy::single(0.5), NormStats::identity(3), 42);
    meta.epochs = 7;
    (model, meta)
}

/// Writes the documented layout directly from `(name, shape, values)`.
fn encode(meta: &CheckpointMeta, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Vec<u8> {
    let json = serde_json::to_vec(meta).unwrap();
    let mut out = b"MFTC".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend((tensors.len() as u32).to_le_bytes());
    let mut off = 0u64;
    for (name, shape, data) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend(off.to_le_bytes());
        off += data.len() as u64 * 4;
    }
    out.extend(off.to_le_bytes());
    for (_, _, data) in tensors {
        for v in data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn tensors_of(model: &ViTModel) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    model
        .params
        .entries()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect()
}

#[test]
fn layout_matches_independent_encoder() {
    let (model, meta) = sample();
    assert_eq!(to_bytes(&model, &meta).unwrap(), encode(&meta, &tensors_of(&model)));
}

#[test]
fn file_round_trip_is_bitwise() {
    let (model, meta) = sample();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/m.mftc");
    save_checkpoint(&model, &meta, &path).unwrap();
    let (back, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta2, meta);
    for ((na, a), (nb, b)) in model.params.entries().into_iter().zip(back.params.entries()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let len: usize = model.params.entries().iter().map(|(_, t)| t.numel() * 4).sum();
    let bytes = std::fs::read(&path).unwrap();
    let payload_len = u64::from_le_bytes(bytes[bytes.len() - len - 8..bytes.len() - len].try_into().unwrap());
    assert_eq!(payload_len as usize, len);
}

#[test]
fn index_errors_are_distinct() {
    let (model, meta) = sample();
    let all = tensors_of(&model);

    let mut unknown = all.clone();
    unknown[3].0 = "blocks.0.attn.bogus".into();
    assert!(matches!(from_bytes(&encode(&meta, &unknown)), Err(CoreError::UnknownTensor(n)) if n == "blocks.0.attn.bogus"));

    let mut missing = all.clone();
    let dropped = missing.remove(5).0;
    assert!(matches!(from_bytes(&encode(&meta, &missing)), Err(CoreError::MissingTensor(n)) if n == dropped));

    let mut reshaped = all.clone();
    let last = reshaped.len() - 1;
    reshaped[last].1 = vec![5, 2];
    assert!(matches!(from_bytes(&encode(&meta, &reshaped)), Err(CoreError::TensorShape { .. })));

    let mut duplicate = all.clone();
    duplicate.push(all[0].clone());
    assert!(from_bytes(&encode(&meta, &duplicate)).is_err());

    let mut wrong_meta = meta.clone();
    wrong_meta.model.depth = 2;
    assert!(matches!(from_bytes(&encode(&wrong_meta, &all)), Err(CoreError::UnknownTensor(_))));
}
