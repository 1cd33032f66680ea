use proptest::prelude::*;

use gradweave::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use gradweave::datakit::diagnostics::{
    parse_diagnostics, read_diagnostics_csv, write_diagnostics_csv, MetricsRecord, DIAGNOSTICS_HEADER,
};
use gradweave::datakit::manifest::{read_manifest, write_dataset};
use gradweave::datakit::pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
use gradweave::datakit::synth::{generate_dataset, SynthConfig};
use gradweave::network::{AdapterKind, ModelParams, NetConfig};
use gradweave::{Error, Tensor};

proptest! {
    #[test]
    fn pgm_round_trip_within_quantization(
        h in 1usize..12,
        w in 1usize..12,
        seed in prop::collection::vec(0.0..=1.0f64, 144),
    ) {
        let img = Tensor::new(vec![h, w], seed[..h * w].to_vec()).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Quantized values survive a second trip unchanged.
        let again = decode_pgm(&encode_pgm(&back).unwrap()).unwrap();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn diagnostics_round_trip(
        values in prop::collection::vec(-1e6..1e6f64, 10),
        iter in 0usize..100000,
        conflicts in 0usize..50,
    ) {
        let r = MetricsRecord {
            iter,
            loss: values[0],
            loss_f: values[1],
            loss_r: values[2],
            loss_t: values[3],
            grad_ratio: values[4].abs(),
            cos_rt: values[5] / 1e6,
            cos_rf: values[6] / 1e6,
            cos_tf: values[7] / 1e6,
            conflicts,
            mae: values[8].abs() / 1e6,
            max_f: values[9].abs() / 1e6,
        };
        let text = gradweave::datakit::diagnostics::render_diagnostics(&[r]).unwrap();
        let back = parse_diagnostics(&text).unwrap();
        prop_assert_eq!(back.len(), 1);
        let b = back[0];
        prop_assert_eq!((b.iter, b.conflicts), (r.iter, r.conflicts));
        let pairs = [
            (r.loss, b.loss), (r.loss_f, b.loss_f), (r.loss_r, b.loss_r), (r.loss_t, b.loss_t),
            (r.grad_ratio, b.grad_ratio), (r.cos_rt, b.cos_rt), (r.cos_rf, b.cos_rf),
            (r.cos_tf, b.cos_tf), (r.mae, b.mae), (r.max_f, b.max_f),
        ];
        for (x, y) in pairs {
            prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-300));
        }
    }
}

#[test]
fn diagnostics_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diag.csv");
    let rows: Vec<MetricsRecord> = (0..5)
        .map(|i| MetricsRecord {
            iter: i,
            loss: 1.0 / (i + 1) as f64,
            loss_f: 0.5,
            loss_r: 0.25,
            loss_t: 0.125,
            grad_ratio: f64::NAN,
            cos_rt: -0.5,
            cos_rf: 0.0,
            cos_tf: 1.0,
            conflicts: i,
            mae: 0.2,
            max_f: 0.8,
        })
        .collect();
    write_diagnostics_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some(DIAGNOSTICS_HEADER));
    assert_eq!(text.lines().count(), 6);
    let back = read_diagnostics_csv(&path).unwrap();
    assert!(back[0].grad_ratio.is_nan());
    assert_eq!(back[3].loss, rows[3].loss);
}

#[test]
fn pgm_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(vec![3, 2], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
    let path = dir.path().join("a.pgm");
    write_pgm(&img, &path).unwrap();
    let back = read_pgm(&path).unwrap();
    assert_eq!(back.shape(), &[3, 2]);
    assert!(matches!(read_pgm(&dir.path().join("missing.pgm")), Err(Error::Io { .. })));
    std::fs::write(&path, b"P5\n4 4\n255\n\x00").unwrap();
    assert!(matches!(read_pgm(&path), Err(Error::Format { .. })));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&SynthConfig { seed: 4, ..SynthConfig::default() }, 3, 0).unwrap();
    let manifest = write_dataset(&samples, &dir.path().join("set")).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().next(), Some("index,path_R,path_T,path_GT"));
    assert_eq!(text.lines().nth(1), Some("0,00000_R.pgm,00000_T.pgm,00000_GT.pgm"));
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.gt, b.gt);
        for (x, y) in a.image_r.data().iter().zip(b.image_r.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.txt");
    std::fs::write(&path, "index,path_R,path_T,path_GT\n0,a.pgm\n").unwrap();
    assert!(read_manifest(&path).is_err());
    std::fs::write(&path, "index,path_R,path_T,path_GT\n").unwrap();
    assert!(read_manifest(&path).is_err());
    std::fs::write(&path, "0,a.pgm,b.pgm,c.pgm\n").unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in [AdapterKind::Vanilla, AdapterKind::Decoupled].into_iter().enumerate() {
        let config = NetConfig { adapter_kind: kind, ..NetConfig::default() };
        let model = ModelParams::init(config, 40 + i as u64).unwrap();
        let path = dir.path().join(format!("m{i}.ckpt"));
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
        assert_eq!(back.config, model.config);
        for (store_a, store_b) in [(&model.backbone, &back.backbone), (&model.trainable, &back.trainable)] {
            assert_eq!(store_a.len(), store_b.len());
            for ((ka, a), (kb, b)) in store_a.iter().zip(store_b) {
                assert_eq!(ka, kb);
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }
}

#[test]
fn checkpoint_header_layout() {
    let model = ModelParams::init(NetConfig::default(), 1).unwrap();
    let bytes = encode_checkpoint(&model);
    assert_eq!(&bytes[..8], b"GWCKPT\0\0");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(count, model.backbone.len() + model.trainable.len() + 1);
    assert!(decode_checkpoint(&bytes[..16]).is_err());
}
