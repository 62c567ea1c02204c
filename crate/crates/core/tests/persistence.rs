use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajisa::classify::ScoreMatrix;
use trajisa::config::PipelineConfig;
use trajisa::container::{ContainerError, Tensor, TensorContainer};
use trajisa::convisa::{train_two_stream, ConvIsaConfig, ConvIsaError, Geometry, TwoStreamModel};
use trajisa::descriptors::DescriptorKind;
use trajisa::encoding::DescriptorSet;
use trajisa::isa::TrainOpts;
use trajisa::trajectory::{FlowVolume, PixelVolume, FLOW_VOLUME_LEN, PIXEL_VOLUME_LEN};
use trajisa::Error;

fn small_model(seed: u64) -> TwoStreamModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pix: Vec<PixelVolume> = (0..40)
        .map(|_| PixelVolume {
            data: (0..PIXEL_VOLUME_LEN).map(|_| rng.random()).collect(),
        })
        .collect();
    let flo: Vec<FlowVolume> = (0..40)
        .map(|_| FlowVolume {
            data: (0..FLOW_VOLUME_LEN).map(|_| rng.random::<f32>() - 0.5).collect(),
        })
        .collect();
    let cfg = ConvIsaConfig {
        geometry: Geometry {
            rf: (8, 5),
            stride: (8, 5),
        },
        pca1_dim: 10,
        pca2_dim: 8,
        stack_top: 4,
        isa: TrainOpts {
            epochs: 3,
            ..TrainOpts::default()
        },
        ..ConvIsaConfig::default()
    };
    train_two_stream(&pix, &flo, &cfg, seed).unwrap()
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tcn");
    let m = small_model(1);
    m.to_container().save(&path).unwrap();
    let back = TwoStreamModel::from_container(&TensorContainer::load(&path).unwrap()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_container().to_bytes(), m.to_container().to_bytes());
}

#[test]
fn cross_stream_application_is_a_typed_error() {
    let m = small_model(2);
    let flow = vec![FlowVolume {
        data: vec![0.0; FLOW_VOLUME_LEN],
    }];
    assert!(matches!(m.pixel.apply(&flow), Err(ConvIsaError::StreamMismatch { .. })));
}

#[test]
fn tampered_offsets_are_rejected() {
    let mut c = TensorContainer::new();
    c.insert("a", Tensor::f64(vec![2], vec![1.0, 2.0])).unwrap();
    c.insert("b", Tensor::f64(vec![2], vec![3.0, 4.0])).unwrap();
    let mut bytes = c.to_bytes();
    // the second entry's offset sits 16 bytes before the end of its table record
    let header = 4 + 2 + 4;
    let record = |name_len: usize| 2 + name_len + 1 + 1 + 4 + 8 + 8;
    let off = header + record(1) + record(1) - 16;
    bytes[off..off + 8].copy_from_slice(&0u64.to_le_bytes());
    assert!(matches!(
        TensorContainer::from_bytes(&bytes),
        Err(ContainerError::Layout { .. })
    ));
}

#[test]
fn descriptor_sets_round_trip() {
    let mut s = DescriptorSet::empty(&[(DescriptorKind::Hog, 96), (DescriptorKind::TrajShape, 28)]);
    s.locations = Array2::from_elem((3, 3), 0.5);
    s.kinds.insert(DescriptorKind::Hog, Array2::from_elem((3, 96), 0.1));
    s.kinds.insert(DescriptorKind::TrajShape, Array2::from_elem((3, 28), -0.2));
    let c = TensorContainer::from_bytes(&s.to_container().to_bytes()).unwrap();
    assert_eq!(DescriptorSet::from_container(&c).unwrap(), s);
    let hog = s.select(&[DescriptorKind::Hog]).unwrap();
    assert_eq!(hog.kinds.len(), 1);
    assert!(s.select(&[DescriptorKind::Lop]).is_err());
}

#[test]
fn config_errors_map_to_usage_exit_code() {
    let e = PipelineConfig::from_toml("[convisa]\npca1_dim = 5000\n").unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(e.exit_code(), 1);
    let e = PipelineConfig::from_toml("[volume]\nsize = \"big\"\n").unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

proptest! {
    #[test]
    fn containers_round_trip(
        a in prop::collection::vec(-1e6f64..1e6, 0..40),
        b in prop::collection::vec(-1e3f32..1e3, 1..30),
    ) {
        let mut c = TensorContainer::new();
        c.insert("f64", Tensor::f64(vec![a.len()], a.clone())).unwrap();
        c.insert("f32/2d", Tensor::f32(vec![1, b.len()], b.clone())).unwrap();
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
        prop_assert_eq!(back.f64_vec("f64").unwrap(), a);
    }

    #[test]
    fn score_csv_round_trips(vals in prop::collection::vec(-1e9f64..1e9, 6)) {
        let s = ScoreMatrix::new(
            Array2::from_shape_vec((2, 3), vals).unwrap(),
            vec!["x".into(), "y".into(), "z".into()],
            vec!["v0".into(), "v1".into()],
        ).unwrap();
        prop_assert_eq!(ScoreMatrix::from_csv(&s.to_csv()).unwrap(), s);
    }
}
