use proptest::prelude::*;

use ravl::evalgen::{generate_setting, WorldSpec};
use ravl::format::{self, Matrix, RowKind, RowMeta};
use ravl::RavlError;

proptest! {
    #[test]
    fn matrix_bytes_round_trip_bit_exactly(rows in 0usize..6, dim in 0usize..6, bits in prop::collection::vec(any::<u32>(), 36)) {
        let data: Vec<f32> = bits[..rows * dim].iter().map(|&b| f32::from_bits(b)).collect();
        let m = Matrix { rows, dim, data };
        let back = Matrix::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.rows, rows);
        prop_assert_eq!(back.dim, dim);
        let a: Vec<u32> = m.data.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_reported_as_corruption(cut in 1usize..40) {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let bytes = m.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        let is_corrupt = matches!(Matrix::from_bytes(&bytes[..keep]), Err(RavlError::Corrupt { .. }));
        prop_assert!(is_corrupt);
    }
}

#[test]
fn files_round_trip_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.emb");
    let m = Matrix::from_rows(&[vec![0.5, -1.25], vec![3.0, f64::from(f32::MIN_POSITIVE)]]).unwrap();
    let meta: Vec<RowMeta> = ["a", "b"]
        .iter()
        .map(|id| RowMeta {
            id: id.to_string(),
            kind: RowKind::Region,
            image_id: Some("img".into()),
            bbox: Some([0.0, 1.0, 2.0, 3.0]),
            concept: Some("c".into()),
            class_label: None,
            caption: None,
        })
        .collect();
    format::write_embedding_file(&path, &m, &meta).unwrap();
    let (m2, meta2) = format::read_embedding_file(&path).unwrap();
    assert_eq!(m, m2);
    assert_eq!(meta, meta2);

    // sidecar with a missing record
    std::fs::write(format::sidecar_path(&path), format::sidecar_bytes(&meta[..1]).unwrap()).unwrap();
    assert!(matches!(format::read_embedding_file(&path), Err(RavlError::Corrupt { .. })));
    assert!(matches!(format::read_matrix(&dir.path().join("none.emb")), Err(RavlError::MissingArtifact(_))));
}

#[test]
fn datasets_round_trip_through_f32() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_setting(&WorldSpec { finetune_size: 40, eval_size: 20, ..WorldSpec::default() }).unwrap();
    let path = dir.path().join("ft.emb");
    format::write_dataset(&path, &s.finetune, s.labels.names()).unwrap();
    let back = format::read_dataset(&path, s.labels.names()).unwrap();
    assert_eq!(back.images.len(), s.finetune.images.len());
    assert_eq!(back.regions.len(), s.finetune.regions.len());
    for (a, b) in s.finetune.images.iter().zip(&back.images) {
        assert_eq!((a.label, &a.caption, &a.regions), (b.label, &b.caption, &b.regions));
        for (x, y) in a.features.iter().zip(&b.features) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    // a second write of the reloaded data is byte-identical
    let again = dir.path().join("ft2.emb");
    format::write_dataset(&again, &back, s.labels.names()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let lp = dir.path().join("labels.emb");
    format::write_labels(&lp, &s.labels).unwrap();
    assert_eq!(format::read_labels(&lp).unwrap().names(), s.labels.names());
}
