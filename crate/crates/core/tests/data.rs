use difflab::data::*;
use difflab::forward::{decoder_loglik, grid_index};
use difflab::numerics::{RngStream, Tensor};
use proptest::prelude::*;

fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

#[test]
fn idx_files_round_trip_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let pixels: Vec<u8> = (0..3 * 2 * 4).map(|i| (i * 37 % 256) as u8).collect();
    let raw_img = idx_bytes(IDX_IMAGE_MAGIC, &[3, 2, 4], &pixels);
    let raw_lab = idx_bytes(IDX_LABEL_MAGIC, &[3], &[7, 0, 2]);
    std::fs::write(&img, &raw_img).unwrap();
    std::fs::write(&lab, &raw_lab).unwrap();

    let ds = idx_read(&img, Some(&lab)).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.image_shape), (3, 8, Some((2, 4))));
    assert_eq!(ds.labels(), Some(&[7, 0, 2][..]));
    for (v, &b) in ds.data().iter().zip(&pixels) {
        assert_eq!(*v, 2.0 * (b as f64 / 255.0) - 1.0);
        assert_eq!(grid_index(*v), Some(b as usize));
    }

    let (img2, lab2) = (dir.path().join("img2.idx"), dir.path().join("lab2.idx"));
    idx_write(&ds, &img2, Some(&lab2)).unwrap();
    assert_eq!(std::fs::read(&img2).unwrap(), raw_img);
    assert_eq!(std::fs::read(&lab2).unwrap(), raw_lab);
}

#[test]
fn malformed_idx_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.idx");
    let read = |raw: Vec<u8>| {
        std::fs::write(&path, raw).unwrap();
        idx_read(&path, None)
    };
    assert!(matches!(read(idx_bytes(0x0000_0903, &[1, 1, 1], &[0])), Err(DataError::BadMagic(0x903))));
    assert!(matches!(read(idx_bytes(IDX_LABEL_MAGIC, &[1], &[0])), Err(DataError::BadMagic(_))));
    assert!(matches!(
        read(idx_bytes(IDX_IMAGE_MAGIC, &[2, 2, 2], &[0; 7])),
        Err(DataError::TruncatedFile { expected: 24, found: 23 })
    ));
    assert!(matches!(read(vec![0, 0, 8]), Err(DataError::TruncatedFile { .. })));
    assert!(matches!(read(idx_bytes(IDX_IMAGE_MAGIC, &[u32::MAX, u32::MAX, u32::MAX], &[])), Err(DataError::DimensionOverflow)));
    assert!(matches!(read(idx_bytes(IDX_IMAGE_MAGIC, &[0, 2, 2], &[])), Err(DataError::Empty)));

    let labels = dir.path().join("l.idx");
    std::fs::write(&path, idx_bytes(IDX_IMAGE_MAGIC, &[2, 1, 1], &[0, 255])).unwrap();
    std::fs::write(&labels, idx_bytes(IDX_LABEL_MAGIC, &[3], &[0, 1, 2])).unwrap();
    assert!(matches!(idx_read(&path, Some(&labels)), Err(DataError::LabelMismatch { labels: 3, samples: 2 })));
}

#[test]
fn single_center_mixture_mean() {
    let mut rng = RngStream::new(1);
    let ds = make_gaussian_mixture(&[vec![0.0, 0.0]], 0.5, 100_000, &mut rng).unwrap();
    for j in 0..2 {
        let m = ds.samples().map(|s| s[j]).sum::<f64>() / ds.len() as f64;
        assert!(m.abs() <= 0.01, "{m}");
        let v = ds.samples().map(|s| (s[j] - m).powi(2)).sum::<f64>() / (ds.len() - 1) as f64;
        assert!((v - 0.25).abs() <= 3.0 * 0.25 * (2.0 / ds.len() as f64).sqrt(), "{v}");
    }
}

#[test]
fn circle_mixture_labels_are_uniform() {
    let (k, n) = (8, 80_000);
    let centers = circle_centers(k, 1.0);
    for c in &centers {
        assert!((c[0].hypot(c[1]) - 1.0).abs() <= 1e-15);
    }
    let ds = make_gaussian_mixture(&centers, 0.05, n, &mut RngStream::new(9)).unwrap();
    let mut counts = vec![0usize; k];
    for (s, &l) in ds.samples().zip(ds.labels().unwrap()) {
        counts[l] += 1;
        assert!((s[0] - centers[l][0]).hypot(s[1] - centers[l][1]) < 0.05 * 7.0);
    }
    let p = 1.0 / k as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{c}");
    }
    assert_eq!(ds.num_classes(), Some(8));
}

#[test]
fn zero_noise_mixture_returns_the_centers() {
    let centers = vec![vec![0.25, -0.5], vec![1.0, 2.0]];
    let ds = make_gaussian_mixture(&centers, 0.0, 50, &mut RngStream::new(2)).unwrap();
    for (s, &l) in ds.samples().zip(ds.labels().unwrap()) {
        assert_eq!(s, &centers[l][..]);
    }
}

#[test]
fn mixture_errors() {
    let mut rng = RngStream::new(0);
    assert!(matches!(make_gaussian_mixture(&[], 0.1, 5, &mut rng), Err(DataError::NoCenters)));
    assert!(matches!(make_gaussian_mixture(&[vec![0.0], vec![0.0, 1.0]], 0.1, 5, &mut rng), Err(DataError::RaggedCenters)));
    assert!(matches!(make_gaussian_mixture(&[vec![0.0]], -0.1, 5, &mut rng), Err(DataError::InvalidSigma(_))));
    assert!(matches!(make_gaussian_mixture(&[vec![0.0]], f64::NAN, 5, &mut rng), Err(DataError::InvalidSigma(_))));
    assert!(MixtureSource::new(vec![], 1.0).is_err());
}

#[test]
fn sources_deliver_labeled_batches() {
    let centers = circle_centers(4, 2.0);
    let mut src = MixtureSource::new(centers.clone(), 0.0).unwrap();
    let mut rng = RngStream::new(5);
    let b = src.next_batch(16, &mut rng).unwrap();
    assert_eq!(b.x.shape(), &[16, 2]);
    for (r, &l) in b.labels.as_ref().unwrap().iter().enumerate() {
        assert_eq!(b.x.row(r), &centers[l][..]);
    }
    assert_eq!((src.dim(), src.num_classes()), (2, Some(4)));

    let ds = Dataset::from_rows("rows", &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap().with_labels(vec![1, 0], None).unwrap();
    let mut res = ResampleSource::new(ds.clone());
    let b = res.next_batch(50, &mut rng).unwrap();
    for (r, &l) in b.labels.unwrap().iter().enumerate() {
        assert_eq!(b.x.row(r), ds.sample(1 - l));
    }
    let mut seq = SequentialSource::new(ds);
    assert_eq!(seq.next_batch(2, &mut rng).unwrap().x.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(seq.next_batch(1, &mut rng).is_err());
}

#[test]
fn datasets_validate_their_contents() {
    assert!(matches!(Dataset::from_rows("r", &[vec![1.0], vec![1.0, 2.0]]), Err(DataError::RaggedSamples { index: 1, .. })));
    assert!(Dataset::new("n", 2, vec![1.0, f64::NAN]).is_err());
    let ds = Dataset::new("d", 1, vec![0.0, 1.0]).unwrap();
    assert!(matches!(ds.clone().with_labels(vec![0], None), Err(DataError::LabelMismatch { labels: 1, samples: 2 })));
    assert!(ds.with_labels(vec![0, 3], Some(2)).is_err());
}

#[test]
fn csv_export_is_lossless() {
    let ds = make_gaussian_mixture(&circle_centers(3, 1.0), 0.3, 200, &mut RngStream::new(4)).unwrap();
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x0,x1,label\n"));
    let back = Dataset::read_csv("gaussian_mixture", &buf[..]).unwrap();
    assert_eq!(back.data(), ds.data());
    assert_eq!(back.labels(), ds.labels());
    assert!(Dataset::read_csv("bad", &b"x0,x1\n1.0,oops\n"[..]).is_err());
}

#[test]
fn pgm_decoding_rejects_bad_headers() {
    assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
    assert!(decode_pgm(b"P5\n2 2\n255\n\x00\x00").is_err());
    let raw = encode_pgm(2, 1, &[-1.0, 1.0]);
    assert_eq!(raw, b"P5\n2 1\n255\n\x00\xff");
}

proptest! {
    #[test]
    fn mixtures_are_reproducible(seed in any::<u64>(), n in 1usize..200, sigma in 0.0..2.0f64) {
        let centers = circle_centers(5, 1.5);
        let a = make_gaussian_mixture(&centers, sigma, n, &mut RngStream::new(seed)).unwrap();
        let b = make_gaussian_mixture(&centers, sigma, n, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn quantization_lands_on_the_decoder_grid(xs in prop::collection::vec(-1.0..=1.0f64, 1..40)) {
        let x = Tensor::from_vec(xs.clone());
        let q = quantize_to_grid(&x).unwrap();
        prop_assert_eq!(quantize_to_grid(&q).unwrap(), q.clone());
        for (a, b) in xs.iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            prop_assert!(grid_index(*b).is_some());
        }
        prop_assert!(decoder_loglik(&q, &q, 0.01).is_ok());
    }

    #[test]
    fn bytes_and_units_invert(b in any::<u8>()) {
        prop_assert_eq!(unit_to_byte(byte_to_unit(b)), b);
    }
}
