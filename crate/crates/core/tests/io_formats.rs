use cycreg::grid::{FieldKind, Grid, VectorField3, Volume3, VolumeKind};
use cycreg::io::{parse_color, read_volume, render_slice, write_volume, Overlay, VolumeData};
use cycreg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(dims: [usize; 3], seed: u64) -> Volume3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::new(dims, [1.5, 1.37, 2.0], [-10.25, 3.5, 0.0]).unwrap();
    // values that are exactly representable in float32
    let data = (0..g.len()).map(|_| rng.random::<f32>() as f64).collect();
    Volume3::new(g, data, VolumeKind::Intensity).unwrap()
}

#[test]
fn float_volume_round_trips_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let vol = VolumeData::Scalar(random_volume([64, 64, 64], 1));
    for name in ["v.nii", "v.json"] {
        let path = dir.path().join(name);
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol, "{name}");
        assert_eq!(back.grid().spacing, [1.5, 1.37, 2.0]);
    }
}

#[test]
fn masks_and_fields_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::unit([5, 6, 7]).unwrap();
    let mask = Volume3::from_fn(g, VolumeKind::Mask, |c| ((c[0] + c[2]) % 2) as f64).unwrap();
    let field = VectorField3::from_fn(g, FieldKind::Displacement, |c| [c[0] as f64 * 0.5, -(c[1] as f64), 0.25 * c[2] as f64]).unwrap();
    for ext in ["nii", "json"] {
        for (i, data) in [VolumeData::Scalar(mask.clone()), VolumeData::Vector(field.clone())].into_iter().enumerate() {
            let path = dir.path().join(format!("x{i}.{ext}"));
            write_volume(&path, &data).unwrap();
            assert_eq!(read_volume(&path).unwrap(), data);
        }
    }
    // uint8 payload for binary masks
    let meta = std::fs::metadata(dir.path().join("x0.raw")).unwrap();
    assert_eq!(meta.len() as usize, g.len());
}

fn nifti_bytes() -> (tempfile::TempDir, std::path::PathBuf, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.nii");
    write_volume(&path, &VolumeData::Scalar(random_volume([4, 4, 4], 2))).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (dir, path, bytes)
}

#[test]
fn int16_datatype_is_rejected() {
    let (_d, path, mut bytes) = nifti_bytes();
    bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::UnsupportedDatatype { code: 4, .. })));
}

#[test]
fn bad_magic_and_truncation_are_distinct_errors() {
    let (_d, path, bytes) = nifti_bytes();
    let mut wrong = bytes.clone();
    wrong[344..348].copy_from_slice(b"ni1\0");
    std::fs::write(&path, &wrong).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::BadMagic { .. })));
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::SizeMismatch { .. })));
}

#[test]
fn scaled_intensities_are_refused_not_misread() {
    let (_d, path, mut bytes) = nifti_bytes();
    bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::UnsupportedFile { .. })));
}

#[test]
fn render_is_deterministic_and_tints() {
    let vol = random_volume([8, 9, 10], 3);
    let header = b"P6\n8 9\n255\n".len();
    let plain = render_slice(&vol, &[], 2, 4).unwrap();
    assert_eq!(plain.len(), header + 8 * 9 * 3);
    assert!(plain[header..].chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    let full = Volume3::from_fn(*vol.grid(), VolumeKind::Mask, |_| 1.0).unwrap();
    let red = parse_color("red").unwrap();
    let tinted = render_slice(&vol, &[Overlay { mask: &full, color: red }], 2, 4).unwrap();
    assert!(tinted[header..].chunks(3).zip(plain[header..].chunks(3)).all(|(t, p)| t != p));
    assert_eq!(tinted, render_slice(&vol, &[Overlay { mask: &full, color: red }], 2, 4).unwrap());
    assert!(matches!(render_slice(&vol, &[], 2, 10), Err(Error::IndexOutOfRange { index: 10, len: 10 })));
    assert_eq!(parse_color("#0a0B10"), Some([10, 11, 16]));
    assert_eq!(parse_color("teal"), None);
}
