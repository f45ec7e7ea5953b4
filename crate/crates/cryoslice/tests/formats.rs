use cryoslice::mrc::{self, MrcError, HEADER_LEN};
use cryoslice::tables::{self, TableError, METADATA_HEADER};
use cryoslice_core::metrics::{fsc, Gauge};
use cryoslice_core::training::EvalRecord;
use cryoslice_core::physics::{CtfParams, OpticsConfig, Volume};
use cryoslice_core::sim::{generate_dataset, make_phantom, table_row, ParticleMeta, PhantomSpec, Scale};
use cryoslice_core::so3::UnitQuaternion;
use proptest::prelude::*;

fn word(bytes: &[u8], w: usize) -> [u8; 4] {
    bytes[4 * w..4 * w + 4].try_into().unwrap()
}

#[test]
fn header_layout() {
    let data: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64 * 0.5 - 3.0).collect();
    let bytes = mrc::encode(4, 4, 3, 0.8, 0, &data);
    assert_eq!(bytes.len(), HEADER_LEN + 4 * data.len());
    assert_eq!(i32::from_le_bytes(word(&bytes, 0)), 4);
    assert_eq!(i32::from_le_bytes(word(&bytes, 2)), 3);
    assert_eq!(i32::from_le_bytes(word(&bytes, 3)), 2);
    assert_eq!(f32::from_le_bytes(word(&bytes, 10)), 3.2);
    assert_eq!(f32::from_le_bytes(word(&bytes, 19)), -3.0);
    assert_eq!(f32::from_le_bytes(word(&bytes, 20)), 20.5);
    assert_eq!([i32::from_le_bytes(word(&bytes, 16)), i32::from_le_bytes(word(&bytes, 17)), i32::from_le_bytes(word(&bytes, 18))], [1, 2, 3]);
    assert_eq!(&bytes[208..212], b"MAP ");
    assert_eq!(&bytes[212..214], &[0x44, 0x44]);
    assert_eq!(i32::from_le_bytes(word(&bytes, 27)), 20140);
    let back = mrc::decode(&bytes).unwrap();
    assert_eq!((back.header.nx, back.header.ny, back.header.nz), (4, 4, 3));
    assert!((back.header.pixel_size() - 0.8).abs() < 1e-7);
    assert_eq!(back.data, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn round_trip_is_float32_rounding(values in prop::collection::vec(-1e6f64..1e6, 8 * 8 * 8)) {
        let back = mrc::decode(&mrc::encode(8, 8, 8, 1.0, 1, &values)).unwrap();
        let expected: Vec<f64> = values.iter().map(|&v| v as f32 as f64).collect();
        prop_assert_eq!(back.data, expected);
    }
}

#[test]
fn file_round_trip_and_cubic_check() {
    let dir = tempfile::tempdir().unwrap();
    let v = make_phantom(&PhantomSpec::five_blob(16, 1.0)).unwrap();
    let p = dir.path().join("v.mrc");
    mrc::write_volume(&p, 16, 1.0, v.data()).unwrap();
    let (n, px, data) = mrc::read_volume(&p).unwrap();
    assert_eq!((n, px), (16, 1.0));
    assert!(data.iter().zip(v.data()).all(|(a, b)| *a == *b as f32 as f64));
    let s = dir.path().join("s.mrcs");
    mrc::write_stack(&s, 16, 3, 1.0, &vec![1.0; 16 * 16 * 3]).unwrap();
    assert!(matches!(mrc::read_volume(&s), Err(MrcError::NotCubic { nz: 3, .. })));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2, "no temporary files remain");
}

#[test]
fn malformed_files_are_rejected() {
    let good = mrc::encode(4, 4, 4, 1.0, 1, &[0.5; 64]);
    assert!(matches!(mrc::decode(&good[..100]), Err(MrcError::Truncated { .. })));
    assert!(matches!(mrc::decode(&good[..good.len() - 4]), Err(MrcError::Truncated { .. })));
    let mut bad = good.clone();
    bad[12..16].copy_from_slice(&1i32.to_le_bytes());
    assert!(matches!(mrc::decode(&bad), Err(MrcError::UnsupportedMode(1))));
    let mut bad = good.clone();
    bad[208] = b'X';
    assert!(matches!(mrc::decode(&bad), Err(MrcError::BadStamp)));
    let mut bad = good.clone();
    bad[212] = 0x11;
    assert!(matches!(mrc::decode(&bad), Err(MrcError::BigEndian)));
    let mut bad = good;
    bad[92..96].copy_from_slice(&80i32.to_le_bytes());
    assert!(matches!(mrc::decode(&bad), Err(MrcError::ExtendedHeader(80))));
}

fn sample_meta() -> Vec<ParticleMeta> {
    let v = make_phantom(&PhantomSpec::five_blob(16, 1.0)).unwrap();
    let mut cfg = table_row('G', Scale::Desk, 3).unwrap();
    cfg.n = 16;
    cfg.n_images = 6;
    cfg.shift_sigma_px = 0.7;
    let mut meta = generate_dataset(&v, &cfg, &OpticsConfig::default()).unwrap().meta;
    meta[1].ctf = Some(CtfParams { d1_um: 0.5, d2_um: 0.75, alpha_rad: 0.3 });
    meta[2].ctf = None;
    meta[2].snr_db = None;
    meta[2].sigma = 0.0;
    meta
}

#[test]
fn metadata_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let meta = sample_meta();
    tables::write_metadata(&p, &meta).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), METADATA_HEADER.join(","));
    assert_eq!(tables::read_metadata(&p).unwrap(), meta);
    let row2 = text.lines().nth(3).unwrap();
    assert!(row2.ends_with(",,,,0,"), "{row2}");
}

#[test]
fn poses_accept_metadata_tables() {
    let dir = tempfile::tempdir().unwrap();
    let meta = sample_meta();
    let m = dir.path().join("m.csv");
    tables::write_metadata(&m, &meta).unwrap();
    let q: Vec<UnitQuaternion> = meta.iter().map(|x| x.rotation).collect();
    assert_eq!(tables::read_poses(&m).unwrap(), q);
    let p = dir.path().join("p.csv");
    tables::write_poses(&p, &q).unwrap();
    assert_eq!(tables::read_poses(&p).unwrap(), q);
}

fn schema_error(text: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, text).unwrap();
    match tables::read_metadata(&p) {
        Err(TableError::Schema(e)) => e.to_string(),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn schema_errors_name_the_cell() {
    let header = METADATA_HEADER.join(",");
    let e = schema_error("index,q1,q2,q3,q4,t1,t2,d1,d2_um,alpha_rad,sigma,snr_db\n");
    assert!(e.contains("line 1") && e.contains("d1_um"), "{e}");
    let e = schema_error(&format!("{header}\n0,1,0,0,0,0,0,,,,x,\n"));
    assert!(e.contains("line 2") && e.contains("`sigma`") && e.contains("`x`"), "{e}");
    let e = schema_error(&format!("{header}\n0,1,0,0,0,0,0,,,,0,\n5,1,0,0,0,0,0,,,,0,\n"));
    assert!(e.contains("line 3") && e.contains("`index`") && e.contains("expected index 1"), "{e}");
    let e = schema_error(&format!("{header}\n0,2,0,0,0,0,0,,,,0,\n"));
    assert!(e.contains("`q1`") && e.contains("norm"), "{e}");
    let e = schema_error(&format!("{header}\n0,1,0,0,0,0,0,0.5,,,0,\n"));
    assert!(e.contains("`d1_um`") && e.contains("all present"), "{e}");
    let e = schema_error(&format!("{header}\n0,1,0,0,0,0,,,,,0,\n"));
    assert!(e.contains("`t2`") && e.contains("required"), "{e}");
}

#[test]
fn metrics_and_fsc_tables() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |step, res| EvalRecord {
        step,
        loss: 1.25e-7,
        pose_mae_raw_deg: 3.5,
        pose_mae_aligned_deg: 0.1 + 0.2,
        gauge: Gauge::IDENTITY,
        fsc_resolution: res,
        fsc_resolution_unaligned: res,
    };
    let log = [rec(0, None), rec(200, Some(f64::INFINITY)), rec(400, Some(2.0))];
    let p = dir.path().join("metrics.csv");
    tables::write_metrics(&p, &log).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(
        text,
        "step,loss,pose_mae_raw_deg,pose_mae_aligned_deg,fsc_resolution\n\
         0,1.25e-7,3.5,0.30000000000000004,\n\
         200,1.25e-7,3.5,0.30000000000000004,inf\n\
         400,1.25e-7,3.5,0.30000000000000004,2\n"
    );
    let rows = tables::read_metrics(&p).unwrap();
    assert_eq!(rows[1].fsc_resolution, Some(f64::INFINITY));
    assert_eq!(rows[2].pose_mae_aligned_deg, 0.1 + 0.2);

    let v = make_phantom(&PhantomSpec::five_blob(16, 1.0)).unwrap();
    let curve = fsc(&v, &v).unwrap();
    let f = dir.path().join("fsc.csv");
    tables::write_fsc(&f, &curve).unwrap();
    let lines: Vec<String> = std::fs::read_to_string(&f).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(lines[0], "shell_freq_cyc_per_px,resolution_A,fsc");
    assert_eq!(lines.len(), 1 + 9);
    assert_eq!(lines[1], "0,inf,1");
    assert_eq!(lines[9], "0.5,2,1");
    let _ = Volume::zeros(4, 1.0);
}

#[test]
fn numbers_round_trip() {
    for v in [0.0, -0.0, 1.0, 0.1, 1e-300, 123456.789, 6.02e23, -2.5e-5, f64::MAX, f64::MIN_POSITIVE] {
        let s = tables::num(v);
        assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
    }
}
