//! Dataset file round-trips: storage precision, companion metadata, and
//! rejection of damaged files.

use std::fs;

use sparcl_core::toyworld::{
    meta_path_for, read_dataset, write_dataset, DatasetMeta, World, WorldConfig, WorldError,
};

fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        v_obj: 3,
        v_att: 3,
        v_rel: 3,
        d_i: 12,
        d_t: 12,
        seed,
        ..WorldConfig::default()
    }
}

#[test]
fn round_trip_preserves_groups_at_storage_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let world = World::new(small_world(17)).unwrap();
    let meta = write_dataset(&path, &world, 12).unwrap();
    assert_eq!(meta.count, 12);

    let (cfg, groups) = read_dataset(&path).unwrap();
    assert_eq!(&cfg, world.config());
    assert_eq!(groups.len(), 12);
    for (index, group) in groups.iter().enumerate() {
        let original = world.group_at(index as u64);
        let pairs = [
            (&group.img_r, &original.img_r),
            (&group.img_sn, &original.img_sn),
            (&group.img_sp, &original.img_sp),
            (&group.cap_r, &original.cap_r),
            (&group.cap_sn, &original.cap_sn),
            (&group.cap_sp, &original.cap_sp),
        ];
        for (stored, live) in pairs {
            assert_eq!(stored.len(), live.len());
            for (s, l) in stored.iter().zip(live) {
                assert_eq!(*s, f64::from(*l as f32), "storage must be exactly f32");
            }
        }
        assert!(!group.diag_pos_corrupted);
        assert!(!group.diag_neg_easy);
    }
}

#[test]
fn meta_file_records_the_corrupted_indices() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let world = World::new(WorldConfig {
        p_bad_pos: 0.5,
        p_easy_neg: 0.5,
        ..small_world(29)
    })
    .unwrap();
    let meta = write_dataset(&path, &world, 40).unwrap();

    let expected_pos: Vec<u64> = (0..40)
        .filter(|&i| world.group_at(i).diag_pos_corrupted)
        .collect();
    let expected_easy: Vec<u64> = (0..40)
        .filter(|&i| world.group_at(i).diag_neg_easy)
        .collect();
    assert_eq!(meta.pos_corrupted_indices, expected_pos);
    assert_eq!(meta.neg_easy_indices, expected_easy);
    assert_eq!(meta.n_pos_corrupted as usize, expected_pos.len());
    assert_eq!(meta.n_neg_easy as usize, expected_easy.len());
    assert!(!expected_pos.is_empty(), "rates of 0.5 should corrupt some groups");

    let meta_file = meta_path_for(&path);
    assert_eq!(meta_file.file_name().unwrap(), "data.bin.meta.json");
    let parsed: DatasetMeta =
        serde_json::from_str(&fs::read_to_string(&meta_file).unwrap()).unwrap();
    assert_eq!(parsed, meta);
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let world = World::new(small_world(3)).unwrap();
    write_dataset(&path, &world, 4).unwrap();

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(
        read_dataset(&path),
        Err(WorldError::CorruptHeader(_) | WorldError::Io(_))
    ));
}

#[test]
fn mangled_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let world = World::new(small_world(3)).unwrap();
    write_dataset(&path, &world, 2).unwrap();

    let bytes = fs::read(&path).unwrap();
    let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = String::from_utf8(bytes[..newline].to_vec()).unwrap();

    let wrong_version = header.replacen("\"version\":1", "\"version\":99", 1);
    assert_ne!(wrong_version, header, "version field not found in header");
    let mut patched = wrong_version.into_bytes();
    patched.extend_from_slice(&bytes[newline..]);
    fs::write(&path, &patched).unwrap();
    assert!(matches!(
        read_dataset(&path),
        Err(WorldError::CorruptHeader(_))
    ));

    fs::write(&path, b"not json at all\n\x00\x01\x02").unwrap();
    assert!(matches!(
        read_dataset(&path),
        Err(WorldError::CorruptHeader(_))
    ));
}

#[test]
fn missing_file_reports_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.bin");
    assert!(matches!(read_dataset(&path), Err(WorldError::Io(_))));
}
