use std::path::PathBuf;

use hicom::ingest::{cmd_ingest, ingest, rejections_path, Layout, Rejection};
use hicom::io::{read_jsonl, read_manifest, write_jsonl};
use hicom_core::model::{AgeClass, ClipRecord, FaceRecord, FrameRecord, GenderClass};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn clip(id: &str) -> ClipRecord {
    ClipRecord {
        clip_id: id.into(),
        fps: 25.0,
        frames: vec![FrameRecord {
            frame_id: 0,
            image_path: format!("{id}/frame_000.png"),
            faces: vec![
                FaceRecord {
                    face_id: 0,
                    bbox: [1.0, 2.0, 3.0, 4.0],
                    label: 1,
                    gaze_locked: Some(true),
                    age: Some(AgeClass::Child),
                    gender: Some(GenderClass::Male),
                },
                FaceRecord {
                    face_id: 1,
                    bbox: [9.0, 2.0, 3.0, 4.0],
                    label: 0,
                    gaze_locked: None,
                    age: None,
                    gender: None,
                },
            ],
        }],
    }
}

#[test]
fn normalized_jsonl_is_an_identity() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.jsonl");
    let clips = vec![clip("a"), clip("b")];
    write_jsonl(&src, &clips).unwrap();
    let out = dir.path().join("out.jsonl");
    let res = cmd_ingest(&src, Layout::Jsonl, &out).unwrap();
    assert!(res.rejected.is_empty());
    assert_eq!(read_manifest(&out).unwrap(), clips);
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn unlabeled_records_are_rejected_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.jsonl");
    let good = serde_json::to_string(&clip("good")).unwrap();
    let mut bad: serde_json::Value = serde_json::to_value(clip("bad")).unwrap();
    bad["frames"][0]["faces"][1]
        .as_object_mut()
        .unwrap()
        .remove("label");
    let mut degenerate = clip("flat");
    degenerate.frames[0].faces[0].bbox[2] = 0.0;
    let lines = [
        good.clone(),
        bad.to_string(),
        "{not json".into(),
        serde_json::to_string(&degenerate).unwrap(),
        good,
    ];
    std::fs::write(&src, lines.join("\n") + "\n").unwrap();

    let out = dir.path().join("norm.jsonl");
    let res = cmd_ingest(&src, Layout::Jsonl, &out).unwrap();
    assert_eq!(
        res.clips
            .iter()
            .map(|c| c.clip_id.as_str())
            .collect::<Vec<_>>(),
        ["good", "good"]
    );
    let rejected: Vec<Rejection> = read_jsonl(&rejections_path(&out)).unwrap();
    assert_eq!(rejected.len(), 3);
    assert_eq!(rejected[0].clip_id.as_deref(), Some("bad"));
    assert!(
        rejected[0].reason.contains("label"),
        "{}",
        rejected[0].reason
    );
    assert!(rejected[0].source.ends_with(":2"));
    assert_eq!(rejected[1].clip_id, None);
    assert_eq!(rejected[2].clip_id.as_deref(), Some("flat"));
}

#[test]
fn ffiw_like_tree_keeps_boxes_exactly() {
    let res = ingest(&fixture("ffiw_toy"), Layout::FfiwLike).unwrap();
    assert_eq!(res.clips.len(), 1);
    let c = &res.clips[0];
    assert_eq!(c.clip_id, "vid_a");
    assert_eq!(c.fps, 30.0);
    assert_eq!(c.frames.len(), 3);
    assert_eq!(c.frames[2].image_path, "vid_a/frames/002.png");
    let boxes: Vec<[f64; 4]> = c.frames.iter().map(|f| f.faces[1].bbox).collect();
    assert_eq!(
        boxes,
        [
            [120.0, 18.75, 38.5, 50.0],
            [121.25, 19.0, 38.5, 50.0],
            [122.5, 19.25, 38.5, 50.0]
        ]
    );
    assert_eq!(c.frames[0].faces[0].bbox, [12.5, 20.0, 40.0, 52.25]);
    assert_eq!(
        c.frames
            .iter()
            .map(|f| f.faces[1].label)
            .collect::<Vec<_>>(),
        [1, 1, 1]
    );
    assert_eq!(c.frames[2].faces[0].label, 0);
    // Absent optional attributes are explicit nulls in the output.
    let json = serde_json::to_value(&c.frames[0].faces[1]).unwrap();
    assert!(json["age"].is_null() && json["gender"].is_null() && json["gaze_locked"].is_null());
    assert_eq!(c.frames[2].faces[1].age, Some(AgeClass::Senior));

    assert_eq!(res.rejected.len(), 1);
    assert_eq!(res.rejected[0].clip_id.as_deref(), Some("vid_b"));
    assert!(res.rejected[0].reason.contains("missing label"));
}

#[test]
fn ffiw_like_requires_a_directory() {
    assert!(ingest(
        &fixture("ffiw_toy/vid_a/annotations.json"),
        Layout::FfiwLike
    )
    .is_err());
}
