use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use hicom::evaluate::DetectionRecord;
use hicom::explain::{explain, template, Mode, Source};
use hicom_core::fusion::{ablation_stack, FusionConfig, VerdictSet};
use hicom_core::model::{Flag, ModuleId, ModuleSet, ModuleVerdict};

fn record(s1: f64, s2: f64, f3: Flag, f4: Flag) -> DetectionRecord {
    let cfg = FusionConfig::default();
    let verdicts = VerdictSet::from_verdicts(&[
        ModuleVerdict::scored(ModuleId::M1, s1, 0.5),
        ModuleVerdict::scored(ModuleId::M2, s2, 0.5),
        ModuleVerdict::flag_only(ModuleId::M3, f3),
        ModuleVerdict::flag_only(ModuleId::M4, f4),
    ]);
    DetectionRecord {
        clip_id: "test_00007".into(),
        frame_id: 2,
        face_id: 1,
        truth_fake: true,
        verdicts,
        gaze_p_locked: Some(0.1),
        attributes: None,
        modules: ModuleSet::ALL,
        fused: ablation_stack(&verdicts, ModuleSet::ALL, &cfg).unwrap(),
    }
}

#[test]
fn gaze_only_flag_names_only_the_gaze_cue() {
    let text = template(&record(0.1, 0.2, Flag::Flagged, Flag::Clear));
    assert_eq!(text.matches(ModuleId::M3.cue()).count(), 1);
    for m in [ModuleId::M1, ModuleId::M2, ModuleId::M4] {
        assert!(!text.contains(m.cue()), "{text}");
    }
}

#[test]
fn real_faces_name_no_cue() {
    let text = template(&record(0.1, 0.2, Flag::NotApplicable, Flag::Clear));
    for m in ModuleId::ALL {
        assert!(!text.contains(m.cue()));
    }
    assert!(text.contains("real"));
}

#[test]
fn offline_text_is_deterministic() {
    let r = record(0.9, 0.7, Flag::Clear, Flag::Flagged);
    let a = explain(&r, &Mode::Offline);
    let b = explain(&r, &Mode::Offline);
    assert_eq!(a, b);
    assert_eq!(a.source, Source::Offline);
    assert!(!a.degraded);
    assert_eq!(
        a.attribution,
        ModuleSet::from_modules(&[ModuleId::M1, ModuleId::M2, ModuleId::M4])
    );
}

#[test]
fn unreachable_endpoint_degrades_to_the_template() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let r = record(0.9, 0.2, Flag::Clear, Flag::Clear);
    let mode = Mode::Llm {
        endpoint: format!("http://127.0.0.1:{port}/v1"),
        timeout: Duration::from_millis(500),
        model: None,
    };
    let e = explain(&r, &mode);
    assert!(e.degraded);
    assert_eq!(e.source, Source::Offline);
    assert_eq!(e.llm_text, None);
    assert_eq!(e.text, template(&r));
}

#[test]
fn endpoint_reply_is_stored_verbatim() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let server = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line == "\r\n" {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let reply = "The scene motion of this face is off.";
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
        serde_json::from_slice::<serde_json::Value>(&body).unwrap()
    });
    let r = record(0.9, 0.2, Flag::Clear, Flag::Clear);
    let mode = Mode::Llm {
        endpoint: format!("http://127.0.0.1:{port}/"),
        timeout: Duration::from_secs(5),
        model: Some("m".into()),
    };
    let e = explain(&r, &mode);
    let prompt = server.join().unwrap();
    assert!(!e.degraded);
    assert_eq!(e.source, Source::Llm);
    assert_eq!(
        e.llm_text.as_deref(),
        Some("The scene motion of this face is off.")
    );
    assert_eq!(e.text, template(&r));
    assert_eq!(prompt["fused"]["attribution"], serde_json::json!(["M1"]));
    assert_eq!(prompt["modules"].as_array().unwrap().len(), 4);
    assert_eq!(prompt["model"], "m");
}
