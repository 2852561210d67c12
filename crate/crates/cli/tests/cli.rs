use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trapline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trapline"))
        .args(args)
        .env_remove("TRAPLINE_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run trapline")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Structurally complete JPEG stand-ins are enough for ingest and the
/// synthetic detector, which never decode pixels.
fn fake_card(root: &Path, burrow: &str, frames: usize) -> std::path::PathBuf {
    let card = root.join(format!("card-{burrow}"));
    fs::create_dir_all(card.join("DCIM")).unwrap();
    let mut manifest = String::from("filename,burrow,view,timestamp\n");
    for i in 0..frames {
        let name = format!("IMG_{i:04}.JPG");
        fs::write(card.join("DCIM").join(&name), [0xFF, 0xD8, i as u8, 0xFF, 0xD9]).unwrap();
        let secs = 5 * i;
        manifest.push_str(&format!(
            "{name},{burrow},O,2021-03-14 07:{:02}:{:02}\n",
            secs / 60,
            secs % 60
        ));
    }
    fs::write(card.join("manifest.csv"), manifest).unwrap();
    card
}

#[test]
fn schedule_reports_field_estimate() {
    let out = trapline(&["schedule"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("makespan       22.49 h"), "{text}");
    assert!(text.contains("PASS"));

    let slow = trapline(&["schedule", "--seg-rate", "1"]);
    assert_eq!(slow.status.code(), Some(1));
    assert!(stdout(&slow).contains("FAIL"));
}

#[test]
fn evaluate_prints_per_recording_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "recording_id,start_frame,end_frame,source,animal_ids\n";
    let pred = tmp.path().join("pred.csv");
    let truth = tmp.path().join("truth.csv");
    fs::write(
        &pred,
        format!("{header}B01-O-20210314,0,5,Auto,\nB01-O-20210314,6,10,Auto,\nB01-O-20210314,50,60,Auto,\n"),
    )
    .unwrap();
    fs::write(&truth, format!("{header}B01-O-20210314,0,10,Human,\nB01-O-20210314,80,90,Human,\n")).unwrap();
    let out = trapline(&["evaluate", "--pred", p(&pred), "--truth", p(&truth)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "recording_id,tp,fp,fn,precision,recall,f1");
    assert!(lines[1].starts_with("B01-O-20210314,2,1,1,"), "{text}");
    assert!(lines.last().unwrap().starts_with("TOTAL,2,1,1,"));
}

#[test]
fn ingest_segment_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let card = fake_card(root, "B05", 60);
    let (archive, store) = (root.join("archive"), root.join("store"));

    let out = trapline(&["ingest", "--source", p(&card), "--archive", p(&archive)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("copied 60"));
    let again = trapline(&["ingest", "--source", p(&card), "--archive", p(&archive)]);
    assert!(stdout(&again).contains("copied 0, duplicates 60"));

    let config = root.join("trapline.ini");
    fs::write(
        &config,
        format!(
            "[paths]\narchive = {}\nvideos = {}\nstore = {}\n",
            archive.display(),
            root.join("videos").display(),
            store.display()
        ),
    )
    .unwrap();
    let seg = trapline(&[
        "--config",
        p(&config),
        "segment",
        "--provider",
        "synthetic",
        "--threshold",
        "0.5",
    ]);
    assert!(seg.status.success(), "{}", String::from_utf8_lossy(&seg.stderr));
    let text = stdout(&seg);
    assert!(text.contains("B05 20210314 segment: completed"), "{text}");
    assert!(text.contains("B05 20210314 import: completed"), "{text}");

    let report = trapline(&["report", "annotations", "--store", p(&store), "--burrow", "B05"]);
    assert!(report.status.success());
    let rows = stdout(&report).lines().count();
    assert!(rows > 1);
    let none = trapline(&["report", "annotations", "--store", p(&store), "--burrow", "B06"]);
    assert_eq!(stdout(&none).lines().count(), 1);

    let status = trapline(&["report", "status", "--store", p(&store)]);
    let text = stdout(&status);
    assert!(text.starts_with("burrow_id,date,stage,items,first_utc,last_utc,backlog\n"));
    assert!(text.contains("B05,20210314,segmented"), "{text}");
}

#[test]
fn missing_detector_fails_the_day() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let card = fake_card(root, "B05", 5);
    let archive = root.join("archive");
    assert!(trapline(&["ingest", "--source", p(&card), "--archive", p(&archive)]).status.success());
    let out = trapline(&[
        "segment",
        "--recording",
        "B05-O-20210314",
        "--archive",
        p(&archive),
        "--videos",
        p(&root.join("v")),
        "--store",
        p(&root.join("s")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("B05 20210314 segment: FAILED"));

    let elsewhere = trapline(&[
        "segment",
        "--recording",
        "B09-O-20210314",
        "--archive",
        p(&archive),
        "--out",
        p(&root.join("v")),
        "--store",
        p(&root.join("s")),
    ]);
    assert!(elsewhere.status.success());
    assert!(stdout(&elsewhere).contains("no burrow-days selected"));
}

#[test]
fn prune_writes_a_smaller_library() {
    let tmp = tempfile::tempdir().unwrap();
    let header: Vec<String> = ["individual_id", "image_ref"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..32).map(|i| format!("e{i:02}")))
        .collect();
    let row = |id: &str, r: &str, base: f64, jitter: f64| {
        let mut v = vec![id.to_string(), r.to_string()];
        v.extend((0..32).map(|i| format!("{}", if i == 0 { base + jitter } else { jitter })));
        v.join(",")
    };
    let mut lib = vec![header.join(",")];
    let mut val = vec![header.join(",")];
    for (k, id) in ["T1", "T2", "T3"].iter().enumerate() {
        for j in 0..4 {
            lib.push(row(id, &format!("{id}-{j}"), 10.0 * k as f64, 0.01 * j as f64));
        }
        val.push(row(id, &format!("q-{id}"), 10.0 * k as f64, 0.02));
    }
    let (lp, vp, out) = (tmp.path().join("lib.csv"), tmp.path().join("val.csv"), tmp.path().join("pruned.csv"));
    fs::write(&lp, lib.join("\n") + "\n").unwrap();
    fs::write(&vp, val.join("\n") + "\n").unwrap();
    let run = || trapline(&["reid", "prune", "--library", p(&lp), "--validation", p(&vp), "--seed", "9", "--out", p(&out)]);
    let first = run();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("kept 3 of 12"), "{}", stdout(&first));
    let bytes = fs::read(&out).unwrap();
    assert!(run().status.success());
    assert_eq!(fs::read(&out).unwrap(), bytes);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.ini");
    fs::write(&config, "[paths]\narchiv = /tmp/x\n").unwrap();
    let out = trapline(&["--config", p(&config), "report", "status"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("archiv"));
}
