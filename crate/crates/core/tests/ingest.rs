mod common;

use std::fs;
use std::thread;

use common::{jpeg, make_card, Shots};
use trapline_core::ingest::{card_images, ingest_card, ManifestProvider};
use trapline_core::videopack::plan_day;
use trapline_core::RecordingId;

fn shots(count: usize) -> [Shots<'static>; 2] {
    [
        Shots { burrow: "B07", view: "O", date: "2021-03-14", count, offset_secs: 0 },
        Shots { burrow: "B07", view: "F", date: "2021-03-14", count, offset_secs: 1 },
    ]
}

#[test]
fn card_lands_in_canonical_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let card = make_card(tmp.path(), "card", &shots(12));
    let archive = tmp.path().join("archive");
    let provider = ManifestProvider::from_path(&card.join("manifest.csv")).unwrap();
    let report = ingest_card(&card, &archive, &provider).unwrap();
    assert_eq!(report.copied, 24);
    assert_eq!(report.recordings.len(), 2);

    let rec: RecordingId = "B07-O-20210314".parse().unwrap();
    let dir = archive.join(rec.archive_dir());
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12);
    assert_eq!(names[0], "B07-O-20210314-070000.jpg");
    assert!(names.iter().all(|n| !n.ends_with(".tmp")));
    let (plan, ignored) = plan_day(&archive, &rec, 30).unwrap();
    assert_eq!(plan.len(), 12);
    assert!(ignored.is_empty());
}

#[test]
fn bad_files_are_reported_and_the_rest_copied() {
    let tmp = tempfile::tempdir().unwrap();
    let card = make_card(tmp.path(), "card", &shots(10));
    let dcim = card.join("DCIM/100MEDIA");
    // pulled mid-write
    let full = fs::read(dcim.join("IMG_00003.JPG")).unwrap();
    fs::write(dcim.join("IMG_00003.JPG"), &full[..full.len() / 2]).unwrap();
    // not in the manifest
    fs::write(dcim.join("IMG_99999.JPG"), jpeg(8, 8, 1)).unwrap();
    // not an image at all
    fs::write(dcim.join("notes.txt"), "hello").unwrap();

    let archive = tmp.path().join("archive");
    let provider = ManifestProvider::from_path(&card.join("manifest.csv")).unwrap();
    let report = ingest_card(&card, &archive, &provider).unwrap();
    assert_eq!(report.copied, 19);
    let mut failed: Vec<String> = report
        .errors
        .iter()
        .map(|e| e.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    failed.sort();
    assert_eq!(failed, ["IMG_00003.JPG", "IMG_99999.JPG"]);

    // re-inserting the repaired card finishes the job
    fs::write(dcim.join("IMG_00003.JPG"), &full).unwrap();
    let again = ingest_card(&card, &archive, &provider).unwrap();
    assert_eq!(again.copied, 1);
    assert_eq!(again.skipped_duplicates, 19);
}

#[test]
fn conflicting_content_is_never_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    let a = make_card(tmp.path(), "a", &shots(4));
    let b = make_card(tmp.path(), "b", &shots(4));
    // same capture metadata, different pixels
    fs::write(b.join("DCIM/100MEDIA/IMG_00000.JPG"), jpeg(64, 48, 250)).unwrap();

    let pa = ManifestProvider::from_path(&a.join("manifest.csv")).unwrap();
    let pb = ManifestProvider::from_path(&b.join("manifest.csv")).unwrap();
    ingest_card(&a, &archive, &pa).unwrap();
    let rec: RecordingId = "B07-O-20210314".parse().unwrap();
    let target = archive.join(rec.archive_dir()).join("B07-O-20210314-070000.jpg");
    let original = fs::read(&target).unwrap();

    let report = ingest_card(&b, &archive, &pb).unwrap();
    assert_eq!(report.errors.len(), 1);
    assert!(report.errors[0].reason.contains("different content"));
    assert_eq!(report.skipped_duplicates, 7);
    assert_eq!(fs::read(&target).unwrap(), original);
}

#[test]
fn concurrent_ingest_of_the_same_card() {
    let tmp = tempfile::tempdir().unwrap();
    let card = make_card(tmp.path(), "card", &shots(150));
    let archive = tmp.path().join("archive");
    let provider = ManifestProvider::from_path(&card.join("manifest.csv")).unwrap();
    let reports: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| ingest_card(&card, &archive, &provider).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let copied: usize = reports.iter().map(|r| r.copied).sum();
    assert_eq!(copied, 300, "every file written exactly once");
    assert!(reports.iter().all(|r| r.errors.is_empty()));
    assert_eq!(card_images(&archive).unwrap().len(), 300);
}
