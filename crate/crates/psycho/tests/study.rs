use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use mcfuse::explain::MarkBox;
use mcfuse::Class;
use mcfuse_psycho::export::{export_study, read_records, RECORDS_FILE};
use mcfuse_psycho::study::{ANNOTATIONS_FILE, SESSIONS_FILE};
use mcfuse_psycho::{Rejection, Study, StudyConfig, Submission};

fn pool(dir: &Path, per_class: usize) -> std::path::PathBuf {
    mcfuse::corpus::write_corpus(dir.join("pool"), per_class, 3, 12).unwrap();
    dir.join("pool/manifest.csv")
}

fn config(dir: &Path, manifest: &Path, seed: u64) -> StudyConfig {
    StudyConfig {
        study_id: "s1".into(),
        manifest: manifest.to_path_buf(),
        store_dir: dir.join("store"),
        per_session: 30,
        seed,
    }
}

fn answer(image_id: u64) -> Submission {
    Submission {
        image_id,
        label: Class::Real,
        boxes: vec![MarkBox { x: 1, y: 2, w: 3, h: 4 }],
        elapsed_ms: 1200,
    }
}

#[test]
fn eleven_sessions_exhaust_a_330_image_pool() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pool(dir.path(), 110);
    let study = Study::open(config(dir.path(), &manifest, 5)).unwrap();
    assert_eq!(study.pool().len(), 330);

    let mut seen = HashSet::new();
    for p in 0..11 {
        let s = study.create_session(&format!("p{p}")).unwrap();
        assert_eq!(s.images.len(), 30);
        for id in &s.images {
            assert!(seen.insert(*id), "image {id} assigned twice");
        }
    }
    assert_eq!(seen.len(), 330);
    assert_eq!(study.unassigned(), 0);
    let err = study.create_session("p11").unwrap_err();
    assert!(matches!(err.rejection(), Some(Rejection::StudyFull { .. })));
}

#[test]
fn assignment_is_seeded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pool(a.path(), 20);
    let mb = pool(b.path(), 20);
    let sa = Study::open(config(a.path(), &ma, 9)).unwrap();
    let sb = Study::open(config(b.path(), &mb, 9)).unwrap();
    let x = sa.create_session("x").unwrap();
    let y = sb.create_session("x").unwrap();
    assert_eq!(x.images, y.images);
    assert_eq!(x.session_id, y.session_id);
}

#[test]
fn submission_rules() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pool(dir.path(), 20);
    let study = Study::open(config(dir.path(), &manifest, 1)).unwrap();
    let s = study.create_session("ann").unwrap();
    let store = dir.path().join("store").join(ANNOTATIONS_FILE);

    let ack = study.submit(&s.session_id, answer(s.images[0])).unwrap();
    assert_eq!((ack.answered, ack.total), (1, 30));
    let lines = std::fs::read_to_string(&store).unwrap().lines().count();
    assert_eq!(lines, 1);

    let dup = study.submit(&s.session_id, answer(s.images[0])).unwrap_err();
    assert_eq!(dup.rejection().unwrap().code(), "duplicate");
    assert_eq!(std::fs::read_to_string(&store).unwrap().lines().count(), 1);

    let foreign = (0..60).find(|id| !s.images.contains(id)).unwrap();
    let wrong = study.submit(&s.session_id, answer(foreign)).unwrap_err();
    assert_eq!(wrong.rejection().unwrap().code(), "wrong_image");

    let mut oob = answer(s.images[1]);
    oob.boxes = vec![MarkBox {
        x: 10,
        y: 0,
        w: 5,
        h: 1,
    }];
    let err = study.submit(&s.session_id, oob).unwrap_err();
    assert_eq!(err.rejection().unwrap().code(), "invalid_box");

    let err = study.submit("nope", answer(s.images[1])).unwrap_err();
    assert_eq!(err.rejection().unwrap().code(), "unknown_session");
    assert_eq!(study.progress(&s.session_id).unwrap().cursor, 1);
}

#[test]
fn restart_recovers_sessions_and_cursors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pool(dir.path(), 40);
    let cfg = config(dir.path(), &manifest, 2);
    let (ids, cursors) = {
        let study = Study::open(cfg.clone()).unwrap();
        let mut ids = Vec::new();
        for (p, answered) in [("a", 5), ("b", 0), ("c", 30)] {
            let s = study.create_session(p).unwrap();
            for &img in &s.images[..answered] {
                study.submit(&s.session_id, answer(img)).unwrap();
            }
            ids.push(s.session_id);
        }
        let cursors: Vec<_> = ids.iter().map(|id| study.progress(id).unwrap()).collect();
        (ids, cursors)
    };
    assert_eq!(cursors.iter().map(|c| c.cursor).collect::<Vec<_>>(), [5, 0, 30]);

    let reopened = Study::open(cfg.clone()).unwrap();
    for (id, before) in ids.iter().zip(&cursors) {
        assert_eq!(&reopened.progress(id).unwrap(), before);
    }
    assert_eq!(reopened.annotations().len(), 35);
    assert_eq!(reopened.unassigned(), 120 - 90);

    // A crash mid-append leaves a torn line; it is dropped and appends resume.
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(dir.path().join("store").join(ANNOTATIONS_FILE))
        .unwrap();
    f.write_all(b"{\"session_id\":\"000-").unwrap();
    drop(f);
    drop(reopened);
    let again = Study::open(cfg).unwrap();
    assert_eq!(again.annotations().len(), 35);
    let s = again.session(&ids[1]).unwrap();
    again.submit(&ids[1], answer(s.images[0])).unwrap();
    assert_eq!(again.progress(&ids[1]).unwrap().cursor, 1);
    let text = std::fs::read_to_string(dir.path().join("store").join(ANNOTATIONS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 36);
    assert!(dir.path().join("store").join(SESSIONS_FILE).exists());
}

#[test]
fn export_round_trip_and_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pool(dir.path(), 20);
    let study = Study::open(config(dir.path(), &manifest, 4)).unwrap();
    let s = study.create_session("exp").unwrap();
    for &img in &s.images[..12] {
        let truth = study.image(img).unwrap().truth;
        let mut sub = answer(img);
        sub.label = truth;
        study.submit(&s.session_id, sub).unwrap();
    }

    let model_path = dir.path().join("model.csv");
    let mut model = String::from("image_id,truth,predicted\n");
    for img in study.pool() {
        model.push_str(&format!("{},{},GAN\n", img.image_id, img.truth));
    }
    std::fs::write(&model_path, model).unwrap();

    let out = dir.path().join("export");
    let report = export_study(&study, &out, Some(&model_path)).unwrap();
    assert_eq!(report.total, 1.0);
    assert_eq!(report.confusion.total(), 12);

    let file = std::fs::File::open(out.join(RECORDS_FILE)).unwrap();
    let back = read_records(std::io::BufReader::new(file)).unwrap();
    assert_eq!(back, study.annotations());

    let manual = std::fs::File::open(out.join("manual_predictions.csv")).unwrap();
    let model = std::fs::File::open(out.join("model_predictions.csv")).unwrap();
    let paired = mcfuse::evalkit::PairedPredictions::join_csv(manual, model).unwrap();
    assert_eq!(paired.len(), 12);
}

#[test]
fn empty_study_cannot_export() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pool(dir.path(), 10);
    let study = Study::open(config(dir.path(), &manifest, 0)).unwrap();
    let err = export_study(&study, &dir.path().join("e"), None).unwrap_err();
    assert_eq!(err.rejection().unwrap().code(), "empty_study");
}
