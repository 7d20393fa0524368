use std::fs;
use std::path::Path;

use margl::data::{generate_synthetic, load_dataset, render_frame, SynthConfig};
use margl::kv::KeyValues;
use margl::Error;

fn small(seed: u64) -> SynthConfig {
    let kv = KeyValues::parse(&format!("subjects=3\nframes=4\nseed={seed}\n")).unwrap();
    SynthConfig::from_kv(&kv).unwrap()
}

fn generated() -> (tempfile::TempDir, SynthConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(7);
    generate_synthetic(&cfg, dir.path()).unwrap();
    (dir, cfg)
}

fn rewrite(path: &Path, f: impl FnOnce(String) -> String) {
    let text = fs::read_to_string(path).unwrap();
    fs::write(path, f(text)).unwrap();
}

fn load_err(dir: &Path) -> String {
    match load_dataset(dir) {
        Err(e @ Error::Load(_)) => e.to_string(),
        Err(other) => panic!("expected a dataset error, got {other}"),
        Ok(_) => panic!("expected a dataset error"),
    }
}

#[test]
fn generated_files_load_back_exactly() {
    let (dir, cfg) = generated();
    let data = load_dataset(dir.path()).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(data.au_names, ["AU1", "AU2", "AU3", "AU4", "AU5", "AU6"]);
    assert_eq!(data.rules, cfg.rules());
    assert!(data.has_oracle());
    for s in &data.samples {
        let subject: usize = s.subject[1..].parse().unwrap();
        let frame: usize = s.frame.parse().unwrap();
        let truth = render_frame(&cfg, subject - 1, frame).unwrap();
        assert_eq!(s.rgb, truth.rgb, "{} {}", s.subject, s.frame);
        assert_eq!(s.labels, truth.labels);
        for (p, q) in s.landmarks.points.iter().zip(&truth.landmarks) {
            assert!((p.x - q.x).abs() <= 5e-4 && (p.y - q.y).abs() <= 5e-4);
        }
        let oracle = s.oracle.as_ref().unwrap();
        for (got, want) in oracle.iter().zip(&truth.oracle) {
            for side in 0..2 {
                for (a, b) in got[side].to_array().iter().zip(want[side].to_array()) {
                    assert!((a - b).abs() <= 5e-4);
                }
            }
        }
    }
}

#[test]
fn generation_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&small(11), a.path()).unwrap();
    generate_synthetic(&small(11), b.path()).unwrap();
    for name in ["labels.csv", "landmarks.csv", "oracle.csv", "rules.txt", "images/S02/0003.png"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&small(12), c.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("images/S01/0000.png")).unwrap(),
        fs::read(c.path().join("images/S01/0000.png")).unwrap()
    );
}

#[test]
fn missing_labels_file_is_a_dataset_error() {
    let (dir, _) = generated();
    fs::remove_file(dir.path().join("labels.csv")).unwrap();
    assert!(load_err(dir.path()).contains("labels.csv"));
}

#[test]
fn non_binary_label_names_the_line() {
    let (dir, _) = generated();
    rewrite(&dir.path().join("labels.csv"), |t| {
        t.lines()
            .map(|l| {
                let mut fields: Vec<&str> = l.split(',').collect();
                if l.starts_with("S01,0002") {
                    fields[2] = "2";
                }
                fields.join(",") + "\n"
            })
            .collect()
    });
    let msg = load_err(dir.path());
    assert!(msg.contains("line 4"), "{msg}");
}

#[test]
fn duplicate_rows_are_rejected() {
    let (dir, _) = generated();
    rewrite(&dir.path().join("labels.csv"), |t| {
        let dup = t.lines().nth(1).unwrap().to_string();
        format!("{t}{dup}\n")
    });
    assert!(load_err(dir.path()).contains("duplicate"));
}

#[test]
fn missing_landmark_row_names_the_frame() {
    let (dir, _) = generated();
    rewrite(&dir.path().join("landmarks.csv"), |t| {
        t.lines().filter(|l| !l.starts_with("S03,0001")).map(|l| format!("{l}\n")).collect()
    });
    let msg = load_err(dir.path());
    assert!(msg.contains("S03") && msg.contains("0001"), "{msg}");
}

#[test]
fn missing_image_is_a_dataset_error() {
    let (dir, _) = generated();
    fs::remove_file(dir.path().join("images/S02/0000.png")).unwrap();
    assert!(load_err(dir.path()).contains("S02"));
}

#[test]
fn oracle_file_is_optional() {
    let (dir, _) = generated();
    fs::remove_file(dir.path().join("oracle.csv")).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    assert!(!data.has_oracle());
}

#[test]
fn rules_must_match_the_label_columns() {
    let (dir, _) = generated();
    fs::remove_file(dir.path().join("rules.txt")).unwrap();
    // six AUs have no built-in rule table to fall back on
    assert!(load_err(dir.path()).contains("rules"));
}
