use std::path::Path;
use std::process::{Command, Output};

fn dsmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmix")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut dirs = vec![root.to_path_buf()];
    while let Some(d) = dirs.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                dirs.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn selfcheck_passes() {
    let o = dsmix(&["selfcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn count_space_prints_exact_count_and_note() {
    let o = dsmix(&["count-space"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("986409"));
    assert!(text.contains("note:"));
    let o = dsmix(&["count-space", "3", "--include-empty"]);
    assert_eq!(stdout(&o).trim(), "16");
}

#[test]
fn eval_prints_srcc_and_plcc() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("s.csv");
    std::fs::write(&csv, "gt,pred\n1,1\n2,2\n3,4\n4,3\n").unwrap();
    let o = dsmix(&["eval", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("0.800000,"));
}

#[test]
fn gen_distort_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("refs");
    let o = dsmix(&["synth-refs", "--out", refs.to_str().unwrap(), "--count", "2", "--size", "32"]);
    assert_eq!(o.status.code(), Some(0));
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = dsmix(&[
            "--seed",
            "4",
            "--distortions",
            "pixelate,gaussian_noise",
            "gen-distort",
            "--refs",
            refs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(tree(&out));
    }
    assert_eq!(runs[0].iter().filter(|(p, _)| p.ends_with(".png")).count(), 22);
    assert!(runs[0] == runs[1]);
}

#[test]
fn validation_errors_exit_2() {
    let o = dsmix(&["--mix-max", "7", "count-space"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dsmix(&["--kd", "sideways", "count-space"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dsmix(&["--distortions", "sepia", "count-space"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.csv");
    assert_eq!(dsmix(&["eval", missing.to_str().unwrap()]).status.code(), Some(3));
    let o = dsmix(&["--config", missing.to_str().unwrap(), "count-space"]);
    assert_eq!(o.status.code(), Some(3));
}
