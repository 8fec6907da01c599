use std::path::Path;
use std::process::{Command, Output};

fn hle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hle")).args(args).output().expect("spawn hle")
}

fn ok(args: &[&str]) -> String {
    let out = hle(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read(path: &str) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

/// Generates `tiny`, trains briefly and decodes, all under `dir`.
fn pipeline(dir: &Path) {
    ok(&["gen-scene", "--suite", "tiny", "--out-labels", &p(dir, "l.hle"), "--out-instances", &p(dir, "i.hle"), "--out-catalog", &p(dir, "cat.tsv")]);
    ok(&[
        "train", "--labels", &p(dir, "l.hle"), "--instances", &p(dir, "i.hle"), "--catalog", &p(dir, "cat.tsv"),
        "--set", "steps=40", "--seed", "3",
        "--out-fields", &p(dir, "f.hle"), "--out-state", &p(dir, "s.hle"), "--curve", &p(dir, "curve.csv"),
    ]);
    ok(&["decode", "--fields", &p(dir, "f.hle"), "--state", &p(dir, "s.hle"), "--catalog", &p(dir, "cat.tsv"), "--out", &p(dir, "pan.hle")]);
}

#[test]
fn full_pipeline_produces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let curve = String::from_utf8(read(&p(d, "curve.csv"))).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("step,seg,seg_mean,ins,ins_var,seed,total"));
    assert_eq!(lines.count(), 41);
    assert!(Path::new(&p(d, "pan.hle.segments")).exists());
    assert!(Path::new(&p(d, "pan.hle.scores")).exists());

    let out = ok(&[
        "eval", "--pred", &p(d, "pan.hle"), "--gt-labels", &p(d, "l.hle"), "--gt-instances", &p(d, "i.hle"),
        "--scores", &p(d, "pan.hle.scores"),
    ]);
    for m in ["pq", "pq_things", "pq_stuff", "pq_dagger", "pc", "miou", "ap", "ap50"] {
        let line = out.lines().find(|l| l.split('\t').next() == Some(m)).unwrap_or_else(|| panic!("{m} missing:\n{out}"));
        let v: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }
    assert!(out.contains("class_id\tname\tkind\tpq\tsq\trq\ttp\tfp\tfn"));
}

#[test]
fn self_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let out = ok(&["eval", "--pred", &p(d, "pan.hle"), "--gt", &p(d, "pan.hle"), "--metrics", "pq,pc"]);
    assert!(out.starts_with("pq\t1\n"), "{out}");
    assert!(out.contains("pc\t1\n"));
}

#[test]
fn seeded_commands_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["l.hle", "i.hle", "f.hle", "s.hle", "curve.csv", "pan.hle", "pan.hle.segments", "pan.hle.scores"] {
        assert_eq!(read(&p(a.path(), f)), read(&p(b.path(), f)), "{f}");
    }
    for dir in [a.path(), b.path()] {
        ok(&["thomson", "--k", "5", "--d", "4", "--seed", "9", "--out", &p(dir, "t.hle")]);
    }
    assert_eq!(read(&p(a.path(), "t.hle")), read(&p(b.path(), "t.hle")));
}

#[test]
fn thomson_reports_simplex_dots() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["thomson", "--k", "4", "--d", "3", "--out", &p(dir.path(), "t.hle")]);
    for key in ["min_dot", "max_dot"] {
        let v: f64 = out.lines().find(|l| l.starts_with(key)).unwrap().split('\t').nth(1).unwrap().parse().unwrap();
        assert!((v + 1.0 / 3.0).abs() < 1e-3, "{out}");
    }
    // header, then 4 x 1 x 3 float32 values
    assert_eq!(read(&p(dir.path(), "t.hle")).len(), 20 + 4 * 3 * 4);
}

#[test]
fn gen_scene_from_json_spec() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = r#"{"height": 20, "width": 30,
        "stuff_bands": [{"class_id": 2, "fraction": 0.5}, {"class_id": 0, "fraction": 0.5}],
        "things": [{"class_id": 3, "min_count": 2, "max_count": 2}],
        "shapes": ["disc"], "min_size": 0.2, "max_size": 0.3, "rng_seed": 5}"#;
    std::fs::write(d.join("spec.json"), spec).unwrap();
    ok(&["gen-scene", "--spec", &p(d, "spec.json"), "--out-labels", &p(d, "l.hle"), "--out-instances", &p(d, "i.hle")]);
    let inst = read(&p(d, "i.hle"));
    let ids: std::collections::BTreeSet<i32> =
        inst[20..].chunks(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(ids, [0, 1, 2].into());
}

#[test]
fn bench_downsample_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let out = ok(&["bench-downsample", "--fields", &p(d, "f.hle"), "--state", &p(d, "s.hle"), "--suite", "tiny", "--factors", "1,2,4"]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "factor,ms,pq");
    let factors: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(factors, ["1", "2", "4"]);
    assert!(!hle(&["bench-downsample", "--fields", &p(d, "f.hle"), "--state", &p(d, "s.hle"), "--suite", "tiny", "--runs", "3"]).status.success());
}

#[test]
fn gradcheck_passes_on_a_few_points() {
    let out = ok(&["gradcheck", "--points", "5", "--terms", "lovasz_binary,seed,ae"]);
    assert_eq!(out.lines().filter(|l| l.ends_with("\tpass")).count(), 3, "{out}");
}

#[test]
fn viz_writes_ppm_groups_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(&["viz", "--fields", &p(d, "f.hle"), "--out-prefix", &p(d, "emb"), "--target", "5,7", "--distance-out", &p(d, "dist.ppm")]);
    for g in 0..4 {
        let img = read(&p(d, &format!("emb_{g}.ppm")));
        assert!(img.starts_with(b"P6\n48 32\n255\n"));
        assert_eq!(img.len(), 13 + 48 * 32 * 3);
    }
    assert!(!Path::new(&p(d, "emb_4.ppm")).exists());
    let heat = read(&p(d, "dist.ppm"));
    let px = 13 + (5 * 48 + 7) * 3;
    assert_eq!(&heat[px..px + 3], &[255, 0, 0]);
    assert!(!hle(&["viz", "--fields", &p(d, "f.hle"), "--target", "99,0", "--distance-out", &p(d, "x.ppm")]).status.success());
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "stepz = 3\n").unwrap();
    let out = hle(&["train", "--suite", "tiny", "--config", &p(d, "bad.cfg"), "--out-fields", &p(d, "f"), "--out-state", &p(d, "s")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    assert!(out.stdout.is_empty());
    assert!(!hle(&["gen-scene", "--suite", "nope", "--out-labels", &p(d, "l"), "--out-instances", &p(d, "i")]).status.success());
    assert!(!hle(&["eval", "--pred", &p(d, "missing"), "--gt", &p(d, "missing")]).status.success());
}

#[test]
fn help_documents_subcommands() {
    let out = ok(&["--help"]);
    for sub in ["gen-scene", "thomson", "train", "decode", "eval", "bench-downsample", "gradcheck", "viz"] {
        assert!(out.contains(sub), "{sub}");
    }
}
