use std::path::Path;
use std::process::{Command, Output};

fn portrait(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_portrait"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "render": {"image_size": 16},
  "lmk2video": {"image_size": 16, "latent_factor": 2, "frames_per_clip": 2, "t_steps": 30,
                "ddim_steps": 2, "base_channels": 4, "heads": 2, "guider_channels": 2},
  "audio2mesh": {"hidden": 8},
  "audio2pose": {"d_model": 8, "layers": 1, "heads": 2, "d_ff": 8},
  "dataset": {"clips": 2, "val_clips": 1, "seconds": 0.2},
  "training": {"steps": 2, "batch": 2, "val_every": 1}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn no_args_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = portrait(&[], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = portrait(&["dance"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"render": {"size": 3}}"#).unwrap();
    let o = portrait(&["gen-data", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("size"), "{}", stderr(&o));
}

#[test]
fn gen_data_creates_corpus() {
    let dir = setup();
    let o = portrait(&["gen-data", "--config", "tiny.json", "--seed", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("data/dataset.json").is_file());
    assert!(dir.path().join("data/clip_001/frames/0000.png").is_file());
}

#[test]
fn infer_names_missing_stage() {
    let dir = setup();
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", "tiny.json"]);
        portrait(&all, dir.path())
    };
    assert_eq!(run(&["gen-data"]).status.code(), Some(0));
    let infer = [
        "infer",
        "--audio",
        "data/clip_000/audio.wav",
        "--reference",
        "data/clip_000/reference.png",
    ];
    let o = run(&infer);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("audio2mesh"), "{}", stderr(&o));

    let o = run(&["train-a2m"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&infer);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("audio2pose"), "{}", stderr(&o));

    for args in [&["train-a2p"][..], &["train-l2v", "--stage", "1"], &["train-l2v", "--stage", "2"]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    let o = run(&infer);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let frames = std::fs::read_dir(dir.path().join("out/frames")).unwrap().count();
    assert_eq!(frames, 5);
    for f in ["mesh.json", "pose.json", "landmarks.json", "poses/0004.png"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }

    let o = run(&[
        "infer",
        "--landmarks",
        "out/landmarks.json",
        "--reference",
        "data/clip_000/reference.png",
        "--out",
        "again",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for i in 0..5 {
        let name = format!("frames/{i:04}.png");
        assert_eq!(
            std::fs::read(dir.path().join("out").join(&name)).unwrap(),
            std::fs::read(dir.path().join("again").join(&name)).unwrap()
        );
    }
}

#[test]
fn stage2_without_stage1_fails() {
    let dir = setup();
    assert_eq!(portrait(&["gen-data", "--config", "tiny.json"], dir.path()).status.code(), Some(0));
    let o = portrait(&["train-l2v", "--stage", "2", "--config", "tiny.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lmk2video"));
    let o = portrait(&["train-l2v", "--stage", "3", "--config", "tiny.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn geometry_commands() {
    let dir = setup();
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", "tiny.json"]);
        let o = portrait(&all, dir.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    };
    run(&["gen-data"]);
    let c = "data/clip_000";
    run(&["project", "--mesh", &format!("{c}/mesh.json"), "--pose", &format!("{c}/pose.json"), "--out", "lmk.json"]);
    assert_eq!(
        std::fs::read(dir.path().join("lmk.json")).unwrap(),
        std::fs::read(dir.path().join(c).join("landmarks.json")).unwrap()
    );
    run(&["render-pose", "--landmarks", "lmk.json", "--out", "poses"]);
    assert_eq!(
        std::fs::read(dir.path().join("poses/0002.png")).unwrap(),
        std::fs::read(dir.path().join(c).join("poses/0002.png")).unwrap()
    );
    let other = "data/clip_001/mesh.json";
    let mesh = format!("{c}/mesh.json");
    run(&["retarget", "--mesh", &mesh, "--src-template", &mesh, "--tgt-template", other, "--out", "re.json"]);
    run(&["scale-expr", "--mesh", &mesh, "--group", "lower_lip", "--factor", "1", "--out", "same.json"]);
    assert_eq!(
        std::fs::read(dir.path().join("same.json")).unwrap(),
        std::fs::read(dir.path().join(&mesh)).unwrap()
    );
    let o = portrait(
        &["scale-expr", "--mesh", &mesh, "--group", "ears", "--factor", "2", "--out", "x.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}
