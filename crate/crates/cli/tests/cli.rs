use std::path::PathBuf;
use std::process::{Command, Output};

fn fasternam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fasternam"))
        .args(args)
        .output()
        .unwrap()
}

fn config(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    p.display().to_string()
}

fn scratch(name: &str, contents: &str) -> String {
    let dir = std::env::temp_dir().join(format!("fasternam-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn analyze_human_and_json_totals_agree() {
    for cfg in [
        "yolov5s-like.cfg",
        "improved-like.cfg",
        "demo-fasternet-nam.cfg",
    ] {
        let human = fasternam(&["analyze", &config(cfg)]);
        assert!(human.status.success());
        let json: serde_json::Value =
            serde_json::from_slice(&fasternam(&["analyze", &config(cfg), "--json"]).stdout)
                .unwrap();
        let text = stdout(&human);
        for key in ["total_params", "total_flops"] {
            let line = text.lines().find(|l| l.starts_with(key)).unwrap();
            let digits: String = line[key.len()..]
                .trim()
                .split(' ')
                .next()
                .unwrap()
                .replace(',', "");
            assert_eq!(
                digits.parse::<u64>().unwrap(),
                json[key].as_u64().unwrap(),
                "{cfg} {key}"
            );
        }
    }
}

#[test]
fn compare_reports_reductions() {
    let o = fasternam(&[
        "compare",
        &config("yolov5s-like.cfg"),
        &config("improved-like.cfg"),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(
        text.contains("params:") && text.contains("GFLOPs:"),
        "{text}"
    );
    assert_eq!(text.matches("reduction").count(), 2, "{text}");
    assert!(text.contains('%'));
}

#[test]
fn evaluate_identical_detections() {
    let gt = "# image category x1 y1 x2 y2\nimg1 0 0 0 10 10\nimg1 1 20 20 30 35\nimg2 0 5 5 9 9\n";
    let det: String = gt
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l} 1.0\n"))
        .collect();
    let gt_path = scratch("gt.txt", gt);
    let det_path = scratch("det.txt", &det);
    let o = fasternam(&["evaluate", "--gt", &gt_path, "--det", &det_path, "--range"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("mAP@.5 1.0000"), "{text}");
    assert!(text.contains("mAP@.5:.95 1.0000"), "{text}");

    let json: serde_json::Value = serde_json::from_slice(
        &fasternam(&["evaluate", "--gt", &gt_path, "--det", &det_path, "--json"]).stdout,
    )
    .unwrap();
    assert_eq!(json["map50"], 1.0);
    assert!(json["map5095"].is_null());
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| fasternam(args).status.code().unwrap();
    assert_eq!(code(&["analyze", "missing.cfg"]), 2);
    let bad = scratch("bad.cfg", "input 3 8 8\nconv cin=3 cout=4 k=3\n");
    let o = fasternam(&["analyze", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let cp = scratch("cp.cfg", "input 64 8 8\npconv c=64 cp=128 k=3\n");
    assert_eq!(code(&["analyze", &cp]), 2);

    let empty_gt = scratch("empty_gt.txt", "# nothing\n");
    let det = scratch("one_det.txt", "a 0 0 0 1 1 0.5\n");
    assert_eq!(code(&["evaluate", "--gt", &empty_gt, "--det", &det]), 1);
    let gt = scratch("one_gt.txt", "a 0 0 0 1 1\n");
    assert_eq!(
        code(&["evaluate", "--gt", &gt, "--det", &det, "--iou", "0"]),
        1
    );
    let bad_det = scratch("bad_det.txt", "a 0 0 0 1 1\n");
    assert_eq!(code(&["evaluate", "--gt", &gt, "--det", &bad_det]), 2);

    assert_eq!(
        code(&[
            "train-demo",
            &config("demo-fasternet-nam.cfg"),
            "--steps",
            "0"
        ]),
        1
    );
    assert_eq!(
        code(&["train-demo", &config("yolov5s-like.cfg"), "--steps", "1"]),
        1
    );
    assert_eq!(code(&["gradcheck", "--tol", "0"]), 1);
}

#[test]
fn train_demo_prints_log_tail() {
    let o = fasternam(&[
        "train-demo",
        &config("demo-fasternet-nam.cfg"),
        "--steps",
        "3",
        "--lr",
        "0",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("initial_loss") && text.contains("final_loss"));
    assert!(text.contains("ratio 1.0000"), "{text}");
}
