//! Full command-line workflow: generate data, train, export, evaluate, and
//! emit boundary masks.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sembound"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn failed");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(path: &Path, data_root: &Path, out_dir: &Path) {
    let text = format!(
        r#"
seed = 1
output_dir = "{out}"

[dataset]
kind = "directory"
root = "{root}"
num_categories = 4
size = 24

[backbone]
channels = [4, 6, 8, 8, 8]

[head]
variant = "casenet"
seg_channels = 8

[augment]
crop = [24, 24]
scale_range = [1.0, 1.0]

[train]
batch_size = 2
eval_interval = 100
log_interval = 2

[schedule]
max_iter = 6

[boundary]
radius = 1

[eval]
trimap_widths = [3]
ods = false
"#,
        out = out_dir.display(),
        root = data_root.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn synth_train_export_eval_gen_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");

    run_ok(bin().args([
        "synth-data",
        "--out",
        data.to_str().unwrap(),
        "--num",
        "8",
        "--size",
        "24",
        "--categories",
        "4",
    ]));
    assert!(data.join("images/000000.png").is_file());
    assert!(data.join("labels/000007.png").is_file());
    assert!(data.join("instances/000000.png").is_file());

    let cfg_path = dir.path().join("run.toml");
    write_config(&cfg_path, &data, &runs);
    let stdout = run_ok(bin().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--override",
        "loss.alpha=2.0",
    ]));
    assert!(stdout.contains("checkpoint:"), "stdout: {stdout}");
    let ckpt = runs.join("checkpoint_final.ckpt");
    assert!(ckpt.is_file());

    let exported = dir.path().join("inference.ckpt");
    let stdout = run_ok(bin().args([
        "export",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        exported.to_str().unwrap(),
    ]));
    assert!(stdout.contains("head discarded"));

    let eval_out = dir.path().join("eval");
    let stdout = run_ok(bin().args([
        "eval",
        "--weights",
        exported.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--widths",
        "3,5",
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("mIoU"));
    assert!(eval_out.join("metrics.jsonl").is_file());
    assert!(eval_out.join("summary.txt").is_file());

    let masks = dir.path().join("masks");
    run_ok(bin().args([
        "gen-boundaries",
        "--labels",
        data.join("labels").to_str().unwrap(),
        "--out",
        masks.to_str().unwrap(),
        "--radius",
        "2",
        "--instances",
        data.join("instances").to_str().unwrap(),
    ]));
    assert!(masks.join("000000_c00.png").is_file());
    assert!(masks.join("000000_c03.png").is_file());

    // Boundary masks on disk match in-process generation.
    let labels = sembound::pipeline::png::read_label_png(&data.join("labels/000000.png")).unwrap();
    let inst =
        sembound::pipeline::png::read_label_png(&data.join("instances/000000.png")).unwrap();
    let tensor = sembound::semantic_boundaries(
        &sembound::LabelMap::new(labels).unwrap(),
        4,
        &sembound::BoundaryGenConfig {
            radius: 2,
            instance_sensitive: true,
            ..Default::default()
        },
        Some(&sembound::InstanceMap::new(inst.mapv(|v| v as u32))),
    )
    .unwrap();
    let on_disk =
        sembound::pipeline::png::read_label_png(&masks.join("000000_c01.png")).unwrap();
    let expect = tensor.channel(1).mapv(|v| if v != 0 { 255 } else { 0 });
    assert_eq!(on_disk, expect);
}

#[test]
fn eval_rejects_garbage_weights() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not an artifact").unwrap();
    let out = bin()
        .args([
            "eval",
            "--weights",
            bogus.to_str().unwrap(),
            "--data",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("magic") || err.contains("artifact"), "{err}");
}
