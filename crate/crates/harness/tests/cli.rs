//! End-to-end checks of the `ver` binary: exit codes, artifact layout,
//! and bit-identical reruns, all on a miniature configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ver() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ver"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
[model]
image_height = 8
image_width = 8
image_channels = 2
patch = 4
token_dim = 8
num_heads = 2
mlp_ratio = 2
plain_blocks = 1
expert_blocks = 2
num_experts = 3
active_k = 2
gate_hidden = 8
per_gate_hidden = 2
router_hidden = 8
dropout = 0.0
per_gate_budget = 0.05

[teachers]
dims = [8, 8]
seed = 5

[pretrain]
steps = 20
batch = 2

[task]
seed = 11
relevant_teacher = 1
relevant_patches = [1, 2]
latent_dim = 2
target_dim = 3

[finetune]
steps = 10
batch = 2
eval_episodes = 12

[analysis]
dataset = 40
fraction = 0.5
pca_dims = 2
neighbors = 3

[ablate]
seeds = 2
topk_values = [1, 2]
expert_mixes = [[3, 0], [0, 2]]
"#,
    )
    .unwrap();
    path
}

fn run_ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn unknown_ablation_kind_is_a_usage_error_listing_the_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = ver()
        .args(["ablate", "--kind", "bogus", "--checkpoint", "missing.ckpt"])
        .args(["--config", cfg.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for kind in ["topk", "routing-strategy", "dfm-tfs", "cta"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn config_mistakes_map_to_the_declared_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown key: contract error.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidht = 3\n").unwrap();
    let out = ver()
        .args(["distill", "--config", bad.to_str().unwrap()])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Malformed --set: usage error.
    let out = ver()
        .args(["distill", "--set", "model.active_k"])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Config contract violation through --set: contract error.
    let cfg = tiny_config(dir.path());
    let out = ver()
        .args(["distill", "--config", cfg.to_str().unwrap()])
        .args(["--set", "model.patch=5"])
        .args(["--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_runs_end_to_end_and_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    for out_dir in [&run_a, &run_b] {
        run_ok(
            ver()
                .args(["distill", "--config", cfg, "--seed", "123"])
                .args(["--out", out_dir.to_str().unwrap()])
                .output()
                .unwrap(),
        );
    }
    for name in ["model.ckpt", "distill_metrics.csv"] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let listing = run_ok(
        ver()
            .args(["inspect-checkpoint", run_a.join("model.ckpt").to_str().unwrap()])
            .output()
            .unwrap(),
    );
    assert!(listing.contains("embed.w ["), "{listing}");
    assert!(listing.contains("tensors"), "{listing}");

    let ft = dir.path().join("ft");
    let stdout = run_ok(
        ver()
            .args(["finetune", "--config", cfg, "--seed", "123", "--analyze"])
            .args(["--checkpoint", run_a.join("model.ckpt").to_str().unwrap()])
            .args(["--out", ft.to_str().unwrap()])
            .output()
            .unwrap(),
    );
    assert!(stdout.contains("finetuned"), "{stdout}");
    for name in [
        "finetune_metrics.csv",
        "finetuned.ckpt",
        "utilization.csv",
        "norm_map.pgm",
        "norm_map.csv",
        "mi_map.pgm",
        "mi_map.csv",
    ] {
        assert!(ft.join(name).exists(), "missing {name}");
    }
    let metrics = std::fs::read_to_string(ft.join("finetune_metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,k,expert_freq_0"), "{metrics}");
    let pgm = std::fs::read_to_string(ft.join("mi_map.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n2 2\n255\n"), "{pgm}");

    let ab = dir.path().join("ab");
    run_ok(
        ver()
            .args(["ablate", "--config", cfg, "--kind", "dfm-tfs"])
            .args(["--checkpoint", run_a.join("model.ckpt").to_str().unwrap()])
            .args(["--out", ab.to_str().unwrap()])
            .output()
            .unwrap(),
    );
    let table = std::fs::read_to_string(ab.join("ablation_dfm-tfs.csv")).unwrap();
    assert!(table.starts_with("mix,success_mean,success_std,rmse_mean,rmse_std"), "{table}");
    assert!(table.contains("\n3+0,"), "{table}");
    assert!(table.contains("\n0+2,"), "{table}");
}
