use std::fs;
use std::path::Path;
use std::process::Command;

use hiercon::eval::EvalReport;
use hiercon::pipeline::cli::cli_main;

const SMALL_ARCH: [&str; 10] = [
    "--set",
    "arch.adapter_hidden=16",
    "--set",
    "arch.shared_dim=8",
    "--set",
    "arch.projector_hidden=8",
    "--set",
    "arch.projector_out=4",
    "--set",
    "batch_size=32",
];

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["hiercon"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("fixture.csv");
    assert_eq!(run(&["synth", "--fixture", "separable", "--out", p(&path)]), 0);
    path
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hiercon");
    assert_eq!(Command::new(bin).arg("frobnicate").status().unwrap().code(), Some(1));
    assert_eq!(Command::new(bin).arg("--help").status().unwrap().code(), Some(0));
    assert_eq!(Command::new(bin).args(["eval", "--data"]).status().unwrap().code(), Some(1));
    let missing = Command::new(bin)
        .args(["eval", "--raw", "--data", "/nonexistent/data.csv"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));
    assert_eq!(run(&["train", "--preset", "NOPE", "--data", "x.csv"]), 2);
}

#[test]
fn gradcheck_prints_each_variant() {
    let bin = env!("CARGO_BIN_EXE_hiercon");
    let out = Command::new(bin).arg("gradcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["SupCon", "HiMulCon ", "HiMulConE", "network+HiMulConE"] {
        assert!(text.contains(name), "{text}");
    }
    assert_eq!(text.matches("max_rel_err").count(), 6);
    // An impossible tolerance fails the run.
    assert_ne!(run(&["gradcheck", "--tolerance", "0"]), 0);
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.jsonl");
    let d = dir.path().join("d.csv");
    assert_eq!(run(&["synth", "--fixture", "separable", "--out", p(&a)]), 0);
    assert_eq!(run(&["synth", "--out", p(&b)]), 0);
    assert_eq!(run(&["synth", "--out", p(&c)]), 0);
    assert_eq!(run(&["synth", "--seed", "8", "--out", p(&d)]), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&d).unwrap());
    assert!(fs::read_to_string(&c).unwrap().starts_with("{\"key\""));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let ckpt = dir.path().join("hc.ckpt");
    let hist = dir.path().join("hc.json");
    let mut args = vec![
        "train", "--preset", "HC", "--data", p(&data), "--epochs", "1", "--checkpoint", p(&ckpt), "--history", p(&hist),
    ];
    args.extend_from_slice(&SMALL_ARCH);
    assert_eq!(run(&args), 0);
    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(&hist).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(history["format_version"], 1);

    // Same inputs, same bytes.
    let ckpt2 = dir.path().join("hc2.ckpt");
    args[8] = p(&ckpt2);
    assert_eq!(run(&args), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let report = dir.path().join("test.json");
    assert_eq!(
        run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test", "--out", p(&report)]),
        0
    );
    let parsed: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.scenario, "closed-test");
    assert_eq!(parsed.consistency.species_id_errors, 0);

    let raw = dir.path().join("raw.json");
    assert_eq!(run(&["eval", "--raw", "--data", p(&data), "--metric", "euclidean", "--out", p(&raw)]), 0);
    assert_eq!(run(&["report", p(&report), p(&raw), "--names", "HC,raw"]), 0);
    assert_eq!(run(&["report", p(&report), "--names", "a,b"]), 2);

    let nn = dir.path().join("nn.json");
    let shot = dir.path().join("shot.json");
    assert_eq!(
        run(&[
            "eval-unseen", "--checkpoint", p(&ckpt), "--data", p(&data), "--episodes", "3", "--out-nn", p(&nn),
            "--out-one-shot", p(&shot),
        ]),
        0
    );
    let shot: EvalReport = serde_json::from_str(&fs::read_to_string(&shot).unwrap()).unwrap();
    assert_eq!(shot.episodes.unwrap().count, 3);
    let nn: EvalReport = serde_json::from_str(&fs::read_to_string(&nn).unwrap()).unwrap();
    assert_eq!(nn.scenario, "unseen-nn");
}

#[test]
fn config_file_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.toml");
    fs::write(
        &config,
        "epochs = 2\nbatch_size = 32\n\n[loss]\nvariant = \"HiMulConE\"\n\n[arch]\nadapter_hidden = 16\nshared_dim = 8\nprojector_hidden = 8\nprojector_out = 4\n\n[data.synthetic]\nn_taxa = 2\nspecies_per_taxon = 2\nids_per_species = 2\nsamples_per_id = 10\nunseen_ids_per_species = 1\ndim = 6\nspread_taxon = 10.0\nspread_species = 3.0\nspread_id = 1.0\nnoise = 0.2\nseed = 3\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let hist = dir.path().join("h.json");
    assert_eq!(
        run(&["train", "--config", p(&config), "--checkpoint", p(&ckpt), "--history", p(&hist), "--set", "tau=0.2"]),
        0
    );
    let (params, arch) = hiercon::network::load_checkpoint(&ckpt).unwrap();
    assert_eq!(arch.input_dim, 6);
    assert_eq!(params.heads.len(), 3);

    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "[[param]]\nname = \"tau\"\nvalues = [0.1, 0.5]\n").unwrap();
    let board = dir.path().join("board.json");
    let best = dir.path().join("best.toml");
    assert_eq!(
        run(&["sweep", "--config", p(&config), "--grid", p(&grid), "--out", p(&board), "--best-config", p(&best)]),
        0
    );
    let board: serde_json::Value = serde_json::from_str(&fs::read_to_string(&board).unwrap()).unwrap();
    assert_eq!(board["leaderboard"].as_array().unwrap().len(), 2);
    assert!(hiercon::pipeline::TrainConfig::from_toml(&fs::read_to_string(&best).unwrap()).is_ok());

    fs::write(&grid, "cap = 1\n[[param]]\nname = \"tau\"\nvalues = [0.1, 0.5]\n").unwrap();
    assert_eq!(run(&["sweep", "--config", p(&config), "--grid", p(&grid)]), 2);
}
