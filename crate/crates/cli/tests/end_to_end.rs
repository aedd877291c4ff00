//! Drives the compiled `flift` binary end to end: pretrain -> cost ->
//! select -> run -> report, plus the error-path exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flift_core::cost::{scheme_cost, Scheme, TrainingShape};
use flift_core::nn::checkpoint;
use flift_core::ArchitectureDescriptor;

fn flift(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flift"));
    cmd.args(args);
    cmd.env_remove("FLIFT_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.txt");
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(50);
    fs::write(&path, text).unwrap();
    path
}

fn write_config(dir: &Path, out: &Path, corpus: &Path) -> PathBuf {
    let path = dir.join("demo.cfg");
    let text = format!(
        "name = demo\n\
         seeds = 5,6\n\
         out = {out}\n\
         \n\
         [model]\n\
         family = desk\n\
         layers = 1,2\n\
         \n\
         [constraints]\n\
         total_devices = 4\n\
         groups = 1\n\
         group0.fraction = 1.0\n\
         \n\
         [strategy]\n\
         kind = layerft\n\
         \n\
         [federation]\n\
         rounds = 2\n\
         clients_per_round = 2\n\
         eval_every = 1\n\
         \n\
         [shape]\n\
         batch = 2\n\
         context = 16\n\
         steps_per_round = 2\n\
         \n\
         [optimizer]\n\
         lr = 0.002\n\
         \n\
         [data]\n\
         task = next_token\n\
         corpus = {corpus}\n\
         eval_fraction = 0.2\n\
         \n\
         [pretrain]\n\
         corpus = {corpus}\n\
         steps = 3\n\
         batch = 2\n\
         lr = 0.001\n\
         log_every = 1\n",
        out = out.display(),
        corpus = corpus.display(),
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_pretrain_cost_select_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let corpus = write_corpus(dir.path());
    let config = write_config(dir.path(), &out, &corpus);
    let cfg = config.to_str().unwrap();

    // Pretraining writes one loadable checkpoint per architecture.
    let res = flift(&["pretrain", "--config", cfg], &[]);
    assert_ok(&res, "pretrain");
    for layers in [1usize, 2] {
        let path = out.join(format!("pretrained_l{layers}.flft"));
        let (arch, _params) = checkpoint::load(&path).expect("checkpoint should load");
        assert_eq!(arch, ArchitectureDescriptor::desk(layers));
    }

    // Cost tables: exact header, full scheme grid, and one row
    // cross-checked against the library's cost model.
    let res = flift(&["cost", "--config", cfg], &[("FLIFT_THREADS", "2")]);
    assert_ok(&res, "cost");
    let header =
        "scheme,knob,t_or_rank,params_B,gradsopt_B,activations_B,output_B,peak_B,upload_B,flops";
    let l2 = fs::read_to_string(out.join("demo_cost_l2.csv")).unwrap();
    let lines: Vec<&str> = l2.lines().collect();
    assert_eq!(lines[0], header);
    assert_eq!(lines.len(), 11, "2 layerft + 2 lora + 2 subset + 2 lowrank + 2 earlyexit");
    let l1 = fs::read_to_string(out.join("demo_cost_l1.csv")).unwrap();
    assert_eq!(l1.lines().count(), 8, "single-block model has no early exit");

    let shape = TrainingShape::new(2, 16, 2).unwrap();
    let report = scheme_cost(
        &ArchitectureDescriptor::desk(2),
        &Scheme::LayerFt { trained_layers: 1 },
        &shape,
    )
    .unwrap();
    let expected = format!(
        "layerft,t,1,{},{},{},{},{},{},{}",
        report.breakdown.params_bytes,
        report.breakdown.grads_optimizer_bytes,
        report.breakdown.activations_bytes,
        report.breakdown.output_buffer_bytes,
        report.resource.memory_bytes,
        report.resource.upload_bytes,
        report.resource.flops,
    );
    assert!(
        lines.contains(&expected.as_str()),
        "cost CSV should contain the library-predicted row `{expected}`"
    );

    // Selection: unconstrained devices admit the deepest model at full
    // training depth.
    let res = flift(&["select", "--config", cfg], &[]);
    assert_ok(&res, "select");
    let sel: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("demo_selection.json")).unwrap())
            .unwrap();
    assert_eq!(sel["arch"]["layers"], 2);
    assert_eq!(sel["average_t"], 2.0);
    assert_eq!(sel["per_device_t"].as_array().unwrap().len(), 4);
    assert_eq!(sel["feasible"].as_array().unwrap().len(), 2);

    // Federated runs: both seeds, metrics at rounds 0..=2, loadable
    // final checkpoint, summary JSON.
    let res = flift(&["run", "--config", cfg], &[]);
    assert_ok(&res, "run");
    for seed in [5u64, 6] {
        let csv = fs::read_to_string(out.join(format!("demo_seed{seed}.csv"))).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "round,loss,acc,f1_macro,f1_weak,upload_cum_B,flops_cum");
        assert_eq!(rows.len(), 4, "rounds 0, 1, 2 with eval_every = 1");
        assert!(rows[1].starts_with("0,"));
        assert!(rows[3].starts_with("2,"));
        let (arch, _) = checkpoint::load(&out.join(format!("demo_seed{seed}.flft"))).unwrap();
        assert_eq!(arch, ArchitectureDescriptor::desk(2));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("demo_seed{seed}.json"))).unwrap())
                .unwrap();
        assert!(summary["final_loss"].as_f64().unwrap().is_finite());
        assert!(summary["final_acc"].as_f64().unwrap() >= 0.0);
    }

    // Reruns are byte-identical, sequentially and with --parallel-seeds.
    let baseline5 = fs::read(out.join("demo_seed5.csv")).unwrap();
    let baseline6 = fs::read(out.join("demo_seed6.csv")).unwrap();
    let res = flift(&["run", "--config", cfg, "--seed", "5"], &[]);
    assert_ok(&res, "run --seed 5");
    assert_eq!(fs::read(out.join("demo_seed5.csv")).unwrap(), baseline5);
    let res = flift(
        &["run", "--config", cfg, "--parallel-seeds", "--threads", "2"],
        &[],
    );
    assert_ok(&res, "run --parallel-seeds");
    assert_eq!(fs::read(out.join("demo_seed5.csv")).unwrap(), baseline5);
    assert_eq!(fs::read(out.join("demo_seed6.csv")).unwrap(), baseline6);

    // Report aggregates both seed summaries.
    let res = flift(&["report", "--config", cfg], &[]);
    assert_ok(&res, "report");
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("demo_report.json")).unwrap()).unwrap();
    assert_eq!(rep["runs"], 2);
    assert_eq!(rep["seeds"], serde_json::json!([5, 6]));
    assert!(rep["mean_loss"].as_f64().unwrap().is_finite());
    assert!(rep["std_loss"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_errors_exit_2_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[strategy]\nkind = layerft\ntypo_key = 3\n").unwrap();
    let res = flift(&["cost", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("`strategy.typo_key`"), "stderr: {stderr}");

    let res = flift(&["cost", "--config", dir.path().join("absent.cfg").to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(2));

    fs::write(&bad, "name = ok\n").unwrap();
    let res = flift(
        &["select", "--config", bad.to_str().unwrap()],
        &[("FLIFT_THREADS", "soup")],
    );
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("FLIFT_THREADS"), "stderr: {stderr}");
}

#[test]
fn infeasible_constraints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let config = dir.path().join("tight.cfg");
    fs::write(
        &config,
        format!(
            "name = tight\n\
             out = {}\n\
             [model]\n\
             family = desk\n\
             layers = 2\n\
             [constraints]\n\
             total_devices = 4\n\
             groups = 1\n\
             group0.fraction = 1.0\n\
             group0.memory_mb = 0.001\n\
             [shape]\n\
             batch = 2\n\
             context = 16\n\
             steps_per_round = 2\n",
            out.display()
        ),
    )
    .unwrap();
    let res = flift(&["select", "--config", config.to_str().unwrap()], &[]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
}
