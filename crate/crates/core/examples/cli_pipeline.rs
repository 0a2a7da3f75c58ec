//! Drive the command-line interface in-process: generate data, train,
//! adapt, evaluate and build a report under one runs directory.
//!
//!     cargo run --release --example cli_pipeline -- [runs_dir]

fn run(args: &[&str]) {
    let mut argv = vec!["dladapt".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    println!("$ dladapt {}", args.join(" "));
    let code = dladapt::cli::run(argv);
    assert_eq!(code, 0, "command failed");
}

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| "runs_demo".into());
    let p = |s: &str| format!("{root}/{s}");
    run(&["synth-gen", "--preset", "source", "--n", "40", "--out", &p("src")]);
    run(&["synth-gen", "--preset", "target", "--n", "20", "--seed", "1", "--out", &p("tgt")]);
    run(&["train-source", "--data", &p("src"), "--set", "epochs=3", "--out", &p("train")]);
    run(&["adapt", "--source-ckpt", &p("train/checkpoint.bin"), "--target", &p("tgt"), "--eval", &p("tgt"), "--set", "epochs=2", "--out", &p("adapt")]);
    run(&["eval", "--checkpoint", &p("adapt/checkpoint.bin"), "--data", &p("tgt"), "--out", &p("eval")]);
    run(&["--runs-root", &root, "report", "--runs", &root, "--out", &p("report")]);
    println!("report written to {}", p("report/report.txt"));
}
