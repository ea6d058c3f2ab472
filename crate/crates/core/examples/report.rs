// The command-line pipeline end to end: train, attack, ood, analyze, report.

use std::path::PathBuf;

use dfa::harness::cli::{run, EXIT_OK};

pub fn run_example() -> dfa::Result<Vec<PathBuf>> {
    let dir = std::env::temp_dir().join(format!("dfa-report-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (ckpt, metrics, out) = (p("ckpt"), p("metrics.jsonl"), p("report"));
    let data = "synthetic:glyphs:classes=4,per_class=20,side=12";
    let test = "synthetic:glyphs:classes=4,per_class=8,side=12,sample_seed=5";
    let ood = "synthetic:gratings:classes=4,per_class=8,side=12,sample_seed=6";

    let steps: Vec<Vec<&str>> = vec![
        vec!["train", "--data", data, "--epochs", "3", "--batch-size", "20", "--embed-dim", "16", "--out", &ckpt, "--metrics", &metrics],
        vec!["attack", "--data", test, "--checkpoint", &ckpt, "--method", "fgsm", "--epsilon", "8/255", "--metrics", &metrics],
        vec!["attack", "--data", test, "--checkpoint", &ckpt, "--method", "pgd", "--metrics", &metrics],
        vec!["ood", "--train-data", data, "--id-data", test, "--ood-data", ood, "--checkpoint", &ckpt, "--metrics", &metrics],
        vec!["analyze", "--data", test, "--checkpoint", &ckpt, "--pairs", "100", "--metrics", &metrics],
        vec!["report", "--metrics", &metrics, "--out", &out],
    ];
    for args in steps {
        let code = run(std::iter::once("dfa").chain(args.iter().copied()), &mut std::io::stdout(), &mut std::io::stderr());
        if code != EXIT_OK {
            return Err(dfa::DfaError::Input(format!("`{}` exited with {code}", args[0])));
        }
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&out)
        .map_err(|e| dfa::DfaError::Io { path: out.clone().into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    println!("{}", std::fs::read_to_string(dir.join("report/report.md")).unwrap_or_default());
    Ok(files)
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
