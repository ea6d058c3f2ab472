//! Command-line front end: `train`, `attack`, `ood`, `analyze`, `report`.
//!
//! Every key of a command's schema is a `--key VALUE` flag; `--config FILE`
//! reads the same keys from a flat `key = value` file, and flags win.
//! Usage and configuration errors exit with 2, runtime failures with 1.

use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use clap::{Arg, ArgAction, Command};

use crate::analysis::{compactness, probe_dataset};
use crate::attacks::{evaluate_robustness, AttackConfig};
use crate::data::Dataset;
use crate::error::{DfaError, Result};
use crate::model::checkpoint;
use crate::ood::{compute_prototypes, evaluate_ood};
use crate::rng::seeded;
use crate::trainer::{initial_snapshot, train_observed, LrSchedule, TrainConfig};

use super::config::{parse_fraction, read_config_file, schema, Kind, RunConfig, COMMANDS};
use super::loaders::load_dataset;
use super::metrics::{read_metrics, MetricsRecord, MetricsWriter, RecordKind};
use super::plot::{bar_chart_svg, histogram_svg};
use super::report::write_report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn command() -> Command {
    let mut cmd = Command::new("dfa")
        .about("Train, attack and inspect aggregation-regularized embedding models")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value file; flags override it"),
        );
        for spec in schema(name).expect("listed command") {
            let value_name = match spec.kind {
                Kind::Choice(options) => options.join("|"),
                Kind::Bool => "true|false".to_string(),
                Kind::Int => "N".to_string(),
                Kind::Real | Kind::Fraction => "X".to_string(),
                Kind::Str | Kind::Path => "VALUE".to_string(),
            };
            let help = match spec.default {
                Some(d) => format!("{} [default: {d}]", spec.help),
                None => spec.help.to_string(),
            };
            sub = sub.arg(
                Arg::new(spec.name)
                    .long(spec.name)
                    .value_name(value_name)
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit status. Progress goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let resolved = (|| {
        let mut layers = Vec::new();
        if let Some(path) = sub.get_one::<String>("config") {
            layers.push(read_config_file(Path::new(path))?);
        }
        let flags: Vec<(String, String)> = schema(name)
            .expect("listed command")
            .iter()
            .filter_map(|s| sub.get_one::<String>(s.name).map(|v| (s.name.to_string(), v.clone())))
            .collect();
        layers.push(flags);
        RunConfig::resolve(name, &layers)
    })();
    let result = resolved.and_then(|cfg| execute(&cfg, out));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                DfaError::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Runs one resolved command.
pub fn execute(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match cfg.command.as_str() {
        "train" => train(cfg, out),
        "attack" => attack(cfg, out),
        "ood" => ood(cfg, out),
        "analyze" => analyze(cfg, out),
        "report" => report(cfg, out),
        other => Err(DfaError::Config(format!("unknown command `{other}`"))),
    }
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn dataset(cfg: &RunConfig, prefix: &str) -> Result<Dataset> {
    let format = cfg.str(&format!("{prefix}-format"))?.parse()?;
    let labels = cfg.opt(&format!("{prefix}-labels")).map(Path::new);
    load_dataset(cfg.str(prefix)?, format, labels)
}

fn limited(data: Dataset, cfg: &RunConfig) -> Result<Dataset> {
    Ok(match cfg.opt_usize("limit")? {
        Some(n) => data.head(n),
        None => data,
    })
}

/// `full-scale` or comma-separated `rate:epochs` pairs.
pub fn parse_schedule(text: &str) -> Result<LrSchedule> {
    if text == "full-scale" {
        return Ok(LrSchedule::full_scale());
    }
    let pieces = text
        .split(',')
        .map(|p| {
            let (rate, span) = p
                .split_once(':')
                .ok_or_else(|| DfaError::Config(format!("lr-schedule entry `{p}` is not rate:epochs")))?;
            let span = span
                .trim()
                .parse()
                .map_err(|_| DfaError::Config(format!("lr-schedule entry `{p}` has a bad epoch count")))?;
            Ok((parse_fraction(rate)?, span))
        })
        .collect::<Result<Vec<_>>>()?;
    if pieces.is_empty() {
        return Err(DfaError::Config("lr-schedule is empty".into()));
    }
    Ok(LrSchedule(pieces))
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let schedule = match cfg.opt("lr-schedule") {
        Some(s) => parse_schedule(s)?,
        None => LrSchedule::constant(cfg.real("lr")?),
    };
    let tc = TrainConfig {
        mode: cfg.str("mode")?.parse()?,
        alpha: cfg.real("alpha")?,
        sigma: cfg.real("sigma")?,
        reduction: cfg.str("reduction")?.parse()?,
        epochs: cfg.usize("epochs")?,
        batch_size: cfg.usize("batch-size")?,
        schedule,
        momentum: cfg.real("momentum")?,
        weight_decay: cfg.real("weight-decay")?,
        rng_seed: cfg.int("seed")?,
        embed_dim: cfg.usize("embed-dim")?,
        score_scale: cfg.real("score-scale")?,
        n_classes: cfg.opt_usize("classes")?,
    };
    tc.validate()?;
    Ok(tc)
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let tc = train_config(cfg)?;
    let data = dataset(cfg, "data")?;
    let hash = cfg.hash();
    let mut init = initial_snapshot(&data, &tc)?;
    init.label = cfg.opt("name").map_or_else(|| tc.mode.to_string(), str::to_string);
    init.config_hash = hash.clone();
    let label = init.label.clone();
    let mut writer = MetricsWriter::open(&cfg.path("metrics")?)?;
    let mut failure = None;
    let (snapshot, _) = train_observed(init, &data, &tc, |_, m| {
        if failure.is_some() {
            return;
        }
        let record = MetricsRecord::new(RecordKind::Epoch, m.epoch.to_string(), &label, &hash)
            .field("epoch", m.epoch as f64)
            .field("lr", m.lr)
            .field("l_a", m.l_a)
            .field("l_c", m.l_c)
            .field("l_t", m.l_t)
            .field("clean_accuracy", m.clean_accuracy);
        if let Err(e) = writer.append(record) {
            failure = Some(e);
        }
        say(
            out,
            format!("epoch {} lr {} L_a {:.6} L_c {:.6} acc {:.2}%", m.epoch, m.lr, m.l_a, m.l_c, m.clean_accuracy),
        );
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let dir = cfg.path("out")?;
    checkpoint::save(&snapshot, &dir)?;
    say(out, format!("saved {} ({hash}) to {}", snapshot.label, dir.display()));
    Ok(())
}

fn attack(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let snapshot = checkpoint::load(&cfg.path("checkpoint")?)?;
    let data = limited(dataset(cfg, "data")?, cfg)?;
    let steps = cfg.usize("steps")?;
    let mut ac = match cfg.str("method")?.parse()? {
        crate::attacks::AttackMethod::Fgsm => AttackConfig::fgsm(cfg.real("epsilon")?),
        crate::attacks::AttackMethod::Pgd => AttackConfig::pgd(cfg.real("epsilon")?, cfg.real("step-size")?, steps),
        crate::attacks::AttackMethod::Cw => AttackConfig::cw(cfg.real("cw-c")?, steps),
    };
    ac.cw_lr = cfg.real("cw-lr")?;
    ac.cw_box = cfg.str("cw-box")?.parse()?;
    if ac.method == crate::attacks::AttackMethod::Pgd {
        ac.random_start = cfg.bool("random-start")?;
    }
    ac.rng_seed = cfg.int("seed")?;
    ac.validate()?;
    let report = evaluate_robustness(&snapshot, &data, &[ac])?;
    let result = &report.attacks[0];
    let mut record = MetricsRecord::new(RecordKind::Attack, &result.label, &snapshot.label, cfg.hash())
        .field("accuracy", result.accuracy)
        .field("clean_accuracy", report.clean_accuracy)
        .field("epsilon", ac.epsilon)
        .field("n_samples", report.n_samples as f64);
    record.model_hash = Some(snapshot.config_hash.clone());
    MetricsWriter::open(&cfg.path("metrics")?)?.append(record)?;
    say(
        out,
        format!("{}: clean {:.2}% attacked {:.2}% over {} samples", result.label, report.clean_accuracy, result.accuracy, report.n_samples),
    );
    Ok(())
}

fn ood(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let snapshot = checkpoint::load(&cfg.path("checkpoint")?)?;
    let train = dataset(cfg, "train-data")?;
    let id = limited(dataset(cfg, "id-data")?, cfg)?;
    let ood = limited(dataset(cfg, "ood-data")?, cfg)?;
    let prototypes = compute_prototypes(&snapshot, &train)?;
    let report = evaluate_ood(&snapshot, &prototypes, &id, &ood)?;
    let (id_scores, ood_scores) = report.scores.split_at(report.n_id);
    let mut record = MetricsRecord::new(RecordKind::Ood, "ood", &snapshot.label, cfg.hash())
        .field("best_f1", report.best_f1)
        .field("best_threshold", report.best_threshold)
        .field("all_positive_f1", report.all_positive_f1())
        .field("n_id", report.n_id as f64)
        .field("n_ood", report.n_ood as f64)
        .with_series("id_scores", id_scores.to_vec())
        .with_series("ood_scores", ood_scores.to_vec());
    record.model_hash = Some(snapshot.config_hash.clone());
    MetricsWriter::open(&cfg.path("metrics")?)?.append(record)?;
    if let Some(plot) = cfg.opt("plot") {
        let svg = histogram_svg(
            &format!("OOD angle score ({})", snapshot.label),
            &[("ID".into(), id_scores.to_vec()), ("OOD".into(), ood_scores.to_vec())],
            30,
        );
        std::fs::write(plot, svg).map_err(|e| DfaError::io(plot, e))?;
    }
    say(
        out,
        format!("best F1 {:.4} at threshold {} ({} ID, {} OOD)", report.best_f1, report.best_threshold, report.n_id, report.n_ood),
    );
    Ok(())
}

fn analyze(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let snapshot = checkpoint::load(&cfg.path("checkpoint")?)?;
    let data = limited(dataset(cfg, "data")?, cfg)?;
    let hash = cfg.hash();
    let c = compactness(&snapshot, &data)?;
    let pairs = cfg.usize("pairs")?;
    let probe = probe_dataset(&snapshot, &data, pairs, &mut seeded(cfg.int("seed")?))?;
    let mut compact = MetricsRecord::new(RecordKind::Analysis, "compactness", &snapshot.label, &hash)
        .field("total_std", c.total_std)
        .field("mean_class_std", c.mean_class_std())
        .with_series("per_class_std", c.per_class_std.clone());
    compact.model_hash = Some(snapshot.config_hash.clone());
    let mut lips = MetricsRecord::new(RecordKind::Analysis, "lipschitz", &snapshot.label, &hash)
        .field("pairs", pairs as f64)
        .field("mean", probe.mean)
        .field("max", probe.max);
    lips.model_hash = Some(snapshot.config_hash.clone());
    let mut writer = MetricsWriter::open(&cfg.path("metrics")?)?;
    writer.append(compact)?;
    writer.append(lips)?;
    if let Some(plot) = cfg.opt("plot") {
        let mut categories: Vec<String> = (0..c.per_class_std.len()).map(|k| k.to_string()).collect();
        categories.push("Total".into());
        let mut values = c.per_class_std.clone();
        values.push(c.total_std);
        let svg = bar_chart_svg("Embedding compactness", &categories, &[(snapshot.label.clone(), values)]);
        std::fs::write(plot, svg).map_err(|e| DfaError::io(plot, e))?;
    }
    say(
        out,
        format!(
            "class std {:.5} total std {:.5} residual mean {:.6} max {:.6}",
            c.mean_class_std(),
            c.total_std,
            probe.mean,
            probe.max
        ),
    );
    Ok(())
}

fn report(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let metrics = cfg.path("metrics")?;
    let records = read_metrics(&metrics)?;
    let files = write_report(&records, &cfg.path("out")?)?;
    for f in files {
        say(out, format!("wrote {}", f.display()));
    }
    Ok(())
}
