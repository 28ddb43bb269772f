use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};
use tax_core::config::{describe_keys, merge, set_key, RunConfig, VoteMode};
use tax_core::data::{build_dataset, Dataset, Record, Split};
use tax_core::eval::{assignment_accuracy, per_tendency_eval, predict_tax, predict_vanilla, score_masks};
use tax_core::explain::{build_prototype_index, explain, write_record, PrototypeIndex};
use tax_core::image::{read_pgm, Mask};
use tax_core::train::{assigner_from, finished_checkpoint, tax_from, train_stage, vanilla_from, RunDir, Stage, StageOptions};
use tax_core::TaxError;

const INDEX_FILE: &str = "prototype_index.json";

#[derive(Parser)]
#[command(name = "tax", version, about = "Annotator-tendency segmentation: data, training, evaluation, explanations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.tax.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Global seed (overrides TAX_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        n_annotators: Option<usize>,
    },
    /// Train one stage (vanilla, assigner or tax).
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Continue the stage from its checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many batches (a checkpoint is written first).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score trained stages on a split and write a JSON report.
    Eval {
        /// Run directory with stage checkpoints.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Score predicted masks (`<id>.pgm`) from this directory instead of a model.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Explain one pixel: who (annotator) and why (traced training patch).
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record id of the query image.
        #[arg(long)]
        image: u64,
        /// Query pixel as `row,column`.
        #[arg(long, value_parser = parse_pixel)]
        pixel: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        /// Rebuild the prototype index even if one exists.
        #[arg(long)]
        rebuild_index: bool,
    },
}

/// Errors caused by how the tool was invoked rather than by a failed computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage '{s}' (expected vanilla, assigner or tax)"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL.into_iter().find(|sp| sp.name() == s).ok_or_else(|| format!("unknown split '{s}'"))
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,column")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn key_help() -> String {
    let mut s = String::from("Config keys (dotted, for --set or a --config file) and defaults:\n");
    for (k, v) in describe_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nThe seed may also come from TAX_SEED. Precedence: defaults < TAX_SEED < --config < flags.");
    s
}

/// Builds the effective configuration. `extra` applies command-specific flags.
fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut v = RunConfig::default().to_value();
    if let Ok(s) = std::env::var("TAX_SEED") {
        let seed: u64 = s.parse().map_err(|_| usage(format!("TAX_SEED must be an unsigned integer, got '{s}'")))?;
        v["seed"] = json!(seed);
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        merge(&mut v, &patch);
    }
    for kv in &common.set {
        let (k, val) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        set_key(&mut v, k.trim(), val.trim())?;
    }
    for (k, val) in extra {
        set_key(&mut v, k, val)?;
    }
    if let Some(seed) = common.seed {
        v["seed"] = json!(seed);
    }
    Ok(RunConfig::from_value(v)?)
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let occupied = out.exists() && fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?.next().is_some();
    if occupied {
        if !force {
            bail!(usage(format!("{} exists and is not empty; pass --force to replace it", out.display())));
        }
        fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    let m = build_dataset(out, cfg.seed, &cfg.data)?;
    let tendencies: Vec<&str> = m.tendencies.iter().map(|t| t.name()).collect();
    println!("wrote {} (seed {}, tendencies {})", out.display(), cfg.seed, tendencies.join(", "));
    for split in Split::ALL {
        let mut counts = vec![0usize; m.n_annotators];
        for r in m.splits.get(split) {
            counts[r.annotator as usize - 1] += 1;
        }
        let per: Vec<String> = counts.iter().enumerate().map(|(i, c)| format!("a{}={c}", i + 1)).collect();
        println!("{:>5}: {} records ({})", split.name(), m.splits.get(split).len(), per.join(" "));
    }
    Ok(())
}

fn train(cfg: &RunConfig, stage: Stage, data: &Path, out: &Path, opts: StageOptions) -> Result<()> {
    let ds = Dataset::load(data)?;
    let run = RunDir::new(out);
    let report = train_stage(stage, &ds, cfg, &run, &opts)?;
    for e in &report.epochs {
        println!("{} epoch {} loss {:.6}", stage.name(), e.epoch, e.loss);
    }
    let p = report.progress;
    if p.done {
        println!("{} finished after {} steps; checkpoint {}", stage.name(), p.steps, run.checkpoint(stage).display());
    } else {
        println!("{} paused at epoch {} batch {} ({} steps); resume with --resume", stage.name(), p.epoch, p.batch, p.steps);
    }
    Ok(())
}

fn load_predictions(dir: &Path, records: &[Record]) -> Result<Vec<Mask>> {
    records
        .iter()
        .map(|r| {
            let p = dir.join(format!("{:06}.pgm", r.id));
            read_pgm(&p).map_err(|e| usage(format!("prediction for record {}: {e}", r.id)))
        })
        .collect()
}

fn eval(cfg: &RunConfig, ckpt: Option<&Path>, data: &Path, report: &Path, split: Split, pred: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(data)?;
    let records = ds.split(split);
    let k = ds.n_classes();
    let gts: Vec<&Mask> = records.iter().map(|r| &r.mask).collect();
    let echo = json!({ "eval": cfg.eval, "split": split.name() });
    let mut out = serde_json::Map::new();
    out.insert("split".into(), json!(split.name()));
    out.insert("n_annotators".into(), json!(ds.n_annotators()));
    if let Some(dir) = pred {
        let preds = load_predictions(dir, records)?;
        out.insert("predictions".into(), serde_json::to_value(score_masks(&preds, &gts, k, echo.clone())?)?);
    }
    if let Some(ckpt) = ckpt {
        let run = RunDir::new(ckpt);
        let have = |st: Stage| run.checkpoint(st).exists();
        if !Stage::ALL.into_iter().any(have) {
            bail!(usage(format!("no stage checkpoints in {}", ckpt.display())));
        }
        let batch = cfg.eval.batch_size;
        if have(Stage::Vanilla) {
            let ck = finished_checkpoint(&run, Stage::Vanilla)?;
            let echo = json!({ "eval": cfg.eval, "split": split.name(), "run": ck.config });
            let m = vanilla_from(&ck, &ds)?;
            out.insert("vanilla".into(), serde_json::to_value(score_masks(&predict_vanilla(&m, records, batch)?, &gts, k, echo)?)?);
        }
        if have(Stage::Assigner) {
            let a = assigner_from(&finished_checkpoint(&run, Stage::Assigner)?, &ds)?;
            let acc = assignment_accuracy(&a, records, cfg.eval.vote, batch)?;
            let other = match cfg.eval.vote {
                VoteMode::Specific => VoteMode::All,
                VoteMode::All => VoteMode::Specific,
            };
            out.insert("assignment".into(), serde_json::to_value(&acc)?);
            out.insert("assignment_alternate_vote".into(), serde_json::to_value(assignment_accuracy(&a, records, other, batch)?)?);
            if have(Stage::Tax) {
                let ck = finished_checkpoint(&run, Stage::Tax)?;
                let echo = json!({ "eval": cfg.eval, "split": split.name(), "run": ck.config });
                let m = tax_from(&ck, &ds)?;
                out.insert("tax".into(), serde_json::to_value(score_masks(&predict_tax(&m, &a, records, batch)?, &gts, k, echo)?)?);
                let t = per_tendency_eval(&m, records, batch)?;
                out.insert("per_tendency_margin".into(), json!(t.margin()));
                out.insert("per_tendency".into(), serde_json::to_value(&t)?);
            }
        }
    }
    if out.len() == 2 {
        bail!(usage("nothing to evaluate: pass --ckpt and/or --pred"));
    }
    let text = serde_json::to_string_pretty(&Value::Object(out))?;
    fs::write(report, text + "\n").with_context(|| format!("writing {}", report.display()))?;
    println!("wrote {}", report.display());
    Ok(())
}

struct ExplainArgs<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    image: u64,
    pixel: (usize, usize),
    out: &'a Path,
    rebuild_index: bool,
}

fn explain_cmd(cfg: &RunConfig, a: ExplainArgs) -> Result<()> {
    let ds = Dataset::load(a.data)?;
    let rec = Split::ALL
        .into_iter()
        .flat_map(|s| ds.split(s))
        .find(|r| r.id == a.image)
        .ok_or_else(|| usage(format!("record {} is not in the dataset", a.image)))?;
    let (h, w) = (rec.image.height, rec.image.width);
    if a.pixel.0 >= h || a.pixel.1 >= w {
        bail!(usage(format!("pixel {},{} is outside the {h}x{w} image", a.pixel.0, a.pixel.1)));
    }
    let run = RunDir::new(a.ckpt);
    let assigner = assigner_from(&finished_checkpoint(&run, Stage::Assigner)?, &ds)?;
    let model = if run.checkpoint(Stage::Tax).exists() { Some(tax_from(&finished_checkpoint(&run, Stage::Tax)?, &ds)?) } else { None };
    fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let index_path = a.out.join(INDEX_FILE);
    let index = if index_path.exists() && !a.rebuild_index {
        let idx = PrototypeIndex::read(&index_path)?;
        if let Err(TaxError::StaleIndex { .. }) = idx.check_fresh(&assigner) {
            bail!(usage(format!("{} was built for different assigner weights; rerun with --rebuild-index", index_path.display())));
        }
        idx
    } else {
        let idx = build_prototype_index(&assigner, &ds.train, cfg.eval.top_m)?;
        idx.write(&index_path)?;
        idx
    };
    let record = explain(model.as_ref(), &assigner, &index, rec, a.pixel, &ds.train, Some(a.out))?;
    let path = a.out.join(format!("explanation_{:06}_{}_{}.json", rec.id, a.pixel.0, a.pixel.1));
    write_record(&path, &record)?;
    println!(
        "who: annotator {} (prototype {}, cosine {:.4}); why: training record {} patch {:?} (annotator {})",
        record.who, record.prototype, record.score, record.why.record_id, record.why.patch, record.why.annotator
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { out, force, n_annotators } => {
            let extra: Vec<(&str, String)> = n_annotators.iter().map(|n| ("data.n_annotators", n.to_string())).collect();
            gen_data(&load_config(&cli.common, &extra)?, out, *force)
        }
        Command::Train { stage, data, out, resume, max_steps } => {
            let cfg = load_config(&cli.common, &[])?;
            train(&cfg, *stage, data, out, StageOptions { max_steps: *max_steps, resume: *resume })
        }
        Command::Eval { ckpt, data, report, split, pred } => eval(&load_config(&cli.common, &[])?, ckpt.as_deref(), data, report, *split, pred.as_deref()),
        Command::Explain { ckpt, data, image, pixel, out, rebuild_index } => explain_cmd(
            &load_config(&cli.common, &[])?,
            ExplainArgs { ckpt, data, image: *image, pixel: *pixel, out, rebuild_index: *rebuild_index },
        ),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<TaxError>() {
        Some(TaxError::Config(_) | TaxError::StaleIndex { .. } | TaxError::CheckpointVersion { .. } | TaxError::Format { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(key_help());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn pixel_parsing() {
        assert_eq!(parse_pixel("3,17"), Ok((3, 17)));
        assert!(parse_pixel("3").is_err());
        assert!(parse_pixel("a,1").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(exit_code(&usage("x")), 2);
        assert_eq!(exit_code(&anyhow!(TaxError::Config("x".into()))), 2);
        assert_eq!(exit_code(&anyhow!(TaxError::Diverged { stage: "tax".into(), epoch: 0, loss: f64::NAN })), 1);
    }
}
