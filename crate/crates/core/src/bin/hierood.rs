use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hierood::conditionals::{ConditionalModel, ProbabilityStack};
use hierood::fgvc;
use hierood::hierarchy::{split_id_ood, LabeledDataset, LabeledSample, Partition, SplitSpec};
use hierood::inference::{DecisionRule, Engine};
use hierood::io::{self, PredictionRecord};
use hierood::metrics::{evaluate, EvalReport, NodeLocalSummary};
use hierood::synthetic::{Experiment, SyntheticConfig};

#[derive(Parser)]
#[command(name = "hierood", version, about = "Hierarchical OOD classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a hierarchy and, optionally, probability and label files against it.
    Validate(ValidateArgs),
    /// Hold out subtrees and print the resulting ID/OOD counts.
    Split(SplitArgs),
    /// Predict a node for every sample of a set of probability files.
    Infer(InferArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Synthetic experiments.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Print the headline numbers of a report file.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate data, fit, predict and evaluate; writes the standard files.
    Run(SynthArgs),
}

#[derive(Args)]
struct StackArgs {
    /// Directory holding probs_d{d}.csv and optional logits_d{d}.csv.
    #[arg(long, conflicts_with = "probs")]
    probs_dir: Option<PathBuf>,
    /// Probability files for depths 1..D, in order.
    #[arg(long, num_args = 1..)]
    probs: Vec<PathBuf>,
    /// Logit files for depths 1..D, in order.
    #[arg(long, num_args = 1..)]
    logits: Vec<PathBuf>,
}

impl StackArgs {
    fn given(&self) -> bool {
        self.probs_dir.is_some() || !self.probs.is_empty()
    }

    fn load(&self, engine: &Engine) -> Result<Vec<(String, ProbabilityStack)>> {
        let index = engine.index();
        let (probs, logits) = match &self.probs_dir {
            Some(dir) => {
                let (p, l) = io::stack_file_names(dir, index.max_depth());
                let logits = l.iter().all(|f| f.exists()).then_some(l);
                (p, logits)
            }
            None => {
                if self.probs.is_empty() {
                    bail!("no probability files given (use --probs or --probs-dir)");
                }
                let logits = (!self.logits.is_empty()).then(|| self.logits.clone());
                (self.probs.clone(), logits)
            }
        };
        Ok(io::load_stack_files(&probs, logits.as_deref(), index)?)
    }
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[command(flatten)]
    stacks: StackArgs,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Split file checked against the hierarchy.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Full hierarchy; defaults to the bundled FGVC-Aircraft tree.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// `{"ood_roots": [...]}` file.
    #[arg(long, conflicts_with = "ood_names")]
    ood_roots: Option<PathBuf>,
    /// Text file with one held-out leaf name per line.
    #[arg(long)]
    ood_names: Option<PathBuf>,
    /// Where to write the pruned ID hierarchy.
    #[arg(long)]
    out_hierarchy: Option<PathBuf>,
    /// Where to write the held-out leaf to OOD label map (JSON).
    #[arg(long)]
    out_map: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// ID hierarchy the classifiers were trained on.
    #[arg(long)]
    hierarchy: PathBuf,
    #[command(flatten)]
    stacks: StackArgs,
    #[arg(long, default_value = "entcompprob")]
    score: ConditionalModel,
    #[arg(long, default_value = "minexp")]
    rule: DecisionRule,
    /// Give the root an OOD child scored by the deepest classifier's entropy.
    #[arg(long)]
    root_ood: bool,
    /// Labels CSV; required by the oracle rule.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Output of `infer`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Probability files; enable node-local metrics together with --score.
    #[command(flatten)]
    stacks: StackArgs,
    #[arg(long, default_value = "entcompprob")]
    score: ConditionalModel,
    #[arg(long)]
    root_ood: bool,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// LCA histogram CSV over all evaluated samples.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "entcompprob")]
    score: ConditionalModel,
    #[arg(long, default_value = "minexp")]
    rule: DecisionRule,
    #[arg(long)]
    root_ood: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by `eval` or `synth run`.
    input: PathBuf,
}

fn engine_for(path: &Path) -> Result<Engine> {
    Ok(Engine::new(io::read_hierarchy(path)?))
}

fn validate(args: ValidateArgs) -> Result<()> {
    let h = io::read_hierarchy(&args.hierarchy)?;
    println!(
        "hierarchy: {} nodes, {} leaves, {} internal, depth {}",
        h.len(),
        h.num_leaves(),
        h.num_internal(),
        h.max_depth()
    );
    if let Some(path) = &args.split {
        let spec = io::read_split_spec(path)?;
        spec.validate(&h).with_context(|| {
            format!("{} (a split refers to the full hierarchy)", path.display())
        })?;
        println!("split: {} held-out subtrees", spec.ood_roots.len());
    }
    if let Some(path) = &args.labels {
        let ds = io::read_labels(path)?;
        ds.validate(&h)
            .with_context(|| format!("{}", path.display()))?;
        println!("labels: {} samples", ds.len());
    }
    if args.stacks.given() {
        let engine = Engine::new(h);
        let stacks = args.stacks.load(&engine)?;
        let logits = stacks.iter().all(|(_, s)| s.has_logits()) && !stacks.is_empty();
        println!(
            "stacks: {} samples, {} depths{}",
            stacks.len(),
            engine.index().max_depth(),
            if logits { ", with logits" } else { "" }
        );
    }
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let full = match &args.hierarchy {
        Some(p) => io::read_hierarchy(p)?,
        None => fgvc::hierarchy(),
    };
    let spec = match (&args.ood_roots, &args.ood_names) {
        (Some(p), _) => io::read_split_spec(p)?,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
            let names: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            SplitSpec::new(fgvc::resolve_leaf_names(&full, &names)?)
        }
        (None, None) if args.hierarchy.is_none() => fgvc::ood_spec(),
        (None, None) => bail!("--ood-roots or --ood-names is required with --hierarchy"),
    };
    let split = split_id_ood(&full, &spec)?;
    let id = &split.id_tree;
    println!("id_leaves {}", id.num_leaves());
    println!("ood_classes {}", split.num_ood_classes());
    println!("internal_nodes {}", id.num_internal());
    println!("pruned_nodes {}", split.pruned.len());
    let counts: Vec<String> = id
        .depth_class_index()
        .counts()
        .iter()
        .map(|c| c.to_string())
        .collect();
    println!("classes_per_depth {}", counts.join(","));
    if let Some(p) = &args.out_hierarchy {
        io::write_hierarchy(p, id)?;
    }
    if let Some(p) = &args.out_map {
        io::write_json_file(p, &split.ood_label_map)?;
    }
    Ok(())
}

fn label_map(ds: &LabeledDataset) -> HashMap<&str, &LabeledSample> {
    ds.samples
        .iter()
        .map(|s| (s.sample_id.as_str(), s))
        .collect()
}

fn infer(args: InferArgs) -> Result<()> {
    let engine = engine_for(&args.hierarchy)?;
    let stacks = args.stacks.load(&engine)?;
    let labels = args.labels.as_deref().map(io::read_labels).transpose()?;
    let by_id = labels.as_ref().map(label_map);
    if args.rule == DecisionRule::Oracle && by_id.is_none() {
        bail!("--rule oracle needs --labels");
    }
    let mut records = Vec::with_capacity(stacks.len());
    for (sample_id, stack) in &stacks {
        let label = match &by_id {
            Some(m) if args.rule == DecisionRule::Oracle => Some(
                m.get(sample_id.as_str())
                    .ok_or_else(|| anyhow!("no label for sample '{sample_id}'"))?
                    .label,
            ),
            _ => None,
        };
        let p = engine
            .predict(stack, args.score, args.rule, args.root_ood, label)
            .with_context(|| format!("sample '{sample_id}'"))?;
        records.push(PredictionRecord::new(sample_id.clone(), &p));
    }
    match &args.out {
        Some(p) => io::write_predictions(p, &records)?,
        None => io::write_predictions_to(std::io::stdout().lock(), &records)?,
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let engine = engine_for(&args.hierarchy)?;
    let h = engine.hierarchy();
    let records = io::read_predictions(&args.predictions)?;
    let labels = io::read_labels(&args.labels)?;
    labels.validate(h)?;
    let by_id = label_map(&labels);
    let mut preds = Vec::new();
    let mut samples = Vec::new();
    for r in &records {
        let s = *by_id
            .get(r.sample_id.as_str())
            .ok_or_else(|| anyhow!("no label for sample '{}'", r.sample_id))?;
        if s.partition == Partition::IdTrain {
            continue;
        }
        preds.push(r.predicted_node);
        samples.push(s.clone());
    }
    let dataset = LabeledDataset::new(samples);
    let mut report = evaluate(h, &preds, &dataset)?;
    if args.stacks.given() {
        let stacks: HashMap<String, ProbabilityStack> =
            args.stacks.load(&engine)?.into_iter().collect();
        let mut tables = Vec::with_capacity(dataset.len());
        let mut ys = Vec::with_capacity(dataset.len());
        for s in &dataset.samples {
            let stack = stacks
                .get(&s.sample_id)
                .ok_or_else(|| anyhow!("no probabilities for sample '{}'", s.sample_id))?;
            tables.push(engine.conditionals(stack, args.score, args.root_ood)?);
            ys.push(s.label);
        }
        report.node_local = NodeLocalSummary::compute(h, &tables, &ys)?;
    }
    if let Some(p) = &args.histogram {
        io::write_histogram(p, &report.lca_histogram())?;
    }
    match &args.out {
        Some(p) => io::write_json_file(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn synth_run(args: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &args.config {
        Some(p) => io::read_json_file(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let exp = Experiment::prepare(&cfg)?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    io::write_json_file(&out.join("config.json"), &cfg)?;
    io::write_hierarchy(&out.join("full_hierarchy.json"), &exp.data.full)?;
    io::write_hierarchy(&out.join("hierarchy.json"), exp.engine.hierarchy())?;
    io::write_split_spec(
        &out.join("split.json"),
        &SplitSpec::new(exp.data.split.ood_label_map.keys().copied()),
    )?;
    io::write_labels(&out.join("labels.csv"), &exp.test)?;
    let stacks: Vec<(String, ProbabilityStack)> = exp
        .test
        .samples
        .iter()
        .map(|s| s.sample_id.clone())
        .zip(exp.stacks.iter().cloned())
        .collect();
    io::write_stack_files(out, exp.engine.index(), &stacks)?;
    let preds = exp.predictions(args.score, args.rule, args.root_ood)?;
    let records: Vec<PredictionRecord> = exp
        .test
        .samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| PredictionRecord::new(s.sample_id.clone(), p))
        .collect();
    io::write_predictions(&out.join("predictions.csv"), &records)?;
    let report = exp.evaluate(args.score, args.rule, args.root_ood)?;
    io::write_json_file(&out.join("report.json"), &report)?;
    io::write_histogram(&out.join("histogram.csv"), &report.lca_histogram())?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("samples id {} ood {}", r.num_id_samples, r.num_ood_samples);
    println!(
        "bmhd id {:.4} ood {:.4} mix {:.4}",
        r.bmhd_id, r.bmhd_ood, r.mix_bmhd
    );
    println!(
        "bacc id {:.2} ood {:.2} mix {:.2}",
        r.bacc_id, r.bacc_ood, r.mix_bacc
    );
    if let Some(n) = &r.node_local {
        println!(
            "node_local nodes {} f1 {:.3} fpr {:.3} tpr {:.3} purity {:.3} dirty_f1 {:.3}",
            n.nodes.len(),
            n.mean_f1,
            n.mean_fpr,
            n.mean_tpr,
            n.mean_purity,
            n.mean_dirty_f1
        );
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let r: EvalReport = io::read_json_file(&args.input)?;
    print_report(&r);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(a) => validate(a),
        Command::Split(a) => split(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Synth {
            command: SynthCommand::Run(a),
        } => synth_run(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Several error types already embed their cause in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            let msg = msg.replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
