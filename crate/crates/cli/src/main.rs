//! Command-line harness: dataset generation, contrastive pretraining,
//! prompt tuning per method, PGD evaluation and reporting, gradient checks,
//! and the objective ablation sweep.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use capt_core::attack::AttackConfig;
use capt_core::checkpoint::{self, CheckpointMeta};
use capt_core::config;
use capt_core::data::{self, ShiftKind, ShiftSpec};
use capt_core::eval::{evaluate, gather, subsample_per_class, EvalReport};
use capt_core::objectives::{AblationMask, Method};
use capt_core::pretrain::{pretrain_contrastive, PretrainConfig};
use capt_core::trainer::{tune, Shots, TrainConfig};

#[derive(Parser)]
#[command(
    name = "capt",
    about = "Adversarial prompt tuning laboratory for a miniature dual-encoder model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Contrastively pretrain the two-tower backbone on a dataset.
    Pretrain(PretrainArgs),
    /// Tune a method's learnable parameters on top of a frozen checkpoint.
    Tune(TuneArgs),
    /// Evaluate clean and robust accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck,
    /// Train and evaluate the objective ablation rows.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Key-value spec file; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Generation seed (overrides the spec file).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Key-value pretraining config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax temperature of the similarity head.
    #[arg(long)]
    tau: Option<f64>,
    /// Transformer layers receiving fresh prompt blocks.
    #[arg(long)]
    prompt_depth: Option<usize>,
    /// Learnable text context length.
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Tuning method: capt | apt-uc | apt-csc | avp | paft | hep.
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: PathBuf,
    /// Pretrained (frozen) checkpoint to tune on top of.
    #[arg(long)]
    ckpt: PathBuf,
    /// Key-value training config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    attack_steps: Option<usize>,
    #[arg(long)]
    attack_step_size: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Objective term mask (ablations): ce-adv | ce-clean |
    /// ce-clean+cons-train | ce-clean+cons-frz | all.
    #[arg(long)]
    mask: Option<String>,
    /// Stream step/epoch records to this file as JSON lines.
    #[arg(long)]
    run_record: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    attack_steps: Option<usize>,
    #[arg(long)]
    attack_step_size: Option<f64>,
    /// Start the attack at the clean point and verify per-example ascent.
    #[arg(long, default_value_t = false)]
    init_zero: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Evaluate on this many test examples per class (default: all).
    #[arg(long)]
    subset: Option<usize>,
    /// Shifted evaluation, repeatable: kind:intensity
    /// (value-jitter | channel-drop | background-swap).
    #[arg(long)]
    shift: Vec<String>,
    /// Append a summary row to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated mask rows to train and evaluate.
    #[arg(
        long,
        default_value = "ce-adv,ce-clean,ce-clean+cons-train,ce-clean+cons-frz,all"
    )]
    rows: String,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    shots: Option<String>,
    /// Evaluate on this many test examples per class (default: all).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut spec = match &args.spec {
        Some(path) => config::synth_spec_from_file(path)
            .with_context(|| format!("reading spec {}", path.display()))?,
        None => data::SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dataset = data::generate(&spec)?;
    data::save(&dataset, &args.out)?;
    println!(
        "wrote {} ({} train, {} test, {} classes)",
        args.out.display(),
        dataset.train.len(),
        dataset.test.len(),
        spec.num_classes
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let dataset = data::load(&args.data)?;
    let mut cfg = match &args.config {
        Some(path) => config::pretrain_from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => PretrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(d) = args.prompt_depth {
        cfg.encoder.prompt_depth = d;
    }
    if let Some(m) = args.context_len {
        cfg.encoder.text_context_len = m;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let (state, curve) = pretrain_contrastive(&dataset, &cfg)?;
    checkpoint::save(&state, &CheckpointMeta::pretrained(), &args.out)?;
    println!(
        "wrote {} ({} steps, final loss {:.4})",
        args.out.display(),
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn apply_attack_flags(
    attack: &mut AttackConfig,
    eps: Option<f64>,
    steps: Option<usize>,
    step_size: Option<f64>,
    train_defaults: bool,
) {
    if let Some(eps) = eps {
        *attack = if train_defaults { AttackConfig::train(eps) } else { AttackConfig::eval(eps) };
    }
    if let Some(k) = steps {
        attack.steps = k;
    }
    if let Some(a) = step_size {
        attack.step_size = a;
    }
}

fn cmd_tune(args: TuneArgs) -> anyhow::Result<()> {
    let Some(method) = Method::parse(&args.method) else {
        bail!("unknown method '{}' (capt | apt-uc | apt-csc | avp | paft | hep)", args.method);
    };
    if method == Method::Hep {
        // No learnable parameters: the tuned checkpoint is the input.
        std::fs::copy(&args.ckpt, &args.out)
            .with_context(|| format!("copying {}", args.ckpt.display()))?;
        println!("wrote {} (hand-engineered prompts, checkpoint unchanged)", args.out.display());
        return Ok(());
    }
    let dataset = data::load(&args.data)?;
    let (mut state, _meta) = checkpoint::load(&args.ckpt)?;
    let frozen = state.frozen_copy();

    let mut cfg = match &args.config {
        Some(path) => config::train_from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    cfg.objective.method = method;
    apply_attack_flags(&mut cfg.attack, args.eps, args.attack_steps, args.attack_step_size, true);
    if let Some(v) = args.lambda {
        cfg.objective.lambda = v;
    }
    if let Some(v) = &args.shots {
        cfg.shots = Shots::parse(v).with_context(|| format!("bad shots '{v}'"))?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = &args.mask {
        cfg.objective.ablation_mask =
            AblationMask::parse(v).with_context(|| format!("bad mask '{v}'"))?;
    }

    let mut sink_file = match &args.run_record {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };
    let record = tune(
        &mut state,
        &frozen,
        &dataset,
        &cfg,
        sink_file.as_mut().map(|w| w as &mut dyn std::io::Write),
    )?;
    drop(sink_file);

    let meta = CheckpointMeta {
        method: method.name().to_string(),
        shots: cfg.shots.as_i64(),
        mask: if method == Method::Capt { cfg.objective.ablation_mask.name() } else { String::new() },
    };
    checkpoint::save(&state, &meta, &args.out)?;
    let last = record.steps.last();
    println!(
        "wrote {} ({} steps, final loss {})",
        args.out.display(),
        record.steps.len(),
        last.map(|s| format!("{:.4}", s.loss.total)).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn eval_set(
    dataset: &data::Dataset,
    subset: Option<usize>,
) -> (Vec<capt_core::Array>, Vec<usize>) {
    match subset {
        Some(k) => {
            let idx = subsample_per_class(
                &dataset.test,
                dataset.spec.num_classes,
                |_| k,
                capt_core::mix_seed(dataset.spec.seed, 0x0ea1),
            );
            gather(&dataset.test, &idx)
        }
        None => {
            let idx: Vec<usize> = (0..dataset.test.len()).collect();
            gather(&dataset.test, &idx)
        }
    }
}

fn write_report(report: &EvalReport, out: &Path, csv: Option<&Path>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(out, json + "\n")?;
    if let Some(csv_path) = csv {
        let mut line = format!(
            "{},{},{},{},{},{}",
            report.method,
            report.shots,
            report.eps,
            report.clean_accuracy,
            report.robust_accuracy,
            report.seed
        );
        for s in &report.shift_results {
            line.push_str(&format!(
                ",{}:{}:{}:{}",
                s.kind, s.intensity, s.clean_accuracy, s.robust_accuracy
            ));
        }
        let needs_header = !csv_path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(csv_path)?;
        use std::io::Write;
        if needs_header {
            writeln!(f, "method,shots,eps,clean_accuracy,robust_accuracy,seed,shifts")?;
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let dataset = data::load(&args.data)?;
    let (state, meta) = checkpoint::load(&args.ckpt)?;
    let method = if meta.method == "pretrained" { "hep".to_string() } else { meta.method };

    let mut attack = AttackConfig::eval(8.0 / 255.0);
    apply_attack_flags(&mut attack, args.eps, args.attack_steps, args.attack_step_size, false);
    attack.init_zero = args.init_zero;

    let mut shifts = Vec::new();
    for s in &args.shift {
        let (kind, intensity) = s
            .split_once(':')
            .with_context(|| format!("bad shift '{s}', expected kind:intensity"))?;
        shifts.push(ShiftSpec {
            kind: ShiftKind::parse(kind)?,
            intensity: intensity.parse().with_context(|| format!("bad intensity in '{s}'"))?,
        });
    }

    let (images, labels) = eval_set(&dataset, args.subset);
    let report = evaluate(
        &state,
        &method,
        meta.shots,
        &images,
        &labels,
        dataset.spec.num_classes,
        &attack,
        &shifts,
        args.batch_size,
        args.seed,
    )?;
    write_report(&report, &args.out, args.csv.as_deref())?;
    println!(
        "wrote {} (clean {:.4}, robust {:.4}, n={})",
        args.out.display(),
        report.clean_accuracy,
        report.robust_accuracy,
        report.num_examples
    );
    Ok(())
}

fn cmd_gradcheck() -> anyhow::Result<()> {
    let results = capt_core::gradcheck::run_all()?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:>4}  {name:<24} max rel err {err:.3e} (tol {tol:.0e})",
            name = r.name,
            err = r.max_rel_err,
            tol = r.tolerance
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance");
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let dataset = data::load(&args.data)?;
    let (base_state, _) = checkpoint::load(&args.ckpt)?;

    let mut cfg = match &args.config {
        Some(path) => config::train_from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    cfg.objective.method = Method::Capt;
    apply_attack_flags(&mut cfg.attack, args.eps, None, None, true);
    if let Some(v) = args.lambda {
        cfg.objective.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = &args.shots {
        cfg.shots = Shots::parse(v).with_context(|| format!("bad shots '{v}'"))?;
    }

    let (images, labels) = eval_set(&dataset, args.subset);
    let eval_attack = AttackConfig::eval(cfg.attack.epsilon);

    let mut rows = Vec::new();
    for row in args.rows.split(',') {
        let row = row.trim();
        let mask = AblationMask::parse(row).with_context(|| format!("unknown mask row '{row}'"))?;
        let mut state = base_state.clone();
        let frozen = state.frozen_copy();
        let mut row_cfg = cfg.clone();
        row_cfg.objective.ablation_mask = mask;
        let record = tune(&mut state, &frozen, &dataset, &row_cfg, None)?;
        let report = evaluate(
            &state,
            &format!("capt[{row}]"),
            row_cfg.shots.as_i64(),
            &images,
            &labels,
            dataset.spec.num_classes,
            &eval_attack,
            &[],
            row_cfg.batch_size,
            cfg.seed,
        )?;
        println!(
            "{row:<24} clean {:.4} robust {:.4}",
            report.clean_accuracy, report.robust_accuracy
        );
        rows.push(serde_json::json!({
            "mask": row,
            "clean_accuracy": report.clean_accuracy,
            "robust_accuracy": report.robust_accuracy,
            "final_loss": record.steps.last().map(|s| s.loss.total),
        }));
    }
    let doc = serde_json::json!({
        "lambda": cfg.objective.lambda,
        "eps": cfg.attack.epsilon,
        "shots": cfg.shots.as_i64(),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "rows": rows,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("wrote {}", args.out.display());
    Ok(())
}
