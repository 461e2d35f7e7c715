use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};

use crocodile::ablation::{run_ablation, AblationInputs, AblationOutcome};
use crocodile::config::{Preset, RunConfig};
use crocodile::data::{generate_synthetic, Role};
use crocodile::eval::{full_report, Comparison, EvalReport, Metric};
use crocodile::model::{load_checkpoint, save_checkpoint, Architecture, Network};
use crocodile::train::train;

#[derive(Parser, Debug)]
#[command(name = "crocodile", version, about = "Train and evaluate causal/spurious disentangling classifiers")]
struct Cli {
    /// TOML run configuration, applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Model initialization and training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `dotted.key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    FullScale,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Crocodile,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoleArg {
    Id,
    Ood,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (PNG images plus manifest.csv).
    Synth {
        /// Number of samples. Without it, writes `id/` and `ood/` at the configured sizes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = RoleArg::Id)]
        role: RoleArg,
    },
    /// Train a model and evaluate the best checkpoint.
    Train {
        #[arg(long, value_enum, default_value_t = ArchArg::Crocodile)]
        arch: ArchArg,
    },
    /// Evaluate a checkpoint on the configured validation and OOD data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score with the intervened head instead of the causal head.
        #[arg(long)]
        intervened: bool,
        /// Also write per-class bar plots as SVG.
        #[arg(long)]
        plots: bool,
    },
    /// Train every ablation arm for every configured seed and compare them.
    Ablate {
        #[arg(long)]
        plots: bool,
    },
    /// Render a stored report, comparison or ablation result as a table.
    Report {
        input: PathBuf,
        #[arg(long)]
        plots: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::FullScale => Preset::FullScale,
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(preset, cli.config.as_deref(), &overrides)?;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn emit_comparison(out: &Path, stem: &str, cmp: &Comparison, plots: bool) -> anyhow::Result<()> {
    let text = cmp.render_text();
    print!("{text}");
    write(&out.join(format!("{stem}.txt")), &text)?;
    if plots {
        write(&out.join(format!("{stem}_auc.svg")), &cmp.render_svg(Metric::Auc))?;
        write(&out.join(format!("{stem}_ap.svg")), &cmp.render_svg(Metric::Ap))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;

    match cli.command {
        Command::Synth { n, role } => {
            let jobs: Vec<(PathBuf, usize, Role)> = match n {
                Some(n) => {
                    let role = match role {
                        RoleArg::Id => Role::Id,
                        RoleArg::Ood => Role::Ood,
                    };
                    vec![(out.clone(), n, role)]
                }
                None => vec![
                    (out.join("id"), cfg.data.n_train + cfg.data.n_val, Role::Id),
                    (out.join("ood"), cfg.data.n_ood, Role::Ood),
                ],
            };
            for (dir, n, role) in jobs {
                let ds = generate_synthetic(&cfg.synthetic, n, role)?;
                ds.write_to_dir(&dir)?;
                write(&dir.join("graph.txt"), &cfg.synthetic.causal_graph()?.to_text())?;
                log::info!("wrote {n} samples to {}", dir.display());
            }
        }
        Command::Train { arch } => {
            let data = cfg.load_data()?;
            let arch = match arch {
                ArchArg::Crocodile => Architecture::Crocodile,
                ArchArg::Baseline => Architecture::Baseline,
            };
            let network = Network::build(arch, cfg.model.clone(), DType::F32, cfg.seed)?;
            let outcome = train(
                &network,
                &data.train,
                &data.val,
                data.graph.as_ref(),
                &cfg.train,
                Some(&out.join("metrics.jsonl")),
            )?;
            save_checkpoint(out.join("model.ckpt"), &outcome.checkpoint)?;
            write_json(&out.join("history.json"), &outcome.history)?;
            let name = match arch {
                Architecture::Crocodile => "crocodile",
                Architecture::Baseline => "baseline",
            };
            let report = full_report(name, &network, &data.val, data.ood.as_ref(), cfg.train.eval_intervened)?;
            write_json(&out.join("report.json"), &report)?;
            emit_comparison(&out, "report", &Comparison { columns: vec![report] }, false)?;
        }
        Command::Eval {
            checkpoint,
            intervened,
            plots,
        } => {
            if !checkpoint.exists() {
                bail!(
                    "checkpoint {} not found (train first, then pass --checkpoint <out>/model.ckpt)",
                    checkpoint.display()
                );
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let network = Network::from_checkpoint(&ckpt)?;
            let data = cfg.load_data()?;
            let name = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let report = full_report(&name, &network, &data.val, data.ood.as_ref(), intervened)?;
            write_json(&out.join("report.json"), &report)?;
            emit_comparison(&out, "report", &Comparison { columns: vec![report] }, plots)?;
        }
        Command::Ablate { plots } => {
            let data = cfg.load_data()?;
            let ood = data
                .ood
                .as_ref()
                .context("ablation needs OOD data (set data.ood_manifest for manifest data)")?;
            let inputs = AblationInputs {
                train: &data.train,
                val: &data.val,
                ood,
                graph: data.graph.as_ref(),
            };
            let outcome = run_ablation(&cfg.ablate.arms, &cfg.model, &cfg.train, &inputs, &cfg.ablate.seeds, Some(&out))?;
            write_json(&out.join("ablation.json"), &outcome)?;
            emit_comparison(&out, "ablation", &outcome.median, plots)?;
            let failed: Vec<String> = outcome
                .runs
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| format!("{} seed {}: {e}", r.arm, r.seed)))
                .collect();
            if !failed.is_empty() {
                bail!("{} ablation run(s) failed: {}", failed.len(), failed.join("; "));
            }
        }
        Command::Report { input, plots } => {
            let text = fs::read_to_string(&input).with_context(|| format!("cannot read {}", input.display()))?;
            let mut cmp = parse_report(&text).with_context(|| format!("{} is not a report", input.display()))?;
            for col in &mut cmp.columns {
                if col.drop_auc_percent.is_none() || col.drop_ap_percent.is_none() {
                    col.recompute_drops()?;
                }
            }
            emit_comparison(&out, "report", &cmp, plots)?;
        }
    }
    Ok(())
}

fn parse_report(text: &str) -> anyhow::Result<Comparison> {
    if let Ok(c) = serde_json::from_str::<Comparison>(text) {
        return Ok(c);
    }
    if let Ok(r) = serde_json::from_str::<EvalReport>(text) {
        return Ok(Comparison { columns: vec![r] });
    }
    let a: AblationOutcome = serde_json::from_str(text)?;
    Ok(a.median)
}
