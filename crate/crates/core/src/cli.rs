//! Command-line surface: pretrain | finetune | eval | params | ablate |
//! gen-data. Exit codes: 0 success, 2 config error, 3 data error.

use crate::ablation::{run_ablation, ComponentToggle, SweepAxis};
use crate::config::{GeneratorProfile, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{count_parameters, init_pretrain_model, Model};
use crate::peft::{plugin_load, prepare_finetune_model};
use crate::scene::{generate_synthetic, Scene};
use crate::train::{from_checkpoint, run_eval, run_finetune, run_pretrain, to_checkpoint};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "forecast-peft", version, about = "Masked-autoencoder trajectory \
forecasting with parameter-efficient fine-tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-autoencoder pretraining on the reconstruction loss
    Pretrain(CommonArgs),
    /// Finetune a pretrained checkpoint in any mode
    Finetune(CommonArgs),
    /// Evaluate a checkpoint, or a pretrained backbone with a plugin
    Eval(CommonArgs),
    /// Exact parameter accounting for a configuration/mode, no training
    Params(CommonArgs),
    /// Sweep a PEFT hyperparameter axis end-to-end
    Ablate(CommonArgs),
    /// Generate a synthetic scene dataset
    GenData(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file (all fields optional; see README)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// pretrain | full_ft | peft | peft_a | head_only | lora
    #[arg(long)]
    mode: Option<String>,
    /// Plugin file (eval: applied to --pretrained)
    #[arg(long)]
    plugin: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scene dataset (overrides config `data`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation scenes (ablate; defaults to --data)
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Pretrained checkpoint (finetune/eval/ablate/params)
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Full checkpoint to evaluate
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation horizon, <= the model future length (default: full)
    #[arg(long)]
    horizon: Option<usize>,
    /// Generator profile: desk | desk_short | desk_low_rate (gen-data)
    #[arg(long)]
    profile: Option<String>,
}

/// The JSON config file: a TrainConfig plus harness plumbing, every field
/// defaulted.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub generator: GeneratorProfile,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub ablation: Option<AblationSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSpec {
    /// prompt_length | adapter_rank | cep_depth | components
    pub axis: String,
    #[serde(default)]
    pub values: Vec<usize>,
    #[serde(default)]
    pub components: Vec<ComponentToggle>,
}

impl AblationSpec {
    fn to_axis(&self) -> Result<SweepAxis> {
        match self.axis.as_str() {
            "prompt_length" => Ok(SweepAxis::PromptLength(self.values.clone())),
            "adapter_rank" => Ok(SweepAxis::AdapterRank(self.values.clone())),
            "cep_depth" => Ok(SweepAxis::CepDepth(self.values.clone())),
            "components" => Ok(SweepAxis::Components(self.components.clone())),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<FileConfig> {
    let mut cfg: FileConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.train.mode = Mode::parse(mode)?;
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(d) = &args.eval_data {
        cfg.eval_data = Some(d.clone());
    }
    if let Some(p) = &args.pretrained {
        cfg.pretrained = Some(p.clone());
    }
    if let Some(h) = args.horizon {
        cfg.horizon = Some(h);
    }
    Ok(cfg)
}

fn load_data(cfg: &FileConfig) -> Result<Vec<Scene>> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no scene dataset given (--data)".into()))?;
    io::load_scenes(path)
}

fn load_pretrained(cfg: &FileConfig) -> Result<Model> {
    let path = cfg
        .pretrained
        .as_ref()
        .ok_or_else(|| Error::Config("no pretrained checkpoint given (--pretrained)".into()))?;
    let (ck_cfg, state) = from_checkpoint(&io::load_checkpoint(path)?)?;
    if ck_cfg.mode != Mode::Pretrain {
        return Err(Error::Checkpoint(format!(
            "`{}` is a {} checkpoint, not a pretrained backbone",
            path.display(),
            ck_cfg.mode.name()
        )));
    }
    Ok(state.model)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn cmd_pretrain(args: &CommonArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.train.mode = Mode::Pretrain;
    let scenes = load_data(&cfg)?;
    let (state, losses) = run_pretrain(&cfg.train, &scenes, None, None)?;
    std::fs::create_dir_all(&args.out)?;
    let ck_path = args.out.join("pretrain.fpck");
    io::save_checkpoint(&ck_path, &to_checkpoint(&cfg.train, &state)?)?;
    write_json(&args.out, "pretrain_losses.json", &losses)?;
    let summary = serde_json::json!({
        "checkpoint": ck_path,
        "epochs": losses.len(),
        "first_loss": losses.first(),
        "final_loss": losses.last(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_finetune(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    if cfg.train.mode == Mode::Pretrain {
        return Err(Error::Config(
            "finetune needs a finetuning --mode (full_ft, peft, peft_a, head_only, lora)".into(),
        ));
    }
    let pretrained = load_pretrained(&cfg)?;
    let scenes = load_data(&cfg)?;
    let (state, losses, plugin) = run_finetune(&cfg.train, &pretrained, &scenes, None, None)?;
    std::fs::create_dir_all(&args.out)?;
    let ck_path = args.out.join(format!("finetune_{}.fpck", cfg.train.mode.name()));
    io::save_checkpoint(&ck_path, &to_checkpoint(&cfg.train, &state)?)?;
    let plugin_path = match &plugin {
        Some(p) => {
            let path = args.out.join(format!("{}.fppl", cfg.train.mode.name()));
            io::save_plugin(&path, p)?;
            Some(path)
        }
        None => None,
    };
    write_json(&args.out, "finetune_losses.json", &losses)?;
    let counts = count_parameters(&state.model);
    let summary = serde_json::json!({
        "checkpoint": ck_path,
        "plugin": plugin_path,
        "mode": cfg.train.mode.name(),
        "trainable_params": counts.trainable,
        "total_params": counts.total,
        "first_loss": losses.first(),
        "final_loss": losses.last(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let model = match (&args.checkpoint, &args.plugin) {
        (Some(ck), None) => from_checkpoint(&io::load_checkpoint(ck)?)?.1.model,
        (None, Some(plugin)) => {
            let pretrained = load_pretrained(&cfg)?;
            plugin_load(&pretrained, &io::load_plugin(plugin)?)?
        }
        (None, None) => load_pretrained(&cfg)?,
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either --checkpoint or --pretrained with --plugin, not both".into(),
            ))
        }
    };
    let scenes = load_data(&cfg)?;
    let horizon = cfg.horizon.unwrap_or(model.cfg.future_len);
    let (metrics, dump) = run_eval(&model, &scenes, horizon)?;
    std::fs::create_dir_all(&args.out)?;
    io::save_predictions(&args.out.join("predictions.fppr"), &dump)?;
    write_json(&args.out, "metrics.json", &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn cmd_params(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.train.validate()?;
    let pretrained = init_pretrain_model(&cfg.train.backbone, cfg.train.seed)?;
    let model = match cfg.train.mode {
        Mode::Pretrain => pretrained,
        mode => prepare_finetune_model(&pretrained, mode, &cfg.train.peft, cfg.train.seed)?,
    };
    let counts = count_parameters(&model);
    let report = serde_json::json!({
        "mode": cfg.train.mode.name(),
        "counts": counts,
    });
    write_json(&args.out, "params.json", &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let spec = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `ablation` section".into()))?;
    let axis = spec.to_axis()?;
    if cfg.train.mode == Mode::Pretrain {
        return Err(Error::Config("ablate needs a finetuning --mode".into()));
    }
    let pretrained = load_pretrained(&cfg)?;
    let train_scenes = load_data(&cfg)?;
    let eval_scenes = match &cfg.eval_data {
        Some(p) => io::load_scenes(p)?,
        None => train_scenes.clone(),
    };
    let horizon = cfg.horizon.unwrap_or(cfg.train.backbone.future_len);
    let table = run_ablation(
        &cfg.train,
        &pretrained,
        &train_scenes,
        &eval_scenes,
        horizon,
        &axis,
    )?;
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out, "ablation.json", &table)?;
    std::fs::write(args.out.join("ablation.csv"), table.to_csv())?;
    for metric in ["min_ade", "min_fde"] {
        std::fs::write(
            args.out.join(format!("ablation_{metric}.svg")),
            table.to_svg(metric)?,
        )?;
    }
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}

fn cmd_gen_data(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let profile = match args.profile.as_deref() {
        None | Some("desk") => cfg.generator.clone(),
        Some("desk_short") => cfg.generator.desk_short(),
        Some("desk_low_rate") => cfg.generator.desk_low_rate(2),
        Some(other) => {
            return Err(Error::Config(format!("unknown generator profile `{other}`")))
        }
    };
    let scenes = generate_synthetic(cfg.train.seed, &profile)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("scenes_{}.fpsc", profile.dataset_tag));
    io::save_scenes(&path, &scenes)?;
    let summary = serde_json::json!({
        "path": path,
        "n_scenes": scenes.len(),
        "dataset_tag": profile.dataset_tag,
        "native_rate_hz": profile.native_rate_hz,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::GenData(a) => cmd_gen_data(a),
    }
}

/// Runs the CLI, returning the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help/--version exit 0; genuine usage errors are config errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
