use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rgmps_core::gmm::{GmmModel, GmmOptions};
use rgmps_core::harness::{dataset, eval, pipeline, sweep, Dataset};
use rgmps_core::io::{read_json, write_atomic, write_json_atomic};
use rgmps_core::lgss::{plan, ContextSet, Interpreter, RemoteInterpreter, RemoteOptions, RuleEngine, SceneObservation};
use rgmps_core::model::{
    checkpoint, train, CnnBaseline, CnnConfig, ModelKind, OptimizerConfig, Policy, RasNet, RasNetConfig, TrainConfig,
};
use rgmps_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rgmps", version, about = "Train, evaluate and run the visuomotor skill stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic demonstrations into DIR/manifest.json + DIR/images.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a policy; prints one JSON line per epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "rasnet")]
        model: ModelKind,
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Score a checkpoint on a dataset; prints the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gmm: Option<PathBuf>,
        #[arg(long, default_value_t = eval::DEFAULT_EPS)]
        eps: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the action mixture on a dataset's demonstrations.
    FitGmm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Action indices to model; defaults to the manifest's grasp dims.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Success rate against training-set size for both policies.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,100,200")]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// JSON sweep settings; --ns and --seeds override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Plan the skill sequence for an instruction; prints the plan as JSON.
    SelectSkill {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        context: Option<PathBuf>,
        /// Remote interpreter URL; the label-matching engine is used otherwise.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Plan, run each skill's policy on the scene image and refine.
    Infer {
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        skills: PathBuf,
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        no_gmm: bool,
        /// Also write the trace here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: RasNetConfig,
    train: TrainConfig,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn load_context(path: Option<&Path>) -> Result<ContextSet> {
    match path {
        Some(p) => ContextSet::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(ContextSet::bundled()),
    }
}

fn load_scene(path: &Path) -> Result<SceneObservation> {
    let mut scene = SceneObservation::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
    // Image paths are relative to the scene file.
    if !scene.image.is_empty() && Path::new(&scene.image).is_relative() {
        let dir = path.parent().unwrap_or(Path::new(""));
        let abs = std::path::absolute(dir.join(&scene.image)).map_err(|e| Error::io(path, e))?;
        scene.image = abs.to_string_lossy().into_owned();
    }
    Ok(scene)
}

fn interpreter(endpoint: Option<&str>, context: &ContextSet) -> Result<Box<dyn Interpreter>> {
    Ok(match endpoint {
        Some(url) => Box::new(RemoteInterpreter::new(url, RemoteOptions::default(), context.clone())?),
        None => Box::new(RuleEngine),
    })
}

fn build_policy(kind: ModelKind, cfg: &RasNetConfig) -> Result<Box<dyn Policy>> {
    Ok(match kind {
        ModelKind::Rasnet => Box::new(RasNet::new(cfg.clone())?),
        ModelKind::Cnn => Box::new(CnnBaseline::new(CnnConfig::matched_to(cfg)?)?),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { n, out, seed } => {
            if n == 0 {
                return Err(Error::Input("--n must be positive".into()));
            }
            let demos = dataset::generate(n, seed)?;
            let manifest = dataset::write_dataset(&out, &demos)?;
            print_json(&json!({"written": manifest.entries.len(), "out": out}))
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            model,
            optimizer,
        } => {
            let mut cfg: RunConfig = match &config {
                Some(p) => read_json(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            if let Some(name) = optimizer {
                cfg.train.optimizer = OptimizerConfig::from_name(&name)?;
            }
            let samples = Dataset::read(&data)?.samples();
            let mut policy = build_policy(model, &cfg.model)?;
            train(policy.as_mut(), &samples, &cfg.train, |m| print_json(m))?;
            checkpoint::save(policy.as_ref(), &out)
        }
        Command::Eval { ckpt, data, gmm, eps, out } => {
            let mut policy = checkpoint::load(&ckpt)?;
            let samples = Dataset::read(&data)?.samples();
            let gmm = match gmm {
                Some(p) => Some(GmmModel::from_json(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?),
                None => None,
            };
            let report = eval::evaluate(policy.as_mut(), &samples, eps, gmm.as_ref())?;
            if let Some(p) = out {
                write_json_atomic(&p, &report)?;
            }
            print_json(&report)
        }
        Command::FitGmm { data, k, out, dims, seed } => {
            let ds = Dataset::read(&data)?;
            let omega = dims.unwrap_or_else(|| ds.manifest.grasp_dims.clone());
            let opts = GmmOptions {
                k,
                seed,
                omega: (!omega.is_empty()).then_some(omega),
                ..GmmOptions::default()
            };
            let model = GmmModel::fit(&ds.actions(), &opts)?;
            let mut text = model.to_json()?;
            text.push('\n');
            write_atomic(&out, text.as_bytes())?;
            print_json(&json!({
                "k": model.k,
                "omega": model.omega,
                "iterations": model.log_likelihood.len(),
                "log_likelihood": model.log_likelihood.last(),
                "degenerate": model.degenerate,
            }))
        }
        Command::Sweep { ns, seeds, out, config } => {
            let mut cfg: sweep::SweepConfig = match &config {
                Some(p) => read_json(p)?,
                None => sweep::SweepConfig::default(),
            };
            cfg.ns = ns;
            cfg.seeds = seeds;
            let rows = sweep::run_sweep(&cfg, |row| print_json(row))?;
            sweep::write_csv(&out, &rows)
        }
        Command::SelectSkill {
            scene,
            instruction,
            context,
            endpoint,
        } => {
            let scene = load_scene(&scene)?;
            let context = load_context(context.as_deref())?;
            let interp = interpreter(endpoint.as_deref(), &context)?;
            print_json(&plan(&instruction, &scene, &context, interp.as_ref())?)
        }
        Command::Infer {
            instruction,
            scene,
            skills,
            context,
            endpoint,
            no_gmm,
            out,
        } => {
            let scene_path = scene;
            let scene = load_scene(&scene_path)?;
            let registry = pipeline::SkillRegistry::read(&skills)?;
            let context = load_context(context.as_deref())?;
            let interp = interpreter(endpoint.as_deref(), &context)?;
            let observation = pipeline::load_observation(&scene, &scene_path)?;
            let inputs = pipeline::PipelineInputs {
                instruction: &instruction,
                scene: &scene,
                observation: &observation,
                context: &context,
                interpreter: interp.as_ref(),
                use_gmm: !no_gmm,
            };
            let trace = pipeline::run_inference_pipeline(&inputs, &registry)?;
            if let Some(p) = out {
                write_json_atomic(&p, &trace)?;
            }
            print_json(&trace)
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.render().to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
