use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use handfabric::action_space::{PcaBasis, ACTION_DIM};
use handfabric::adr::{AdrSchedule, AdrState};
use handfabric::config::read_text;
use handfabric::distill::{Checkpoint, Dagger, DaggerConfig, LineEnv, LinearPolicy, MlpPolicy, ScriptedTeacher, ToySimDistill};
use handfabric::fabric::{Fabric, FabricConfig};
use handfabric::kinematics::{load_robot_model, RobotModel};
use handfabric::runtime::service::ClockMode;
use handfabric::runtime::wire::write_trace;
use handfabric::runtime::{run_binpack_in, serve_console, BinPackWorld, RuntimeConfig, TraceRecord};
use handfabric::toysim::{EnvConfig, EpisodeMode, ScriptedGrasp, ScriptedGraspConfig, ToyEnv, ACTOR_OBS_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "handfabric", version, about = "Fabric-controlled grasping, curriculum and bin-packing toolkit")]
struct Cli {
    #[command(flatten)]
    configs: ConfigPaths,
    #[command(subcommand)]
    command: Command,
}

/// Config files; each defaults to the shipped copy.
/// Each file replaces the shipped copy of the same name.
#[derive(Args)]
struct ConfigPaths {
    /// Replacement for robot.toml
    #[arg(long, global = true)]
    robot: Option<PathBuf>,
    /// Replacement for fabric.toml
    #[arg(long, global = true)]
    fabric: Option<PathBuf>,
    /// Replacement for pca_basis.toml
    #[arg(long, global = true)]
    pca: Option<PathBuf>,
    /// Replacement for env.toml
    #[arg(long, global = true)]
    env: Option<PathBuf>,
    /// Replacement for adr_schedule.toml
    #[arg(long, global = true)]
    adr: Option<PathBuf>,
    /// Replacement for runtime.toml
    #[arg(long, global = true)]
    runtime: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One scripted grasp episode in the toy simulator.
    RunEpisode {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// ADR level: `initial`, `terminal` or a counter value.
        #[arg(long, default_value = "initial")]
        level: String,
        #[arg(long, value_enum, default_value_t = Role::Student)]
        role: Role,
        /// Write per-tick fabric telemetry here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Bin packing in simulated time.
    RunBinpack {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "initial")]
        level: String,
        #[arg(long)]
        objects: Option<u32>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// DAgger distillation on a toy environment.
    RunDistill {
        #[arg(long, value_enum, default_value_t = DistillTask::Line)]
        task: DistillTask,
        #[arg(long, default_value_t = 50)]
        iterations: u32,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value = "initial")]
        level: String,
        /// Save the final student here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the randomization ranges at a counter value.
    AdrDump {
        #[arg(long, default_value = "initial")]
        level: String,
    },
    /// Bin packing with the console service attached.
    Serve {
        #[arg(long)]
        address: Option<String>,
        #[arg(long, value_enum, default_value_t = Clock::Wall)]
        mode: Clock,
        #[arg(long, default_value = "initial")]
        level: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many wall seconds; runs until killed otherwise.
        #[arg(long)]
        duration: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistillTask {
    Line,
    Grasp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Sim,
    Wall,
}

struct Loaded {
    model: Arc<RobotModel>,
    fabric: Fabric,
    env: EnvConfig,
    adr: AdrSchedule,
    runtime: RuntimeConfig,
}

fn text_or(path: &Option<PathBuf>) -> Result<Option<String>> {
    path.as_deref().map(|p: &Path| read_text(p).with_context(|| format!("reading {}", p.display()))).transpose()
}

impl ConfigPaths {
    fn load(&self) -> Result<Loaded> {
        let model = Arc::new(match text_or(&self.robot)? {
            Some(t) => load_robot_model(&t)?,
            None => RobotModel::reference(),
        });
        let basis = Arc::new(match text_or(&self.pca)? {
            Some(t) => PcaBasis::from_text(&t, model.hand_joints())?,
            None => PcaBasis::reference(model.hand_joints()),
        });
        let fabric_cfg = match text_or(&self.fabric)? {
            Some(t) => FabricConfig::from_text(&t, &model)?,
            None => FabricConfig::reference(&model),
        };
        let env = match text_or(&self.env)? {
            Some(t) => EnvConfig::from_text(&t, &model)?,
            None => EnvConfig::reference(&model),
        };
        let adr = match text_or(&self.adr)? {
            Some(t) => AdrSchedule::from_text(&t)?,
            None => AdrSchedule::reference(),
        };
        let runtime = match text_or(&self.runtime)? {
            Some(t) => RuntimeConfig::from_text(&t)?,
            None => RuntimeConfig::reference(),
        };
        let fabric = Fabric::new(model.clone(), Some(basis), fabric_cfg);
        Ok(Loaded { model, fabric, env, adr, runtime })
    }
}

impl Loaded {
    fn level(&self, level: &str) -> Result<AdrState> {
        let s = &self.adr.state;
        Ok(match level {
            "initial" => s.at(0),
            "terminal" => s.terminal(),
            n => s.at(n.parse().with_context(|| format!("ADR level `{n}` is not initial, terminal or a counter"))?),
        })
    }

    fn toy_env(&self, mode: EpisodeMode) -> Result<ToyEnv> {
        Ok(ToyEnv::new(self.fabric.clone(), self.env.clone(), mode)?)
    }
}

fn write_trace_file(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    std::fs::write(path, write_trace(trace)).with_context(|| format!("writing {}", path.display()))
}

fn run_episode(cfg: &Loaded, seed: u64, level: &str, role: Role, trace: Option<PathBuf>) -> Result<()> {
    let mode = match role {
        Role::Teacher => EpisodeMode::Teacher,
        Role::Student => EpisodeMode::Student,
    };
    let adr = cfg.level(level)?;
    let mut env = cfg.toy_env(mode)?;
    let fc = env.fabric().config().clone();
    let mut policy = ScriptedGrasp::new(
        ScriptedGraspConfig::default(),
        cfg.model.clone(),
        env.basis().clone(),
        fc.palm_reference,
        &fc.nominal_posture,
        env.config(),
    );
    let mut obs = env.reset(&adr, seed)?;
    let mut records = Vec::new();
    let mut total_reward = 0.0;
    loop {
        let targets = policy.act(&obs.actor_obs);
        let r = env.step_targets(&targets)?;
        total_reward += r.reward.total;
        let s = env.state();
        if trace.is_some() {
            records.push(TraceRecord::new(
                s.tick,
                "fabric",
                "telemetry",
                json!({
                    "q": s.fabric.q.as_slice(),
                    "v": s.fabric.v.as_slice(),
                    "a": s.fabric.a_prev.as_slice(),
                    "pd_target": r.pd_target.q_des.as_slice(),
                    "active_barrier_count": r.active_barriers,
                }),
            ));
        }
        obs = r.obs;
        if r.done.is_some() {
            break;
        }
    }
    let outcome = env.outcome();
    println!(
        "{}",
        json!({
            "seed": seed,
            "adr_n": adr.n,
            "success": outcome.success,
            "steps": outcome.steps,
            "time_to_lift": outcome.time_to_lift,
            "return": total_reward,
            "final_phase": policy.phase(),
        })
    );
    if let Some(path) = trace {
        write_trace_file(&path, &records)?;
    }
    Ok(())
}

fn run_distill(
    cfg: &Loaded,
    task: DistillTask,
    iterations: u32,
    seed: u64,
    learning_rate: Option<f64>,
    batch: Option<usize>,
    level: &str,
) -> Result<Checkpoint> {
    let report = |m: &handfabric::distill::IterationMetrics| {
        println!(
            "{}",
            json!({
                "iteration": m.iteration,
                "l_action": m.loss.l_action,
                "l_aux": m.loss.l_aux,
                "episodes": m.episodes,
                "successes": m.successes,
                "gradient_norm": m.gradient_norm,
            })
        )
    };
    match task {
        DistillTask::Line => {
            let mut teacher = LinearPolicy::zeros(1, 1, 0.1);
            teacher.weights[(0, 0)] = -2.0;
            teacher.bias[0] = 0.1;
            let config = DaggerConfig {
                batch_steps: batch.unwrap_or(200),
                learning_rate: learning_rate.unwrap_or(0.015),
                seed,
                repeat_seeds: true,
            };
            let mut d = Dagger::new(LineEnv::default(), teacher, LinearPolicy::zeros(1, 1, 0.1), config);
            for _ in 0..iterations {
                report(&d.iterate()?);
            }
            Ok(Checkpoint::linear(&d.student))
        }
        DistillTask::Grasp => {
            let adr = cfg.level(level)?;
            let env = cfg.toy_env(EpisodeMode::Student)?;
            let teacher = ScriptedTeacher::for_env(&env, ScriptedTeacher::DEFAULT_STDDEV);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let student =
                MlpPolicy::random(ACTOR_OBS_DIM, MlpPolicy::DEFAULT_HIDDEN, ACTION_DIM, ScriptedTeacher::DEFAULT_STDDEV, &mut rng);
            let config = DaggerConfig {
                batch_steps: batch.unwrap_or(256),
                learning_rate: learning_rate.unwrap_or(1e-3),
                seed,
                repeat_seeds: false,
            };
            let mut d = Dagger::new(ToySimDistill::new(env, adr), teacher, student, config);
            for _ in 0..iterations {
                report(&d.iterate()?);
            }
            Ok(Checkpoint::mlp(&d.student))
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = cli.configs.load()?;
    match cli.command {
        Command::RunEpisode { seed, level, role, trace } => run_episode(&cfg, seed, &level, role, trace)?,
        Command::RunBinpack { seed, level, objects, trace } => {
            let mut rc = cfg.runtime.clone();
            rc.binpack.seed = seed.unwrap_or(rc.binpack.seed);
            rc.binpack.objects = objects.unwrap_or(rc.binpack.objects);
            rc.validate()?;
            let r = run_binpack_in(cfg.toy_env(EpisodeMode::Student)?, cfg.level(&level)?, rc)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if let Some(path) = trace {
                write_trace_file(&path, &r.trace)?;
            }
        }
        Command::RunDistill { task, iterations, seed, learning_rate, batch, level, checkpoint } => {
            let ck = run_distill(&cfg, task, iterations, seed, learning_rate, batch, &level)?;
            if let Some(path) = checkpoint {
                std::fs::write(&path, ck.to_text()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::AdrDump { level } => print!("{}", cfg.level(&level)?.dump()),
        Command::Serve { address, mode, level, seed, duration } => {
            let mut rc = cfg.runtime.clone();
            rc.binpack.seed = seed.unwrap_or(rc.binpack.seed);
            rc.binpack.objects = u32::MAX;
            let address = address.unwrap_or_else(|| rc.serve.address.clone());
            let world = BinPackWorld::new(cfg.toy_env(EpisodeMode::Student)?, cfg.level(&level)?, rc)?;
            let clock = match mode {
                Clock::Sim => ClockMode::Sim,
                Clock::Wall => ClockMode::Wall,
            };
            let handle = serve_console(world, &address, clock).with_context(|| format!("binding {address}"))?;
            eprintln!("serving on {}", handle.local_addr());
            match duration {
                Some(d) if d >= 0.0 => {
                    std::thread::sleep(Duration::from_secs_f64(d));
                    let failure = handle.failure();
                    handle.shutdown();
                    if let Some(f) = failure {
                        bail!("runtime stopped: {f}");
                    }
                }
                Some(d) => bail!("duration {d} is negative"),
                None => handle.wait(),
            }
        }
    }
    Ok(())
}
