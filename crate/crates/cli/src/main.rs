use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use capo_core::lab::{
    filtered_second_moment_ratio, gradient_variance_ratio, mc_gradient_stats, MIN_MC_SAMPLES,
};
use capo_core::rng::substream;
use capo_core::trainer::{
    compare_algorithms, eval_policy, sweep_switch_points, train, write_metrics_csv,
};
use capo_core::{
    CapoError, Curriculum, Environment, EstimatorPhase, GroupedBandit, NoiseModel, PolicyParams,
    TrainConfig,
};
use clap::{Parser, Subcommand};

const HALVING_BAND: (f64, f64) = (0.48, 0.52);

#[derive(Parser)]
#[command(name = "capo", version, about = "Two-phase advantage curriculum on toy RL tasks")]
struct Cli {
    /// key=value run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output artifacts
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once; writes metrics.csv, checkpoint.txt and manifest.txt
    Train,
    /// One run per (switch fraction, seed); writes sweep.csv
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,1.0")]
        fractions: Vec<f64>,
        /// Number of consecutive seeds starting at the config seed
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Add the 0 and 1 fractions if missing
        #[arg(long)]
        with_endpoints: bool,
    },
    /// Monte Carlo bias/variance of the filtered and unfiltered estimators; writes lab.csv
    Lab {
        #[arg(long, value_delimiter = ',', default_value = "1")]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
    },
    /// Every algorithm with and without the curriculum; writes compare.csv
    Compare {
        /// Extra curriculum to compare against the baseline
        #[arg(long, default_value = "capo")]
        curriculum: Curriculum,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Greedy evaluation of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<CapoError> for Failure {
    fn from(e: CapoError) -> Self {
        match e {
            CapoError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_config(cli: &Cli) -> Outcome<TrainConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| usage("this command needs --config <path>"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = TrainConfig::parse(&text)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create(out: &Path, name: &str) -> Outcome<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    let file = File::create(&path)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    Ok((path, BufWriter::new(file)))
}

fn cmd_train(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let start = Instant::now();
    let output = train(&cfg)?;
    let elapsed = start.elapsed();

    let (metrics_path, mut w) = create(&cli.out, "metrics.csv")?;
    write_metrics_csv(&mut w, &output.metrics)?;
    w.flush()?;
    let (checkpoint_path, mut w) = create(&cli.out, "checkpoint.txt")?;
    output.params.write_checkpoint(&mut w)?;
    w.flush()?;

    let (manifest_path, mut w) = create(&cli.out, "manifest.txt")?;
    w.write_all(cfg.to_kv_string().as_bytes())?;
    writeln!(w, "artifact.metrics={}", metrics_path.display())?;
    writeln!(w, "artifact.checkpoint={}", checkpoint_path.display())?;
    writeln!(w, "result.final_reward={}", output.final_reward(&cfg.env))?;
    writeln!(w, "result.final_entropy={}", output.final_entropy())?;
    writeln!(w, "duration_secs={:.6}", elapsed.as_secs_f64())?;
    writeln!(w, "version={}", env!("CARGO_PKG_VERSION"))?;
    w.flush()?;

    println!(
        "trained {} steps: expected reward {:.4}, entropy {:.4}; wrote {}",
        cfg.total_steps,
        output.final_reward(&cfg.env),
        output.final_entropy(),
        manifest_path.display()
    );
    Ok(())
}

fn seed_list(cfg: &TrainConfig, count: u64) -> Outcome<Vec<u64>> {
    if count == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    Ok((0..count).map(|i| cfg.seed.wrapping_add(i)).collect())
}

fn cmd_sweep(cli: &Cli, fractions: &[f64], seeds: u64, with_endpoints: bool) -> Outcome {
    let cfg = load_config(cli)?;
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(usage(format!("switch fraction {f} outside [0, 1]")));
    }
    let mut fractions = fractions.to_vec();
    if with_endpoints {
        for end in [0.0, 1.0] {
            if !fractions.contains(&end) {
                fractions.push(end);
            }
        }
        fractions.sort_by(f64::total_cmp);
    }
    let rows = sweep_switch_points(&cfg, &fractions, &seed_list(&cfg, seeds)?)?;
    let (path, mut w) = create(&cli.out, "sweep.csv")?;
    writeln!(w, "fraction,seed,final_reward,mean_entropy")?;
    for r in &rows {
        writeln!(w, "{},{},{},{}", r.fraction, r.seed, r.final_reward, r.final_entropy)?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn lab_setup(cli: &Cli) -> Outcome<(Environment, PolicyParams, u64)> {
    if cli.config.is_some() {
        let cfg = load_config(cli)?;
        let params = cfg.env.initial_params();
        return Ok((cfg.env, params, cfg.seed));
    }
    let env: Environment = GroupedBandit::new(vec![vec![0.9, 0.1], vec![0.2, 0.7]])
        .expect("valid table")
        .into();
    let params = env.initial_params();
    Ok((env, params, cli.seed.unwrap_or(0)))
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_lab(cli: &Cli, sigmas: &[f64], n: usize) -> Outcome {
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(usage(format!("--sigma must be > 0, got {s}")));
    }
    if n < MIN_MC_SAMPLES {
        return Err(usage(format!("--n must be at least {MIN_MC_SAMPLES}, got {n}")));
    }
    let (env, params, seed) = lab_setup(cli)?;
    let (path, mut w) = create(&cli.out, "lab.csv")?;
    writeln!(w, "estimator,sigma,n,bias_norm,variance_trace,mse,ratio_halving")?;
    let mut all_pass = true;
    for (i, &sigma) in sigmas.iter().enumerate() {
        let noise = NoiseModel::new(sigma)?;
        let stream = seed.wrapping_add(i as u64);
        let ratio = filtered_second_moment_ratio(0.0, sigma, n, &mut substream(stream, 99))?;
        for est in [EstimatorPhase::Phase1, EstimatorPhase::Phase2] {
            let s = mc_gradient_stats(&env, &params, est, noise, n, stream)?;
            writeln!(
                w,
                "{est},{sigma},{n},{},{},{},{ratio}",
                s.bias_norm, s.variance_trace, s.mse
            )?;
            if est == EstimatorPhase::Phase2 {
                let z = s.bias_norm / s.standard_error();
                let pass = z <= 3.0;
                all_pass &= pass;
                println!("sigma={sigma} phase2 bias {:.3e} = {z:.2} standard errors: {}", s.bias_norm, verdict(pass));
            }
        }
        let pass = (HALVING_BAND.0..=HALVING_BAND.1).contains(&ratio);
        all_pass &= pass;
        println!("sigma={sigma} halving ratio {ratio:.4}: {}", verdict(pass));
        let vr = gradient_variance_ratio(&env, &params, noise, n, stream)?;
        println!("sigma={sigma} gradient variance ratio phase1/phase2 {vr:.4}");
    }
    w.flush()?;
    println!("{}; wrote {}", verdict(all_pass), path.display());
    Ok(())
}

fn cmd_compare(cli: &Cli, curriculum: Curriculum, seeds: u64) -> Outcome {
    let cfg = load_config(cli)?;
    let mut curricula = vec![Curriculum::Capo];
    if curriculum != Curriculum::Capo {
        curricula.push(curriculum);
    }
    let rows = compare_algorithms(&cfg, &curricula, &seed_list(&cfg, seeds)?)?;
    let (path, mut w) = create(&cli.out, "compare.csv")?;
    writeln!(w, "algo,curriculum,seed,final_reward,delta")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r.algo, r.curriculum, r.seed, r.final_reward, r.delta)?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, episodes: usize) -> Outcome {
    let cfg = load_config(cli)?;
    let file = File::open(checkpoint)
        .map_err(|e| usage(format!("cannot read {}: {e}", checkpoint.display())))?;
    let params = PolicyParams::read_checkpoint(BufReader::new(file))
        .map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let mut rng = substream(cfg.seed, 2);
    let greedy = eval_policy(&params, &cfg.env, episodes, &mut rng)?;
    let expected = cfg.env.expected_reward(&params)?;
    println!("greedy reward {greedy:.4} over {episodes} episodes (expected reward {expected:.4})");
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Sweep {
            fractions,
            seeds,
            with_endpoints,
        } => cmd_sweep(cli, fractions, *seeds, *with_endpoints),
        Command::Lab { sigma, n } => cmd_lab(cli, sigma, *n),
        Command::Compare { curriculum, seeds } => cmd_compare(cli, *curriculum, *seeds),
        Command::Eval {
            checkpoint,
            episodes,
        } => cmd_eval(cli, checkpoint, *episodes),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
