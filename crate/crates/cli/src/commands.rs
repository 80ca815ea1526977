use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dualarm_core::agent::{evaluate, train as train_agent, write_train_log, CherAgent, CherNetworks};
use dualarm_core::env::{Env, EnvConfig};
use dualarm_core::harness::{
    evaluate_policy, group_summaries, penalty_cost_ordering, read_run_summaries, render_table, run_tracking_scenario,
    write_run_summaries, write_tracking_trace, EvalOptions, PolicyReport, RotationSource, RunSummary,
};
use dualarm_core::nn::Checkpoint;
use dualarm_core::pose::{
    axis_angle_from_rotation, geodesic_loss, icp_refine, kabsch_estimate, rodrigues, sample_surface, train_encoder,
    uniform_rotation, EncoderConfig, EncoderNet, PointCloud, Shape,
};
use dualarm_core::predictor::write_filter_trace;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{preset, read_toml, write_toml, Mode, ResolvedTrain, TrackFile, TrainFile};
use crate::error::{CliError, Result};
use crate::run_dir::{run_of_checkpoint, RunDir};

const EVAL_SEED_OFFSET: u64 = 10_000;

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut text);
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
        }
        w.flush()?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Penalty => "penalty",
        Mode::Lagrangian => "lagrangian",
    }
}

fn load_nets(path: &Path) -> Result<CherNetworks> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.display().to_string()));
    }
    let ckpt = Checkpoint::load(path)?;
    Ok(CherNetworks::from_checkpoint(&ckpt)?)
}

fn check_dofs(env: &EnvConfig, nets: &CherNetworks) -> Result<()> {
    let e = Env::new(env.clone())?;
    let dofs = e.observation().dofs();
    if dofs != nets.features.dofs {
        return Err(CliError::Config(format!(
            "checkpoint expects arms with {:?} joints, environment has {:?}",
            nets.features.dofs, dofs
        )));
    }
    Ok(())
}

pub fn train(runs: &Path, config_path: &Path, mode: Mode, seed: u64, name: Option<String>) -> Result<()> {
    let file: TrainFile = read_toml(config_path)?;
    let env_config = file.env.resolve()?;
    let agent_config = file.agent_for(mode)?;
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("train");
    let name = name
        .or(file.name.clone())
        .unwrap_or_else(|| format!("{stem}-{}-s{seed}", mode_name(mode)));
    let mut env = Env::new(env_config.clone())?;

    let dir = RunDir::create(runs, &name)?;
    let resolved = ResolvedTrain {
        name: name.clone(),
        seed,
        env: env_config,
        agent: agent_config.clone(),
        eval_episodes: file.eval_episodes,
    };
    write_toml(&dir.config().join("train.toml"), &resolved)?;

    let outcome = train_agent(&mut env, &agent_config, seed, Some(&dir.checkpoints()))?;
    write_train_log(dir.traces().join("train_log.csv"), &outcome.log)?;

    let seeds: Vec<u64> = (0..file.eval_episodes as u64).map(|k| EVAL_SEED_OFFSET + k).collect();
    let results = evaluate(&mut env, &outcome.agent, &seeds)?;
    let summary = summarize(&name, &agent_config, seed, &results, &outcome.agent);
    write_run_summaries(dir.report().join("summary.csv"), std::slice::from_ref(&summary))?;
    let last = outcome.log.last();
    let mut text = String::new();
    let _ = writeln!(text, "run {name}: {} episodes, mode {}, seed {seed}", agent_config.episodes, mode_name(mode));
    if let Some(l) = last {
        let _ = writeln!(text, "final training success rate {:.2}, lambda {:.4}", l.success_rate, l.lambda);
    }
    let _ = writeln!(
        text,
        "greedy evaluation over {} episodes: success {:.2}, e1 {:.4} m, e2 {:.4} m, cost value {:.3}",
        summary.episodes, summary.success_rate, summary.mean_e1, summary.mean_e2, summary.cost_value
    );
    for c in &outcome.checkpoints {
        let _ = writeln!(text, "checkpoint {}", c.display());
    }
    std::fs::write(dir.report().join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn summarize(
    name: &str,
    config: &dualarm_core::agent::AgentConfig,
    seed: u64,
    results: &[dualarm_core::agent::EpisodeOutcome],
    agent: &CherAgent,
) -> RunSummary {
    let n = results.len().max(1) as f64;
    let mean = |f: &dyn Fn(&dualarm_core::agent::EpisodeOutcome) -> f64| results.iter().map(f).sum::<f64>() / n;
    RunSummary {
        run: name.to_string(),
        mode: config.mode.name().to_string(),
        lambda: match config.mode {
            dualarm_core::agent::ConstraintMode::Penalty { lambda } => lambda,
            dualarm_core::agent::ConstraintMode::Lagrangian { .. } => agent.nets.lambda,
        },
        seed,
        her: config.her,
        episodes: results.len(),
        success_rate: mean(&|r| r.success as u8 as f64),
        mean_e1: mean(&|r| r.final_errors()[0]),
        mean_e2: mean(&|r| r.final_errors()[1]),
        cost_value: mean(&|r| r.cost_value),
    }
}

#[derive(Debug, Serialize)]
struct EvalRow {
    base_mass_scale: f64,
    episodes: usize,
    success_rate: f64,
    e1_mean: f64,
    e1_std: f64,
    e2_mean: f64,
    e2_std: f64,
    cost_value_mean: f64,
    cost_value_std: f64,
}

impl From<&PolicyReport> for EvalRow {
    fn from(r: &PolicyReport) -> Self {
        Self {
            base_mass_scale: r.base_mass_scale,
            episodes: r.episodes,
            success_rate: r.success_rate,
            e1_mean: r.e1.mean,
            e1_std: r.e1.std,
            e2_mean: r.e2.mean,
            e2_std: r.e2.std,
            cost_value_mean: r.cost_value.mean,
            cost_value_std: r.cost_value.std,
        }
    }
}

pub fn eval(
    runs: &Path,
    checkpoint: &Path,
    episodes: usize,
    env_name: Option<&str>,
    mass_sweep: bool,
    randomize_initial: bool,
    name: Option<String>,
) -> Result<()> {
    if episodes == 0 {
        return Err(CliError::EmptyReport("--episodes must be at least 1".into()));
    }
    let nets = load_nets(checkpoint)?;
    let home_run = run_of_checkpoint(checkpoint);
    let env_config = match (env_name, &home_run) {
        (Some(p), _) => preset(p)?,
        (None, Some(run)) if run.join("config/train.toml").exists() => {
            read_toml::<ResolvedTrain>(&run.join("config/train.toml"))?.env
        }
        _ => match nets.features.dofs {
            [2, 2] => EnvConfig::planar(),
            [6, 6] => EnvConfig::dual_ur5(),
            d => return Err(CliError::Config(format!("no environment preset for arms with {d:?} joints; pass --env"))),
        },
    };
    check_dofs(&env_config, &nets)?;
    let options = EvalOptions {
        seeds_offset: EVAL_SEED_OFFSET,
        randomize_initial,
        base_mass_scales: if mass_sweep {
            vec![1.0, 0.5, 0.75, 1.25, 1.5]
        } else {
            vec![1.0]
        },
        ..EvalOptions::default()
    };
    let reports = evaluate_policy(&env_config, &nets, episodes, &options)?;

    let dir = match (name, home_run) {
        (Some(n), _) => RunDir::create(runs, &n)?,
        (None, Some(run)) => RunDir::create(run.parent().unwrap_or(Path::new(".")), &dir_name(&run))?,
        (None, None) => {
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            RunDir::create(runs, &format!("eval-{stem}"))?
        }
    };
    let rows: Vec<EvalRow> = reports.iter().map(EvalRow::from).collect();
    write_csv(&dir.report().join("eval.csv"), &rows)?;
    let mut text = format!("evaluation of {} over {episodes} episodes\n", checkpoint.display());
    for r in &reports {
        let _ = writeln!(
            text,
            "base mass x{:.2}: success {:.2}, e1 {:.4} ± {:.4} m, e2 {:.4} ± {:.4} m, cost value {:.3} ± {:.3}",
            r.base_mass_scale, r.success_rate, r.e1.mean, r.e1.std, r.e2.mean, r.e2.std, r.cost_value.mean, r.cost_value.std
        );
    }
    std::fs::write(dir.report().join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string()
}

pub struct TrackArgs {
    pub omega: f64,
    pub radius: f64,
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub speed_cap: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub encoder: Option<PathBuf>,
    pub name: Option<String>,
}

#[derive(Debug, Serialize)]
struct TrackMetricsRow {
    omega: f64,
    radius: f64,
    speed_cap: f64,
    steps: usize,
    rate_estimate: f64,
    epsilon: f64,
    success: bool,
    cost_value: f64,
    convergence_step: i64,
    converged: bool,
    divergence: bool,
    final_error_sum: f64,
    tail_max_error_sum: f64,
    t_b: f64,
    theorem1_arm1: String,
    theorem1_arm2: String,
}

pub fn track(runs: &Path, args: TrackArgs) -> Result<()> {
    let mut file = match &args.config {
        Some(p) => read_toml::<TrackFile>(p)?,
        None => TrackFile {
            name: None,
            env: crate::config::EnvChoice::Preset("planar".into()),
            scenario: Default::default(),
        },
    };
    let s = &mut file.scenario;
    s.omega = args.omega;
    s.radius = args.radius;
    if args.speed_cap.is_some() {
        s.ee_speed_cap = args.speed_cap;
    }
    if let Some(n) = args.steps {
        s.steps = n;
    }
    if let Some(k) = args.seed {
        s.seed = k;
    }
    if args.encoder.is_some() {
        s.rotation_source = RotationSource::Encoder;
    }
    s.validate()?;
    let env_config = file.env.resolve()?;
    let nets = load_nets(&args.checkpoint)?;
    check_dofs(&env_config, &nets)?;
    let encoder = match &args.encoder {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingFile(p.display().to_string()));
            }
            Some(EncoderNet::from_checkpoint(&Checkpoint::load(p)?)?)
        }
        None => None,
    };
    let scenario = file.scenario.clone();
    let outcome = run_tracking_scenario(&env_config, &nets, &scenario, encoder.as_ref())?;

    let name = args.name.or(file.name.clone()).unwrap_or_else(|| {
        format!("track-w{}-r{}-s{}", scenario.omega, scenario.radius, scenario.seed)
    });
    let dir = RunDir::create(runs, &name)?;
    write_toml(&dir.config().join("scenario.toml"), &file)?;
    write_tracking_trace(dir.traces().join("tracking.csv"), &outcome.trace)?;
    write_filter_trace(dir.traces().join("filter_arm1.csv"), &outcome.filter_traces[0])?;
    write_filter_trace(dir.traces().join("filter_arm2.csv"), &outcome.filter_traces[1])?;

    let m = &outcome.metrics;
    let sum = m.error_sum();
    let tail = &sum[sum.len() / 2..];
    let verdict = |c: &dualarm_core::harness::Theorem1Check| match c.verdict() {
        Some(true) => "holds".to_string(),
        Some(false) => "violated".to_string(),
        None => "not applicable".to_string(),
    };
    let row = TrackMetricsRow {
        omega: scenario.omega,
        radius: scenario.radius,
        speed_cap: scenario.ee_speed_cap.unwrap_or(f64::INFINITY),
        steps: scenario.steps,
        rate_estimate: outcome.rate_estimate,
        epsilon: m.epsilon,
        success: m.success,
        cost_value: m.cost_value,
        convergence_step: m.convergence_step.map(|k| k as i64).unwrap_or(-1),
        converged: m.convergence_step.is_some(),
        divergence: m.divergence,
        final_error_sum: *sum.last().unwrap_or(&f64::NAN),
        tail_max_error_sum: tail.iter().cloned().fold(0.0, f64::max),
        t_b: m.t_b,
        theorem1_arm1: verdict(&m.theorem1[0]),
        theorem1_arm2: verdict(&m.theorem1[1]),
    };
    write_csv(&dir.report().join("metrics.csv"), std::slice::from_ref(&row))?;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "tracking at omega {} rad/s, radius {} m over {} steps",
        scenario.omega, scenario.radius, scenario.steps
    );
    let _ = writeln!(text, "estimated spin rate {:.4} rad/s, prediction bound eps {:.4} m", row.rate_estimate, row.epsilon);
    let _ = writeln!(
        text,
        "e1+e2: final {:.4} m, max over second half {:.4} m, converged {} (step {}), divergence flag {}",
        row.final_error_sum, row.tail_max_error_sum, row.converged, row.convergence_step, row.divergence
    );
    let _ = writeln!(
        text,
        "T_B {:.3} s, convergence-time bound arm 1 {}, arm 2 {}",
        row.t_b, row.theorem1_arm1, row.theorem1_arm2
    );
    std::fs::write(dir.report().join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub struct PoseArgs {
    pub shape: String,
    pub noise: f64,
    pub points: usize,
    pub seed: u64,
    pub angle: Option<f64>,
    pub encoder: Option<PathBuf>,
    pub train_steps: Option<usize>,
    pub name: Option<String>,
}

#[derive(Debug, Serialize)]
struct PoseRow {
    method: String,
    geodesic_error: f64,
    angle: f64,
    axis_x: f64,
    axis_y: f64,
    axis_z: f64,
}

fn parse_shape(name: &str) -> Result<Shape> {
    match name {
        "box" => Ok(Shape::default_box()),
        "cylinder" => Ok(Shape::Cylinder {
            radius: 0.3,
            height: 1.0,
        }),
        "sphere" => Ok(Shape::Sphere { radius: 0.5 }),
        other => Err(CliError::Config(format!("unknown shape `{other}` (box, cylinder, sphere)"))),
    }
}

pub fn pose_demo(runs: &Path, args: PoseArgs) -> Result<()> {
    let shape = parse_shape(&args.shape)?;
    if !(args.noise >= 0.0) {
        return Err(CliError::Config("--noise must be non-negative".into()));
    }
    if let Some(a) = args.angle {
        if !(0.0..=std::f64::consts::PI).contains(&a) {
            return Err(CliError::Config("--angle must lie in [0, π]".into()));
        }
    }
    let encoder_config = EncoderConfig {
        shape,
        points: args.points,
        noise: args.noise,
        steps: args.train_steps.unwrap_or(0),
        ..EncoderConfig::default()
    };
    if args.train_steps.is_some() {
        encoder_config.validate()?;
    }
    let mut encoder = match &args.encoder {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingFile(p.display().to_string()));
            }
            Some(EncoderNet::from_checkpoint(&Checkpoint::load(p)?)?)
        }
        None => None,
    };

    let base = sample_surface(&shape, args.points, 0.0, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x5EED);
    let truth = match args.angle {
        Some(a) => {
            let axis = Vector3::from_fn(|_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0)).normalize();
            rodrigues(&axis, a)
        }
        None => uniform_rotation(&mut rng),
    };
    let a = base.with_noise(args.noise, &mut rng);
    let b = base.rotated(&truth).with_noise(args.noise, &mut rng);

    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("pose-{}-n{}-s{}", args.shape, args.noise, args.seed));
    let dir = RunDir::create(runs, &name)?;
    if args.train_steps.is_some() {
        let (net, curve) = train_encoder(&encoder_config, args.seed)?;
        net.to_checkpoint().save(dir.checkpoints().join("encoder.ckpt"))?;
        #[derive(Serialize)]
        struct LossRow {
            step: usize,
            loss: f64,
        }
        let rows: Vec<LossRow> = curve.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
        write_csv(&dir.traces().join("encoder_loss.csv"), &rows)?;
        encoder = Some(net);
    }
    write_toml(&dir.config().join("pose.toml"), &encoder_config)?;
    a.write(dir.traces().join("cloud_a.txt"))?;
    b.write(dir.traces().join("cloud_b.txt"))?;

    let mut rows = Vec::new();
    let mut push = |method: &str, r: &nalgebra::Matrix3<f64>| -> Result<()> {
        let est = axis_angle_from_rotation(r)?;
        rows.push(PoseRow {
            method: method.to_string(),
            geodesic_error: geodesic_loss(&truth, r),
            angle: est.angle,
            axis_x: est.axis.x,
            axis_y: est.axis.y,
            axis_z: est.axis.z,
        });
        Ok(())
    };
    push("truth", &truth)?;
    let kabsch = kabsch_estimate(&a, &b)?;
    push("kabsch", kabsch.matrix())?;
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.shuffle(&mut rng);
    let shuffled: PointCloud = b.permuted(&order);
    let icp = icp_refine(&a, &shuffled, &kabsch, 30)?;
    push("icp_unordered", icp.matrix())?;
    if let Some(net) = &encoder {
        let (r, _) = net.estimate(&a, &shuffled)?;
        push("encoder_unordered", r.matrix())?;
    }
    write_csv(&dir.report().join("pose.csv"), &rows)?;
    let mut text = format!(
        "{} cloud, {} points, noise {}: true rotation angle {:.4} rad\n",
        args.shape, args.points, args.noise, rows[0].angle
    );
    for r in &rows[1..] {
        let _ = writeln!(text, "{:<18} geodesic error {:.6} rad, angle {:.4} rad", r.method, r.geodesic_error, r.angle);
    }
    std::fs::write(dir.report().join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::result::Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.csv") {
            out.push(p);
        }
    }
    Ok(())
}

pub fn report(input: &Path, out: &Path) -> Result<()> {
    if !input.is_dir() {
        return Err(CliError::MissingFile(format!("{} is not a directory", input.display())));
    }
    let mut files = Vec::new();
    find_summaries(input, &mut files)?;
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_run_summaries(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?);
    }
    let groups = group_summaries(&rows).map_err(|_| {
        CliError::EmptyReport(format!("no summary.csv rows under {}", input.display()))
    })?;
    let mut table = render_table(&groups);
    if let Some((low, high)) = penalty_cost_ordering(&groups) {
        let _ = writeln!(
            table,
            "\ncost value with lambda_p = 0.5: {low:.3}; with lambda_p = 0: {high:.3}; ordering {}",
            if low <= high { "holds" } else { "does not hold" }
        );
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, &table)?;
    write_csv(&out.with_extension("csv"), &groups.iter().map(GroupRow::from).collect::<Vec<_>>())?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GroupRow {
    mode: String,
    lambda: f64,
    her: bool,
    runs: usize,
    success_mean: f64,
    success_std: f64,
    e1_mean: f64,
    e2_mean: f64,
    cost_value_mean: f64,
    cost_value_std: f64,
}

impl From<&dualarm_core::harness::ReportGroup> for GroupRow {
    fn from(g: &dualarm_core::harness::ReportGroup) -> Self {
        Self {
            mode: g.mode.clone(),
            lambda: g.lambda,
            her: g.her,
            runs: g.runs,
            success_mean: g.success_rate.mean,
            success_std: g.success_rate.std,
            e1_mean: g.e1.mean,
            e2_mean: g.e2.mean,
            cost_value_mean: g.cost_value.mean,
            cost_value_std: g.cost_value.std,
        }
    }
}
