//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajimit::constraints::{ConstraintConfig, Preset};
use trajimit::evaluation::{self, MetricReport};
use trajimit::observation::ObservationOverride;
use trajimit::policy::{self, ModelKind, PolicyModel, RolloutOptions, RolloutResult, SampleMode};
use trajimit::roles::{self, AssignmentMode, HmmOptions};
use trajimit::synthetic::{self, ScenarioSpec};
use trajimit::trajectory::{self, Dataset, IngestOptions, PlaySequence};
use trajimit::training::{self, Checkpoint, TrainConfig};

use crate::output::{Run, Target};
use crate::plot;
use crate::{
    AssignArgs, Command, CounterfactualArgs, EvaluateArgs, IngestArgs, ModelArgs, PlotArgs, RolloutArgs, SynthArgs, TrainArgs,
    WindowArgs,
};

pub fn run(command: Command, target: &Target) -> Result<PathBuf> {
    match command {
        Command::Synth(a) => synth(a, target),
        Command::Ingest(a) => ingest(a, target),
        Command::AssignRoles(a) => assign_roles(a, target),
        Command::Train(a) => train(a, target),
        Command::Evaluate(a) => evaluate(a, target),
        Command::Rollout(a) => rollout(a, target),
        Command::Counterfactual(a) => counterfactual(a, target),
        Command::Plot(a) => plot_run(a, target),
        Command::Replay(a) => {
            let path = existing(&a.config)?;
            let text = fs::read_to_string(&path)?;
            let command: Command = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            run(command, target)
        }
    }
}

/// Absolute path of an existing input.
fn existing(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("input not found: {}", path.display()))
}

fn load(path: &Path) -> Result<Dataset> {
    trajectory::ingest_tracking(path).with_context(|| format!("reading {}", path.display()))
}

fn csv_string(rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    rows(&mut w)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn synth(mut args: SynthArgs, target: &Target) -> Result<PathBuf> {
    ensure!(args.attackers > 0, "need at least one attacker");
    let tracking = args.tracking.clone().unwrap_or_else(|| (0..args.defenders).map(|d| d % args.attackers).collect());
    args.tracking = Some(tracking.clone());
    let spec = ScenarioSpec {
        n_defenders: args.defenders,
        n_attackers: args.attackers,
        n_frames: args.frames,
        noise: args.noise,
        tracking,
        seed: args.seed,
        ..ScenarioSpec::default()
    };
    spec.validate()?;
    let (dataset, mask) = synthetic::generate_dataset(&spec, args.train, args.val, args.test)?;
    let mut run = Run::start(target, &Command::Synth(args))?;
    synthetic::write_scenarios(&run.dir, "scenarios", &dataset, &mask)?;
    run.record("scenarios.jsonl");
    run.record("scenarios.mask.json");
    run.finish(json!({
        "train": dataset.train.len(),
        "val": dataset.val.len(),
        "test": dataset.test.len(),
        "agents": mask.agents,
    }))
}

fn ingest(mut args: IngestArgs, target: &Target) -> Result<PathBuf> {
    args.input = existing(&args.input)?;
    let (dataset, dropped) = trajectory::ingest_tracking_with(&args.input, IngestOptions { strict: args.strict })
        .with_context(|| format!("reading {}", args.input.display()))?;
    let dataset = if args.normalize {
        let mut out = Dataset::new(dataset.dt);
        for s in dataset.iter() {
            out.push(trajectory::normalize_attack_direction(s)?);
        }
        out
    } else {
        dataset
    };
    let windows = trajectory::split_windows(&dataset, args.burn_in, args.horizon)?;
    let mut run = Run::start(target, &Command::Ingest(args))?;
    trajectory::write_tracking(run.record("windows.jsonl"), &windows)?;
    let dropped_csv = csv_string(|w| {
        w.write_record(["sequence_id", "reason"])?;
        for d in &dropped {
            w.write_record([&d.sequence_id, &d.reason])?;
        }
        Ok(())
    })?;
    run.write("dropped.csv", dropped_csv)?;
    run.finish(json!({
        "sequences": dataset.len(),
        "dropped": dropped.len(),
        "windows": { "train": windows.train.len(), "val": windows.val.len(), "test": windows.test.len() },
    }))
}

fn assign_roles(mut args: AssignArgs, target: &Target) -> Result<PathBuf> {
    args.input = existing(&args.input)?;
    let mode = match args.mode.as_str() {
        "per-sequence" => AssignmentMode::PerSequence,
        "per-timestep" => AssignmentMode::PerTimestep,
        other => bail!("unknown assignment mode `{other}` (expected per-sequence or per-timestep)"),
    };
    let dataset = load(&args.input)?;
    let fit_on: Vec<PlaySequence> = if dataset.train.is_empty() { dataset.iter().cloned().collect() } else { dataset.train.clone() };
    ensure!(!fit_on.is_empty(), "no sequences in {}", args.input.display());
    let options = HmmOptions { max_iters: args.max_iters, ..HmmOptions::default() };
    let fit = roles::fit_on_defenders(&fit_on, options, args.ball_relative)?;
    let mut assigned = Dataset::new(dataset.dt);
    let mut perms = Vec::new();
    for seq in dataset.iter() {
        let out = match mode {
            AssignmentMode::PerSequence => roles::assign_roles(seq, &fit.model)?,
            AssignmentMode::PerTimestep => roles::assign_roles_per_timestep(seq, &fit.model)?.0,
        };
        perms.push((out.sequence_id.clone(), out.role_permutation.clone().unwrap_or_default()));
        assigned.push(out);
    }
    let mut run = Run::start(target, &Command::AssignRoles(args))?;
    run.write("roles.json", fit.model.to_json()?)?;
    trajectory::write_tracking(run.record("assigned.jsonl"), &assigned)?;
    let perm_csv = csv_string(|w| {
        w.write_record(["sequence_id", "permutation"])?;
        for (id, p) in &perms {
            let p: Vec<String> = p.iter().map(usize::to_string).collect();
            w.write_record([id.as_str(), &p.join(";")])?;
        }
        Ok(())
    })?;
    run.write("permutations.csv", perm_csv)?;
    let em_csv = csv_string(|w| {
        w.write_record(["iteration", "log_likelihood"])?;
        for (i, ll) in fit.log_likelihood.iter().enumerate() {
            w.write_record([i.to_string(), ll.to_string()])?;
        }
        Ok(())
    })?;
    run.write("em.csv", em_csv)?;
    run.finish(json!({
        "roles": fit.model.n_roles(),
        "iterations": fit.log_likelihood.len(),
        "converged": fit.converged,
        "degenerate": fit.degenerate,
        "sequences": perms.len(),
    }))
}

fn parse_kind(s: &str) -> Result<ModelKind> {
    match s {
        "vrnn" => Ok(ModelKind::Vrnn),
        "rnn-gauss" => Ok(ModelKind::RnnGauss),
        other => bail!("unknown policy kind `{other}` (expected vrnn or rnn-gauss)"),
    }
}

fn train(args: TrainArgs, target: &Target) -> Result<PathBuf> {
    let data = existing(&args.data)?;
    let dataset = load(&data)?;
    let sport = dataset.iter().next().with_context(|| format!("no sequences in {}", data.display()))?.sport;
    let config = match (&args.resolved, &args.config) {
        (Some(c), _) => c.clone(),
        (None, config) => {
            let mut c = match config {
                Some(p) => {
                    let p = existing(p)?;
                    toml::from_str::<TrainConfig>(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?
                }
                None => TrainConfig::default(),
            };
            if let Some(p) = &args.preset {
                c.constraints = ConstraintConfig::preset(p.parse::<Preset>()?, sport);
            }
            if let Some(k) = &args.kind {
                c.model.kind = parse_kind(k)?;
            }
            c.epochs = args.epochs.unwrap_or(c.epochs);
            c.seed = args.seed.unwrap_or(c.seed);
            c.batch_size = args.batch_size.unwrap_or(c.batch_size);
            c.learning_rate = args.learning_rate.unwrap_or(c.learning_rate);
            c
        }
    };
    config.validate()?;
    let windows = trajectory::split_windows(&dataset, config.burn_in, config.horizon)?;
    let template = windows.train.first().context("no training windows of burn_in + horizon frames")?;
    let n_roles = template.defenders().len();
    let roles: Vec<usize> = match args.role {
        Some(r) => {
            ensure!(r < n_roles, "role {r} out of range for {n_roles} defenders");
            vec![r]
        }
        None => (0..n_roles).collect(),
    };
    let echo = TrainArgs {
        data,
        role: args.role,
        parallel_roles: args.parallel_roles,
        config: None,
        preset: None,
        kind: None,
        epochs: None,
        seed: None,
        batch_size: None,
        learning_rate: None,
        resolved: Some(config.clone()),
    };
    let mut run = Run::start(target, &Command::Train(echo))?;
    let outcomes = training::train_team(&config, &roles, &windows.train, &windows.val, args.parallel_roles)?;
    let mut summary = Vec::new();
    for (&r, o) in roles.iter().zip(&outcomes) {
        let ck = &o.checkpoints[o.best];
        ck.save(run.record(&format!("role-{r}.json")))?;
        run.write(&format!("metrics-role-{r}.csv"), o.metrics_csv())?;
        summary.push(json!({
            "role": r,
            "best_epoch": ck.epoch,
            "validation_score": ck.validation_score,
            "parameters": ck.model.n_params(),
        }));
    }
    run.finish(json!({ "roles": summary }))
}

/// Role models sorted by role, or `None` for the velocity baseline.
fn load_team(models: &ModelArgs) -> Result<Option<Vec<PolicyModel>>> {
    if models.model.len() == 1 && models.model[0] == Path::new("velocity") {
        return Ok(None);
    }
    let mut files = Vec::new();
    for p in &models.model {
        let p = existing(p)?;
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(&p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("role-") && n.ends_with(".json")))
                .collect();
            found.sort();
            ensure!(!found.is_empty(), "no role-*.json checkpoints in {}", p.display());
            files.extend(found);
        } else {
            files.push(p);
        }
    }
    let mut team = Vec::with_capacity(files.len());
    for f in &files {
        team.push(Checkpoint::load(f).with_context(|| format!("loading {}", f.display()))?.model);
    }
    team.sort_by_key(|m| m.role);
    ensure!(team.windows(2).all(|w| w[0].role != w[1].role), "two checkpoints for the same role");
    Ok(Some(team))
}

fn resolve_models(models: &mut ModelArgs) -> Result<()> {
    for p in &mut models.model {
        if p != Path::new("velocity") {
            *p = existing(p)?;
        }
    }
    Ok(())
}

fn load_windows(args: &WindowArgs) -> Result<Vec<PlaySequence>> {
    let dataset = load(&args.data)?;
    let windows = trajectory::split_windows(&dataset, args.burn_in, args.horizon)?;
    let split = match args.split.as_str() {
        "train" => windows.train,
        "val" => windows.val,
        "test" => windows.test,
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    };
    ensure!(!split.is_empty(), "no {} windows of {} frames in {}", args.split, args.burn_in + args.horizon, args.data.display());
    Ok(split)
}

fn evaluate(mut args: EvaluateArgs, target: &Target) -> Result<PathBuf> {
    args.windows.data = existing(&args.windows.data)?;
    resolve_models(&mut args.models)?;
    let windows = load_windows(&args.windows)?;
    let team = load_team(&args.models)?;
    let w = &args.windows;
    let report = match &team {
        None => {
            let slots = windows[0].defenders();
            let mut r = evaluation::evaluate_velocity_baseline(&windows, &slots, w.burn_in, w.horizon)?;
            r.model = args.name.clone().unwrap_or_else(|| "velocity".into());
            r
        }
        Some(team) => {
            let options = RolloutOptions { burn_in: w.burn_in, horizon: w.horizon, samples: args.samples, seed: w.seed, ..Default::default() };
            let name = args.name.clone().unwrap_or_else(|| "policy".into());
            evaluation::evaluate_team(&name, team, &windows, &options)?.0
        }
    };
    let mut run = Run::start(target, &Command::Evaluate(args))?;
    run.write("report.json", report.to_json()?)?;
    run.write("report.txt", MetricReport::table(std::slice::from_ref(&report)))?;
    let per_seq = csv_string(|wr| {
        wr.write_record(["window", "mean_pos", "mean_vel", "mean_acc", "best_pos", "best_vel", "best_acc"])?;
        for (win, s) in windows.iter().zip(&report.per_sequence) {
            let mut row = vec![win.sequence_id.clone()];
            row.extend(s.mean.iter().chain(&s.best).map(f64::to_string));
            wr.write_record(&row)?;
        }
        Ok(())
    })?;
    run.write("per_sequence.csv", per_seq)?;
    run.finish(json!({
        "model": report.model,
        "sequences": report.sequences,
        "mean_pos": report.l2.mean[0].mean,
        "best_pos": report.l2.best[0].mean,
    }))
}

/// Rollouts of one command, as stored in `rollouts.json`.
#[derive(Serialize, Deserialize)]
pub struct RolloutFile {
    pub agents: Vec<String>,
    pub results: Vec<RolloutResult>,
}

fn rollout_options(args: &RolloutArgs, observation_override: Option<ObservationOverride>) -> RolloutOptions {
    RolloutOptions {
        burn_in: args.windows.burn_in,
        horizon: args.windows.horizon,
        samples: args.n,
        seed: args.windows.seed,
        mode: if args.mean { SampleMode::Mean } else { SampleMode::Stochastic },
        shared_noise: false,
        observation_override,
    }
}

fn run_rollouts(args: &RolloutArgs, options: &RolloutOptions) -> Result<RolloutFile> {
    let windows = load_windows(&args.windows)?;
    let team = load_team(&args.models)?.context("rollouts need policy checkpoints, not the velocity baseline")?;
    let picks = args.window.clone().unwrap_or_else(|| vec![0]);
    let mut results = Vec::with_capacity(picks.len());
    for &i in &picks {
        let w = windows.get(i).with_context(|| format!("window {i} out of range ({} windows)", windows.len()))?;
        let opts = RolloutOptions { seed: trajimit::nn::mix_seed(options.seed, i as u64), ..options.clone() };
        results.push(policy::rollout(&team, w, &opts)?);
    }
    Ok(RolloutFile { agents: windows[0].agents.iter().map(|a| a.id.clone()).collect(), results })
}

fn write_rollouts(run: &mut Run, file: &RolloutFile) -> Result<()> {
    run.write("rollouts.json", serde_json::to_string(file)?)?;
    let traj = csv_string(|w| {
        w.write_record(["window", "sample", "t", "role", "x", "y", "vx", "vy", "ax", "ay"])?;
        for r in &file.results {
            for s in 0..r.samples() {
                for t in 0..r.frames() {
                    for k in 0..r.slots.len() {
                        let (p, v, a) = (r.positions[s][t][k], r.velocities[s][t][k], r.accelerations[s][t][k]);
                        let mut row = vec![r.window_id.clone(), s.to_string(), t.to_string(), k.to_string()];
                        row.extend([p[0], p[1], v[0], v[1], a[0], a[1]].iter().map(f64::to_string));
                        w.write_record(&row)?;
                    }
                }
            }
        }
        Ok(())
    })?;
    run.write("trajectories.csv", traj)?;
    run.write("gates.csv", gates_csv(file, None)?)?;
    let goals = csv_string(|w| {
        w.write_record(["window", "sample", "t", "role", "cell"])?;
        for r in &file.results {
            for s in 0..r.samples() {
                for (i, frame) in r.goals[s].iter().enumerate() {
                    for (k, cell) in frame.iter().enumerate() {
                        w.write_record([r.window_id.clone(), s.to_string(), (i + 1).to_string(), k.to_string(), cell.to_string()])?;
                    }
                }
            }
        }
        Ok(())
    })?;
    run.write("goals.csv", goals)?;
    Ok(())
}

/// Gate log with one column per agent. `t` is the frame being predicted;
/// `phase` is `burn-in` or `generated`. `only` restricts to one
/// `(window, sample, role)`.
pub fn gates_csv(file: &RolloutFile, only: Option<(usize, usize, usize)>) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["window".to_string(), "sample".into(), "t".into(), "role".into(), "phase".into()];
        header.extend(file.agents.iter().cloned());
        w.write_record(&header)?;
        for (wi, r) in file.results.iter().enumerate() {
            for s in 0..r.samples() {
                for (i, frame) in r.gates[s].iter().enumerate() {
                    for (k, gate) in frame.iter().enumerate() {
                        if only.is_some_and(|o| o != (wi, s, k)) {
                            continue;
                        }
                        let t = i + 1;
                        let phase = if t >= r.burn_in { "generated" } else { "burn-in" };
                        let mut row = vec![r.window_id.clone(), s.to_string(), t.to_string(), k.to_string(), phase.to_string()];
                        row.extend(gate.iter().map(f64::to_string));
                        w.write_record(&row)?;
                    }
                }
            }
        }
        Ok(())
    })
}

fn resolve_rollout(args: &mut RolloutArgs) -> Result<()> {
    args.windows.data = existing(&args.windows.data)?;
    resolve_models(&mut args.models)
}

fn rollout(mut args: RolloutArgs, target: &Target) -> Result<PathBuf> {
    resolve_rollout(&mut args)?;
    let file = run_rollouts(&args, &rollout_options(&args, None))?;
    let mut run = Run::start(target, &Command::Rollout(args))?;
    write_rollouts(&mut run, &file)?;
    run.finish(json!({ "windows": file.results.len(), "samples": file.results.first().map_or(0, |r| r.samples()) }))
}

/// Mean distance between forced and free positions over generated frames.
fn mean_divergence(forced: &RolloutFile, free: &RolloutFile) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for (a, b) in forced.results.iter().zip(&free.results) {
        for s in 0..a.samples() {
            for t in a.burn_in..a.frames() {
                for (p, q) in a.positions[s][t].iter().zip(&b.positions[s][t]) {
                    sum += (p[0] - q[0]).hypot(p[1] - q[1]);
                    n += 1.0;
                }
            }
        }
    }
    if n > 0.0 {
        sum / n
    } else {
        0.0
    }
}

fn counterfactual(mut args: CounterfactualArgs, target: &Target) -> Result<PathBuf> {
    resolve_rollout(&mut args.rollout)?;
    let forced = match (args.mode.as_str(), &args.gate) {
        ("one-hot", _) => ObservationOverride::OneHotMax,
        ("custom", Some(b)) => ObservationOverride::Fixed(b.clone()),
        ("custom", None) => bail!("--mode custom needs --gate"),
        (other, _) => bail!("unknown counterfactual mode `{other}` (expected one-hot or custom)"),
    };
    let free = run_rollouts(&args.rollout, &rollout_options(&args.rollout, None))?;
    let file = run_rollouts(&args.rollout, &rollout_options(&args.rollout, Some(forced)))?;
    let divergence = mean_divergence(&file, &free);
    let mut run = Run::start(target, &Command::Counterfactual(args))?;
    write_rollouts(&mut run, &file)?;
    run.finish(json!({ "windows": file.results.len(), "mean_position_divergence": divergence }))
}

fn plot_run(mut args: PlotArgs, target: &Target) -> Result<PathBuf> {
    args.input = existing(&args.input)?;
    let path = args.input.join("rollouts.json");
    let file: RolloutFile =
        serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("input not found: {}", path.display()))?)?;
    let r = file.results.get(args.window).with_context(|| format!("window {} out of range", args.window))?;
    ensure!(args.sample < r.samples(), "sample {} out of range", args.sample);
    ensure!(args.role < r.slots.len(), "role {} out of range", args.role);
    let mut run = Run::start(target, &Command::Plot(args.clone()))?;
    plot::trajectories(&run.record("trajectories.svg"), r, &file.agents, args.sample)?;
    plot::accelerations(&run.record("accelerations.svg"), r, args.sample)?;
    plot::gates(&run.record("gates.svg"), r, &file.agents, args.sample, args.role)?;
    run.write("gates_chart.csv", gates_csv(&file, Some((args.window, args.sample, args.role)))?)?;
    run.finish(json!({ "window": r.window_id, "sample": args.sample, "role": args.role }))
}
