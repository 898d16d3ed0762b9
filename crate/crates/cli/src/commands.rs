use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use taskseq::corpus::{generate_corpus, generate_recipe_suite, load_corpus, save_corpus, GeneratorConfig, SequenceExample};
use taskseq::eval::{
    chain_tasks, cross_validate_folds, feedback_eval, feedback_eval_folds, noise_sweep, train_folds, CrossValidation,
    FeedbackPolicy, FeedbackScope, OracleAdvisor,
};
use taskseq::learn::{train, train_multiclass, TrainConfig};
use taskseq::model::{rollout, Advisor, RolloutOptions, TrainedModel};
use taskseq::world::{task_goal_satisfied, Primitive};

use crate::{Command, Scope, TrainArgs};

const NOISE_SEEDS: u64 = 5;

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig { c: self.c, epsilon: self.epsilon, seed: self.seed, ..Default::default() }
    }
}

impl From<Scope> for FeedbackScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::First => FeedbackScope::FirstStep,
            Scope::All => FeedbackScope::AllSteps,
        }
    }
}

fn read_corpus(path: &Path) -> Result<Vec<SequenceExample>> {
    load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn read_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { seed, out } => {
            let corpus = generate_corpus(&GeneratorConfig { seed, ..Default::default() })?;
            save_corpus(&corpus, &out)?;
            let steps: usize = corpus.iter().map(|e| e.steps.len()).sum();
            println!("wrote {} sequences ({steps} steps) to {}", corpus.len(), out.display());
        }
        Command::Train { corpus, out, train: args, multiclass } => {
            let corpus = read_corpus(&corpus)?;
            let config = args.config();
            let (model, report) = if multiclass { train_multiclass(&corpus, &config)? } else { train(&corpus, &config)? };
            model.save(&out)?;
            let mut log = String::new();
            for entry in &report.log {
                writeln!(log, "{}", entry.to_line())?;
            }
            writeln!(
                log,
                "converged={} iterations={} final_objective={:.9} final_violation={:.9}",
                report.converged, report.iterations, report.final_objective, report.final_violation
            )?;
            std::fs::write(log_path(&out), log)?;
            println!(
                "{} after {} iterations (violation {:.5}); model written to {}",
                if report.converged { "converged" } else { "stopped at the iteration cap" },
                report.iterations,
                report.final_violation,
                out.display()
            );
        }
        Command::Evaluate { corpus, folds, train: args, out } => {
            let corpus = read_corpus(&corpus)?;
            let config = args.config();
            let trained = train_folds(&corpus, &config, folds, true)?;
            let cv = cross_validate_folds(&corpus, &trained, config.seed)?;
            print!("{}", format_accuracy_table(&cv));
            if let Some(out) = out {
                write_json(&out, &cv)?;
            }
        }
        Command::NoiseSweep { corpus, folds, noise_probs, train: args, out } => {
            let corpus = read_corpus(&corpus)?;
            let config = args.config();
            let trained = train_folds(&corpus, &config, folds, false)?;
            let seeds: Vec<u64> = (0..NOISE_SEEDS).map(|i| config.seed + i).collect();
            let points = noise_sweep(&corpus, &trained, &noise_probs, &seeds)?;
            println!("{:>6}  {:>9}  per seed", "p", "accuracy");
            for p in &points {
                let per: Vec<String> = p.per_seed.iter().map(|a| format!("{a:.1}")).collect();
                println!("{:>6.2}  {:>8.1}%  {}", p.p, p.accuracy, per.join(" "));
            }
            if let Some(out) = out {
                write_json(&out, &points)?;
            }
        }
        Command::FeedbackEval { corpus, model, k, scope, folds, train: args } => {
            let corpus = read_corpus(&corpus)?;
            if k == 0 {
                bail!("--k must be at least 1");
            }
            let policy = FeedbackPolicy::oracle(k, scope.into());
            let (none, with) = match model {
                Some(path) => {
                    let model = read_model(&path)?;
                    (feedback_eval(&corpus, &model, FeedbackPolicy::NONE)?, feedback_eval(&corpus, &model, policy)?)
                }
                None => {
                    let trained = train_folds(&corpus, &args.config(), folds, false)?;
                    (
                        feedback_eval_folds(&corpus, &trained, FeedbackPolicy::NONE)?,
                        feedback_eval_folds(&corpus, &trained, policy)?,
                    )
                }
            };
            let scope = match scope {
                Scope::First => "first step",
                Scope::All => "all steps",
            };
            println!("no feedback          {none:.1}%");
            println!("oracle k={k} {scope:<9} {with:.1}%");
        }
        Command::Rollout { model, corpus, scenario, k, scope } => {
            let model = read_model(&model)?;
            let corpus = read_corpus(&corpus)?;
            let ex = corpus
                .iter()
                .find(|e| e.scenario_id == scenario)
                .with_context(|| format!("no scenario {scenario} in corpus"))?;
            let mut advisor = k.map(|k| OracleAdvisor { policy: FeedbackPolicy::oracle(k, scope.into()), truth: &ex.steps });
            let opts = RolloutOptions { advisor: advisor.as_mut().map(|a| a as &mut dyn Advisor), ..Default::default() };
            let r = rollout(&model.weights, &ex.initial_state, &ex.task, opts)?;
            println!("task {}", ex.task);
            for (t, a) in r.actions.iter().enumerate() {
                let recorded = ex.steps.get(t).map_or("-".to_string(), |s| s.to_string());
                println!("{t:>3}  {:<28} recorded {recorded}", a.to_string());
            }
            println!(
                "status {:?}, goal satisfied {}, exact match {}",
                r.status,
                task_goal_satisfied(&r.final_state, &ex.task)?,
                r.actions == ex.steps
            );
        }
        Command::Chain { model, seed, k, scenario } => {
            let model = read_model(&model)?;
            let suite = generate_recipe_suite(seed)?;
            let selected: Vec<_> = suite.iter().filter(|s| scenario.as_ref().is_none_or(|id| &s.scenario_id == id)).collect();
            if selected.is_empty() {
                bail!("no recipe scenario {}", scenario.unwrap_or_default());
            }
            let mut ok = 0;
            for s in &selected {
                let out = chain_tasks(&s.tasks, &s.initial_state, &model, k);
                ok += out.success as usize;
                let steps = out.trace.iter().filter(|a| a.primitive != Primitive::Done).count();
                println!(
                    "{:<12} {:<18} {:<7} {}/{} tasks, {steps} actions{}",
                    s.scenario_id,
                    s.recipe.name(),
                    if out.success { "success" } else { "failed" },
                    out.completed_tasks,
                    s.tasks.len(),
                    out.error.map(|e| format!(" ({e})")).unwrap_or_default()
                );
            }
            println!("{ok}/{} recipes completed", selected.len());
        }
        Command::Serve { model, corpus, port } => {
            let model = read_model(&model)?;
            let corpus = read_corpus(&corpus)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let (addr, handle) = crate::server::spawn(crate::server::AppState::new(model, corpus), port).await?;
                eprintln!("listening on http://{addr}");
                handle.await??;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

/// Per-primitive accuracy table: full model against the multiclass and chance baselines.
pub fn format_accuracy_table(cv: &CrossValidation) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>7} {:>7}   {:>7}   {:>7} {:>7}   {:>7}",
        "", "full", "", "multi", "chance", "", "support"
    );
    let _ = writeln!(
        s,
        "{:<20} {:>7} {:>7}   {:>7}   {:>7} {:>7}",
        "primitive", "prim", "p&a", "prim", "prim", "p&a"
    );
    let multi = cv.multiclass.as_ref();
    for p in Primitive::CONTROLLERS {
        let name = p.name();
        let f = &cv.full.per_primitive[name];
        let c = &cv.chance.per_primitive[name];
        let m = multi.map_or("-".to_string(), |m| format!("{:.1}", m.per_primitive[name].prim_accuracy));
        let _ = writeln!(
            s,
            "{name:<20} {:>7.1} {:>7.1}   {m:>7}   {:>7.1} {:>7.1}   {:>7}",
            f.prim_accuracy, f.arg_accuracy, c.prim_accuracy, c.arg_accuracy, f.support
        );
    }
    let m = multi.map_or("-".to_string(), |m| format!("{:.1}", m.macro_average.0));
    let _ = writeln!(
        s,
        "{:<20} {:>7.1} {:>7.1}   {m:>7}   {:>7.1} {:>7.1}",
        "average", cv.full.macro_average.0, cv.full.macro_average.1, cv.chance.macro_average.0, cv.chance.macro_average.1
    );
    let (fp, ff) = cv.full.sequence_accuracy.unwrap_or_default();
    let (cp, cf) = cv.chance.sequence_accuracy.unwrap_or_default();
    let _ = writeln!(s, "{:<20} {fp:>7.1} {ff:>7.1}   {:>7}   {cp:>7.1} {cf:>7.1}", "sequence", "-");
    let _ = writeln!(
        s,
        "{} folds, seed {}, {} steps in {} sequences, corpus sha256 {}",
        cv.folds, cv.seed, cv.full.steps, cv.full.sequences, cv.corpus_hash
    );
    let _ = writeln!(
        s,
        "per-step accuracy: teacher-forced {:.1}%, closed-loop {:.1}%",
        cv.full.teacher_forced_step_accuracy,
        cv.full.closed_loop_step_accuracy.unwrap_or_default()
    );
    s
}
