//! Experiment harness: penalisation sweep, prompt change and fixed-trace
//! conditioning over the canned sketches.
//!
//! By default run seeds are derived from `(seed, category, run)` and not
//! from the condition, so every condition sees the same initial draws and
//! augmentation streams (common random numbers). `paired = false` gives
//! each sweep condition its own streams.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingVec, EncoderBackend};
use crate::engine::{splitmix, EngineConfig, PruneConfig, PruneEvent, StepRecord};
use crate::engine::{Edit, OptimState, Selector};
use crate::error::{Error, Result, TraceId};
use crate::sketch::{Origin, Region, Sketch, Trace};
use crate::io::canned;
use crate::losses::{semantic_loss, LossConfig};
use crate::metrics::{holm_bonferroni, tie_report, welch_t_test, EmbeddingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    PenalisationSweep,
    PromptChange,
    FixedTraces,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penalisation_sweep" | "penalisation-sweep" => Ok(Self::PenalisationSweep),
            "prompt_change" | "prompt-change" => Ok(Self::PromptChange),
            "fixed_traces" | "fixed-traces" => Ok(Self::FixedTraces),
            other => Err(Error::Input(format!(
                "unknown scenario `{other}` (expected penalisation_sweep, prompt_change or fixed_traces)"
            ))),
        }
    }
}

/// One arm of the penalisation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    pub loss: LossConfig,
}

impl Condition {
    /// The low / medium / high arms: `λ` and `α` scaled by 0.01, 1 and 100.
    pub fn sweep(base: &LossConfig) -> Vec<Condition> {
        [("low", 0.01), ("medium", 1.0), ("high", 100.0)]
            .into_iter()
            .map(|(name, k)| {
                let mut loss = base.clone();
                loss.lambda = loss.lambda.map(|l| l * k);
                loss.alpha *= k;
                Condition { name: name.into(), loss }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    /// Canned sketch names; each is one category of the test family.
    pub sketches: Vec<String>,
    /// Target prompt `t₁`; defaults to each sketch's bundled prompt.
    pub prompt: Option<String>,
    /// Initial prompt `t₂` of the prompt-change scenario; defaults to the
    /// bundled alternative.
    pub alt_prompt: Option<String>,
    /// Completions per condition (direct runs, baseline runs).
    pub runs: usize,
    /// Number of random TIE subsets drawn from a pool of runs.
    pub subsets: usize,
    /// Samples per TIE set.
    pub subset_size: usize,
    /// Partition a shuffled pool into non-overlapping subsets instead of
    /// drawing each subset independently. Overlapping subsets share most
    /// samples, so their spread understates the pool's sampling error and
    /// the Welch test on them is anti-conservative; disjoint subsets need
    /// `runs ≥ subsets · subset_size`.
    pub disjoint_subsets: bool,
    /// Starting drawings (prompt change) or pruned baselines (fixed traces).
    pub starts: usize,
    /// Continuations per start.
    pub trials: usize,
    /// Paired direct / switched runs whose loss curves are compared.
    pub curve_runs: usize,
    /// Trailing iterations averaged into a run's final loss.
    pub final_window: usize,
    /// Fraction of iterations spent on `t₂` before switching.
    pub switch_fraction: f64,
    /// Agent traces kept by the heavy prune.
    pub keep: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Share seeds across sweep conditions.
    pub paired: bool,
    pub engine: EngineConfig,
    /// Sweep arms; empty means [`Condition::sweep`] of `engine.loss`.
    pub conditions: Vec<Condition>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::toy(Scenario::PenalisationSweep)
    }
}

impl ExperimentSpec {
    /// Toy-scale defaults: 64×64 renders, 200 iterations, pools of 30 runs
    /// and TIE sets of 20 distinct samples.
    pub fn toy(scenario: Scenario) -> Self {
        let mut engine = EngineConfig { resolution: 64, ..EngineConfig::default() };
        engine.loss.augment.crop = 0.1;
        engine.loss.augment.perspective = 0.05;
        Self {
            scenario,
            sketches: vec!["chair".into()],
            prompt: None,
            alt_prompt: None,
            runs: 30,
            subsets: 5,
            subset_size: 20,
            disjoint_subsets: false,
            starts: 5,
            trials: 20,
            curve_runs: 10,
            final_window: 10,
            switch_fraction: 0.5,
            keep: 6,
            iterations: 200,
            seed: 0,
            paired: true,
            engine,
            conditions: Vec::new(),
        }
    }

    /// Full-resolution renders at the original study's run counts.
    pub fn paper_scale(mut self) -> Self {
        self.engine.resolution = 224;
        self.runs = 30;
        self.trials = 20;
        self.subset_size = 20;
        self.subsets = 5;
        self.curve_runs = 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: &str| Error::Schema { path: path.into(), detail: detail.into() };
        if self.sketches.is_empty() {
            return Err(bad("sketches", "at least one sketch is required"));
        }
        for name in &self.sketches {
            canned::get(name)?;
        }
        if self.runs < 2 {
            return Err(bad("runs", "at least two runs per condition are required"));
        }
        if self.subsets < 2 || self.subset_size < 2 {
            return Err(bad("subsets", "need at least two subsets of at least two samples"));
        }
        if self.disjoint_subsets && self.runs < self.subsets * self.subset_size {
            return Err(bad("runs", "disjoint subsets need runs ≥ subsets · subset_size"));
        }
        if self.iterations == 0 {
            return Err(bad("iterations", "must be positive"));
        }
        match self.scenario {
            Scenario::PenalisationSweep => {
                if !self.conditions.is_empty() && self.conditions.len() < 2 {
                    return Err(bad("conditions", "a sweep needs at least two conditions"));
                }
                for (i, c) in self.conditions.iter().enumerate() {
                    c.loss.validate().map_err(|e| match e {
                        Error::Schema { path, detail } => Error::Schema { path: format!("conditions[{i}].{path}"), detail },
                        other => other,
                    })?;
                }
            }
            Scenario::PromptChange => {
                if !(self.switch_fraction > 0.0 && self.switch_fraction < 1.0) {
                    return Err(bad("switch_fraction", "must lie in (0, 1)"));
                }
                if self.starts < 2 || self.trials < 2 || self.curve_runs < 2 {
                    return Err(bad("starts", "starts, trials and curve_runs must each be at least 2"));
                }
            }
            Scenario::FixedTraces => {
                if self.starts < 2 || self.trials < 2 {
                    return Err(bad("starts", "starts and trials must each be at least 2"));
                }
                if self.starts > self.runs {
                    return Err(bad("starts", "cannot select more baselines than runs"));
                }
                if self.keep == 0 || self.keep >= self.engine.treebranch.agent_traces {
                    return Err(bad("keep", "must be positive and below treebranch.agent_traces"));
                }
            }
        }
        self.engine.validate()
    }

    fn conditions(&self) -> Vec<Condition> {
        if self.conditions.is_empty() {
            Condition::sweep(&self.engine.loss)
        } else {
            self.conditions.clone()
        }
    }
}

/// Samples of one condition within one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub category: String,
    pub condition: String,
    /// TIE of each sample set.
    pub tie: Vec<f64>,
    /// Final semantic loss of each run against the target prompt.
    pub semantic: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GroupReport {
    pub fn mean_tie(&self) -> f64 {
        mean(&self.tie)
    }

    pub fn mean_semantic(&self) -> f64 {
        mean(&self.semantic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub category: String,
    /// `tie`, `semantic` or `final_loss`.
    pub metric: String,
    pub a: String,
    pub b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Holm–Bonferroni adjustment within the family of tests sharing this
    /// metric and condition pair across categories.
    pub p_adjusted: f64,
}

/// Mean semantic loss against `t₁` per iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub category: String,
    pub condition: String,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub spec: ExperimentSpec,
    pub groups: Vec<GroupReport>,
    pub tests: Vec<TestReport>,
    pub curves: Vec<Curve>,
    /// Fixed traces only: whether every frozen stroke came out bit-identical.
    pub frozen_identical: Option<bool>,
    pub telemetry: Vec<String>,
}

impl ExperimentReport {
    pub fn group(&self, category: &str, condition: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.category == category && g.condition == condition)
    }

    pub fn test(&self, category: &str, metric: &str, a: &str, b: &str) -> Option<&TestReport> {
        self.tests.iter().find(|t| t.category == category && t.metric == metric && t.a == a && t.b == b)
    }

    pub fn tests_for<'a>(&'a self, metric: &'a str, a: &'a str, b: &'a str) -> impl Iterator<Item = &'a TestReport> {
        self.tests.iter().filter(move |t| t.metric == metric && t.a == a && t.b == b)
    }

    /// Writes `report.json`, `tie.csv`, `semantic.csv`, `tests.csv` and
    /// `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))?;
        fs::write(dir.join("report.json"), json + "\n")?;

        let mut tie = csv_writer(&dir.join("tie.csv"))?;
        let mut sem = csv_writer(&dir.join("semantic.csv"))?;
        tie.write_record(["category", "condition", "set", "tie"]).map_err(csv_err)?;
        sem.write_record(["category", "condition", "run", "semantic_loss"]).map_err(csv_err)?;
        for g in &self.groups {
            for (i, v) in g.tie.iter().enumerate() {
                tie.write_record([&g.category, &g.condition, &i.to_string(), &v.to_string()]).map_err(csv_err)?;
            }
            for (i, v) in g.semantic.iter().enumerate() {
                sem.write_record([&g.category, &g.condition, &i.to_string(), &v.to_string()]).map_err(csv_err)?;
            }
        }
        tie.flush()?;
        sem.flush()?;

        let mut tests = csv_writer(&dir.join("tests.csv"))?;
        for t in &self.tests {
            tests.serialize(t).map_err(csv_err)?;
        }
        tests.flush()?;

        let mut curves = csv_writer(&dir.join("curves.csv"))?;
        curves.write_record(["category", "condition", "iteration", "mean_semantic_loss"]).map_err(csv_err)?;
        for c in &self.curves {
            for (i, v) in c.mean.iter().enumerate() {
                curves.write_record([&c.category, &c.condition, &i.to_string(), &v.to_string()]).map_err(csv_err)?;
            }
        }
        curves.flush()?;
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Parses a spec from JSON or TOML. Omitted keys take the toy defaults;
/// `scenario`, when given, overrides the file's.
pub fn load_spec(text: &str, scenario: Option<Scenario>) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = crate::io::parse_document(text)?;
    if let Some(s) = scenario {
        spec.scenario = s;
    }
    spec.validate()?;
    Ok(spec)
}

/// Runs the scenario named in `spec`.
pub fn run_experiment(spec: &ExperimentSpec, backend: Arc<dyn EncoderBackend>, telemetry: Option<&Path>) -> Result<ExperimentReport> {
    match spec.scenario {
        Scenario::PenalisationSweep => run_penalisation_sweep(spec, backend, telemetry),
        Scenario::PromptChange => run_prompt_change(spec, backend, telemetry),
        Scenario::FixedTraces => run_fixed_traces(spec, backend, telemetry),
    }
}

/// Completes each sketch `runs` times under every condition and compares
/// the TIE of random subsets pairwise.
pub fn run_penalisation_sweep(
    spec: &ExperimentSpec,
    backend: Arc<dyn EncoderBackend>,
    telemetry: Option<&Path>,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut h = Harness::new(spec, backend, telemetry)?;
    let conditions = spec.conditions();
    for (ci, name) in spec.sketches.iter().enumerate() {
        let cat = Category::load(spec, name, h.backend.as_ref())?;
        let c = ci as u64;
        for (k, cond) in conditions.iter().enumerate() {
            let stream = if spec.paired { c } else { derive(c, &[k as u64]) };
            let engine = EngineConfig { loss: cond.loss.clone(), ..spec.engine.clone() };
            let mut pool = Vec::with_capacity(spec.runs);
            for r in 0..spec.runs {
                let seed = derive(spec.seed, &[stream, r as u64]);
                let mut state = h.start(&cat, &cat.prompt, engine.clone(), seed)?;
                h.run(&mut state, spec.iterations, 0, None, None, &format!("{name}_{}_{r}", cond.name))?;
                pool.push(h.finish(&state, &cat.text)?);
            }
            let sets = subsets(spec, derive(spec.seed, &[stream, SUBSET_STREAM]));
            h.group(name, &cond.name, &pool, &sets)?;
        }
        for i in 0..conditions.len() {
            for j in i + 1..conditions.len() {
                h.compare(name, "tie", &conditions[j].name, &conditions[i].name)?;
            }
        }
    }
    h.report(Scenario::PenalisationSweep, None)
}

/// Direct runs on `t₁` against runs that spend the first part on `t₂`.
pub fn run_prompt_change(
    spec: &ExperimentSpec,
    backend: Arc<dyn EncoderBackend>,
    telemetry: Option<&Path>,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut h = Harness::new(spec, backend, telemetry)?;
    let n = spec.iterations;
    let switch = ((spec.switch_fraction * n as f64).floor() as u64).clamp(1, n - 1);
    for (ci, name) in spec.sketches.iter().enumerate() {
        let cat = Category::load(spec, name, h.backend.as_ref())?;
        let c = ci as u64;

        let mut direct = Vec::with_capacity(spec.runs);
        for r in 0..spec.runs {
            let mut state = h.start(&cat, &cat.prompt, spec.engine.clone(), derive(spec.seed, &[c, r as u64]))?;
            h.run(&mut state, n, 0, None, None, &format!("{name}_direct_{r}"))?;
            direct.push(h.finish(&state, &cat.text)?);
        }
        let sets = subsets(spec, derive(spec.seed, &[c, SUBSET_STREAM]));
        h.group(name, "direct", &direct, &sets)?;

        // Each start is drawn on t₂, then branched into independent trials
        // that finish on t₁.
        let mut switched = Vec::with_capacity(spec.starts * spec.trials);
        let mut sets = Vec::with_capacity(spec.starts);
        for s in 0..spec.starts {
            let mut base = h.start(&cat, &cat.alt_prompt, spec.engine.clone(), derive(spec.seed, &[c, START_STREAM, s as u64]))?;
            let schedule = spec.engine.prune.events(n, base.prunable_count());
            h.run(&mut base, switch, 0, Some(&schedule), None, &format!("{name}_start_{s}"))?;
            let first = switched.len();
            for t in 0..spec.trials {
                let mut state = base.clone();
                state.reseed(derive(spec.seed, &[c, TRIAL_STREAM, s as u64, t as u64]));
                state.apply_edit(Edit::SetPrompt { prompt: cat.prompt.clone() })?;
                h.run(&mut state, n - switch, switch, Some(&schedule), None, &format!("{name}_switched_{s}_{t}"))?;
                switched.push(h.finish(&state, &cat.text)?);
            }
            sets.push((first..switched.len()).collect());
        }
        h.group(name, "switched", &switched, &sets)?;
        h.compare(name, "tie", "switched", "direct")?;
        h.compare(name, "semantic", "switched", "direct")?;

        // Paired loss curves: the same draw either stays on t₁ or starts on t₂.
        let mut finals = [Vec::new(), Vec::new()];
        let mut sums = [vec![0.0; n as usize], vec![0.0; n as usize]];
        for i in 0..spec.curve_runs {
            let seed = derive(spec.seed, &[c, CURVE_STREAM, i as u64]);
            for (k, switched) in [false, true].into_iter().enumerate() {
                let first = if switched { &cat.alt_prompt } else { &cat.prompt };
                let mut state = h.start(&cat, first, spec.engine.clone(), seed)?;
                let schedule = spec.engine.prune.events(n, state.prunable_count());
                let tag = if switched { "curve_switched" } else { "curve_direct" };
                let mut curve = h.run(&mut state, switch, 0, Some(&schedule), Some(&cat.text), &format!("{name}_{tag}_{i}_a"))?;
                if switched {
                    state.apply_edit(Edit::SetPrompt { prompt: cat.prompt.clone() })?;
                }
                curve.extend(h.run(&mut state, n - switch, switch, Some(&schedule), Some(&cat.text), &format!("{name}_{tag}_{i}_b"))?);
                for (acc, v) in sums[k].iter_mut().zip(&curve) {
                    *acc += v / spec.curve_runs as f64;
                }
                let w = spec.final_window.clamp(1, curve.len());
                finals[k].push(mean(&curve[curve.len() - w..]));
            }
        }
        for (k, cond) in ["curve_direct", "curve_switched"].into_iter().enumerate() {
            h.groups.push(GroupReport {
                category: name.clone(),
                condition: cond.into(),
                tie: Vec::new(),
                semantic: std::mem::take(&mut finals[k]),
                warnings: Vec::new(),
            });
            h.curves.push(Curve { category: name.clone(), condition: cond.into(), mean: std::mem::take(&mut sums[k]) });
        }
        h.compare(name, "final_loss", "curve_switched", "curve_direct")?;
    }
    h.report(Scenario::PromptChange, None)
}

/// Baseline completions against completions conditioned on a few frozen
/// strokes kept from heavily pruned baselines.
pub fn run_fixed_traces(
    spec: &ExperimentSpec,
    backend: Arc<dyn EncoderBackend>,
    telemetry: Option<&Path>,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut h = Harness::new(spec, backend, telemetry)?;
    let beta = spec.engine.prune.beta;
    let mut identical = true;
    for (ci, name) in spec.sketches.iter().enumerate() {
        let cat = Category::load(spec, name, h.backend.as_ref())?;
        let c = ci as u64;

        let mut baseline = Vec::with_capacity(spec.runs);
        let mut finals = Vec::with_capacity(spec.runs);
        for r in 0..spec.runs {
            let mut state = h.start(&cat, &cat.prompt, spec.engine.clone(), derive(spec.seed, &[c, r as u64]))?;
            h.run(&mut state, spec.iterations, 0, None, None, &format!("{name}_baseline_{r}"))?;
            baseline.push(h.finish(&state, &cat.text)?);
            finals.push(state);
        }
        let sets = subsets(spec, derive(spec.seed, &[c, SUBSET_STREAM]));
        h.group(name, "baseline", &baseline, &sets)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[c, START_STREAM]));
        let chosen = index::sample(&mut rng, spec.runs, spec.starts).into_vec();
        let mut engine = spec.engine.clone();
        engine.treebranch.agent_traces -= spec.keep;
        let mut conditioned = Vec::with_capacity(spec.starts * spec.trials);
        let mut sets = Vec::with_capacity(spec.starts);
        for (s, &b) in chosen.iter().enumerate() {
            let mut pruned = finals[b].clone();
            let excess = pruned.prunable_count().saturating_sub(spec.keep);
            pruned.prune(PruneConfig { count: excess, beta })?;
            pruned.apply_edit(Edit::SetFrozen { selector: Selector::Ids(agent_ids(&pruned)), frozen: true })?;
            let kept: Vec<Trace> = pruned.sketch().traces().iter().filter(|t| t.origin == Origin::Agent).cloned().collect();

            let first = conditioned.len();
            for t in 0..spec.trials {
                let seed = derive(spec.seed, &[c, TRIAL_STREAM, s as u64, t as u64]);
                let mut state = OptimState::new(
                    pruned.sketch().clone(),
                    &cat.prompt,
                    cat.region.clone(),
                    engine.clone(),
                    h.backend.clone(),
                    seed,
                )?;
                state.add_agents(seed)?;
                h.run(&mut state, spec.iterations, 0, None, None, &format!("{name}_conditioned_{s}_{t}"))?;
                identical &= kept.iter().all(|k| state.sketch().get(k.id) == Some(k));
                conditioned.push(h.finish(&state, &cat.text)?);
            }
            sets.push((first..conditioned.len()).collect());
        }
        h.group(name, "conditioned", &conditioned, &sets)?;
        h.compare(name, "tie", "conditioned", "baseline")?;
        h.compare(name, "semantic", "conditioned", "baseline")?;
    }
    h.report(Scenario::FixedTraces, Some(identical))
}

fn agent_ids(state: &OptimState) -> Vec<TraceId> {
    state.sketch().traces().iter().filter(|t| t.origin == Origin::Agent).map(|t| t.id).collect()
}

const SUBSET_STREAM: u64 = 0x5ab5;
const START_STREAM: u64 = 0x57a7;
const TRIAL_STREAM: u64 = 0x7e1a;
const CURVE_STREAM: u64 = 0xc0e7;

fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// `count` random subsets of `size` indices into `0..pool`. Disjoint
/// subsets are consecutive chunks of one permutation; otherwise each subset
/// is drawn independently, without replacement when the pool is large
/// enough and with replacement (bootstrap) when it is not.
fn subsets(spec: &ExperimentSpec, seed: u64) -> Vec<Vec<usize>> {
    use rand::Rng;
    let (pool, count, size) = (spec.runs, spec.subsets, spec.subset_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if spec.disjoint_subsets {
        let order = index::sample(&mut rng, pool, pool).into_vec();
        return order.chunks_exact(size).take(count).map(<[usize]>::to_vec).collect();
    }
    (0..count)
        .map(|_| {
            if size <= pool {
                index::sample(&mut rng, pool, size).into_vec()
            } else {
                (0..size).map(|_| rng.random_range(0..pool)).collect()
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Category {
    sketch: Sketch,
    region: Region,
    prompt: String,
    alt_prompt: String,
    text: EmbeddingVec,
}

impl Category {
    fn load(spec: &ExperimentSpec, name: &str, backend: &dyn EncoderBackend) -> Result<Self> {
        let canned = canned::get(name)?;
        let prompt = spec.prompt.clone().unwrap_or(canned.prompt.clone());
        let alt_prompt = spec.alt_prompt.clone().unwrap_or(canned.alt_prompt.clone());
        let text = backend.embed_text(&prompt)?;
        Ok(Self { sketch: canned.sketch()?, region: canned.region, prompt, alt_prompt, text })
    }
}

/// The final render of a run: its embedding and semantic loss against `t₁`.
struct Sample {
    embedding: Vec<f64>,
    semantic: f64,
}

struct Harness<'a> {
    spec: &'a ExperimentSpec,
    backend: Arc<dyn EncoderBackend>,
    telemetry: Option<PathBuf>,
    files: Vec<String>,
    groups: Vec<GroupReport>,
    tests: Vec<TestReport>,
    curves: Vec<Curve>,
}

impl<'a> Harness<'a> {
    fn new(spec: &'a ExperimentSpec, backend: Arc<dyn EncoderBackend>, telemetry: Option<&Path>) -> Result<Self> {
        if let Some(dir) = telemetry {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            spec,
            backend,
            telemetry: telemetry.map(Path::to_path_buf),
            files: Vec::new(),
            groups: Vec::new(),
            tests: Vec::new(),
            curves: Vec::new(),
        })
    }

    fn start(&self, cat: &Category, prompt: &str, engine: EngineConfig, seed: u64) -> Result<OptimState> {
        OptimState::initialized(cat.sketch.clone(), prompt, cat.region.clone(), engine, self.backend.clone(), seed)
    }

    /// Runs `n` steps. Without a schedule the default one for `n` applies;
    /// with one, events are read at `offset + i`. With `track`, returns the
    /// un-augmented semantic loss against it after each step.
    fn run(
        &mut self,
        state: &mut OptimState,
        n: u64,
        offset: u64,
        schedule: Option<&[PruneEvent]>,
        track: Option<&EmbeddingVec>,
        tag: &str,
    ) -> Result<Vec<f64>> {
        let own;
        let schedule = match schedule {
            Some(s) => s,
            None => {
                own = state.config().prune.events(n, state.prunable_count());
                &own
            }
        };
        let mut records: Vec<StepRecord> = Vec::with_capacity(n as usize);
        let mut curve = Vec::with_capacity(n as usize);
        for i in offset..offset + n {
            for ev in schedule.iter().filter(|e| e.at == i) {
                state.prune(ev.cfg)?;
            }
            let step = state.step_count();
            let loss = state.step()?;
            records.push(StepRecord::new(step, &loss));
            if let Some(text) = track {
                curve.push(self.semantic(state, text)?);
            }
        }
        if let Some(dir) = &self.telemetry {
            let path = dir.join(format!("{tag}.jsonl"));
            StepRecord::write_jsonl(&records, std::io::BufWriter::new(fs::File::create(&path)?))?;
            self.files.push(path.display().to_string());
        }
        Ok(curve)
    }

    fn semantic(&self, state: &OptimState, text: &EmbeddingVec) -> Result<f64> {
        let img = state.render()?;
        semantic_loss(&self.backend.embed_image(&img)?.embedding, text)
    }

    fn finish(&self, state: &OptimState, text: &EmbeddingVec) -> Result<Sample> {
        let e = self.backend.embed_image(&state.render()?)?.embedding;
        Ok(Sample { semantic: semantic_loss(&e, text)?, embedding: e.as_slice().to_vec() })
    }

    fn group(&mut self, category: &str, condition: &str, pool: &[Sample], sets: &[Vec<usize>]) -> Result<()> {
        let mut tie = Vec::with_capacity(sets.len());
        let mut warnings = Vec::new();
        for (i, set) in sets.iter().enumerate() {
            let vectors = set.iter().map(|&k| pool[k].embedding.clone()).collect();
            let report = tie_report(&EmbeddingSet::new(vectors)?).map_err(|e| {
                Error::Degenerate(format!("{category}/{condition}: TIE set {i} failed: {e}"))
            })?;
            warnings.extend(report.warnings.into_iter().map(|w| format!("set {i}: {w}")));
            tie.push(report.value);
        }
        self.groups.push(GroupReport {
            category: category.into(),
            condition: condition.into(),
            tie,
            semantic: pool.iter().map(|s| s.semantic).collect(),
            warnings,
        });
        Ok(())
    }

    fn compare(&mut self, category: &str, metric: &str, a: &str, b: &str) -> Result<()> {
        let pick = |cond: &str| -> Result<Vec<f64>> {
            let g = self
                .groups
                .iter()
                .find(|g| g.category == category && g.condition == cond)
                .ok_or_else(|| Error::contract(format!("no group {category}/{cond}")))?;
            Ok(if metric == "tie" { g.tie.clone() } else { g.semantic.clone() })
        };
        let (xa, xb) = (pick(a)?, pick(b)?);
        let w = welch_t_test(&xa, &xb)
            .map_err(|e| Error::Degenerate(format!("{category}: {metric} test of {a} against {b} failed: {e}")))?;
        self.tests.push(TestReport {
            category: category.into(),
            metric: metric.into(),
            a: a.into(),
            b: b.into(),
            mean_a: mean(&xa),
            mean_b: mean(&xb),
            t: w.t,
            df: w.df,
            p: w.p,
            p_adjusted: w.p,
        });
        Ok(())
    }

    fn report(mut self, scenario: Scenario, frozen_identical: Option<bool>) -> Result<ExperimentReport> {
        // Holm across categories, per metric and condition pair.
        let mut families: Vec<(String, String, String)> = Vec::new();
        for t in &self.tests {
            let key = (t.metric.clone(), t.a.clone(), t.b.clone());
            if !families.contains(&key) {
                families.push(key);
            }
        }
        for (metric, a, b) in families {
            let idx: Vec<usize> =
                (0..self.tests.len()).filter(|&i| self.tests[i].metric == metric && self.tests[i].a == a && self.tests[i].b == b).collect();
            let adjusted = holm_bonferroni(&idx.iter().map(|&i| self.tests[i].p).collect::<Vec<_>>());
            for (i, p) in idx.into_iter().zip(adjusted) {
                self.tests[i].p_adjusted = p;
            }
        }
        Ok(ExperimentReport {
            scenario,
            spec: self.spec.clone(),
            groups: self.groups,
            tests: self.tests,
            curves: self.curves,
            frozen_identical,
            telemetry: self.files,
        })
    }
}
