//! Optimization state machine: treebranch initialization, Adam steps,
//! pruning and atomic application of user edits.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingVec, EncoderBackend};
use crate::error::{Error, Result, TraceId};
use crate::geometry::{min_point_set_distance, Point2};
use crate::losses::{self, GeoCache, LossBreakdown, LossConfig, LossInputs};
use crate::raster::{RasterConfig, RasterImage, Rasterizer};
use crate::sketch::{NewTrace, Origin, Region, Rgba, Sketch, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr_points: f64,
    pub lr_color: f64,
    pub lr_width: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lower clamp applied to widths after each step.
    pub min_width: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_points: 0.01, lr_color: 0.02, lr_width: 0.02, beta1: 0.9, beta2: 0.999, eps: 1e-8, min_width: 1e-4 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: &str| Err(Error::Schema { path: format!("adam.{path}"), detail: detail.into() });
        for (name, lr) in [("lr_points", self.lr_points), ("lr_color", self.lr_color), ("lr_width", self.lr_width)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return bad(name, "step size must be finite and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.min_width > 0.0) {
            return bad("min_width", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreebranchConfig {
    /// Shares of T₁ (on user points), T₂ (on T₁ endpoints), T₃ (uniform in Ω).
    pub fractions: [f64; 3],
    /// Spawn radius for successive control points.
    pub radius: f64,
    pub points_per_trace: usize,
    /// Number of agent traces K_a.
    pub agent_traces: usize,
    pub initial_width: f64,
}

impl Default for TreebranchConfig {
    fn default() -> Self {
        Self { fractions: [0.5, 0.3, 0.2], radius: 0.05, points_per_trace: 4, agent_traces: 32, initial_width: 0.01 }
    }
}

impl TreebranchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: String| Err(Error::Schema { path: format!("treebranch.{path}"), detail });
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("fractions", format!("must be non-negative and sum to 1, got {:?}", self.fractions));
        }
        if !(self.radius > 0.0) {
            return bad("radius", format!("must be positive, got {}", self.radius));
        }
        if self.points_per_trace < 4 || self.points_per_trace % 3 != 1 {
            return bad("points_per_trace", format!("must be 4 + 3n, got {}", self.points_per_trace));
        }
        if !(self.initial_width > 0.0) {
            return bad("initial_width", format!("must be positive, got {}", self.initial_width));
        }
        Ok(())
    }

    /// Sizes of T₁, T₂, T₃ by largest-remainder rounding, ties going to the
    /// earlier group.
    pub fn partition(&self) -> [usize; 3] {
        largest_remainder(self.agent_traces, &self.fractions)
    }
}

pub(crate) fn largest_remainder(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * total as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut left = total - sizes.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// When pruning happens during [`OptimState::run`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    /// Fraction of the run after which pruning happens once. `None` disables it.
    pub at_fraction: Option<f64>,
    /// Traces to remove; `None` means ⌈K_a/3⌉ of the prunable traces.
    pub count: Option<usize>,
    pub beta: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self { at_fraction: Some(0.6), count: None, beta: 0.5 }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.at_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Schema { path: "prune.at_fraction".into(), detail: format!("must lie in [0, 1], got {f}") });
            }
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Schema { path: "prune.beta".into(), detail: format!("must be non-negative, got {}", self.beta) });
        }
        Ok(())
    }

    /// Concrete events for a run of `n` steps starting with `prunable` agent traces.
    pub fn events(&self, n: u64, prunable: usize) -> Vec<PruneEvent> {
        match self.at_fraction {
            Some(f) if n > 0 => vec![PruneEvent {
                at: ((f * n as f64).floor() as u64).min(n - 1),
                cfg: PruneConfig { count: self.count.unwrap_or(prunable.div_ceil(3)).min(prunable), beta: self.beta },
            }],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub count: usize,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Pruning runs before the step with this index (0-based within the run).
    pub at: u64,
    pub cfg: PruneConfig,
}

/// Everything the engine needs besides the backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub treebranch: TreebranchConfig,
    pub prune: PruneSchedule,
    pub raster: RasterConfig,
    /// Render resolution along the longer side.
    pub resolution: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            treebranch: TreebranchConfig::default(),
            prune: PruneSchedule::default(),
            raster: RasterConfig::default(),
            resolution: 224,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.adam.validate()?;
        self.treebranch.validate()?;
        self.prune.validate()?;
        Rasterizer::new(self.raster).map_err(|e| Error::Schema { path: "raster".into(), detail: e.to_string() })?;
        if self.resolution < 8 {
            return Err(Error::Schema { path: "resolution".into(), detail: format!("must be at least 8, got {}", self.resolution) });
        }
        Ok(())
    }
}

/// Render size `(width, height)` for a sketch aspect and longer-side resolution.
pub fn render_size(aspect: f64, resolution: usize) -> (usize, usize) {
    if aspect >= 1.0 {
        (resolution, ((resolution as f64 / aspect).round() as usize).max(8))
    } else {
        (((resolution as f64 * aspect).round() as usize).max(8), resolution)
    }
}

/// Seeds `K_a` agent traces around the user's sketch.
pub fn treebranch_init(user: &Sketch, region: &Region, cfg: &TreebranchConfig, seed: u64) -> Result<Vec<NewTrace>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<Point2> =
        user.user_traces().iter().flat_map(|t| t.chain.points()).copied().filter(|p| region.contains(*p)).collect();
    let [mut n1, mut n2, mut n3] = cfg.partition();
    if anchors.is_empty() {
        n3 += n1;
        n1 = 0;
    }
    if n1 == 0 {
        n3 += n2;
        n2 = 0;
    }

    let grow = |start: Point2, rng: &mut ChaCha8Rng| -> NewTrace {
        let mut points = vec![start];
        while points.len() < cfg.points_per_trace {
            let prev = *points.last().expect("nonempty");
            let r = cfg.radius * rng.random::<f64>().sqrt();
            let phi = std::f64::consts::TAU * rng.random::<f64>();
            points.push(Point2::new((prev.x + r * phi.cos()).clamp(0.0, 1.0), (prev.y + r * phi.sin()).clamp(0.0, 1.0)));
        }
        let color = [rng.random(), rng.random(), rng.random(), 1.0];
        NewTrace { points, color, width: cfg.initial_width, origin: Origin::Agent, frozen: false }
    };

    let mut out = Vec::with_capacity(cfg.agent_traces);
    for _ in 0..n1 {
        let start = *anchors.choose(&mut rng).expect("anchors nonempty when n1 > 0");
        out.push(grow(start, &mut rng));
    }
    let ends: Vec<Point2> = out.iter().map(|t| *t.points.last().expect("nonempty")).collect();
    for _ in 0..n2 {
        let start = *ends.choose(&mut rng).expect("T1 nonempty when n2 > 0");
        out.push(grow(start, &mut rng));
    }
    for _ in 0..n3 {
        let start = region.sample(&mut rng);
        out.push(grow(start, &mut rng));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    All,
    Ids(Vec<TraceId>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    AddTrace { trace: NewTrace },
    RemoveTrace { id: TraceId },
    MoveControlPoints { id: TraceId, indices: Vec<usize>, deltas: Vec<Point2> },
    SetColor { id: TraceId, color: Rgba },
    SetWidth { id: TraceId, width: f64 },
    SetFrozen { selector: Selector, frozen: bool },
    SetPrompt { prompt: String },
    SetRegion { region: Region },
    SetLossConfig { loss: LossConfig },
    /// Replaces the unfrozen agent traces with a fresh treebranch draw.
    Reinitialize { seed: Option<u64> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    /// Ids of traces created by the edit.
    pub added: Vec<TraceId>,
    pub removed: Vec<TraceId>,
}

/// One line of step telemetry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L_s")]
    pub semantic: f64,
    #[serde(rename = "L_b")]
    pub curve_fidelity: f64,
    #[serde(rename = "L_Omega")]
    pub geometric: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        Self { step, semantic: b.semantic, curve_fidelity: b.curve_fidelity, geometric: b.geometric, total: b.total }
    }

    pub fn write_jsonl(records: &[StepRecord], mut out: impl Write) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Score `s_p` of every candidate, in sketch order.
    pub scores: Vec<(TraceId, f64)>,
    pub removed: Vec<TraceId>,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// The optimization state. Owned by exactly one execution context.
#[derive(Clone)]
pub struct OptimState {
    sketch: Sketch,
    reference: Vec<Trace>,
    prompt: String,
    text: EmbeddingVec,
    region: Region,
    config: EngineConfig,
    step: u64,
    moments: BTreeMap<TraceId, Moments>,
    seed: u64,
    backend: Arc<dyn EncoderBackend>,
    rasterizer: Rasterizer,
    geo_cache: Option<GeoCache>,
}

impl std::fmt::Debug for OptimState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptimState")
            .field("step", &self.step)
            .field("prompt", &self.prompt)
            .field("traces", &self.sketch.len())
            .field("user", &self.sketch.user_count())
            .field("backend", &self.backend.descriptor().name)
            .finish()
    }
}

impl OptimState {
    /// Builds a state around `sketch` without adding agent traces. The user
    /// traces become the fidelity reference.
    pub fn new(
        sketch: Sketch,
        prompt: &str,
        region: Region,
        config: EngineConfig,
        backend: Arc<dyn EncoderBackend>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        crate::encoder::check_layers(backend.descriptor(), &config.loss.layer_set)?;
        let text = backend.embed_text(prompt)?;
        let rasterizer = Rasterizer::new(config.raster)?;
        Ok(Self {
            reference: sketch.user_traces().to_vec(),
            sketch,
            prompt: prompt.to_owned(),
            text,
            region,
            config,
            step: 0,
            moments: BTreeMap::new(),
            seed,
            backend,
            rasterizer,
            geo_cache: None,
        })
    }

    /// [`OptimState::new`] followed by a treebranch draw of agent traces.
    pub fn initialized(
        sketch: Sketch,
        prompt: &str,
        region: Region,
        config: EngineConfig,
        backend: Arc<dyn EncoderBackend>,
        seed: u64,
    ) -> Result<Self> {
        let mut s = Self::new(sketch, prompt, region, config, backend, seed)?;
        s.add_agents(seed)?;
        Ok(s)
    }

    /// Replaces the fidelity reference, for resuming from user traces that
    /// have drifted from it. Each reference trace must match a user trace
    /// by position, id and control-point count.
    pub fn with_reference(mut self, reference: Vec<Trace>) -> Result<Self> {
        let user = self.sketch.user_traces();
        if reference.len() != user.len() {
            return Err(Error::contract(format!("{} reference traces for {} user traces", reference.len(), user.len())));
        }
        if let Some(r) = reference.iter().zip(user).find(|(r, u)| r.id != u.id || !r.congruent(u)).map(|p| p.0) {
            return Err(Error::contract(format!("reference trace {} does not match its user trace", r.id)));
        }
        self.reference = reference;
        self.geo_cache = None;
        Ok(self)
    }

    /// Adds `config.treebranch.agent_traces` fresh agent traces drawn with `seed`.
    pub fn add_agents(&mut self, seed: u64) -> Result<Vec<TraceId>> {
        let user = self.sketch.user_only();
        let mut ids = Vec::new();
        for t in treebranch_init(&user, &self.region, &self.config.treebranch, seed)? {
            let i = self.sketch.add(t)?;
            ids.push(self.sketch.traces()[i].id);
        }
        Ok(ids)
    }

    pub fn sketch(&self) -> &Sketch {
        &self.sketch
    }

    pub fn reference(&self) -> &[Trace] {
        &self.reference
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn text_embedding(&self) -> &EmbeddingVec {
        &self.text
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the seed of future augmentation draws, e.g. to branch
    /// independent trials from one state.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn backend(&self) -> &Arc<dyn EncoderBackend> {
        &self.backend
    }

    pub fn rasterizer(&self) -> &Rasterizer {
        &self.rasterizer
    }

    pub fn render_size(&self) -> (usize, usize) {
        render_size(self.sketch.aspect, self.config.resolution)
    }

    pub fn render(&self) -> Result<RasterImage> {
        let (w, h) = self.render_size();
        self.rasterizer.render(&self.sketch, w, h, self.sketch.background)
    }

    /// Seed of the augmentation views used at the current step.
    fn step_seed(&self) -> u64 {
        splitmix(self.seed ^ splitmix(self.step.wrapping_add(0x5851_f42d_4c95_7f2d)))
    }

    fn inputs(&self) -> LossInputs<'_> {
        let (width, height) = self.render_size();
        LossInputs {
            sketch: &self.sketch,
            reference: &self.reference,
            text: &self.text,
            region: &self.region,
            cfg: &self.config.loss,
            backend: self.backend.as_ref(),
            rasterizer: &self.rasterizer,
            width,
            height,
            augment_seed: self.step_seed(),
        }
    }

    /// Loss breakdown and gradients at the current parameters.
    pub fn evaluate(&mut self) -> Result<(LossBreakdown, crate::raster::ParamGrads)> {
        let mut cache = self.geo_cache.take();
        let out = losses::total_loss(&self.inputs(), &mut cache);
        self.geo_cache = cache;
        out
    }

    /// One Adam update of every non-frozen parameter. On error the state is
    /// left untouched. Returns the loss at the parameters before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let (loss, grads) = self.evaluate()?;
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient { trace: id });
        }
        let adam = self.config.adam;
        for (trace, g) in self.sketch.traces_mut().iter_mut().zip(&grads.traces) {
            if trace.frozen {
                continue;
            }
            let grad = g.flat();
            let mom = self.moments.entry(trace.id).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            mom.t += 1;
            let bc1 = 1.0 - adam.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - adam.beta2.powi(mom.t as i32);
            let mut params = trace.params();
            let n_points = params.len() - 5;
            for (i, ((p, gi), (m, v))) in
                params.iter_mut().zip(&grad).zip(mom.m.iter_mut().zip(mom.v.iter_mut())).enumerate()
            {
                *m = adam.beta1 * *m + (1.0 - adam.beta1) * gi;
                *v = adam.beta2 * *v + (1.0 - adam.beta2) * gi * gi;
                let lr = match i {
                    i if i < n_points => adam.lr_points,
                    i if i < n_points + 4 => adam.lr_color,
                    _ => adam.lr_width,
                };
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + adam.eps);
            }
            for c in &mut params[n_points..n_points + 4] {
                *c = c.clamp(0.0, 1.0);
            }
            let w = &mut params[n_points + 4];
            *w = w.max(adam.min_width);
            trace.set_params(&params);
        }
        self.step += 1;
        Ok(loss)
    }

    /// Candidate agent traces for pruning: unfrozen agent traces.
    fn prune_candidates(&self) -> Vec<TraceId> {
        self.sketch.agent_traces().iter().filter(|t| !t.frozen).map(|t| t.id).collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.prune_candidates().len()
    }

    /// Scores `s_p` of every prune candidate.
    pub fn prune_scores(&self, beta: f64) -> Result<Vec<(TraceId, f64)>> {
        let res = self.render_size();
        let user_points: Vec<Vec<Point2>> = self.reference.iter().map(|t| t.chain.points().to_vec()).collect();
        self.prune_candidates()
            .into_iter()
            .map(|id| {
                let mut without = self.sketch.clone();
                let (_, trace) = without.remove(id).expect("candidate exists");
                let ls = losses::semantic_of_sketch(&without, &self.text, self.backend.as_ref(), &self.rasterizer, res)?;
                let dist = user_points
                    .iter()
                    .map(|u| min_point_set_distance(u, trace.chain.points()))
                    .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
                    .unwrap_or(0.0);
                Ok((id, ls - beta * dist))
            })
            .collect()
    }

    /// Removes the `cfg.count` lowest-scoring agent traces.
    pub fn prune(&mut self, cfg: PruneConfig) -> Result<PruneReport> {
        let candidates = self.prunable_count();
        if cfg.count > candidates {
            return Err(Error::contract(format!("cannot prune {} traces, only {candidates} agent traces are prunable", cfg.count)));
        }
        if cfg.count == 0 {
            return Ok(PruneReport { scores: Vec::new(), removed: Vec::new() });
        }
        let scores = self.prune_scores(cfg.beta)?;
        let removed = lowest(&scores, cfg.count);
        for id in &removed {
            self.sketch.remove(*id);
            self.moments.remove(id);
        }
        Ok(PruneReport { scores, removed })
    }

    fn trace_mut(&mut self, id: TraceId) -> Result<&mut Trace> {
        self.sketch.get_mut(id).ok_or_else(|| Error::contract(format!("no trace with id {id}")))
    }

    /// Mirrors a live user trace into the fidelity reference.
    fn sync_reference(&mut self, id: TraceId) {
        if let Some(t) = self.sketch.get(id).filter(|t| t.origin == Origin::User).cloned() {
            if let Some(r) = self.reference.iter_mut().find(|r| r.id == id) {
                *r = t;
            }
        }
    }

    fn reset_moments(&mut self, id: TraceId) {
        self.moments.remove(&id);
    }

    /// Applies one edit atomically: on error nothing changes.
    pub fn apply_edit(&mut self, edit: Edit) -> Result<EditOutcome> {
        let mut next = self.clone();
        let out = next.apply_edit_in_place(edit)?;
        *self = next;
        Ok(out)
    }

    fn apply_edit_in_place(&mut self, edit: Edit) -> Result<EditOutcome> {
        let mut out = EditOutcome::default();
        match edit {
            Edit::AddTrace { trace } => {
                let origin = trace.origin;
                let i = self.sketch.add(trace)?;
                let t = self.sketch.traces()[i].clone();
                if origin == Origin::User {
                    let k = self.sketch.user_count() - 1;
                    self.reference.insert(k.min(self.reference.len()), t.clone());
                }
                out.added.push(t.id);
            }
            Edit::RemoveTrace { id } => {
                self.sketch.remove(id).ok_or_else(|| Error::contract(format!("no trace with id {id}")))?;
                self.reference.retain(|r| r.id != id);
                self.moments.remove(&id);
                out.removed.push(id);
            }
            Edit::MoveControlPoints { id, indices, deltas } => {
                if indices.len() != deltas.len() {
                    return Err(Error::contract(format!("{} indices but {} deltas", indices.len(), deltas.len())));
                }
                let t = self.trace_mut(id)?;
                let n = t.chain.points().len();
                for (i, d) in indices.iter().zip(&deltas) {
                    let p = t
                        .chain
                        .points_mut()
                        .get_mut(*i)
                        .ok_or_else(|| Error::contract(format!("trace {id} has {n} control points, index {i} out of range")))?;
                    *p = *p + *d;
                }
                self.sync_reference(id);
            }
            Edit::SetColor { id, color } => {
                if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::Input(format!("color components must lie in [0, 1], got {color:?}")));
                }
                self.trace_mut(id)?.color = color;
                self.sync_reference(id);
            }
            Edit::SetWidth { id, width } => {
                if !(width > 0.0) || !width.is_finite() {
                    return Err(Error::Input(format!("stroke width must be positive, got {width}")));
                }
                self.trace_mut(id)?.width = width;
                self.sync_reference(id);
            }
            Edit::SetFrozen { selector, frozen } => {
                let ids: Vec<TraceId> = match selector {
                    Selector::All => self.sketch.traces().iter().map(|t| t.id).collect(),
                    Selector::Ids(ids) => ids,
                };
                for id in ids {
                    self.trace_mut(id)?.frozen = frozen;
                    self.sync_reference(id);
                }
            }
            Edit::SetPrompt { prompt } => {
                self.text = self.backend.embed_text(&prompt)?;
                self.prompt = prompt;
            }
            Edit::SetRegion { region } => {
                self.region = Region::new(region.x0, region.y0, region.x1, region.y1)?;
            }
            Edit::SetLossConfig { loss } => {
                loss.validate()?;
                crate::encoder::check_layers(self.backend.descriptor(), &loss.layer_set)?;
                self.config.loss = loss;
            }
            Edit::Reinitialize { seed } => {
                let seed = seed.unwrap_or_else(|| self.step_seed());
                let stale: Vec<TraceId> = self.prune_candidates();
                for id in &stale {
                    self.sketch.remove(*id);
                    self.reset_moments(*id);
                }
                out.removed = stale;
                out.added = self.add_agents(seed)?;
            }
        }
        Ok(out)
    }

    /// `n` steps with pruning at the scheduled iterations. `on_step` sees
    /// each record as it is produced.
    pub fn run(&mut self, n: u64, schedule: &[PruneEvent], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(n as usize);
        for i in 0..n {
            for ev in schedule.iter().filter(|e| e.at == i) {
                self.prune(ev.cfg)?;
            }
            let step = self.step;
            let loss = self.step()?;
            let rec = StepRecord::new(step, &loss);
            on_step(&rec);
            records.push(rec);
        }
        Ok(records)
    }

    /// `n` steps with the configured default prune schedule.
    pub fn run_default(&mut self, n: u64) -> Result<Vec<StepRecord>> {
        let schedule = self.config.prune.events(n, self.prunable_count());
        self.run(n, &schedule, |_| {})
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Ids of the `m` lowest scores; ties keep sketch order.
pub fn lowest(scores: &[(TraceId, f64)], m: usize) -> Vec<TraceId> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].1.total_cmp(&scores[b].1).then(a.cmp(&b)));
    order.into_iter().take(m).map(|i| scores[i].0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyBackend;

    fn small_config() -> EngineConfig {
        EngineConfig {
            resolution: 32,
            treebranch: TreebranchConfig { agent_traces: 6, ..Default::default() },
            ..Default::default()
        }
    }

    fn user_sketch() -> Sketch {
        let mut s = Sketch::default();
        for (i, y) in [0.3, 0.5].into_iter().enumerate() {
            s.add(NewTrace {
                points: (0..4).map(|j| Point2::new(0.2 + 0.15 * j as f64, y + 0.05 * i as f64)).collect(),
                color: [0.0, 0.0, 0.0, 1.0],
                width: 0.02,
                origin: Origin::User,
                frozen: false,
            })
            .unwrap();
        }
        s
    }

    fn state(seed: u64) -> OptimState {
        OptimState::initialized(
            user_sketch(),
            "a lamp",
            Region::new(0.5, 0.0, 1.0, 1.0).unwrap(),
            small_config(),
            Arc::new(ToyBackend::new()),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(10, &[0.5, 0.3, 0.2]), [5, 3, 2]);
        assert_eq!(largest_remainder(32, &[0.5, 0.3, 0.2]), [16, 10, 6]);
        assert_eq!(largest_remainder(1, &[1.0 / 3.0; 3]), [1, 0, 0]);
        assert_eq!(largest_remainder(2, &[1.0 / 3.0; 3]), [1, 1, 0]);
        assert_eq!(largest_remainder(0, &[0.5, 0.3, 0.2]), [0, 0, 0]);
    }

    #[test]
    fn treebranch_t1_starts_on_user_points() {
        let user = user_sketch();
        let region = Region::new(0.4, 0.0, 1.0, 1.0).unwrap();
        let cfg = TreebranchConfig { fractions: [1.0, 0.0, 0.0], agent_traces: 12, ..Default::default() };
        let inside: Vec<Point2> =
            user.traces().iter().flat_map(|t| t.chain.points()).copied().filter(|p| region.contains(*p)).collect();
        for t in treebranch_init(&user, &region, &cfg, 3).unwrap() {
            assert!(inside.contains(&t.points[0]));
            assert_eq!(t.points.len(), 4);
            assert_eq!(t.color[3], 1.0);
            assert_eq!(t.origin, Origin::Agent);
        }
    }

    #[test]
    fn treebranch_t3_starts_inside_region() {
        let region = Region::new(0.1, 0.6, 0.3, 0.9).unwrap();
        let cfg = TreebranchConfig { fractions: [0.0, 0.0, 1.0], agent_traces: 50, ..Default::default() };
        let out = treebranch_init(&user_sketch(), &region, &cfg, 4).unwrap();
        assert_eq!(out.len(), 50);
        assert!(out.iter().all(|t| region.contains(t.points[0])));
    }

    #[test]
    fn treebranch_without_anchors_falls_back_to_uniform() {
        let region = Region::new(0.0, 0.8, 1.0, 1.0).unwrap();
        let out = treebranch_init(&user_sketch(), &region, &TreebranchConfig::default(), 5).unwrap();
        assert_eq!(out.len(), 32);
        assert!(out.iter().all(|t| region.contains(t.points[0])));
        let empty = TreebranchConfig { agent_traces: 0, ..Default::default() };
        assert!(treebranch_init(&user_sketch(), &region, &empty, 5).unwrap().is_empty());
    }

    #[test]
    fn treebranch_t2_starts_on_t1_endpoints() {
        let region = Region::full();
        let cfg = TreebranchConfig { fractions: [0.5, 0.5, 0.0], agent_traces: 10, ..Default::default() };
        let out = treebranch_init(&user_sketch(), &region, &cfg, 6).unwrap();
        let ends: Vec<Point2> = out[..5].iter().map(|t| t.points[3]).collect();
        assert!(out[5..].iter().all(|t| ends.contains(&t.points[0])));
    }

    #[test]
    fn frozen_sketch_only_advances_counter() {
        let mut s = state(1);
        s.apply_edit(Edit::SetFrozen { selector: Selector::All, frozen: true }).unwrap();
        let before = s.sketch().clone();
        for _ in 0..10 {
            s.step().unwrap();
        }
        assert_eq!(s.sketch(), &before);
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn set_prompt_leaves_parameters() {
        let mut s = state(2);
        s.run(3, &[], |_| {}).unwrap();
        let before = s.sketch().clone();
        s.apply_edit(Edit::SetPrompt { prompt: "a boat".into() }).unwrap();
        assert_eq!(s.sketch(), &before);
        assert_eq!(s.prompt(), "a boat");
    }

    #[test]
    fn remove_agent_trace_counts() {
        let mut s = state(3);
        let (k0, ka) = (s.sketch().user_count(), s.sketch().agent_count());
        let id = s.sketch().agent_traces()[0].id;
        s.apply_edit(Edit::RemoveTrace { id }).unwrap();
        assert_eq!(s.sketch().user_count(), k0);
        assert_eq!(s.sketch().agent_count(), ka - 1);
        assert!(s.apply_edit(Edit::RemoveTrace { id }).is_err());
    }

    #[test]
    fn with_reference_checks_congruence() {
        let s = state(1);
        let mut r = s.reference().to_vec();
        assert!(s.clone().with_reference(r[..1].to_vec()).is_err());
        r[0].id = TraceId(99);
        assert!(s.clone().with_reference(r).is_err());
        let mut r = s.reference().to_vec();
        r[1].chain.points_mut()[0].x += 0.1;
        assert_eq!(s.with_reference(r.clone()).unwrap().reference(), &r[..]);
    }

    #[test]
    fn user_edits_update_reference() {
        let mut s = state(4);
        let id = s.sketch().user_traces()[1].id;
        s.apply_edit(Edit::MoveControlPoints { id, indices: vec![0], deltas: vec![Point2::new(0.1, 0.0)] }).unwrap();
        assert_eq!(s.reference()[1], s.sketch().user_traces()[1]);
        let agent = s.sketch().agent_traces()[0].id;
        s.apply_edit(Edit::SetWidth { id: agent, width: 0.05 }).unwrap();
        assert_eq!(s.reference().len(), 2);
        let added = s
            .apply_edit(Edit::AddTrace {
                trace: NewTrace {
                    points: vec![Point2::new(0.1, 0.1); 4],
                    color: [0.0, 0.0, 0.0, 1.0],
                    width: 0.01,
                    origin: Origin::User,
                    frozen: false,
                },
            })
            .unwrap();
        assert_eq!(s.reference().len(), 3);
        assert_eq!(s.reference()[2].id, added.added[0]);
        assert_eq!(s.sketch().user_count(), 3);
    }

    #[test]
    fn failed_edit_is_atomic() {
        let mut s = state(5);
        let id = s.sketch().traces()[0].id;
        let before = s.sketch().clone();
        let err = s.apply_edit(Edit::MoveControlPoints {
            id,
            indices: vec![0, 9],
            deltas: vec![Point2::new(0.1, 0.0), Point2::new(0.1, 0.0)],
        });
        assert!(err.is_err());
        assert_eq!(s.sketch(), &before);
    }

    #[test]
    fn run_equals_fold_of_steps() {
        let mut a = state(6);
        let mut b = a.clone();
        a.run(4, &[], |_| {}).unwrap();
        for _ in 0..4 {
            b.step().unwrap();
        }
        assert_eq!(a.sketch(), b.sketch());
        let mut c = state(6);
        let before = c.sketch().clone();
        assert!(c.run(0, &[], |_| {}).unwrap().is_empty());
        assert_eq!(c.sketch(), &before);
    }

    #[test]
    fn schedule_prunes_a_third() {
        let mut s = state(7);
        let ka = s.sketch().agent_count();
        let events = s.config().prune.events(5, s.prunable_count());
        assert_eq!(events, vec![PruneEvent { at: 3, cfg: PruneConfig { count: 2, beta: 0.5 } }]);
        s.run(5, &events, |_| {}).unwrap();
        assert_eq!(s.sketch().agent_count(), ka - ka.div_ceil(3));
    }

    #[test]
    fn prune_bounds() {
        let mut s = state(8);
        let before = s.sketch().clone();
        assert!(s.prune(PruneConfig { count: 0, beta: 0.5 }).unwrap().removed.is_empty());
        assert_eq!(s.sketch(), &before);
        assert!(s.prune(PruneConfig { count: 7, beta: 0.5 }).is_err());
    }

    #[test]
    fn prune_large_beta_removes_farthest() {
        let mut s = state(9);
        let user: Vec<_> = s.reference().to_vec();
        let far = s
            .sketch()
            .agent_traces()
            .iter()
            .map(|t| {
                let d = user
                    .iter()
                    .map(|u| {
                        let mut m = f64::INFINITY;
                        for p in u.chain.points() {
                            for q in t.chain.points() {
                                m = m.min(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt());
                            }
                        }
                        m
                    })
                    .fold(f64::INFINITY, f64::min);
                (t.id, d)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        let report = s.prune(PruneConfig { count: 1, beta: 1e6 }).unwrap();
        assert_eq!(report.removed, vec![far]);
    }

    #[test]
    fn reinitialize_keeps_user_and_frozen_traces() {
        let mut s = state(10);
        let keep = s.sketch().agent_traces()[0].id;
        s.apply_edit(Edit::SetFrozen { selector: Selector::Ids(vec![keep]), frozen: true }).unwrap();
        let out = s.apply_edit(Edit::Reinitialize { seed: Some(1) }).unwrap();
        assert_eq!(out.removed.len(), 5);
        assert_eq!(out.added.len(), 6);
        assert!(s.sketch().get(keep).is_some());
        assert_eq!(s.sketch().user_count(), 2);
    }

    #[test]
    fn telemetry_keys() {
        let mut buf = Vec::new();
        StepRecord::write_jsonl(
            &[StepRecord { step: 0, semantic: -0.5, curve_fidelity: 0.0, geometric: 0.25, total: -0.25 }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"step\":0,\"L_s\":-0.5,\"L_b\":0.0,\"L_Omega\":0.25,\"total\":-0.25}\n");
    }
}
