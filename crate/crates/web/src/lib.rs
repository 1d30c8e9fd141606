//! WebAssembly front end for the static demo page in `www/`.
//!
//! [`Session`] is plain Rust so it can be tested natively; [`Demo`] wraps it
//! for JavaScript and turns errors into exceptions.

use std::sync::Arc;

use costroke_core::encoder::ToyBackend;
use costroke_core::engine::{EngineConfig, OptimState, PruneConfig};
use costroke_core::io::{canned, svg_export};
use costroke_core::losses::LossBreakdown;
use costroke_core::raster::Rasterizer;
use costroke_core::{Result, TraceId};
use wasm_bindgen::prelude::*;

/// One optimization run on a bundled sketch, with the toy encoder.
pub struct Session {
    state: OptimState,
    display: Rasterizer,
    last: Option<LossBreakdown>,
}

impl Session {
    pub fn new(name: &str, seed: u64, resolution: usize) -> Result<Self> {
        let c = canned::get(name)?;
        let cfg = EngineConfig { resolution, ..Default::default() };
        let state = OptimState::initialized(c.sketch()?, &c.prompt, c.region, cfg, Arc::new(ToyBackend::new()), seed)?;
        Ok(Self { state, display: Rasterizer::default(), last: None })
    }

    /// Runs `n` optimizer steps and returns the loss before the last one.
    pub fn step(&mut self, n: u32) -> Result<Option<LossBreakdown>> {
        for _ in 0..n {
            self.last = Some(self.state.step()?);
        }
        Ok(self.last.clone())
    }

    /// Swaps the text prompt; the traces keep their current parameters.
    pub fn set_prompt(&mut self, prompt: &str) -> Result<()> {
        if prompt != self.state.prompt() {
            self.state.apply_edit(costroke_core::engine::Edit::SetPrompt { prompt: prompt.into() })?;
        }
        Ok(())
    }

    /// Drops the lowest-scoring third of the agent traces.
    pub fn prune(&mut self) -> Result<Vec<TraceId>> {
        let count = self.state.prunable_count().div_ceil(3);
        let beta = self.state.config().prune.beta;
        Ok(self.state.prune(PruneConfig { count, beta })?.removed)
    }

    /// The current sketch as RGBA bytes, `side` pixels along its longer edge.
    pub fn rgba(&self, side: usize) -> Result<(usize, usize, Vec<u8>)> {
        let sketch = self.state.sketch();
        let (w, h) = if sketch.aspect >= 1.0 {
            (side, ((side as f64 / sketch.aspect).round() as usize).max(1))
        } else {
            (((side as f64 * sketch.aspect).round() as usize).max(1), side)
        };
        let img = self.display.render(sketch, w, h, sketch.background)?;
        let rgba = img.to_rgb8().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Ok((w, h, rgba))
    }

    pub fn svg(&self) -> String {
        svg_export(self.state.sketch())
    }

    pub fn steps(&self) -> u64 {
        self.state.step_count()
    }

    pub fn agent_traces(&self) -> usize {
        self.state.sketch().agent_traces().len()
    }

    pub fn prompt(&self) -> &str {
        self.state.prompt()
    }
}

fn js(e: costroke_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Names of the bundled sketches.
#[wasm_bindgen]
pub fn sketches() -> Vec<String> {
    canned::all().into_iter().map(|c| c.name.to_string()).collect()
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
    width: usize,
    height: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(name: &str, seed: u32, resolution: u32) -> std::result::Result<Demo, JsError> {
        let inner = Session::new(name, seed.into(), resolution as usize).map_err(js)?;
        Ok(Demo { inner, width: 0, height: 0 })
    }

    /// Runs `n` steps; returns the total loss, or NaN before the first step.
    pub fn step(&mut self, n: u32) -> std::result::Result<f64, JsError> {
        Ok(self.inner.step(n).map_err(js)?.map_or(f64::NAN, |l| l.total))
    }

    #[wasm_bindgen(js_name = setPrompt)]
    pub fn set_prompt(&mut self, prompt: &str) -> std::result::Result<(), JsError> {
        self.inner.set_prompt(prompt).map_err(js)
    }

    /// Returns how many traces were removed.
    pub fn prune(&mut self) -> std::result::Result<usize, JsError> {
        Ok(self.inner.prune().map_err(js)?.len())
    }

    /// RGBA bytes for an `ImageData`; read `width` and `height` afterwards.
    pub fn render(&mut self, side: u32) -> std::result::Result<Vec<u8>, JsError> {
        let (w, h, px) = self.inner.rgba(side as usize).map_err(js)?;
        (self.width, self.height) = (w, h);
        Ok(px)
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn svg(&self) -> String {
        self.inner.svg()
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> f64 {
        self.inner.steps() as f64
    }

    #[wasm_bindgen(getter, js_name = agentTraces)]
    pub fn agent_traces(&self) -> usize {
        self.inner.agent_traces()
    }

    #[wasm_bindgen(getter)]
    pub fn prompt(&self) -> String {
        self.inner.prompt().to_string()
    }
}
