//! Objective terms and their gradients.
//!
//! * semantic: `−⟨g(prompt), f(render)⟩`, averaged over augmentation views;
//! * curve fidelity: weighted squared deviation of user traces from the
//!   reference copy, per parameter group (points, RGBA, width);
//! * geometric fidelity: `α Σ_q ‖f_q(mask(render)) − f_q(mask(reference))‖`
//!   over the chosen encoder layers, with the drawing region masked out.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AugmentConfig, EmbeddingVec, EncoderBackend, FeatureMaps};
use crate::error::{Error, Result, TraceId};
use crate::raster::{mask_region, mask_region_vjp, ParamGrads, RasterImage, Rasterizer};
use crate::sketch::{Region, Sketch, Trace};

/// Added under the square root of each layer norm so the gradient stays
/// finite when current and reference features coincide.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Curve-fidelity weights for control points, color and width.
    pub lambda: [f64; 3],
    /// Per-trace overrides of `lambda`.
    pub trace_lambda: BTreeMap<TraceId, [f64; 3]>,
    /// Geometric-fidelity weight.
    pub alpha: f64,
    /// Encoder layers compared by the geometric term.
    pub layer_set: Vec<usize>,
    /// Multiplier on the semantic term. Zero leaves a pure fidelity objective.
    pub semantic_weight: f64,
    pub augment: AugmentConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [100.0, 10.0, 10.0],
            trace_lambda: BTreeMap::new(),
            alpha: 1.0,
            layer_set: vec![2, 3],
            semantic_weight: 1.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: String| Err(Error::Schema { path: path.into(), detail });
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("loss.lambda", format!("weights must be finite and non-negative, got {:?}", self.lambda));
        }
        for (id, l) in &self.trace_lambda {
            if l.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return bad("loss.trace_lambda", format!("weights for trace {id} must be non-negative"));
            }
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("loss.alpha", format!("must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.semantic_weight >= 0.0) || !self.semantic_weight.is_finite() {
            return bad("loss.semantic_weight", format!("must be non-negative, got {}", self.semantic_weight));
        }
        self.augment.validate().map_err(|e| Error::Schema { path: "loss.augment".into(), detail: e.to_string() })
    }

    pub fn lambda_for(&self, id: TraceId) -> [f64; 3] {
        self.trace_lambda.get(&id).copied().unwrap_or(self.lambda)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub curve_fidelity: f64,
    pub geometric: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(semantic: f64, curve_fidelity: f64, geometric: f64) -> Self {
        Self { semantic, curve_fidelity, geometric, total: semantic + curve_fidelity + geometric }
    }
}

pub fn semantic_loss(image_emb: &EmbeddingVec, text_emb: &EmbeddingVec) -> Result<f64> {
    Ok(-text_emb.dot(image_emb)?)
}

/// Curve-fidelity loss of the first `reference.len()` traces of `current`,
/// with its gradient (zero on agent traces).
pub fn curve_fidelity_loss(current: &Sketch, reference: &[Trace], cfg: &LossConfig) -> Result<(f64, ParamGrads)> {
    if current.len() < reference.len() {
        return Err(Error::contract(format!(
            "sketch has {} traces but the reference holds {} user traces",
            current.len(),
            reference.len()
        )));
    }
    let mut grads = ParamGrads::zeros_like(current);
    let mut value = 0.0;
    for (k, (cur, refr)) in current.traces().iter().zip(reference).enumerate() {
        if !cur.congruent(refr) {
            return Err(Error::contract(format!(
                "trace {} (position {k}) control_points: {} points vs {} in the reference",
                cur.id,
                cur.chain.points().len(),
                refr.chain.points().len()
            )));
        }
        let [l_pts, l_col, l_w] = cfg.lambda_for(cur.id);
        let g = &mut grads.traces[k];
        for ((p, q), gp) in cur.chain.points().iter().zip(refr.chain.points()).zip(&mut g.points) {
            let (dx, dy) = (p.x - q.x, p.y - q.y);
            value += l_pts * (dx * dx + dy * dy);
            gp.x = 2.0 * l_pts * dx;
            gp.y = 2.0 * l_pts * dy;
        }
        for c in 0..4 {
            let d = cur.color[c] - refr.color[c];
            value += l_col * d * d;
            g.color[c] = 2.0 * l_col * d;
        }
        let d = cur.width - refr.width;
        value += l_w * d * d;
        g.width = 2.0 * l_w * d;
    }
    Ok((value, grads))
}

/// Features of the region-masked reference render, reused while the
/// reference, region, resolution and layer set stay the same.
#[derive(Clone, Debug)]
pub struct GeoCache {
    reference: Vec<Trace>,
    region: Region,
    resolution: (usize, usize),
    layers: Vec<usize>,
    background: [f64; 3],
    maps: FeatureMaps,
}

/// Everything a loss evaluation reads.
pub struct LossInputs<'a> {
    pub sketch: &'a Sketch,
    pub reference: &'a [Trace],
    pub text: &'a EmbeddingVec,
    pub region: &'a Region,
    pub cfg: &'a LossConfig,
    pub backend: &'a dyn EncoderBackend,
    pub rasterizer: &'a Rasterizer,
    pub width: usize,
    pub height: usize,
    /// Seeds the augmentation views of this evaluation.
    pub augment_seed: u64,
}

impl LossInputs<'_> {
    fn reference_sketch(&self) -> Result<Sketch> {
        self.sketch.with_traces(self.reference.to_vec())
    }

    fn cache_matches(&self, cache: &GeoCache) -> bool {
        cache.reference == self.reference
            && cache.region == *self.region
            && cache.resolution == (self.width, self.height)
            && cache.layers == self.cfg.layer_set
            && cache.background == self.sketch.background
    }

    /// Reference features for the geometric term, recomputed only on a key change.
    pub fn reference_features<'c>(&self, cache: &'c mut Option<GeoCache>) -> Result<&'c FeatureMaps> {
        if !cache.as_ref().is_some_and(|c| self.cache_matches(c)) {
            let reference = self.reference_sketch()?;
            let bg = self.sketch.background;
            let img = self.rasterizer.render(&reference, self.width, self.height, bg)?;
            let masked = mask_region(&img, Some(self.region), bg);
            let maps = self.backend.features(&masked, &self.cfg.layer_set)?.maps;
            *cache = Some(GeoCache {
                reference: self.reference.to_vec(),
                region: *self.region,
                resolution: (self.width, self.height),
                layers: self.cfg.layer_set.clone(),
                background: bg,
                maps,
            });
        }
        Ok(&cache.as_ref().expect("filled above").maps)
    }
}

/// Semantic term on an already rendered image: value and pixel gradient.
pub fn semantic_term(
    image: &RasterImage,
    text: &EmbeddingVec,
    backend: &dyn EncoderBackend,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = augment.views.max(1);
    let mut value = 0.0;
    let mut grad = vec![0.0; image.pixels().len()];
    let upstream: Vec<f64> = text.as_slice().iter().map(|t| -t / views as f64).collect();
    for _ in 0..views {
        let warp = augment.sample(image.width(), image.height(), &mut rng);
        let view = warp.apply(image);
        let emb = backend.embed_image(&view)?;
        value += semantic_loss(&emb.embedding, text)? / views as f64;
        let g = warp.transpose(&emb.vjp.apply(&upstream)?);
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((value, grad))
}

/// Geometric term on an already rendered image, against cached reference
/// features: value and pixel gradient.
pub fn geometric_term(
    image: &RasterImage,
    reference: &FeatureMaps,
    region: &Region,
    background: [f64; 3],
    backend: &dyn EncoderBackend,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let masked = mask_region(image, Some(region), background);
    let feats = backend.features(&masked, &cfg.layer_set)?;
    let mut value = 0.0;
    let mut upstream = Vec::new();
    for (id, cur) in &feats.maps {
        let refr = reference.get(id).ok_or_else(|| Error::contract(format!("reference lacks layer {id}")))?;
        if refr.data.len() != cur.data.len() {
            return Err(Error::contract(format!("layer {id} shape changed between reference and current")));
        }
        let diff: Vec<f64> = cur.data.iter().zip(&refr.data).map(|(a, b)| a - b).collect();
        let norm = (diff.iter().map(|d| d * d).sum::<f64>() + NORM_EPS).sqrt();
        value += cfg.alpha * norm;
        upstream.extend(diff.iter().map(|d| cfg.alpha * d / norm));
    }
    let mut grad = feats.vjp.apply(&upstream)?;
    mask_region_vjp(&mut grad, image.width(), image.height(), Some(region));
    Ok((value, grad))
}

/// Geometric-fidelity loss of `current` against `reference` (both full
/// sketches), with gradient with respect to `current`.
pub fn geometric_fidelity_loss(
    current: &Sketch,
    reference: &Sketch,
    region: &Region,
    backend: &dyn EncoderBackend,
    cfg: &LossConfig,
    rasterizer: &Rasterizer,
    resolution: (usize, usize),
) -> Result<(f64, ParamGrads)> {
    let (w, h) = resolution;
    if cfg.layer_set.is_empty() || cfg.alpha == 0.0 {
        return Ok((0.0, ParamGrads::zeros_like(current)));
    }
    let bg = current.background;
    let ref_img = rasterizer.render(reference, w, h, bg)?;
    let ref_maps = backend.features(&mask_region(&ref_img, Some(region), bg), &cfg.layer_set)?.maps;
    let (img, handle) = rasterizer.render_with_adjoint(current, w, h, bg)?;
    let (value, grad) = geometric_term(&img, &ref_maps, region, bg, backend, cfg)?;
    Ok((value, handle.apply(&grad)?))
}

/// All three terms and the gradient of their sum. Frozen traces receive a
/// zero gradient.
pub fn total_loss(inputs: &LossInputs<'_>, cache: &mut Option<GeoCache>) -> Result<(LossBreakdown, ParamGrads)> {
    let bg = inputs.sketch.background;
    let cfg = inputs.cfg;
    let (img, handle) = inputs.rasterizer.render_with_adjoint(inputs.sketch, inputs.width, inputs.height, bg)?;
    let mut pixel_grad = vec![0.0; img.pixels().len()];

    let mut semantic = 0.0;
    if cfg.semantic_weight != 0.0 {
        let (v, g) = semantic_term(&img, inputs.text, inputs.backend, &cfg.augment, inputs.augment_seed)?;
        semantic = cfg.semantic_weight * v;
        pixel_grad.iter_mut().zip(g).for_each(|(a, b)| *a += cfg.semantic_weight * b);
    }

    let mut geometric = 0.0;
    if !cfg.layer_set.is_empty() && cfg.alpha != 0.0 {
        let ref_maps = inputs.reference_features(cache)?;
        let (v, g) = geometric_term(&img, ref_maps, inputs.region, bg, inputs.backend, cfg)?;
        geometric = v;
        pixel_grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    let mut grads = handle.apply(&pixel_grad)?;
    let (curve, curve_grads) = curve_fidelity_loss(inputs.sketch, inputs.reference, cfg)?;
    grads.add_assign(&curve_grads);

    for (g, t) in grads.traces.iter_mut().zip(inputs.sketch.traces()) {
        if t.frozen {
            g.points.iter_mut().for_each(|p| *p = Default::default());
            g.color = [0.0; 4];
            g.width = 0.0;
        }
    }
    Ok((LossBreakdown::new(semantic, curve, geometric), grads))
}

/// Un-augmented semantic loss of a sketch's render.
pub fn semantic_of_sketch(
    sketch: &Sketch,
    text: &EmbeddingVec,
    backend: &dyn EncoderBackend,
    rasterizer: &Rasterizer,
    resolution: (usize, usize),
) -> Result<f64> {
    let img = rasterizer.render(sketch, resolution.0, resolution.1, sketch.background)?;
    semantic_loss(&backend.embed_image(&img)?.embedding, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyBackend;
    use crate::geometry::Point2;
    use crate::sketch::{NewTrace, Origin};

    fn unit(v: Vec<f64>) -> EmbeddingVec {
        EmbeddingVec::normalized(v).unwrap()
    }

    #[test]
    fn semantic_loss_extremes() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let b = unit(vec![0.0, 1.0, 0.0]);
        let c = unit(vec![-1.0, 0.0, 0.0]);
        assert_eq!(semantic_loss(&a, &a).unwrap(), -1.0);
        assert_eq!(semantic_loss(&a, &b).unwrap(), 0.0);
        assert_eq!(semantic_loss(&a, &c).unwrap(), 1.0);
        assert!(semantic_loss(&a, &unit(vec![1.0, 0.0])).is_err());
    }

    fn line_trace(y: f64, origin: Origin) -> NewTrace {
        NewTrace {
            points: (0..4).map(|i| Point2::new(0.2 + 0.2 * i as f64, y)).collect(),
            color: [0.0, 0.0, 0.0, 1.0],
            width: 0.02,
            origin,
            frozen: false,
        }
    }

    fn user_sketch() -> Sketch {
        let mut s = Sketch::default();
        s.add(line_trace(0.3, Origin::User)).unwrap();
        s.add(line_trace(0.6, Origin::User)).unwrap();
        s
    }

    #[test]
    fn curve_fidelity_is_zero_on_reference() {
        let s = user_sketch();
        let (v, g) = curve_fidelity_loss(&s, s.traces(), &LossConfig::default()).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.is_zero());
    }

    #[test]
    fn curve_fidelity_point_shift() {
        let s = user_sketch();
        let reference = s.traces().to_vec();
        let mut cur = s.clone();
        cur.traces_mut()[0].chain.points_mut()[2].x += 0.1;
        let cfg = LossConfig { lambda: [1.0, 0.0, 0.0], ..Default::default() };
        let (v, g) = curve_fidelity_loss(&cur, &reference, &cfg).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        assert!((g.traces[0].points[2].x - 0.2).abs() < 1e-15);
    }

    #[test]
    fn curve_fidelity_color_shift() {
        let s = user_sketch();
        let reference = s.traces().to_vec();
        let mut cur = s.clone();
        cur.traces_mut()[1].color[1] += 0.2;
        let cfg = LossConfig { lambda: [0.0, 5.0, 0.0], ..Default::default() };
        let (v, _) = curve_fidelity_loss(&cur, &reference, &cfg).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn curve_fidelity_ignores_agent_traces_and_honours_overrides() {
        let mut s = user_sketch();
        s.add(line_trace(0.9, Origin::Agent)).unwrap();
        let reference = s.user_traces().to_vec();
        let mut cur = s.clone();
        cur.traces_mut()[2].width = 0.5;
        cur.traces_mut()[0].width += 0.1;
        let mut cfg = LossConfig::default();
        cfg.trace_lambda.insert(cur.traces()[0].id, [0.0, 0.0, 2.0]);
        let (v, g) = curve_fidelity_loss(&cur, &reference, &cfg).unwrap();
        assert!((v - 0.02).abs() < 1e-14);
        assert_eq!(g.traces[2].width, 0.0);
    }

    #[test]
    fn curve_fidelity_structural_mismatch() {
        let s = user_sketch();
        let mut reference = s.traces().to_vec();
        reference[1].chain = crate::geometry::BezierChain::new(vec![Point2::default(); 7]).unwrap();
        let err = curve_fidelity_loss(&s, &reference, &LossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("control_points"), "{err}");
    }

    #[test]
    fn geometric_loss_zero_and_masked_invariance() {
        let backend = ToyBackend::new();
        let raster = Rasterizer::default();
        let region = Region::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let s = user_sketch();
        let cfg = LossConfig::default();
        let (v, _) = geometric_fidelity_loss(&s, &s, &region, &backend, &cfg, &raster, (32, 32)).unwrap();
        assert_eq!(v, cfg.alpha * (cfg.layer_set.len() as f64) * NORM_EPS.sqrt());

        // A stroke whose full footprint lies inside the region.
        let mut inside = s.clone();
        inside
            .add(NewTrace {
                points: (0..4).map(|i| Point2::new(0.65 + 0.05 * i as f64, 0.75)).collect(),
                color: [1.0, 0.0, 0.0, 1.0],
                width: 0.02,
                origin: Origin::Agent,
                frozen: false,
            })
            .unwrap();
        let (v2, _) = geometric_fidelity_loss(&inside, &s, &region, &backend, &cfg, &raster, (32, 32)).unwrap();
        assert_eq!(v, v2);
    }
}
