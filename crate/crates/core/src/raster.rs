//! Differentiable stroke rasterizer.
//!
//! Each trace is flattened to a polyline and drawn with a smooth coverage
//! profile: with `d` the pixel-center distance to the polyline, `w` the half
//! width and `b` the antialias band (both in pixels),
//!
//! ```text
//! u = clamp((w + b − d) / b, 0, 1),   coverage = 6u⁵ − 15u⁴ + 10u³
//! ```
//!
//! so coverage is exactly 1 within the half width, exactly 0 beyond
//! `w + b`, and C² across both ends of the band. The cubic smoothstep is
//! only C¹; its jump in curvature at the band edges is enough to throw
//! central differences at step 1e-4 off the exact gradient by more than
//! 1e-3 relative on small components.
//!
//! `d` is a soft minimum over the polyline edges with a temperature of
//! `softness` pixels. The plain nearest-edge distance creases wherever two
//! edges are equally near, which a gradient can only see from one side. The
//! soft minimum sits at most `softness · ln 2` below it where two edges tie
//! and matches it to 1e-15 once the runner-up is 36 temperatures further.
//!
//! Traces are composited with straight-alpha "over" in index order onto the
//! opaque background.
//!
//! Canvas units span the longer image side: a canvas point `(x, y)` maps to
//! pixel coordinates `(x·s, y·s)` with `s = max(width, height)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TraceId};
use crate::geometry::{bernstein, polyline, sample_t, Point2};
use crate::sketch::{Region, Rgb, Rgba, Sketch};

pub const MIN_RESOLUTION: usize = 8;

/// Opaque RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_resolution(width, height)?;
        if pixels.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "{}×{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Result<Self> {
        check_resolution(width, height)?;
        let pixels = std::iter::repeat_n(color, width * height).flatten().collect();
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Pixel-to-canvas scale (canvas units span the longer side).
    pub fn scale(&self) -> f64 {
        self.width.max(self.height) as f64
    }

    /// 8-bit RGB bytes, `round(255·v)` per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
    }

    pub fn write_png(&self, out: impl Write) -> Result<()> {
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_image_data(&self.to_rgb8()).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_png(std::io::BufWriter::new(file))
    }

    /// Decodes an 8- or 16-bit PNG. Alpha is composited onto white.
    pub fn read_png(input: impl std::io::BufRead + std::io::Seek) -> Result<Self> {
        let bad = |e: png::DecodingError| Error::Input(format!("cannot decode PNG: {e}"));
        let mut dec = png::Decoder::new(input);
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(bad)?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Input("PNG too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let channels = info.color_type.samples();
        let (w, h) = (info.width as usize, info.height as usize);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks_exact(channels) {
            let v = |i: usize| px[i] as f64 / 255.0;
            let (rgb, a) = match channels {
                1 => ([v(0); 3], 1.0),
                2 => ([v(0); 3], v(1)),
                3 => ([v(0), v(1), v(2)], 1.0),
                _ => ([v(0), v(1), v(2)], v(3)),
            };
            pixels.extend(rgb.map(|c| a * c + (1.0 - a)));
        }
        Self::new(w, h, pixels)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.as_ref().display())))?;
        Self::read_png(std::io::BufReader::new(file))
    }
}

fn check_resolution(width: usize, height: usize) -> Result<()> {
    if width < MIN_RESOLUTION || height < MIN_RESOLUTION {
        return Err(Error::contract(format!(
            "resolution {width}×{height} below the {MIN_RESOLUTION}×{MIN_RESOLUTION} minimum"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    /// Polyline samples per cubic segment.
    pub samples_per_segment: usize,
    /// Width of the coverage ramp, in pixels.
    pub antialias: f64,
    /// Temperature of the soft minimum over polyline edges, in pixels. Zero
    /// takes the plain nearest edge, whose distance creases wherever two
    /// edges are equally near.
    pub softness: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { samples_per_segment: 16, antialias: 1.0, softness: SOFTNESS }
    }
}

/// Gradient of a scalar with respect to one trace's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceGrad {
    pub id: TraceId,
    pub points: Vec<Point2>,
    pub color: Rgba,
    pub width: f64,
}

impl TraceGrad {
    /// Flattened in the same order as [`crate::sketch::Trace::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.points.len() + 5);
        for p in &self.points {
            v.push(p.x);
            v.push(p.y);
        }
        v.extend_from_slice(&self.color);
        v.push(self.width);
        v
    }

    fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite()) && self.color.iter().all(|c| c.is_finite()) && self.width.is_finite()
    }
}

/// Per-trace gradients, shape-congruent with the sketch they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub traces: Vec<TraceGrad>,
}

impl ParamGrads {
    pub fn zeros_like(sketch: &Sketch) -> Self {
        let traces = sketch
            .traces()
            .iter()
            .map(|t| TraceGrad {
                id: t.id,
                points: vec![Point2::default(); t.chain.points().len()],
                color: [0.0; 4],
                width: 0.0,
            })
            .collect();
        Self { traces }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        assert_eq!(self.traces.len(), other.traces.len(), "gradient shapes differ");
        for (a, b) in self.traces.iter_mut().zip(&other.traces) {
            for (p, q) in a.points.iter_mut().zip(&b.points) {
                p.x += q.x;
                p.y += q.y;
            }
            for (c, d) in a.color.iter_mut().zip(&b.color) {
                *c += d;
            }
            a.width += b.width;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.traces {
            for p in &mut t.points {
                p.x *= k;
                p.y *= k;
            }
            for c in &mut t.color {
                *c *= k;
            }
            t.width *= k;
        }
    }

    /// Inner product with a flattened per-trace direction.
    pub fn dot(&self, direction: &[Vec<f64>]) -> f64 {
        self.traces
            .iter()
            .zip(direction)
            .map(|(g, d)| g.flat().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Id of the first trace holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<TraceId> {
        self.traces.iter().find(|t| !t.is_finite()).map(|t| t.id)
    }

    pub fn is_zero(&self) -> bool {
        self.traces.iter().all(|t| t.flat().iter().all(|v| *v == 0.0))
    }
}

const SOFTNESS: f64 = 0.1;

/// Edges further than this many temperatures beyond the nearest one get a
/// weight below 1e-15 and are dropped.
const SOFT_CUTOFF: f64 = 36.0;

/// Per-pixel forward record for one covered pixel of one trace.
#[derive(Clone, Debug)]
struct Cover {
    pixel: u32,
    /// Range into the trace's `edges`.
    edges: std::ops::Range<u32>,
    coverage: f64,
    dcov_du: f64,
    /// Composite color before this trace was drawn.
    under: [f64; 3],
}

/// One polyline edge's share of a pixel's soft distance.
#[derive(Clone, Copy, Debug)]
struct EdgeWeight {
    /// Index of the edge's first vertex.
    vertex: u32,
    /// `∂d/∂a` and `∂d/∂b` for the edge from `a` to `b`, already scaled by
    /// the edge's softmax weight.
    grad: [[f64; 2]; 2],
}

#[derive(Clone, Debug)]
struct TraceRecord {
    id: TraceId,
    control_points: usize,
    segments: usize,
    vertices: usize,
    color: Rgba,
    covers: Vec<Cover>,
    edges: Vec<EdgeWeight>,
}

/// Everything needed to evaluate the vector-Jacobian product of one render.
///
/// The handle is immutable and can be applied any number of times.
#[derive(Clone, Debug)]
pub struct AdjointHandle {
    width: usize,
    height: usize,
    scale: f64,
    antialias: f64,
    samples_per_segment: usize,
    records: Vec<TraceRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct Rasterizer {
    pub config: RasterConfig,
}

impl Rasterizer {
    pub fn new(config: RasterConfig) -> Result<Self> {
        if config.samples_per_segment < 2 {
            return Err(Error::Config("samples_per_segment must be at least 2".into()));
        }
        if !(config.antialias > 0.0) {
            return Err(Error::Config("antialias band must be positive".into()));
        }
        if !(config.softness >= 0.0 && config.softness.is_finite()) {
            return Err(Error::Config("softness must be finite and non-negative".into()));
        }
        Ok(Self { config })
    }

    pub fn render(&self, sketch: &Sketch, width: usize, height: usize, background: Rgb) -> Result<RasterImage> {
        self.forward(sketch, width, height, background, false).map(|(img, _)| img)
    }

    pub fn render_with_adjoint(
        &self,
        sketch: &Sketch,
        width: usize,
        height: usize,
        background: Rgb,
    ) -> Result<(RasterImage, AdjointHandle)> {
        self.forward(sketch, width, height, background, true)
    }

    fn forward(
        &self,
        sketch: &Sketch,
        width: usize,
        height: usize,
        background: Rgb,
        record: bool,
    ) -> Result<(RasterImage, AdjointHandle)> {
        let mut img = RasterImage::filled(width, height, background)?;
        let scale = img.scale();
        let aa = self.config.antialias;
        let samples = self.config.samples_per_segment;
        let tau = self.config.softness;
        let mut scratch = Vec::new();
        let mut records = Vec::with_capacity(if record { sketch.len() } else { 0 });

        for trace in sketch.traces() {
            if !trace.is_finite() {
                return Err(Error::Render { trace: trace.id, detail: "non-finite parameters".into() });
            }
            if !(trace.width > 0.0) {
                return Err(Error::Render { trace: trace.id, detail: format!("width {} is not positive", trace.width) });
            }
            let verts: Vec<[f64; 2]> = polyline(&trace.chain, samples)?
                .into_iter()
                .map(|p| [p.x * scale, p.y * scale])
                .collect();
            let half_width = 0.5 * trace.width * scale;
            let reach = half_width + aa;
            // The soft distance undercuts the nearest one by at most τ·ln(edges).
            let slack = tau * (verts.len() as f64).ln();
            let [r, g, b, alpha] = trace.color;

            let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for v in &verts {
                lo_x = lo_x.min(v[0]);
                lo_y = lo_y.min(v[1]);
                hi_x = hi_x.max(v[0]);
                hi_y = hi_y.max(v[1]);
            }
            let col_range = pixel_range(lo_x - reach - slack, hi_x + reach + slack, width);
            let row_range = pixel_range(lo_y - reach - slack, hi_y + reach + slack, height);

            let mut covers = Vec::new();
            let mut edges = Vec::new();
            for py in row_range {
                let cy = py as f64 + 0.5;
                for px in col_range.clone() {
                    let cx = px as f64 + 0.5;
                    let first = edges.len();
                    let Some(dist) = soft_distance(&verts, cx, cy, tau, reach + slack, &mut scratch, &mut edges) else {
                        continue;
                    };
                    if dist >= reach {
                        edges.truncate(first);
                        continue;
                    }
                    if !record {
                        edges.clear();
                    }
                    let u = (reach - dist) / aa;
                    let (coverage, dcov_du) = if u >= 1.0 { (1.0, 0.0) } else { (u * u * u * (10.0 + u * (6.0 * u - 15.0)), 30.0 * u * u * (1.0 - u) * (1.0 - u)) };
                    let a = alpha * coverage;
                    let i = 3 * (py * width + px);
                    let under = [img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]];
                    img.pixels[i] = under[0] * (1.0 - a) + r * a;
                    img.pixels[i + 1] = under[1] * (1.0 - a) + g * a;
                    img.pixels[i + 2] = under[2] * (1.0 - a) + b * a;
                    if record {
                        covers.push(Cover {
                            pixel: (py * width + px) as u32,
                            edges: first as u32..edges.len() as u32,
                            coverage,
                            dcov_du,
                            under,
                        });
                    }
                }
            }
            if record {
                records.push(TraceRecord {
                    id: trace.id,
                    control_points: trace.chain.points().len(),
                    segments: trace.chain.segment_count(),
                    vertices: verts.len(),
                    color: trace.color,
                    covers,
                    edges,
                });
            }
        }

        let handle = AdjointHandle { width, height, scale, antialias: aa, samples_per_segment: samples, records };
        Ok((img, handle))
    }
}

fn pixel_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let start = lo.floor().max(0.0);
    let end = (hi.ceil() + 1.0).min(n as f64);
    if end <= start {
        0..0
    } else {
        start as usize..end as usize
    }
}

/// Distance from `p` to the edge `ab` with its gradients in `a` and `b`.
fn edge_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> (f64, [[f64; 2]; 2]) {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ex, a[1] + t * ey];
    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    if d == 0.0 {
        return (0.0, [[0.0; 2]; 2]);
    }
    // Moving the closest point toward the pixel shortens the distance.
    let n = [(p[0] - q[0]) / d, (p[1] - q[1]) / d];
    (d, [[-n[0] * (1.0 - t), -n[1] * (1.0 - t)], [-n[0] * t, -n[1] * t]])
}

/// Soft minimum `d = −τ·ln Σ exp(−dᵢ/τ)` of the pixel's distances to every
/// polyline edge, or `None` when even the nearest edge is at or beyond
/// `limit`. Pushes each contributing edge onto `out`.
fn soft_distance(
    verts: &[[f64; 2]],
    cx: f64,
    cy: f64,
    tau: f64,
    limit: f64,
    scratch: &mut Vec<f64>,
    out: &mut Vec<EdgeWeight>,
) -> Option<f64> {
    let p = [cx, cy];
    scratch.clear();
    let mut best = (f64::INFINITY, 0);
    for (k, w) in verts.windows(2).enumerate() {
        let (d, _) = edge_distance(w[0], w[1], p);
        if d < best.0 {
            best = (d, k);
        }
        scratch.push(d);
    }
    let d_min = best.0;
    if d_min >= limit {
        return None;
    }
    let mut push = |k: usize, weight: f64| {
        let (_, [da, db]) = edge_distance(verts[k], verts[k + 1], p);
        out.push(EdgeWeight { vertex: k as u32, grad: [[weight * da[0], weight * da[1]], [weight * db[0], weight * db[1]]] });
    };
    if tau == 0.0 {
        push(best.1, 1.0);
        return Some(d_min);
    }
    let mut total = 0.0;
    for &d in scratch.iter() {
        let z = (d - d_min) / tau;
        if z < SOFT_CUTOFF {
            total += (-z).exp();
        }
    }
    for (k, &d) in scratch.iter().enumerate() {
        let z = (d - d_min) / tau;
        if z < SOFT_CUTOFF {
            push(k, (-z).exp() / total);
        }
    }
    Some(d_min - tau * total.ln())
}

impl AdjointHandle {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Vector-Jacobian product: maps `∂L/∂pixels` to `∂L/∂parameters` of
    /// the smooth coverage model.
    pub fn apply(&self, pixel_grad: &[f64]) -> Result<ParamGrads> {
        if pixel_grad.len() != self.width * self.height * 3 {
            return Err(Error::contract(format!(
                "pixel gradient has {} values, expected {} for {}×{} RGB",
                pixel_grad.len(),
                self.width * self.height * 3,
                self.width,
                self.height
            )));
        }
        let mut upstream = pixel_grad.to_vec();
        let mut out = Vec::with_capacity(self.records.len());
        let aa = self.antialias;
        let s = self.samples_per_segment;

        for rec in self.records.iter().rev() {
            let [r, g, b, alpha] = rec.color;
            let col = [r, g, b];
            let mut color_grad = [0.0; 4];
            let mut width_grad = 0.0;
            let mut vert_grad = vec![[0.0f64; 2]; rec.vertices];

            for c in &rec.covers {
                let i = 3 * c.pixel as usize;
                let a = alpha * c.coverage;
                let mut dl_da = 0.0;
                for ch in 0..3 {
                    let gch = upstream[i + ch];
                    dl_da += gch * (col[ch] - c.under[ch]);
                    color_grad[ch] += gch * a;
                    upstream[i + ch] = gch * (1.0 - a);
                }
                color_grad[3] += dl_da * c.coverage;
                let dl_du = dl_da * alpha * c.dcov_du;
                if dl_du != 0.0 {
                    // u = (w + b − d)/b  ⇒  ∂u/∂w = 1/b, ∂u/∂d = −1/b
                    width_grad += dl_du / aa * 0.5 * self.scale;
                    let dl_dd = -dl_du / aa;
                    for e in &rec.edges[c.edges.start as usize..c.edges.end as usize] {
                        let k = e.vertex as usize;
                        for axis in 0..2 {
                            vert_grad[k][axis] += dl_dd * e.grad[0][axis];
                            vert_grad[k + 1][axis] += dl_dd * e.grad[1][axis];
                        }
                    }
                }
            }

            let mut points = vec![Point2::default(); rec.control_points];
            for (gi, vg) in vert_grad.iter().enumerate() {
                if vg[0] == 0.0 && vg[1] == 0.0 {
                    continue;
                }
                let seg = (gi / (s - 1)).min(rec.segments - 1);
                let t = sample_t(gi - seg * (s - 1), s);
                for (k, w) in bernstein(t).iter().enumerate() {
                    let p = &mut points[3 * seg + k];
                    p.x += w * vg[0] * self.scale;
                    p.y += w * vg[1] * self.scale;
                }
            }
            out.push(TraceGrad { id: rec.id, points, color: color_grad, width: width_grad });
        }
        out.reverse();
        Ok(ParamGrads { traces: out })
    }
}

/// Canvas-space center of pixel `(px, py)`.
fn pixel_center(px: usize, py: usize, scale: f64) -> Point2 {
    Point2::new((px as f64 + 0.5) / scale, (py as f64 + 0.5) / scale)
}

/// Replaces pixels whose centers fall inside `region` with `background`.
/// `None` is the empty region.
pub fn mask_region(image: &RasterImage, region: Option<&Region>, background: Rgb) -> RasterImage {
    let mut out = image.clone();
    let Some(region) = region else { return out };
    let scale = image.scale();
    for py in 0..image.height {
        for px in 0..image.width {
            if region.contains(pixel_center(px, py, scale)) {
                let i = 3 * (py * image.width + px);
                out.pixels[i..i + 3].copy_from_slice(&background);
            }
        }
    }
    out
}

/// Adjoint of [`mask_region`]: zero inside the region, identity outside.
pub fn mask_region_vjp(grad: &mut [f64], width: usize, height: usize, region: Option<&Region>) {
    let Some(region) = region else { return };
    let scale = width.max(height) as f64;
    for py in 0..height {
        for px in 0..width {
            if region.contains(pixel_center(px, py, scale)) {
                let i = 3 * (py * width + px);
                grad[i..i + 3].fill(0.0);
            }
        }
    }
}
