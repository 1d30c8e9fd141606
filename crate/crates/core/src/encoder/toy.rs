//! Deterministic stand-in encoder with exact gradients.
//!
//! Image side: three stride-2 3×3 convolutions (3→8→16→32 channels, tanh),
//! global average pooling and a linear projection to 64 dimensions. The
//! weights were drawn once from a fixed seed and ship as a binary asset.
//!
//! Feature maps are the tanh activations scaled by `1/√n` (`n` values per
//! layer), so their norms do not grow with resolution.
//!
//! Text side: each lower-cased alphanumeric token hashes to a fixed random
//! unit vector; the prompt embedding is the normalized mean.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{check_image, check_layers, BackendDescriptor, EmbeddingVec, EncoderBackend, FeatureMaps, Features};
use super::{ImageEmbedding, LayerInfo, Tensor, Vjp};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub const EMBEDDING_DIM: usize = 64;
pub const WEIGHT_SEED: u64 = 0x00c0_ffee_5eed;
const CHANNELS: [usize; 4] = [3, 8, 16, 32];
const NOMINAL_RESOLUTION: usize = 224;

static WEIGHTS_ASSET: &[u8] = include_bytes!("../../assets/toy_encoder_weights.bin");

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    c_in: usize,
    c_out: usize,
    /// `[c_out][c_in][3][3]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyWeights {
    convs: Vec<Conv>,
    /// `[EMBEDDING_DIM][32]`
    proj: Vec<f64>,
    proj_bias: Vec<f64>,
}

impl ToyWeights {
    fn param_count() -> usize {
        let convs: usize = CHANNELS.windows(2).map(|c| c[0] * c[1] * 9 + c[1]).sum();
        convs + EMBEDDING_DIM * CHANNELS[3] + EMBEDDING_DIM
    }

    /// Draws the weights from `seed`: He-style `N(0, 1/fan_in)` kernels and
    /// small biases. Used to produce the shipped asset.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z }).collect::<Vec<f64>>()
        };
        let convs = CHANNELS
            .windows(2)
            .map(|c| {
                let fan_in = (c[0] * 9) as f64;
                Conv { c_in: c[0], c_out: c[1], weight: normal(c[0] * c[1] * 9, fan_in.sqrt().recip()), bias: normal(c[1], 0.1) }
            })
            .collect();
        let proj = normal(EMBEDDING_DIM * CHANNELS[3], (CHANNELS[3] as f64).sqrt().recip());
        let proj_bias = normal(EMBEDDING_DIM, 0.1);
        Self { convs, proj, proj_bias }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::param_count() * 8);
        for c in &self.convs {
            c.weight.iter().chain(&c.bias).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        self.proj.iter().chain(&self.proj_bias).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::param_count() * 8 {
            return Err(Error::Config(format!(
                "toy encoder weights: expected {} bytes, got {}",
                Self::param_count() * 8,
                bytes.len()
            )));
        }
        let mut vals = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let convs = CHANNELS
            .windows(2)
            .map(|c| {
                let weight = take(c[0] * c[1] * 9);
                let bias = take(c[1]);
                Conv { c_in: c[0], c_out: c[1], weight, bias }
            })
            .collect();
        let proj = take(EMBEDDING_DIM * CHANNELS[3]);
        let proj_bias = take(EMBEDDING_DIM);
        Ok(Self { convs, proj, proj_bias })
    }
}

#[derive(Clone, Debug)]
pub struct ToyBackend {
    weights: Arc<ToyWeights>,
    descriptor: BackendDescriptor,
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyBackend {
    pub fn new() -> Self {
        let weights = ToyWeights::from_bytes(WEIGHTS_ASSET).expect("shipped toy weights are well-formed");
        Self::with_weights(weights)
    }

    pub fn with_weights(weights: ToyWeights) -> Self {
        let mut side = NOMINAL_RESOLUTION;
        let layers = (1..=3)
            .map(|id| {
                side = side.div_ceil(2);
                LayerInfo { id, shape: vec![CHANNELS[id], side, side] }
            })
            .collect();
        let descriptor = BackendDescriptor {
            name: "toy".into(),
            embedding_dim: EMBEDDING_DIM,
            layers,
            deterministic: true,
            augmentation: false,
            input_resolution: None,
            min_resolution: crate::raster::MIN_RESOLUTION,
        };
        Self { weights: Arc::new(weights), descriptor }
    }

    fn forward(&self, image: &RasterImage) -> Activations {
        let (h, w) = (image.height(), image.width());
        // HWC in [0, 1] → CHW centred on zero.
        let mut x = vec![0.0; 3 * h * w];
        for (i, px) in image.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                x[c * h * w + i] = 2.0 * (px[c] - 0.5);
            }
        }
        let mut layers = Vec::with_capacity(3);
        let (mut cur, mut ch, mut cw) = (x, h, w);
        for conv in &self.weights.convs {
            let (z, oh, ow) = conv_forward(conv, &cur, ch, cw);
            let y: Vec<f64> = z.into_iter().map(f64::tanh).collect();
            layers.push(Layer { out: y.clone(), h: oh, w: ow });
            cur = y;
            ch = oh;
            cw = ow;
        }
        Activations { input_h: h, input_w: w, layers }
    }
}

struct Layer {
    out: Vec<f64>,
    h: usize,
    w: usize,
}

struct Activations {
    input_h: usize,
    input_w: usize,
    layers: Vec<Layer>,
}

fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Stride-2, padding-1, 3×3 convolution on a CHW tensor.
fn conv_forward(conv: &Conv, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut out = vec![0.0; conv.c_out * oh * ow];
    for co in 0..conv.c_out {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(conv.bias[co]);
        for ci in 0..conv.c_in {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            let k = &conv.weight[(co * conv.c_in + ci) * 9..(co * conv.c_in + ci + 1) * 9];
            for oy in 0..oh {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                acc += k[ky * 3 + kx] * row[ix as usize];
                            }
                        }
                        plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

/// Gradient of the convolution with respect to its input.
fn conv_backward(conv: &Conv, gz: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut gx = vec![0.0; conv.c_in * h * w];
    for co in 0..conv.c_out {
        let g = &gz[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..conv.c_in {
            let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
            let k = &conv.weight[(co * conv.c_in + ci) * 9..(co * conv.c_in + ci + 1) * 9];
            for oy in 0..oh {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let go = g[oy * ow + ox];
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += k[ky * 3 + kx] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

struct ToyVjp {
    weights: Arc<ToyWeights>,
    acts: Activations,
    kind: VjpKind,
}

enum VjpKind {
    Embedding { raw_norm: f64, embedding: Vec<f64> },
    Features { layer_ids: Vec<usize> },
}

impl ToyVjp {
    /// Backpropagates per-layer output gradients (`seeds[l]` for layer
    /// `l + 1`) down to HWC pixel space.
    fn backprop(&self, mut seeds: Vec<Option<Vec<f64>>>) -> Vec<f64> {
        let top = seeds.iter().rposition(Option::is_some);
        let (h, w) = (self.acts.input_h, self.acts.input_w);
        let Some(top) = top else { return vec![0.0; h * w * 3] };
        let mut g = seeds[top].take().unwrap();
        for l in (0..=top).rev() {
            if l < top {
                if let Some(s) = seeds[l].take() {
                    g.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                }
            }
            let y = &self.acts.layers[l].out;
            let gz: Vec<f64> = g.iter().zip(y).map(|(gy, y)| gy * (1.0 - y * y)).collect();
            let (ih, iw) = if l == 0 { (h, w) } else { (self.acts.layers[l - 1].h, self.acts.layers[l - 1].w) };
            g = conv_backward(&self.weights.convs[l], &gz, ih, iw);
        }
        let mut out = vec![0.0; h * w * 3];
        for c in 0..3 {
            for i in 0..h * w {
                out[3 * i + c] = 2.0 * g[c * h * w + i];
            }
        }
        out
    }
}

impl Vjp for ToyVjp {
    fn apply(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            VjpKind::Embedding { raw_norm, embedding } => {
                if upstream.len() != EMBEDDING_DIM {
                    return Err(Error::contract(format!(
                        "embedding upstream has {} values, expected {EMBEDDING_DIM}",
                        upstream.len()
                    )));
                }
                // e = r/|r|  ⇒  ∂/∂r = (g − e⟨e, g⟩)/|r|
                let eg: f64 = embedding.iter().zip(upstream).map(|(a, b)| a * b).sum();
                let g_raw: Vec<f64> = upstream.iter().zip(embedding).map(|(g, e)| (g - e * eg) / raw_norm).collect();
                let c3 = CHANNELS[3];
                let mut g_pool = vec![0.0; c3];
                for (o, gr) in g_raw.iter().enumerate() {
                    for (c, gp) in g_pool.iter_mut().enumerate() {
                        *gp += self.weights.proj[o * c3 + c] * gr;
                    }
                }
                let top = &self.acts.layers[2];
                let area = (top.h * top.w) as f64;
                let g3: Vec<f64> = g_pool.iter().flat_map(|g| std::iter::repeat_n(g / area, top.h * top.w)).collect();
                Ok(self.backprop(vec![None, None, Some(g3)]))
            }
            VjpKind::Features { layer_ids } => {
                let expected: usize = layer_ids.iter().map(|id| self.acts.layers[id - 1].out.len()).sum();
                if upstream.len() != expected {
                    return Err(Error::contract(format!(
                        "feature upstream has {} values, expected {expected}",
                        upstream.len()
                    )));
                }
                let mut seeds = vec![None, None, None];
                let mut off = 0;
                for id in layer_ids {
                    let n = self.acts.layers[id - 1].out.len();
                    let k = 1.0 / (n as f64).sqrt();
                    seeds[id - 1] = Some(upstream[off..off + n].iter().map(|u| u * k).collect());
                    off += n;
                }
                Ok(self.backprop(seeds))
            }
        }
    }
}

fn tokens(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

fn token_vector(token: &str) -> Vec<f64> {
    let digest = Sha256::digest(format!("toy-token:{token}").as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl EncoderBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVec> {
        let toks = tokens(prompt);
        if toks.is_empty() {
            return Err(Error::Input("prompt is empty".into()));
        }
        let mut acc = vec![0.0; EMBEDDING_DIM];
        for t in &toks {
            acc.iter_mut().zip(token_vector(t)).for_each(|(a, b)| *a += b);
        }
        EmbeddingVec::normalized(acc)
    }

    fn embed_image(&self, image: &RasterImage) -> Result<ImageEmbedding> {
        check_image(&self.descriptor, image)?;
        let acts = self.forward(image);
        let top = &acts.layers[2];
        let area = (top.h * top.w) as f64;
        let pooled: Vec<f64> = top.out.chunks_exact(top.h * top.w).map(|p| p.iter().sum::<f64>() / area).collect();
        let c3 = CHANNELS[3];
        let raw: Vec<f64> = (0..EMBEDDING_DIM)
            .map(|o| self.weights.proj_bias[o] + (0..c3).map(|c| self.weights.proj[o * c3 + c] * pooled[c]).sum::<f64>())
            .collect();
        let raw_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let embedding = EmbeddingVec::normalized(raw)?;
        let vjp = ToyVjp {
            weights: self.weights.clone(),
            acts,
            kind: VjpKind::Embedding { raw_norm, embedding: embedding.as_slice().to_vec() },
        };
        Ok(ImageEmbedding { embedding, vjp: Box::new(vjp) })
    }

    fn features(&self, image: &RasterImage, layer_ids: &[usize]) -> Result<Features> {
        check_layers(&self.descriptor, layer_ids)?;
        check_image(&self.descriptor, image)?;
        let mut ids = layer_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let acts = self.forward(image);
        let mut maps = FeatureMaps::new();
        for &id in &ids {
            let l = &acts.layers[id - 1];
            let k = 1.0 / (l.out.len() as f64).sqrt();
            maps.insert(id, Tensor { shape: vec![CHANNELS[id], l.h, l.w], data: l.out.iter().map(|v| v * k).collect() });
        }
        let vjp = ToyVjp { weights: self.weights.clone(), acts, kind: VjpKind::Features { layer_ids: ids } };
        Ok(Features { maps, vjp: Box::new(vjp) })
    }
}
