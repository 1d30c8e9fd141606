//! Client for an out-of-process encoder speaking the frame protocol below.
//!
//! Every message is one frame:
//!
//! ```text
//! u32 LE  frame length (bytes after this field)
//! u32 LE  header length
//! [u8]    header, UTF-8 JSON
//! [u8]    payload, little-endian f32, row-major
//! ```
//!
//! Header fields: `op`, `dtype` (`"f32"`), `shape`, optional `layer_ids`,
//! `request_id`, plus op-specific extras (`text`, `upstream_len`, `shapes`,
//! `descriptor`, `code`, `detail`). Ops: `describe`, `embed_text`,
//! `embed_image`, `image_vjp`, `features`, `features_vjp`; the server
//! answers with the same `op` or with `error`.
//!
//! VJP requests carry the image followed by the upstream gradient in one
//! payload; `shape` describes the image and `upstream_len` the gradient.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{check_image, check_layers, BackendDescriptor, EmbeddingVec, EncoderBackend, FeatureMaps, Features};
use super::{ImageEmbedding, Tensor, Vjp};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Frames larger than this are rejected on read.
pub const MAX_FRAME_BYTES: usize = 256 << 20;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub op: String,
    #[serde(default = "f32_dtype")]
    pub dtype: String,
    #[serde(default)]
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_ids: Option<Vec<usize>>,
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_len: Option<usize>,
    /// Per-layer shapes of a `features` response, in ascending layer order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<BackendDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

fn f32_dtype() -> String {
    "f32".into()
}

impl Header {
    pub fn new(op: &str, request_id: u64) -> Self {
        Self { op: op.into(), dtype: f32_dtype(), request_id, ..Default::default() }
    }

    pub fn error(request_id: u64, code: &str, detail: impl Into<String>) -> Self {
        Self { code: Some(code.into()), detail: Some(detail.into()), ..Self::new("error", request_id) }
    }
}

pub fn write_frame(w: &mut impl Write, header: &Header, payload: &[f32]) -> std::io::Result<()> {
    let head = serde_json::to_vec(header).map_err(std::io::Error::other)?;
    let frame_len = 4 + head.len() + 4 * payload.len();
    let mut buf = Vec::with_capacity(4 + frame_len);
    buf.extend_from_slice(&(frame_len as u32).to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. Malformed frames are `InvalidData` errors; a clean EOF
/// before the first byte is `UnexpectedEof`.
pub fn read_frame(r: &mut impl Read, max_bytes: usize) -> std::io::Result<(Header, Vec<f32>)> {
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let frame_len = u32::from_le_bytes(len4) as usize;
    if frame_len < 4 || frame_len > max_bytes {
        return Err(invalid(format!("frame length {frame_len} out of range")));
    }
    let mut frame = vec![0u8; frame_len];
    r.read_exact(&mut frame)?;
    let head_len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    if head_len > frame_len - 4 {
        return Err(invalid(format!("header length {head_len} exceeds frame")));
    }
    let header: Header =
        serde_json::from_slice(&frame[4..4 + head_len]).map_err(|e| invalid(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(invalid(format!("unsupported dtype `{}`", header.dtype)));
    }
    let body = &frame[4 + head_len..];
    if body.len() % 4 != 0 {
        return Err(invalid("payload is not a whole number of f32 values".into()));
    }
    let payload = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((header, payload))
}

struct Connection {
    stream: Mutex<TcpStream>,
    next_id: AtomicU64,
}

impl Connection {
    /// One request in flight per connection; the lock serializes callers.
    fn call(&self, mut header: Header, payload: &[f32]) -> Result<(Header, Vec<f32>)> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        header.request_id = id;
        let mut stream = self.stream.lock().map_err(|_| Error::Transport("connection lock poisoned".into()))?;
        write_frame(&mut *stream, &header, payload).map_err(|e| Error::Transport(e.to_string()))?;
        let (resp, data) = read_frame(&mut *stream, MAX_FRAME_BYTES).map_err(|e| Error::Transport(e.to_string()))?;
        if resp.request_id != id {
            return Err(Error::Transport(format!("response id {} does not match request {id}", resp.request_id)));
        }
        if resp.op == "error" {
            return Err(Error::Transport(format!(
                "sidecar error {}: {}",
                resp.code.as_deref().unwrap_or("?"),
                resp.detail.as_deref().unwrap_or("")
            )));
        }
        if resp.op != header.op {
            return Err(Error::Transport(format!("expected `{}` response, got `{}`", header.op, resp.op)));
        }
        // An empty shape means no tensor, not a scalar.
        let expected = if resp.shape.is_empty() { 0 } else { resp.shape.iter().product() };
        if expected != data.len() && resp.shapes.is_none() {
            return Err(Error::Transport(format!("response shape {:?} does not match {} values", resp.shape, data.len())));
        }
        Ok((resp, data))
    }
}

/// Encoder backend served by a remote sidecar process.
pub struct SidecarBackend {
    conn: Arc<Connection>,
    descriptor: BackendDescriptor,
}

impl SidecarBackend {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let conn = Arc::new(Connection { stream: Mutex::new(stream), next_id: AtomicU64::new(1) });
        let (resp, _) = conn.call(Header::new("describe", 0), &[])?;
        let descriptor =
            resp.descriptor.ok_or_else(|| Error::Transport("describe response lacks a descriptor".into()))?;
        Ok(Self { conn, descriptor })
    }
}

fn image_payload(image: &RasterImage) -> Vec<f32> {
    image.pixels().iter().map(|&v| v as f32).collect()
}

fn image_shape(image: &RasterImage) -> Vec<usize> {
    vec![image.height(), image.width(), 3]
}

struct RemoteVjp {
    conn: Arc<Connection>,
    op: &'static str,
    shape: Vec<usize>,
    image: Vec<f32>,
    layer_ids: Option<Vec<usize>>,
}

impl Vjp for RemoteVjp {
    fn apply(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut payload = self.image.clone();
        payload.extend(upstream.iter().map(|&v| v as f32));
        let header = Header {
            shape: self.shape.clone(),
            upstream_len: Some(upstream.len()),
            layer_ids: self.layer_ids.clone(),
            ..Header::new(self.op, 0)
        };
        let (resp, data) = self.conn.call(header, &payload)?;
        if resp.shape != self.shape {
            return Err(Error::Transport(format!("VJP shape {:?} differs from image {:?}", resp.shape, self.shape)));
        }
        Ok(data.into_iter().map(f64::from).collect())
    }
}

impl EncoderBackend for SidecarBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVec> {
        if prompt.trim().is_empty() {
            return Err(Error::Input("prompt is empty".into()));
        }
        let header = Header { text: Some(prompt.into()), ..Header::new("embed_text", 0) };
        let (_, data) = self.conn.call(header, &[])?;
        EmbeddingVec::normalized(data.into_iter().map(f64::from).collect())
    }

    fn embed_image(&self, image: &RasterImage) -> Result<ImageEmbedding> {
        check_image(&self.descriptor, image)?;
        let payload = image_payload(image);
        let header = Header { shape: image_shape(image), ..Header::new("embed_image", 0) };
        let (_, data) = self.conn.call(header, &payload)?;
        let embedding = EmbeddingVec::normalized(data.into_iter().map(f64::from).collect())?;
        let vjp = RemoteVjp { conn: self.conn.clone(), op: "image_vjp", shape: image_shape(image), image: payload, layer_ids: None };
        Ok(ImageEmbedding { embedding, vjp: Box::new(vjp) })
    }

    fn features(&self, image: &RasterImage, layer_ids: &[usize]) -> Result<Features> {
        check_layers(&self.descriptor, layer_ids)?;
        check_image(&self.descriptor, image)?;
        let mut ids = layer_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let payload = image_payload(image);
        let header = Header { shape: image_shape(image), layer_ids: Some(ids.clone()), ..Header::new("features", 0) };
        let (resp, data) = self.conn.call(header, &payload)?;
        let shapes = resp.shapes.unwrap_or_default();
        if shapes.len() != ids.len() || shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() != data.len() {
            return Err(Error::Transport("features response shapes do not match payload".into()));
        }
        let mut maps = FeatureMaps::new();
        let mut off = 0;
        for (id, shape) in ids.iter().zip(shapes) {
            let n: usize = shape.iter().product();
            let values = data[off..off + n].iter().map(|&v| f64::from(v)).collect();
            maps.insert(*id, Tensor::new(shape, values)?);
            off += n;
        }
        let vjp = RemoteVjp {
            conn: self.conn.clone(),
            op: "features_vjp",
            shape: image_shape(image),
            image: payload,
            layer_ids: Some(ids),
        };
        Ok(Features { maps, vjp: Box::new(vjp) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let h = Header { shape: vec![2, 2], layer_ids: Some(vec![1, 3]), ..Header::new("features", 7) };
        let mut buf = Vec::new();
        write_frame(&mut buf, &h, &[1.0, -2.5, 3.25, 0.0]).unwrap();
        let (h2, p) = read_frame(&mut buf.as_slice(), MAX_FRAME_BYTES).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p, vec![1.0, -2.5, 3.25, 0.0]);
    }

    #[test]
    fn truncated_and_oversized_frames_are_errors() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Header::new("describe", 1), &[1.0]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_frame(&mut buf.as_slice(), MAX_FRAME_BYTES).is_err());
        let huge = (u32::MAX).to_le_bytes();
        assert!(read_frame(&mut huge.as_slice(), 1024).is_err());
        let mut bad = Vec::new();
        bad.extend_from_slice(&8u32.to_le_bytes());
        bad.extend_from_slice(&100u32.to_le_bytes());
        bad.extend_from_slice(b"{}{}");
        assert!(read_frame(&mut bad.as_slice(), MAX_FRAME_BYTES).is_err());
    }

    #[test]
    fn connect_failure_is_transport_error() {
        // Port 1 on localhost is reserved and closed in the sandbox.
        assert!(matches!(SidecarBackend::connect("127.0.0.1:1"), Err(Error::Transport(_))));
    }
}
