//! Newline-delimited JSON provider protocol.
//!
//! Requests are `{"id": n, "op": ..., "params": {...}}`; every request gets
//! exactly one response `{"id": n, "ok": true, "result": {...}}` or
//! `{"id": n, "ok": false, "error": {"code": ..., "message": ...}}`, in
//! request order. A line that is not valid JSON gets an error response with
//! `"id": null` and the connection stays open.
//!
//! Ops: `hello`, `segment_frame`, `refine_mask`, `embed_crop`, `embed_text`.
//! Masks travel as `{"size": [H, W], "counts": [...]}` in the scene RLE
//! format; images are referenced by `image_path` (or inline `image_b64` for
//! `segment_frame`).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::scene_io::Rle;

use super::fake::FakeProvider;
use super::provider::{
    EmbedCropRequest, EmbeddingProvider, ProviderError, ProviderInfo, ProviderSpec,
    RefineMaskRequest, CAP_EMBED_CROP, CAP_EMBED_TEXT, CAP_REFINE_MASK, PROTOCOL_VERSION,
};
use super::EmbeddingVector;

/// Allowed deviation from unit norm for embeddings received over the wire.
pub const WIRE_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub op: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl WireResponse {
    pub fn success(id: u64, result: Value) -> Self {
        Self {
            id: Some(id),
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(id: Option<u64>, code: &str, message: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            result: None,
            error: Some(WireError {
                code: code.to_string(),
                message: message.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl From<&Rle> for WireMask {
    fn from(r: &Rle) -> Self {
        Self {
            size: [r.height, r.width],
            counts: r.counts.clone(),
        }
    }
}

impl From<WireMask> for Rle {
    fn from(m: WireMask) -> Self {
        Rle {
            height: m.size[0],
            width: m.size[1],
            counts: m.counts,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmbedCropParams {
    frame_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<PathBuf>,
    width: u32,
    height: u32,
    mask: WireMask,
    bbox: [u32; 4],
    scale_index: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmbedTextParams {
    prompts: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MaskResult {
    mask: WireMask,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmbeddingResult {
    embedding: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmbeddingsResult {
    embeddings: Vec<Vec<f64>>,
}

/// Client side of the protocol over any byte stream.
pub struct RemoteProvider {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    info: ProviderInfo,
    next_id: u64,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("info", &self.info)
            .field("next_id", &self.next_id)
            .finish_non_exhaustive()
    }
}

fn transport(e: std::io::Error) -> ProviderError {
    ProviderError::Transport(e.to_string())
}

impl RemoteProvider {
    /// Performs the `hello` handshake and checks version and capabilities.
    pub fn handshake(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
    ) -> Result<Self, ProviderError> {
        let mut p = Self {
            reader,
            writer,
            child: None,
            info: ProviderInfo {
                protocol_version: 0,
                dim: 0,
                capabilities: vec![],
                deterministic: false,
            },
            next_id: 0,
        };
        let result = p.call("hello", json!({}))?;
        let info: ProviderInfo = serde_json::from_value(result)
            .map_err(|e| ProviderError::Protocol(format!("bad hello result: {e}")))?;
        if info.protocol_version != PROTOCOL_VERSION {
            return Err(ProviderError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                actual: info.protocol_version,
            });
        }
        for cap in [CAP_REFINE_MASK, CAP_EMBED_CROP, CAP_EMBED_TEXT] {
            if !info.has(cap) {
                return Err(ProviderError::MissingCapability(cap.into()));
            }
        }
        if info.dim == 0 {
            return Err(ProviderError::Protocol("provider announced dim 0".into()));
        }
        p.info = info;
        Ok(p)
    }

    /// Spawns `argv` and talks to it over stdin/stdout. Stderr is inherited.
    pub fn spawn(argv: &[String]) -> Result<Self, ProviderError> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| ProviderError::Transport("empty command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::Transport(format!("spawn {prog}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::handshake(Box::new(BufReader::new(stdout)), Box::new(BufWriter::new(stdin))) {
            Ok(mut p) => {
                p.child = Some(child);
                Ok(p)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn connect_tcp(addr: &str) -> Result<Self, ProviderError> {
        let stream = TcpStream::connect(addr).map_err(transport)?;
        let read = stream.try_clone().map_err(transport)?;
        Self::handshake(Box::new(BufReader::new(read)), Box::new(BufWriter::new(stream)))
    }

    fn call(&mut self, op: &str, params: Value) -> Result<Value, ProviderError> {
        let id = self.next_id;
        self.next_id += 1;
        let req = WireRequest {
            id,
            op: op.to_string(),
            params,
        };
        let line = serde_json::to_string(&req).expect("request serializes");
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        self.writer.write_all(b"\n").map_err(transport)?;
        self.writer.flush().map_err(transport)?;

        let mut buf = String::new();
        if self.reader.read_line(&mut buf).map_err(transport)? == 0 {
            return Err(ProviderError::Transport(format!(
                "connection closed awaiting response to request {id} ({op})"
            )));
        }
        let resp: WireResponse = serde_json::from_str(buf.trim_end())
            .map_err(|e| ProviderError::Protocol(format!("request {id}: bad response: {e}")))?;
        if resp.id != Some(id) {
            return Err(ProviderError::Protocol(format!(
                "response id {:?} does not echo request id {id}",
                resp.id
            )));
        }
        if !resp.ok {
            let err = resp.error.unwrap_or(WireError {
                code: "UNKNOWN".into(),
                message: "error response without details".into(),
            });
            return Err(ProviderError::Remote {
                id: Some(id),
                code: err.code,
                message: err.message,
            });
        }
        resp.result
            .ok_or_else(|| ProviderError::Protocol(format!("request {id}: ok response without result")))
    }

    fn check_vector(&self, v: Vec<f64>) -> Result<EmbeddingVector, ProviderError> {
        let e = EmbeddingVector::new(v);
        if e.dim() != self.info.dim {
            return Err(ProviderError::Protocol(format!(
                "embedding dim {} differs from announced {}",
                e.dim(),
                self.info.dim
            )));
        }
        if (e.norm() - 1.0).abs() > WIRE_NORM_TOLERANCE {
            return Err(ProviderError::Protocol(format!(
                "embedding norm {:.6} is not unit",
                e.norm()
            )));
        }
        Ok(e)
    }

    /// Whole-frame instance segmentation. Used by batch tooling, not by the
    /// labeling pipeline.
    pub fn segment_frame(&mut self, image_path: &std::path::Path) -> Result<Vec<Rle>, ProviderError> {
        #[derive(Deserialize)]
        struct Masks {
            masks: Vec<WireMask>,
        }
        let result = self.call("segment_frame", json!({ "image_path": image_path }))?;
        let masks: Masks = serde_json::from_value(result)
            .map_err(|e| ProviderError::Protocol(format!("bad segment_frame result: {e}")))?;
        Ok(masks.masks.into_iter().map(Rle::from).collect())
    }
}

impl Drop for RemoteProvider {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved sidecar exit on its own
        self.writer = Box::new(std::io::sink());
        if let Some(mut child) = self.child.take() {
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn refine_mask(&mut self, req: &RefineMaskRequest) -> Result<Rle, ProviderError> {
        let params = serde_json::to_value(req).expect("request serializes");
        let result = self.call("refine_mask", params)?;
        let r: MaskResult = serde_json::from_value(result)
            .map_err(|e| ProviderError::Protocol(format!("bad refine_mask result: {e}")))?;
        Ok(r.mask.into())
    }

    fn embed_crop(&mut self, req: &EmbedCropRequest) -> Result<EmbeddingVector, ProviderError> {
        let params = EmbedCropParams {
            frame_id: req.frame_id,
            image_path: req.image_path.clone(),
            width: req.width,
            height: req.height,
            mask: (&req.mask).into(),
            bbox: req.bbox,
            scale_index: req.scale_index,
        };
        let result = self.call("embed_crop", serde_json::to_value(params).expect("serializes"))?;
        let r: EmbeddingResult = serde_json::from_value(result)
            .map_err(|e| ProviderError::Protocol(format!("bad embed_crop result: {e}")))?;
        self.check_vector(r.embedding)
    }

    fn embed_text(&mut self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let params = EmbedTextParams {
            prompts: prompts.to_vec(),
        };
        let result = self.call("embed_text", serde_json::to_value(params).expect("serializes"))?;
        let r: EmbeddingsResult = serde_json::from_value(result)
            .map_err(|e| ProviderError::Protocol(format!("bad embed_text result: {e}")))?;
        if r.embeddings.len() != prompts.len() {
            return Err(ProviderError::Protocol(format!(
                "{} embeddings for {} prompts",
                r.embeddings.len(),
                prompts.len()
            )));
        }
        r.embeddings.into_iter().map(|v| self.check_vector(v)).collect()
    }
}

/// Opens the provider named by `spec`. `fake_labels` configures label-map
/// embeddings for the fake provider and is ignored otherwise.
pub fn open_provider(
    spec: &ProviderSpec,
    fake_labels: Option<(Vec<String>, String)>,
) -> Result<Box<dyn EmbeddingProvider>, ProviderError> {
    Ok(match spec {
        ProviderSpec::Fake { seed } => {
            let p = FakeProvider::new(*seed);
            Box::new(match fake_labels {
                Some((classes, template)) => p.with_label_classes(classes, template),
                None => p,
            })
        }
        ProviderSpec::Command(argv) => Box::new(RemoteProvider::spawn(argv)?),
        ProviderSpec::Tcp(addr) => Box::new(RemoteProvider::connect_tcp(addr)?),
    })
}

fn dispatch<P: EmbeddingProvider + ?Sized>(provider: &mut P, req: &WireRequest) -> Result<Value, WireError> {
    let bad_params = |e: serde_json::Error| WireError {
        code: "PARAMS".into(),
        message: e.to_string(),
    };
    let failed = |e: ProviderError| WireError {
        code: e.code().to_string(),
        message: match e {
            ProviderError::Remote { message, .. } => message,
            other => other.to_string(),
        },
    };
    match req.op.as_str() {
        "hello" => Ok(serde_json::to_value(provider.info()).expect("info serializes")),
        "refine_mask" => {
            let r: RefineMaskRequest = serde_json::from_value(req.params.clone()).map_err(bad_params)?;
            let mask = provider.refine_mask(&r).map_err(failed)?;
            Ok(json!({ "mask": WireMask::from(&mask) }))
        }
        "embed_crop" => {
            let p: EmbedCropParams = serde_json::from_value(req.params.clone()).map_err(bad_params)?;
            let r = EmbedCropRequest {
                frame_id: p.frame_id,
                image_path: p.image_path,
                width: p.width,
                height: p.height,
                mask: p.mask.into(),
                bbox: p.bbox,
                scale_index: p.scale_index,
            };
            let e = provider.embed_crop(&r).map_err(failed)?;
            Ok(json!({ "embedding": e.values() }))
        }
        "embed_text" => {
            let p: EmbedTextParams = serde_json::from_value(req.params.clone()).map_err(bad_params)?;
            let es = provider.embed_text(&p.prompts).map_err(failed)?;
            let vals: Vec<&[f64]> = es.iter().map(|e| e.values()).collect();
            Ok(json!({ "embeddings": vals }))
        }
        "segment_frame" => Err(WireError {
            code: "UNSUPPORTED".into(),
            message: "this provider does not segment frames".into(),
        }),
        other => Err(WireError {
            code: "OP".into(),
            message: format!("unknown op '{other}'"),
        }),
    }
}

/// Answers one request line.
pub fn handle_line<P: EmbeddingProvider + ?Sized>(provider: &mut P, line: &str) -> WireResponse {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return WireResponse::failure(None, "PARSE", e.to_string()),
    };
    let id = value.get("id").and_then(Value::as_u64);
    let req: WireRequest = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return WireResponse::failure(id, "REQUEST", e.to_string()),
    };
    match dispatch(provider, &req) {
        Ok(result) => WireResponse::success(req.id, result),
        Err(err) => WireResponse {
            id: Some(req.id),
            ok: false,
            result: None,
            error: Some(err),
        },
    }
}

/// Serves requests from `reader` until EOF, one response line per request.
pub fn serve<P, R, W>(provider: &mut P, reader: R, mut writer: W) -> std::io::Result<()>
where
    P: EmbeddingProvider + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(provider, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_json_gets_null_id_error() {
        let mut p = FakeProvider::new(0);
        let r = handle_line(&mut p, "{not json");
        assert_eq!(r.id, None);
        assert!(!r.ok);
        assert_eq!(r.error.unwrap().code, "PARSE");
        let r = handle_line(&mut p, r#"{"id": 4, "op": 7}"#);
        assert_eq!(r.id, Some(4));
        assert_eq!(r.error.unwrap().code, "REQUEST");
    }

    #[test]
    fn hello_and_unknown_op() {
        let mut p = FakeProvider::new(0);
        let r = handle_line(&mut p, r#"{"id": 1, "op": "hello"}"#);
        assert!(r.ok);
        let info: ProviderInfo = serde_json::from_value(r.result.unwrap()).unwrap();
        assert_eq!(info.protocol_version, PROTOCOL_VERSION);
        let r = handle_line(&mut p, r#"{"id": 2, "op": "teleport", "params": {}}"#);
        assert_eq!(r.id, Some(2));
        assert_eq!(r.error.unwrap().code, "OP");
    }

    #[test]
    fn serve_keeps_order_and_survives_garbage() {
        let mut p = FakeProvider::new(0);
        let input = "{\"id\":0,\"op\":\"hello\"}\ngarbage\n\n{\"id\":9,\"op\":\"embed_text\",\"params\":{\"prompts\":[\"a\"]}}\n";
        let mut out = Vec::new();
        serve(&mut p, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<WireResponse> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].id, Some(0));
        assert_eq!(lines[1].id, None);
        assert_eq!(lines[2].id, Some(9));
        assert!(lines[2].ok);
    }
}
