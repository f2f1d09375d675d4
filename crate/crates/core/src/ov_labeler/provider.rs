//! The abstract perception provider: mask refinement plus crop and text
//! embeddings. Implementations are the in-process [`FakeProvider`] and the
//! wire-protocol [`RemoteProvider`].
//!
//! [`FakeProvider`]: super::FakeProvider
//! [`RemoteProvider`]: super::RemoteProvider

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scene_io::Rle;

use super::EmbeddingVector;

pub const PROTOCOL_VERSION: u32 = 1;

pub const CAP_REFINE_MASK: &str = "refine_mask";
pub const CAP_EMBED_CROP: &str = "embed_crop";
pub const CAP_EMBED_TEXT: &str = "embed_text";
pub const CAP_SEGMENT_FRAME: &str = "segment_frame";

/// Handshake payload announced by every provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub protocol_version: u32,
    pub dim: usize,
    pub capabilities: Vec<String>,
    pub deterministic: bool,
}

impl ProviderInfo {
    pub fn has(&self, cap: &str) -> bool {
        self.capabilities.iter().any(|c| c == cap)
    }
}

/// Inclusive pixel box `[xmin, ymin, xmax, ymax]`.
pub type PixelBox = [u32; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineMaskRequest {
    pub frame_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedCropRequest {
    pub frame_id: u32,
    pub image_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub mask: Rle,
    pub bbox: PixelBox,
    pub scale_index: u8,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("request {id:?} failed with {code}: {message}")]
    Remote {
        id: Option<u64>,
        code: String,
        message: String,
    },
    #[error("provider speaks protocol version {actual}, expected {expected}")]
    VersionMismatch { expected: u32, actual: u32 },
    #[error("provider lacks capability '{0}'")]
    MissingCapability(String),
}

impl ProviderError {
    /// Error raised locally by an in-process provider for an invalid request.
    pub fn rejected(code: &str, message: impl Into<String>) -> Self {
        Self::Remote {
            id: None,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            Self::Remote { code, .. } => code,
            Self::Transport(_) => "TRANSPORT",
            Self::Protocol(_) => "PROTOCOL",
            Self::VersionMismatch { .. } => "VERSION",
            Self::MissingCapability(_) => "CAPABILITY",
        }
    }
}

/// Segmentation and embedding services. Calls are assumed serial.
pub trait EmbeddingProvider {
    fn info(&self) -> &ProviderInfo;

    /// Refined mask for the object framed by `req.bbox`.
    fn refine_mask(&mut self, req: &RefineMaskRequest) -> Result<Rle, ProviderError>;

    /// Unit-norm embedding of the masked crop.
    fn embed_crop(&mut self, req: &EmbedCropRequest) -> Result<EmbeddingVector, ProviderError>;

    /// One unit-norm embedding per prompt.
    fn embed_text(&mut self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn info(&self) -> &ProviderInfo {
        (**self).info()
    }

    fn refine_mask(&mut self, req: &RefineMaskRequest) -> Result<Rle, ProviderError> {
        (**self).refine_mask(req)
    }

    fn embed_crop(&mut self, req: &EmbedCropRequest) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed_crop(req)
    }

    fn embed_text(&mut self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed_text(prompts)
    }
}

/// Parsed `--provider` value: `cmd:<argv>`, `tcp:<host>:<port>` or
/// `fake[:seed]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProviderSpec {
    Command(Vec<String>),
    Tcp(String),
    Fake { seed: u64 },
}

impl FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "fake" {
            return Ok(Self::Fake { seed: 0 });
        }
        if let Some(seed) = s.strip_prefix("fake:") {
            return seed
                .parse()
                .map(|seed| Self::Fake { seed })
                .map_err(|_| format!("invalid fake seed '{seed}'"));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("empty provider command".into());
            }
            return Ok(Self::Command(argv));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            let ok = addr
                .rsplit_once(':')
                .is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok());
            if !ok {
                return Err(format!("expected tcp:<host>:<port>, got '{s}'"));
            }
            return Ok(Self::Tcp(addr.to_string()));
        }
        Err(format!(
            "unknown provider '{s}' (expected cmd:<argv>, tcp:<host>:<port> or fake[:seed])"
        ))
    }
}

impl std::fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
            Self::Tcp(addr) => write!(f, "tcp:{addr}"),
            Self::Fake { seed } => write!(f, "fake:{seed}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_grammar() {
        assert_eq!("fake".parse(), Ok(ProviderSpec::Fake { seed: 0 }));
        assert_eq!("fake:42".parse(), Ok(ProviderSpec::Fake { seed: 42 }));
        assert_eq!(
            "cmd:python -m sidecar --fake".parse(),
            Ok(ProviderSpec::Command(vec![
                "python".into(),
                "-m".into(),
                "sidecar".into(),
                "--fake".into()
            ]))
        );
        assert_eq!("tcp:localhost:7070".parse(), Ok(ProviderSpec::Tcp("localhost:7070".into())));
        assert!("tcp:localhost".parse::<ProviderSpec>().is_err());
        assert!("cmd:".parse::<ProviderSpec>().is_err());
        assert!("fake:x".parse::<ProviderSpec>().is_err());
        assert!("grpc:foo".parse::<ProviderSpec>().is_err());
        let s: ProviderSpec = "fake:3".parse().unwrap();
        assert_eq!(s.to_string().parse::<ProviderSpec>().unwrap(), s);
    }
}
