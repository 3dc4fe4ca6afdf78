//! HTTP transport for remote stage backends.
//!
//! Wire protocol: one POST endpoint per stage under a common prefix
//! (`/v1/caption`, `/v1/vqa`, ...), JSON bodies mirroring the request and
//! response types field-for-field, and error replies of the form
//! `{"code": <int>, "message": <string>}`. Binary assets come back as file
//! paths (local mode) or URLs (remote mode); either way the client
//! materializes them into the caller's asset sink so cache entries own their
//! files.

use std::io::Read;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{
    AssetSink, Backend, BackendEndpoint, GatewayError, StageKind, StageRequest, StageResponse,
};

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: BackendEndpoint,
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { agent, endpoint })
    }

    fn url(&self, kind: StageKind) -> String {
        format!(
            "{}{}",
            self.endpoint.base_url.trim_end_matches('/'),
            kind.endpoint_path()
        )
    }
}

#[derive(Deserialize)]
struct ErrorReply {
    code: u16,
    message: String,
}

fn classify_transport(err: ureq::Error) -> GatewayError {
    match err {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        other => GatewayError::Transport(other.to_string()),
    }
}

fn request_body(request: &StageRequest) -> String {
    let value = match request {
        StageRequest::Caption(r) => serde_json::to_value(r),
        StageRequest::Vqa(r) => serde_json::to_value(r),
        StageRequest::Video(r) => serde_json::to_value(r),
        StageRequest::Segment(r) => serde_json::to_value(r),
        StageRequest::Propagate(r) => serde_json::to_value(r),
        StageRequest::Embed(r) => serde_json::to_value(r),
        StageRequest::Audio(r) => serde_json::to_value(r),
    };
    value.expect("stage request serializes").to_string()
}

fn parse_body(kind: StageKind, body: &str) -> Result<StageResponse, GatewayError> {
    let malformed = |err: serde_json::Error| {
        GatewayError::BadResponse(format!("{kind} reply is not valid JSON for its type: {err}"))
    };
    Ok(match kind {
        StageKind::Caption => StageResponse::Caption(serde_json::from_str(body).map_err(malformed)?),
        StageKind::Vqa => StageResponse::Vqa(serde_json::from_str(body).map_err(malformed)?),
        StageKind::Video => StageResponse::Video(serde_json::from_str(body).map_err(malformed)?),
        StageKind::Segment => StageResponse::Segment(serde_json::from_str(body).map_err(malformed)?),
        StageKind::Propagate => {
            StageResponse::Propagate(serde_json::from_str(body).map_err(malformed)?)
        }
        StageKind::Embed => StageResponse::Embed(serde_json::from_str(body).map_err(malformed)?),
        StageKind::Audio => StageResponse::Audio(serde_json::from_str(body).map_err(malformed)?),
    })
}

impl Backend for HttpBackend {
    fn invoke(&self, request: &StageRequest, sink: &AssetSink) -> Result<StageResponse, GatewayError> {
        let kind = request.kind();
        if kind != self.endpoint.stage {
            return Err(GatewayError::BadRequest(format!(
                "endpoint serves stage {}, got a {} request",
                self.endpoint.stage, kind
            )));
        }

        let mut builder = self
            .agent
            .post(&self.url(kind))
            .content_type("application/json");
        if let Some(token) = &self.endpoint.bearer_token {
            builder = builder.header("authorization", format!("Bearer {token}"));
        }
        let mut reply = builder
            .send(request_body(request))
            .map_err(classify_transport)?;

        let status = reply.status().as_u16();
        let body = reply
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(format!("reading reply body: {e}")))?;

        if !(200..300).contains(&status) {
            return Err(match serde_json::from_str::<ErrorReply>(&body) {
                Ok(err) => GatewayError::Remote {
                    code: err.code,
                    message: err.message,
                },
                Err(_) => GatewayError::Remote {
                    code: status,
                    message: body.chars().take(200).collect(),
                },
            });
        }

        let response = parse_body(kind, &body)?;
        self.materialize_assets(response, sink)
    }
}

impl HttpBackend {
    /// Pull remote asset refs (URLs or absolute paths) into the sink and
    /// rewrite them to sink-relative refs. Refs that are already relative are
    /// taken as output-root-relative and left alone.
    fn materialize_assets(
        &self,
        response: StageResponse,
        sink: &AssetSink,
    ) -> Result<StageResponse, GatewayError> {
        Ok(match response {
            StageResponse::Video(mut video) => {
                for (index, frame_ref) in video.frame_refs.iter_mut().enumerate() {
                    if let Some(bytes) = self.fetch(frame_ref)? {
                        let name = format!("frame_{index:03}{}", extension_of(frame_ref));
                        *frame_ref = sink.write(&name, &bytes)?;
                    }
                }
                StageResponse::Video(video)
            }
            StageResponse::Audio(mut audio) => {
                if let Some(bytes) = self.fetch(&audio.audio_ref)? {
                    let name = format!("audio{}", extension_of(&audio.audio_ref));
                    audio.audio_ref = sink.write(&name, &bytes)?;
                }
                StageResponse::Audio(audio)
            }
            other => other,
        })
    }

    fn fetch(&self, asset_ref: &str) -> Result<Option<Vec<u8>>, GatewayError> {
        if asset_ref.starts_with("http://") || asset_ref.starts_with("https://") {
            let mut reply = self
                .agent
                .get(asset_ref)
                .call()
                .map_err(classify_transport)?;
            let status = reply.status().as_u16();
            if !(200..300).contains(&status) {
                return Err(GatewayError::Remote {
                    code: status,
                    message: format!("fetching asset {asset_ref}"),
                });
            }
            let mut bytes = Vec::new();
            reply
                .body_mut()
                .as_reader()
                .read_to_end(&mut bytes)
                .map_err(|e| GatewayError::Transport(format!("reading asset body: {e}")))?;
            return Ok(Some(bytes));
        }
        let path = Path::new(asset_ref);
        if path.is_absolute() {
            return Ok(Some(std::fs::read(path)?));
        }
        Ok(None)
    }
}

fn extension_of(asset_ref: &str) -> String {
    let name = asset_ref.rsplit(['/', '\\']).next().unwrap_or(asset_ref);
    match name.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() && !ext.is_empty() && !ext.contains('?') => {
            format!(".{ext}")
        }
        _ => ".bin".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extension_extraction() {
        assert_eq!(extension_of("/tmp/a/frame.png"), ".png");
        assert_eq!(extension_of("http://host/x/audio.wav"), ".wav");
        assert_eq!(extension_of("noext"), ".bin");
        assert_eq!(extension_of(".hidden"), ".bin");
    }
}
