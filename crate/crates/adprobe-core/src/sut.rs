//! The system-under-test interface and its wire protocol.
//!
//! A SUT applies actions to agents, serves ads, and reports settings. The
//! bundled simulator implements the trait in process; any external system
//! can be driven over a byte stream speaking line-delimited JSON: one
//! request per line, one response per line.
//!
//! Requests:
//!   `{"op":"apply","agent":0,"action":{"kind":"idle"}}`       -> `{"ok":true}`
//!   `{"op":"collect","agent":0,"reloads":10}`                 -> `{"ads":[...]}`
//!   `{"op":"settings","agent":0}`                             -> `{"settings":[...]}`
//! Anything unrecognized gets `{"error":"..."}`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::AdRecord;

/// Experiment-wide agent index (block * block_size + position).
pub type AgentId = u64;

/// An action as delivered to a SUT. URL lists are resolved to concrete URLs
/// before they cross this boundary, so SUTs never touch harness-local
/// files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SutAction {
    Visit { urls: Vec<String> },
    Set { key: String, value: String },
    RemoveInterest { keyword: String },
    OptOut,
    Idle,
}

#[derive(Debug, Error)]
pub enum SutError {
    #[error("sut protocol error: {detail}")]
    Protocol { detail: String },
    #[error("sut rejected request: {0}")]
    Rejected(String),
    #[error("sut io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulator error: {0}")]
    Simulator(String),
}

/// A blackbox system under test. The engine only ever talks to this trait;
/// the simulator and an external process are indistinguishable behind it.
pub trait Sut {
    fn apply(&mut self, agent: AgentId, action: &SutAction) -> Result<(), SutError>;
    fn collect(&mut self, agent: AgentId, reloads: u32) -> Result<Vec<AdRecord>, SutError>;
    fn settings(&mut self, agent: AgentId) -> Result<Vec<String>, SutError>;
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum WireRequest {
    Apply { agent: AgentId, action: SutAction },
    Collect { agent: AgentId, reloads: u32 },
    Settings { agent: AgentId },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Ok { ok: bool },
    Ads { ads: Vec<AdRecord> },
    Settings { settings: Vec<String> },
    Error { error: String },
}

/// Client half of the wire protocol: drives any `Read + Write` stream as a
/// [`Sut`].
pub struct WireClient<S: Read + Write> {
    stream: BufReader<S>,
    line: String,
}

impl WireClient<TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<WireClient<TcpStream>, SutError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        Ok(WireClient::new(stream))
    }
}

impl<S: Read + Write> WireClient<S> {
    pub fn new(stream: S) -> WireClient<S> {
        WireClient {
            stream: BufReader::new(stream),
            line: String::new(),
        }
    }

    fn round_trip(&mut self, request: &WireRequest) -> Result<WireResponse, SutError> {
        let mut message = serde_json::to_string(request).expect("requests serialize");
        message.push('\n');
        self.stream.get_mut().write_all(message.as_bytes())?;
        self.stream.get_mut().flush()?;

        self.line.clear();
        let read = self.stream.read_line(&mut self.line)?;
        if read == 0 {
            return Err(SutError::Protocol {
                detail: "connection closed mid-exchange".to_string(),
            });
        }
        let trimmed = self.line.trim_end();
        let response: WireResponse =
            serde_json::from_str(trimmed).map_err(|e| SutError::Protocol {
                detail: format!("malformed response line {trimmed:?}: {e}"),
            })?;
        if let WireResponse::Error { error } = response {
            return Err(SutError::Rejected(error));
        }
        Ok(response)
    }
}

impl<S: Read + Write> Sut for WireClient<S> {
    fn apply(&mut self, agent: AgentId, action: &SutAction) -> Result<(), SutError> {
        match self.round_trip(&WireRequest::Apply {
            agent,
            action: action.clone(),
        })? {
            WireResponse::Ok { ok: true } => Ok(()),
            other => Err(SutError::Protocol {
                detail: format!("unexpected apply response: {other:?}"),
            }),
        }
    }

    fn collect(&mut self, agent: AgentId, reloads: u32) -> Result<Vec<AdRecord>, SutError> {
        match self.round_trip(&WireRequest::Collect { agent, reloads })? {
            WireResponse::Ads { ads } => Ok(ads),
            other => Err(SutError::Protocol {
                detail: format!("unexpected collect response: {other:?}"),
            }),
        }
    }

    fn settings(&mut self, agent: AgentId) -> Result<Vec<String>, SutError> {
        match self.round_trip(&WireRequest::Settings { agent })? {
            WireResponse::Settings { settings } => Ok(settings),
            other => Err(SutError::Protocol {
                detail: format!("unexpected settings response: {other:?}"),
            }),
        }
    }
}

/// Server half: answer wire requests from `stream` against `sut` until the
/// peer disconnects. Unknown or malformed requests are answered with an
/// error line rather than closing the connection.
pub fn serve_connection<S: Read + Write, T: Sut>(stream: S, sut: &mut T) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(trimmed) {
            Ok(WireRequest::Apply { agent, action }) => match sut.apply(agent, &action) {
                Ok(()) => WireResponse::Ok { ok: true },
                Err(e) => WireResponse::Error { error: e.to_string() },
            },
            Ok(WireRequest::Collect { agent, reloads }) => match sut.collect(agent, reloads) {
                Ok(ads) => WireResponse::Ads { ads },
                Err(e) => WireResponse::Error { error: e.to_string() },
            },
            Ok(WireRequest::Settings { agent }) => match sut.settings(agent) {
                Ok(settings) => WireResponse::Settings { settings },
                Err(e) => WireResponse::Error { error: e.to_string() },
            },
            Err(e) => WireResponse::Error {
                error: format!("unrecognized request {trimmed:?}: {e}"),
            },
        };
        let mut reply = serde_json::to_string(&response).expect("responses serialize");
        reply.push('\n');
        reader.get_mut().write_all(reply.as_bytes())?;
        reader.get_mut().flush()?;
    }
}
