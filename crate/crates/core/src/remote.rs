//! Remote model endpoint policy and the bundled stub server.
//!
//! Protocol: `POST <url>` with body `{"prompt": str}`, answered by `200 {"text": str}`. Any
//! other status is a transport error. The client also sends `X-Episode-Id` and
//! `X-Step-Index` headers so the stub can look answers up in a golden-response table.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::policy::{Policy, PolicyContext, Prediction};
use crate::prompt::{parse_response, render_prompt_parts, PromptOptions, PromptSample, Variant};
use crate::Error;

pub const EPISODE_HEADER: &str = "X-Episode-Id";
pub const STEP_HEADER: &str = "X-Step-Index";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteEndpoint {
    pub url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_concurrency: usize,
}

impl Default for RemoteEndpoint {
    fn default() -> Self {
        Self { url: String::new(), timeout_ms: 30_000, max_retries: 2, max_concurrency: 8 }
    }
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.url.is_empty() {
            return Err(Error::Config("remote endpoint url is empty".into()));
        }
        if self.timeout_ms == 0 || self.max_concurrency == 0 {
            return Err(Error::Config("remote timeout and concurrency must be positive".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct PromptRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

/// Scores a remote model: renders the variant prompt, posts it and parses the reply.
pub struct RemotePolicy {
    endpoint: RemoteEndpoint,
    variant: Variant,
    prompt_opts: PromptOptions,
    agent: ureq::Agent,
    limiter: Limiter,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl RemotePolicy {
    pub fn new(endpoint: RemoteEndpoint, variant: Variant) -> Result<Self, Error> {
        endpoint.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = Limiter::new(endpoint.max_concurrency);
        Ok(Self {
            endpoint,
            variant,
            prompt_opts: PromptOptions::default(),
            agent,
            limiter,
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    pub fn with_prompt_options(mut self, opts: PromptOptions) -> Self {
        self.prompt_opts = opts;
        self
    }

    /// Highest number of simultaneous requests observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn post_once(&self, prompt: &str, episode_id: &str, step: usize) -> Result<String, String> {
        let _permit = self.limiter.acquire();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = self
            .agent
            .post(&self.endpoint.url)
            .header(EPISODE_HEADER, episode_id)
            .header(STEP_HEADER, &step.to_string())
            .send_json(PromptRequest { prompt })
            .map_err(|e| e.to_string())
            .and_then(|mut resp| {
                if resp.status() != 200 {
                    return Err(format!("HTTP {}", resp.status()));
                }
                resp.body_mut().read_json::<TextResponse>().map(|r| r.text).map_err(|e| e.to_string())
            });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    /// Posts `prompt`, retrying transport errors up to `max_retries` times.
    pub fn complete(&self, prompt: &str, episode_id: &str, step: usize) -> Result<String, Error> {
        let mut last = String::new();
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(25 * u64::from(attempt)));
            }
            match self.post_once(prompt, episode_id, step) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    debug!("attempt {} for {episode_id}#{step} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::EndpointUnavailable(format!("{}: {last}", self.endpoint.url)))
    }
}

impl Policy for RemotePolicy {
    fn name(&self) -> &str {
        "remote"
    }

    fn predict(&self, ctx: &PolicyContext<'_>) -> Prediction {
        let prompt = match render_prompt_parts(
            ctx.instruction,
            ctx.screen,
            ctx.history,
            ctx.pipeline,
            ctx.step_index,
            self.variant,
            self.prompt_opts,
        ) {
            Ok(p) => p,
            Err(e) => return Prediction::Unevaluated { reason: e.to_string() },
        };
        match self.complete(&prompt, ctx.episode_id, ctx.step_index) {
            Ok(text) => match parse_response(&text) {
                Ok(parsed) => parsed.action.into(),
                Err(_) => Prediction::ParseFailure { raw: text },
            },
            Err(e) => Prediction::Unevaluated { reason: e.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenRecord {
    pub episode_id: String,
    pub step_index: usize,
    pub text: String,
}

/// Canned responses keyed by (episode_id, step_index).
#[derive(Debug, Clone, Default)]
pub struct GoldenTable {
    map: HashMap<(String, usize), String>,
}

impl GoldenTable {
    pub fn insert(&mut self, episode_id: impl Into<String>, step_index: usize, text: impl Into<String>) {
        self.map.insert((episode_id.into(), step_index), text.into());
    }

    pub fn get(&self, episode_id: &str, step_index: usize) -> Option<&str> {
        self.map.get(&(episode_id.to_string(), step_index)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Each sample's response becomes the canned answer for its step.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PromptSample>) -> Self {
        let mut t = Self::default();
        for s in samples {
            t.insert(&s.episode_id, s.step_index, &s.response);
        }
        t
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, Error> {
        let mut t = Self::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GoldenRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, reason: e.to_string() })?;
            t.insert(rec.episode_id, rec.step_index, rec.text);
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Writes records sorted by key.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), Error> {
        let mut keys: Vec<_> = self.map.keys().collect();
        keys.sort();
        for k in keys {
            let rec = GoldenRecord { episode_id: k.0.clone(), step_index: k.1, text: self.map[k].clone() };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }
}

/// What the stub answers.
#[derive(Debug, Clone)]
pub enum StubMode {
    Golden(GoldenTable),
    /// The same text for every request (e.g. malformed output).
    Fixed(String),
}

/// In-process HTTP stub speaking the remote protocol.
pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    requests: Arc<AtomicUsize>,
}

impl StubServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on `threads` workers.
    pub fn start(addr: &str, mode: StubMode, threads: usize) -> Result<Self, Error> {
        let server =
            tiny_http::Server::http(addr).map_err(|e| Error::EndpointUnavailable(format!("bind {addr}: {e}")))?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::EndpointUnavailable("stub bound to a non-IP address".into()))?;
        let server = Arc::new(server);
        let mode = Arc::new(mode);
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, mode, stop, requests) = (server.clone(), mode.clone(), stop.clone(), requests.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => {
                                requests.fetch_add(1, Ordering::SeqCst);
                                handle(req, &mode);
                            }
                            Ok(None) => {}
                            Err(e) => warn!("stub receive error: {e}"),
                        }
                    }
                })
            })
            .collect();
        Ok(Self { addr: bound, stop, workers, requests })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    pub fn requests_served(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server is stopped from another thread (used by the CLI).
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

fn header<'r>(req: &'r tiny_http::Request, name: &'static str) -> Option<&'r str> {
    req.headers().iter().find(|h| h.field.equiv(name)).map(|h| h.value.as_str())
}

fn reply(req: tiny_http::Request, status: u16, body: String) {
    let json = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let resp = tiny_http::Response::from_string(body).with_status_code(status).with_header(json);
    if let Err(e) = req.respond(resp) {
        warn!("stub failed to respond: {e}");
    }
}

#[derive(Deserialize)]
struct PromptBody {
    #[allow(dead_code)]
    prompt: String,
}

fn handle(mut req: tiny_http::Request, mode: &StubMode) {
    if *req.method() != tiny_http::Method::Post {
        return reply(req, 405, r#"{"error":"POST only"}"#.into());
    }
    let mut body = String::new();
    if req.as_reader().read_to_string(&mut body).is_err() || serde_json::from_str::<PromptBody>(&body).is_err() {
        return reply(req, 400, r#"{"error":"expected {\"prompt\": str}"}"#.into());
    }
    let text = match mode {
        StubMode::Fixed(t) => Some(t.clone()),
        StubMode::Golden(table) => {
            let ep = header(&req, EPISODE_HEADER);
            let step = header(&req, STEP_HEADER).and_then(|s| s.trim().parse::<usize>().ok());
            ep.zip(step).and_then(|(ep, step)| table.get(ep, step).map(str::to_string))
        }
    };
    match text {
        Some(text) => reply(req, 200, serde_json::json!({ "text": text }).to_string()),
        None => reply(req, 404, r#"{"error":"no golden response for this step"}"#.into()),
    }
}
