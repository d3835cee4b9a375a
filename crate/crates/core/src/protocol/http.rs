//! HTTP transport: axum services and ureq clients implementing the same
//! traits as the in-process roles.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::wire::*;
use super::{ErrorCode, HostApi, ProtocolError, SmsApi};

/// Evaluation keys for the default ring run to tens of megabytes.
pub const MAX_BODY_BYTES: usize = 512 << 20;

fn error_response(e: &ProtocolError) -> Response {
    let status = StatusCode::from_u16(e.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(ErrorBody::from(e))).into_response()
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ProtocolError> {
    serde_json::from_slice(body)
        .map_err(|e| ProtocolError::new(ErrorCode::BadEncoding, format!("malformed request body: {e}")))
}

/// Runs CPU-bound protocol work off the async workers.
async fn blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, ProtocolError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => (StatusCode::OK, Json(v)).into_response(),
        Ok(Err(e)) => {
            log::debug!("request failed: {e}");
            error_response(&e)
        }
        Err(e) => error_response(&ProtocolError::internal(e)),
    }
}

async fn not_found() -> Response {
    error_response(&ProtocolError::new(ErrorCode::NotFound, "no such endpoint"))
}

type HostState = State<Arc<dyn HostApi>>;
type SmsState = State<Arc<dyn SmsApi>>;

#[derive(Deserialize)]
struct SpecQuery {
    model_id: Option<String>,
}

async fn host_setup_xgb(State(host): HostState, body: Bytes) -> Response {
    blocking(move || host.setup_xgb(&parse(&body)?)).await
}

async fn host_model_spec(State(host): HostState, Query(q): Query<SpecQuery>) -> Response {
    blocking(move || host.model_spec(q.model_id.as_deref())).await
}

async fn host_infer_xgb(State(host): HostState, body: Bytes) -> Response {
    blocking(move || host.infer_xgb(&parse(&body)?)).await
}

async fn host_register_keys(State(host): HostState, body: Bytes) -> Response {
    blocking(move || host.register_nn_keys(&parse(&body)?)).await
}

async fn host_infer_nn(State(host): HostState, body: Bytes) -> Response {
    blocking(move || host.infer_nn(&parse(&body)?)).await
}

async fn sms_encrypt_model(State(sms): SmsState, body: Bytes) -> Response {
    blocking(move || sms.encrypt_model(&parse(&body)?)).await
}

async fn sms_client_keys(State(sms): SmsState, Path(model_id): Path<String>) -> Response {
    blocking(move || sms.client_keys(&model_id)).await
}

pub fn host_router(host: Arc<dyn HostApi>) -> Router {
    Router::new()
        .route("/v1/infer/xgb", post(host_infer_xgb))
        .route("/v1/infer/nn", post(host_infer_nn))
        .route("/v1/model-spec", get(host_model_spec))
        .route("/v1/xgb/setup", post(host_setup_xgb))
        .route("/v1/nn/keys", post(host_register_keys))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(host)
}

pub fn sms_router(sms: Arc<dyn SmsApi>) -> Router {
    Router::new()
        .route("/v1/encrypt-model", post(sms_encrypt_model))
        .route("/v1/client-keys/{model_id}", get(sms_client_keys))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(sms)
}

/// A service running on its own thread. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the service exits.
    pub fn wait(mut self) -> io::Result<()> {
        self.shutdown.take();
        self.thread.take().map_or(Ok(()), |t| t.join().expect("server thread panicked"))
    }

    fn stop(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.thread.take().map_or(Ok(()), |t| t.join().expect("server thread panicked"))
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

fn spawn(router: Router, addr: SocketAddr, name: &str) -> io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name(name.into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    // A dropped sender without a send means "run forever".
                    if rx.await.is_err() {
                        std::future::pending::<()>().await;
                    }
                })
                .await
        })
    })?;
    log::info!("{name} listening on {addr}");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves the Host endpoints on `addr`; port 0 picks a free port.
pub fn serve_host(host: Arc<dyn HostApi>, addr: SocketAddr) -> io::Result<ServerHandle> {
    spawn(host_router(host), addr, "host")
}

/// Serves the SMS endpoints on `addr`; port 0 picks a free port.
pub fn serve_sms(sms: Arc<dyn SmsApi>, addr: SocketAddr) -> io::Result<ServerHandle> {
    spawn(sms_router(sms), addr, "sms")
}

struct HttpPeer {
    base: String,
    agent: ureq::Agent,
}

impl HttpPeer {
    fn new(base_url: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        HttpPeer {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn read<T: DeserializeOwned>(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ProtocolError> {
        let transport = |e: ureq::Error| ProtocolError::new(ErrorCode::Transport, e.to_string());
        let mut resp = result.map_err(transport)?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES as u64)
            .read_to_vec()
            .map_err(transport)?;
        if status.is_success() {
            return parse(&body);
        }
        match serde_json::from_slice::<ErrorBody>(&body) {
            Ok(err) => Err(err.into()),
            Err(_) => Err(ProtocolError::new(
                ErrorCode::Transport,
                format!("HTTP {status}: {}", String::from_utf8_lossy(&body)),
            )),
        }
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T, ProtocolError> {
        self.read(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    fn get<T: DeserializeOwned>(&self, path: &str, query: Option<(&str, &str)>) -> Result<T, ProtocolError> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some((k, v)) = query {
            req = req.query(k, v);
        }
        self.read(req.call())
    }
}

/// A remote Host.
pub struct HttpHost(HttpPeer);

impl HttpHost {
    pub fn new(base_url: &str) -> Self {
        HttpHost(HttpPeer::new(base_url))
    }
}

impl HostApi for HttpHost {
    fn setup_xgb(&self, req: &SetupXgbRequest) -> Result<SetupXgbResponse, ProtocolError> {
        self.0.post("/v1/xgb/setup", req)
    }

    fn model_spec(&self, model_id: Option<&str>) -> Result<ModelSpecResponse, ProtocolError> {
        self.0.get("/v1/model-spec", model_id.map(|id| ("model_id", id)))
    }

    fn infer_xgb(&self, req: &InferRequestXgb) -> Result<InferResponse, ProtocolError> {
        self.0.post("/v1/infer/xgb", req)
    }

    fn register_nn_keys(&self, req: &RegisterKeysRequest) -> Result<RegisterKeysResponse, ProtocolError> {
        self.0.post("/v1/nn/keys", req)
    }

    fn infer_nn(&self, req: &InferRequestNn) -> Result<InferResponse, ProtocolError> {
        self.0.post("/v1/infer/nn", req)
    }
}

/// A remote SMS.
pub struct HttpSms(HttpPeer);

impl HttpSms {
    pub fn new(base_url: &str) -> Self {
        HttpSms(HttpPeer::new(base_url))
    }
}

impl SmsApi for HttpSms {
    fn encrypt_model(&self, req: &EncryptModelRequest) -> Result<EncryptModelResponse, ProtocolError> {
        self.0.post("/v1/encrypt-model", req)
    }

    fn client_keys(&self, model_id: &str) -> Result<KeyBundleResponse, ProtocolError> {
        self.0.get(&format!("/v1/client-keys/{model_id}"), None)
    }
}
