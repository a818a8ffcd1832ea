//! axum routers for each service. Service calls may block (locks, outbound
//! HTTP to witnesses or the ledger), so handlers run them on the blocking
//! pool.

use std::future::Future;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use poa_core::ca::{CertificateAuthority, IssuanceRequest, IssueError};
use poa_core::idp::TokenRequest;
use poa_core::jose::Jwks;
use poa_core::ledger::{CosignRequest, Cosignature};
use poa_core::service::{Clock, CtService, CtSubmitter, CtView, LedgerService, ServiceError, WitnessEndpoint, WitnessService};
use poa_core::sim::SimIdp;

use crate::wire::*;

/// A JSON error response.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        match e {
            ServiceError::Unavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", message),
            ServiceError::Rejected(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "rejected", message),
            ServiceError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not-found", message),
        }
    }
}

impl From<IssueError> for ApiError {
    fn from(e: IssueError) -> Self {
        let status = match &e {
            IssueError::InvalidToken(_) | IssueError::UnknownChallenge | IssueError::BadProofOfPossession => {
                StatusCode::BAD_REQUEST
            }
            IssueError::LedgerUnavailable(_) | IssueError::CtUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            IssueError::ProofFailure(_) => StatusCode::BAD_GATEWAY,
            IssueError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

fn jwks_json(jwks: &Jwks) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], jwks.canonical_json()).into_response()
}

// ---- identity provider ----

pub fn idp_router(idp: Arc<SimIdp>) -> Router {
    Router::new()
        .route("/jwks", get(idp_jwks))
        .route("/.well-known/openid-configuration", get(idp_discovery))
        .route("/token", post(idp_token))
        .route("/rotate", post(idp_rotate))
        .with_state(idp)
}

async fn idp_jwks(State(idp): State<Arc<SimIdp>>) -> Response {
    idp.with_state(|s| jwks_json(s.active_keys()))
}

async fn idp_discovery(State(idp): State<Arc<SimIdp>>) -> Json<serde_json::Value> {
    let issuer = idp.issuer();
    Json(serde_json::json!({
        "issuer": issuer,
        "jwks_uri": format!("{}/jwks", issuer.trim_end_matches('/')),
        "id_token_signing_alg_values_supported": ["RS256"],
    }))
}

async fn idp_token(State(idp): State<Arc<SimIdp>>, Json(body): Json<TokenBody>) -> ApiResult<TokenResponse> {
    let request = TokenRequest {
        sub: body.sub,
        aud: body.aud,
        lifetime: body.lifetime.unwrap_or(300),
        nonce: body.nonce,
    };
    let token = blocking(move || idp.token(&request))
        .await?
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(TokenResponse {
        token: token.to_compact(),
    }))
}

async fn idp_rotate(State(idp): State<Arc<SimIdp>>) -> ApiResult<RotateResponse> {
    let counter = blocking(move || idp.rotate().map(|()| idp.with_state(|s| s.rotation_counter())))
        .await?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(Json(RotateResponse {
        rotation_counter: counter,
    }))
}

// ---- JWK ledger ----

pub fn ledger_router(ledger: Arc<LedgerService>) -> Router {
    Router::new()
        .route("/append", post(ledger_append))
        .route("/digest", get(ledger_digest))
        .route("/refresh", post(ledger_refresh))
        .route("/inclusion", get(ledger_inclusion))
        .route("/consistency", get(ledger_consistency))
        .route("/at", get(ledger_at))
        .route("/cosign", post(ledger_cosign))
        .route("/entries", get(ledger_entries))
        .route("/key", get(ledger_key))
        .with_state(ledger)
}

async fn ledger_append(
    State(ledger): State<Arc<LedgerService>>,
    Json(body): Json<AppendBody>,
) -> ApiResult<poa_core::service::Published> {
    let raw = serde_json::to_vec(&body.jwks).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let jwks = Jwks::from_json(&raw, 0).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let published = blocking(move || ledger.append(&body.issuer, &jwks)).await?;
    Ok(Json(published))
}

async fn ledger_digest(State(ledger): State<Arc<LedgerService>>) -> Json<poa_core::ledger::SignedDigest> {
    Json(ledger.digest())
}

async fn ledger_refresh(State(ledger): State<Arc<LedgerService>>) -> ApiResult<poa_core::ledger::SignedDigest> {
    Ok(Json(blocking(move || ledger.refresh()).await?))
}

async fn ledger_inclusion(
    State(ledger): State<Arc<LedgerService>>,
    Query(q): Query<InclusionQuery>,
) -> ApiResult<poa_core::merkle::InclusionProof> {
    Ok(Json(ledger.inclusion(q.index, q.size)?))
}

async fn ledger_consistency(
    State(ledger): State<Arc<LedgerService>>,
    Query(q): Query<ConsistencyQuery>,
) -> ApiResult<poa_core::merkle::ConsistencyProof> {
    Ok(Json(ledger.consistency(q.old, q.new)?))
}

async fn ledger_at(
    State(ledger): State<Arc<LedgerService>>,
    Query(q): Query<AtQuery>,
) -> ApiResult<poa_core::ledger::TimestampBracket> {
    Ok(Json(blocking(move || ledger.bracket(&q.issuer, q.t)).await??))
}

async fn ledger_cosign(
    State(ledger): State<Arc<LedgerService>>,
    Json(cosignature): Json<Cosignature>,
) -> Result<StatusCode, ApiError> {
    ledger.add_cosignature(cosignature)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn ledger_entries(State(ledger): State<Arc<LedgerService>>) -> Json<Vec<poa_core::ledger::LedgerEntry>> {
    Json(ledger.entries())
}

async fn ledger_key(State(ledger): State<Arc<LedgerService>>) -> Json<KeyResponse> {
    Json(KeyResponse {
        public_key: ledger.verifying_key(),
    })
}

// ---- CT log ----

pub fn ct_router(ct: Arc<CtService>) -> Router {
    Router::new()
        .route("/submit", post(ct_submit))
        .route("/digest", get(ct_digest))
        .route("/inclusion", get(ct_inclusion))
        .route("/key", get(ct_key))
        .with_state(ct)
}

async fn ct_submit(State(ct): State<Arc<CtService>>, Json(body): Json<SubmitBody>) -> ApiResult<poa_core::ct::Sct> {
    let tbs = STANDARD
        .decode(body.tbs.as_bytes())
        .map_err(|e| ApiError::bad_request(format!("tbs is not base64: {e}")))?;
    Ok(Json(blocking(move || ct.submit(&tbs)).await??))
}

async fn ct_digest(State(ct): State<Arc<CtService>>) -> Json<poa_core::ledger::SignedDigest> {
    Json(ct.digest())
}

async fn ct_inclusion(
    State(ct): State<Arc<CtService>>,
    Query(q): Query<HashQuery>,
) -> ApiResult<poa_core::ct::CtInclusion> {
    let hash: [u8; 32] = hex::decode(&q.hash)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| ApiError::bad_request("hash must be 32 hex-encoded bytes"))?;
    Ok(Json(ct.inclusion(&hash)?))
}

async fn ct_key(State(ct): State<Arc<CtService>>) -> Json<KeyResponse> {
    Json(KeyResponse {
        public_key: ct.verifying_key(),
    })
}

// ---- witness ----

pub fn witness_router(witness: Arc<WitnessService>) -> Router {
    Router::new()
        .route("/review", post(witness_review))
        .route("/state", get(witness_state))
        .with_state(witness)
}

async fn witness_review(
    State(witness): State<Arc<WitnessService>>,
    Json(request): Json<CosignRequest>,
) -> ApiResult<Cosignature> {
    Ok(Json(blocking(move || witness.review(&request)).await??))
}

async fn witness_state(State(witness): State<Arc<WitnessService>>) -> Json<WitnessState> {
    Json(WitnessState {
        id: witness.id(),
        public_key: witness.verifying_key(),
        last_cosigned: witness.last_cosigned(),
    })
}

// ---- certificate authority ----

#[derive(Clone)]
pub struct CaState {
    pub ca: Arc<CertificateAuthority>,
    pub clock: Arc<dyn Clock>,
    /// Trust roots document handed to verifiers.
    pub trust_json: Arc<String>,
}

pub fn ca_router(state: CaState) -> Router {
    Router::new()
        .route("/challenge", post(ca_challenge))
        .route("/issue", post(ca_issue))
        .route("/root", get(ca_root))
        .route("/trust", get(ca_trust))
        .route("/poll", post(ca_poll))
        .with_state(state)
}

async fn ca_challenge(State(s): State<CaState>, Json(body): Json<ChallengeBody>) -> Json<ChallengeResponse> {
    let nonce = s.ca.challenge(&body.public_key, s.clock.now());
    Json(ChallengeResponse { nonce })
}

async fn ca_issue(State(s): State<CaState>, Json(request): Json<IssuanceRequest>) -> Result<Response, ApiError> {
    let issued = blocking(move || s.ca.issue(&request, s.clock.now())).await??;
    Ok(([(header::CONTENT_TYPE, "application/pem-certificate-chain")], issued.chain_pem()).into_response())
}

async fn ca_root(State(s): State<CaState>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/x-pem-file")],
        poa_core::cert::to_pem(s.ca.root()),
    )
        .into_response()
}

async fn ca_trust(State(s): State<CaState>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], (*s.trust_json).clone()).into_response()
}

async fn ca_poll(State(s): State<CaState>) -> ApiResult<PollResponse> {
    let outcome = blocking(move || {
        let outcome = s.ca.poll_jwks(s.clock.now())?;
        s.ca.publish_jwks()?;
        Ok::<_, IssueError>(outcome)
    })
    .await??;
    Ok(Json(PollResponse {
        changed: outcome.changed,
        degraded: outcome.degraded,
    }))
}

/// Polls the IdP and publishes key-set changes every `interval` until the
/// returned task is dropped or aborted.
pub fn spawn_poll_loop(state: CaState, interval: std::time::Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let s = state.clone();
            let result = tokio::task::spawn_blocking(move || {
                s.ca.poll_jwks(s.clock.now())?;
                s.ca.publish_jwks()
            })
            .await;
            match result {
                Ok(Ok(())) => {}
                Ok(Err(e)) => tracing::warn!(error = %e, "jwks poll failed"),
                Err(e) => tracing::error!(error = %e, "jwks poll task failed"),
            }
        }
    })
}

/// Binds synchronously so callers see port conflicts before any runtime work.
pub fn bind(addr: &str) -> std::io::Result<std::net::TcpListener> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// Serves `router` on an already bound listener until `shutdown` resolves.
pub async fn serve(
    listener: std::net::TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::from_std(listener)?;
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
