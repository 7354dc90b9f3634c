//! The direct audit interface.
//!
//! | Route | Response |
//! |---|---|
//! | `GET /health` | `{"status":"ok"}` |
//! | `GET /services` | `[ServiceSummary]` |
//! | `GET /services/{id}/state` | latest published `ValidationState`, or `null` |
//! | `GET /services/{id}/validations/{vid}` | `AuditRecord` |
//! | `GET /services/{id}/validations?from=&to=` | `EvidenceBundle` |
//!
//! Bodies are JSON. Byte strings are lowercase hex. Unknown services and
//! unavailable vids are `404` with `{"error": ..}`.

use super::store::{AuditRecord, EvidenceStore};
use super::Faults;
use crate::contract::{ServiceId, ValidationState, VidRange};
use crate::ledger::Ledger;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Largest vid range served in one request.
pub const MAX_RANGE: u64 = 100_000;

/// Evidence for a range of vids. `missing` lists requested vids the notary
/// did not supply.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub service_id: ServiceId,
    pub validations: Vec<AuditRecord>,
    pub missing: Vec<u64>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ServiceSummary {
    pub service_id: ServiceId,
    pub domain: String,
    pub active: bool,
    pub latest_vid: Option<u64>,
    pub state: Option<ValidationState>,
}

/// Read-only view over the evidence store and the ledger.
pub struct AuditApi {
    store: Arc<EvidenceStore>,
    ledger: Arc<Ledger>,
    faults: Arc<RwLock<Faults>>,
}

impl AuditApi {
    pub fn new(store: Arc<EvidenceStore>, ledger: Arc<Ledger>) -> AuditApi {
        AuditApi {
            store,
            ledger,
            faults: Arc::default(),
        }
    }

    pub fn faults(&self) -> Arc<RwLock<Faults>> {
        self.faults.clone()
    }

    pub fn knows(&self, service_id: ServiceId) -> bool {
        self.ledger.snapshot().contract.services.contains_key(&service_id)
            || self.store.latest_vid(service_id).is_some()
    }

    pub fn services(&self) -> Vec<ServiceSummary> {
        let snap = self.ledger.snapshot();
        snap.contract
            .services
            .values()
            .map(|s| ServiceSummary {
                service_id: s.service_id,
                domain: s.domain.clone(),
                active: s.is_active(),
                latest_vid: self.store.latest_vid(s.service_id),
                state: s.state,
            })
            .collect()
    }

    pub fn record(&self, service_id: ServiceId, vid: u64) -> Option<AuditRecord> {
        if self.faults.read().censor.contains(&vid) {
            return None;
        }
        self.store.audit_record(service_id, vid)
    }

    /// Evidence for every vid in `vids`, chains inlined.
    pub fn bundle(&self, service_id: ServiceId, vids: VidRange) -> EvidenceBundle {
        let mut validations = Vec::new();
        let mut missing = Vec::new();
        for vid in vids.iter() {
            match self.record(service_id, vid) {
                Some(r) => validations.push(r),
                None => missing.push(vid),
            }
        }
        EvidenceBundle {
            service_id,
            validations,
            missing,
        }
    }
}

pub fn router(api: Arc<AuditApi>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/services", get(services))
        .route("/services/{id}/state", get(state))
        .route("/services/{id}/validations", get(validations))
        .route("/services/{id}/validations/{vid}", get(validation))
        .with_state(api)
}

/// Serves the audit interface on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, api: Arc<AuditApi>) -> std::io::Result<()> {
    axum::serve(listener, router(api)).await
}

fn error(code: StatusCode, message: impl Into<String>) -> Response {
    (code, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn unavailable(api: &AuditApi) -> Option<Response> {
    api.faults
        .read()
        .silent
        .then(|| error(StatusCode::SERVICE_UNAVAILABLE, "unavailable"))
}

async fn health(State(api): State<Arc<AuditApi>>) -> Response {
    if let Some(r) = unavailable(&api) {
        return r;
    }
    Json(serde_json::json!({ "status": "ok" })).into_response()
}

async fn services(State(api): State<Arc<AuditApi>>) -> Response {
    if let Some(r) = unavailable(&api) {
        return r;
    }
    Json(api.services()).into_response()
}

async fn state(State(api): State<Arc<AuditApi>>, Path(id): Path<ServiceId>) -> Response {
    if let Some(r) = unavailable(&api) {
        return r;
    }
    match api.ledger.snapshot().contract.services.get(&id) {
        Some(s) => Json(s.state).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown service {id}")),
    }
}

async fn validation(State(api): State<Arc<AuditApi>>, Path((id, vid)): Path<(ServiceId, u64)>) -> Response {
    if let Some(r) = unavailable(&api) {
        return r;
    }
    if !api.knows(id) {
        return error(StatusCode::NOT_FOUND, format!("unknown service {id}"));
    }
    match api.record(id, vid) {
        Some(r) => Json(r).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no evidence for vid {vid}")),
    }
}

#[derive(Deserialize)]
struct RangeParams {
    from: u64,
    to: u64,
}

async fn validations(
    State(api): State<Arc<AuditApi>>,
    Path(id): Path<ServiceId>,
    Query(range): Query<RangeParams>,
) -> Response {
    if let Some(r) = unavailable(&api) {
        return r;
    }
    if !api.knows(id) {
        return error(StatusCode::NOT_FOUND, format!("unknown service {id}"));
    }
    if range.from > range.to || range.to - range.from >= MAX_RANGE {
        return error(
            StatusCode::BAD_REQUEST,
            format!("range must satisfy from <= to and span fewer than {MAX_RANGE} vids"),
        );
    }
    Json(api.bundle(
        id,
        VidRange {
            from: range.from,
            to: range.to,
        },
    ))
    .into_response()
}
