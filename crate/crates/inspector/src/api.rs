//! JSON endpoints under `/api`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use nwhead::calibration::{ReliabilityReport, DEFAULT_BIN_COUNT};
use nwhead::data::Split;
use nwhead::head::nw_predict_batch;
use nwhead::report::{evaluate_nw, influence_report, predict_view, InfluenceReport, PredictView};
use nwhead::{Error, InferenceMode, LabeledExample, SupportSet};
use serde::{Deserialize, Serialize};

use crate::state::{effective_support, AppState, Session, SessionView, Workspace};

pub const DEFAULT_PREDICT_TOP: usize = 10;
pub const DEFAULT_INFLUENCE_TOP: usize = 5;
pub const DEFAULT_QUERY_LIMIT: usize = 50;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: &self.message })).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownId(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) | Error::InvalidTemperature(_) => StatusCode::BAD_REQUEST,
            Error::UndefinedLoss { .. }
            | Error::InsufficientClass { .. }
            | Error::EmptySupport
            | Error::CannotRemoveLast => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// A consistent view of the loaded workspace and the session at one instant.
struct Snapshot {
    ws: Arc<Workspace>,
    session: Session,
    support: SupportSet,
}

fn snapshot(state: &AppState) -> Result<Snapshot, ApiError> {
    let ws = state
        .workspace()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "checkpoint not loaded yet"))?;
    let session = state.session();
    let support = effective_support(&ws.base, &session.exclusions)?;
    Ok(Snapshot { ws, session, support })
}

fn test_query<'a>(ws: &'a Workspace, id: &str) -> Result<&'a LabeledExample, ApiError> {
    match ws.data.find(id) {
        Ok((Split::Test, q)) => Ok(q),
        Ok((split, _)) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("{id:?} is in the {split} split, not test"),
        )),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub class_count: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub head: String,
    pub split_sizes: BTreeMap<Split, usize>,
    pub tau: f64,
    pub base_support_size: usize,
    pub support_size: usize,
    pub exclusion_count: usize,
    pub checkpoint: Option<String>,
    pub dataset: Option<String>,
}

pub async fn summary(State(state): State<AppState>) -> ApiResult<Summary> {
    let s = snapshot(&state)?;
    Ok(Json(Summary {
        class_count: s.ws.data.class_count(),
        input_dim: s.ws.data.raw.dim,
        embed_dim: s.ws.model.extractor.embed_dim(),
        head: format!("{:?}", s.ws.model.head()).to_lowercase(),
        split_sizes: s.ws.data.raw.split_sizes(),
        tau: s.session.tau,
        base_support_size: s.ws.base.len(),
        support_size: s.support.len(),
        exclusion_count: s.session.exclusions.len(),
        checkpoint: s.ws.checkpoint.clone(),
        dataset: s.ws.dataset.clone(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct TopParam {
    pub top: Option<usize>,
}

pub async fn predict(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<TopParam>,
) -> ApiResult<PredictView> {
    let s = snapshot(&state)?;
    let q = test_query(&s.ws, &id)?;
    let top = p.top.unwrap_or(DEFAULT_PREDICT_TOP);
    Ok(Json(predict_view(q, &s.support, s.session.tau, top)?))
}

pub async fn influence(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<TopParam>,
) -> ApiResult<InfluenceReport> {
    let s = snapshot(&state)?;
    let q = test_query(&s.ws, &id)?;
    if !s.support.class_index().contains_key(&q.label) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("class {} has no entries left in the support set", q.label),
        ));
    }
    let top = p.top.unwrap_or(DEFAULT_INFLUENCE_TOP);
    Ok(Json(influence_report(q, &s.support, s.session.tau, top)?))
}

#[derive(Debug, Default, Deserialize)]
pub struct ExclusionUpdate {
    #[serde(default)]
    pub add: Vec<String>,
    #[serde(default)]
    pub remove: Vec<String>,
}

fn no_workspace() -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "checkpoint not loaded yet")
}

pub async fn update_exclusions(
    State(state): State<AppState>,
    Json(update): Json<ExclusionUpdate>,
) -> ApiResult<SessionView> {
    let ws = state.workspace().ok_or_else(no_workspace)?;
    let base_ids: BTreeSet<&str> = ws.base.entries().iter().map(|e| e.id.as_str()).collect();
    if let Some(bad) = update.add.iter().chain(&update.remove).find(|id| !base_ids.contains(id.as_str())) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("{bad:?} is not in the base support set"),
        ));
    }
    let view = state.update_session(|current| {
        let mut next = current.clone();
        next.exclusions.extend(update.add.iter().cloned());
        for id in &update.remove {
            next.exclusions.remove(id);
        }
        if next.exclusions.len() >= ws.base.len() {
            return Err(Error::EmptySupport);
        }
        let view = next.view(&ws.base);
        Ok((next, view))
    })?;
    Ok(Json(view))
}

pub async fn clear_exclusions(State(state): State<AppState>) -> ApiResult<SessionView> {
    let ws = state.workspace().ok_or_else(no_workspace)?;
    let view = state.update_session(|current| {
        let next = Session {
            exclusions: BTreeSet::new(),
            tau: current.tau,
        };
        let view = next.view(&ws.base);
        Ok((next, view))
    })?;
    Ok(Json(view))
}

pub async fn get_exclusions(State(state): State<AppState>) -> ApiResult<SessionView> {
    let ws = state.workspace().ok_or_else(no_workspace)?;
    Ok(Json(state.session().view(&ws.base)))
}

#[derive(Debug, Deserialize)]
pub struct TauUpdate {
    pub tau: f64,
}

pub async fn set_tau(State(state): State<AppState>, Json(update): Json<TauUpdate>) -> ApiResult<SessionView> {
    let ws = state.workspace().ok_or_else(no_workspace)?;
    if !(update.tau > 0.0 && update.tau.is_finite()) {
        return Err(Error::InvalidTemperature(update.tau).into());
    }
    let view = state.update_session(|current| {
        let next = Session {
            exclusions: current.exclusions.clone(),
            tau: update.tau,
        };
        let view = next.view(&ws.base);
        Ok((next, view))
    })?;
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
pub struct BinsParam {
    pub bins: Option<i64>,
}

pub async fn reliability(State(state): State<AppState>, Query(p): Query<BinsParam>) -> ApiResult<ReliabilityReport> {
    let bins = p.bins.unwrap_or(DEFAULT_BIN_COUNT as i64);
    if bins < 1 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("bins must be at least 1, got {bins}")));
    }
    let s = snapshot(&state)?;
    let test = s.ws.data.require(Split::Test)?;
    let report = evaluate_nw(&test, &s.support, &InferenceMode::Full, s.session.tau, bins as usize, Split::Test)?;
    Ok(Json(report.reliability))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    Confidence,
    Id,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    Asc,
    Desc,
}

#[derive(Debug, Deserialize)]
pub struct QueryListParams {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
    pub sort: Option<SortKey>,
    pub order: Option<SortOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<QueryRow>,
}

/// Test queries with their current predictions; by default least confident
/// first, ties in dataset order.
pub async fn queries(State(state): State<AppState>, Query(p): Query<QueryListParams>) -> ApiResult<QueryPage> {
    let s = snapshot(&state)?;
    let test = s.ws.data.require(Split::Test)?;
    let preds = nw_predict_batch(&test, &s.support, s.session.tau)?;
    let mut rows: Vec<QueryRow> = test
        .iter()
        .zip(preds)
        .map(|(q, pred)| QueryRow {
            id: q.id.clone(),
            true_label: q.label,
            predicted_label: pred.predicted_label(),
            confidence: pred.confidence(),
            correct: pred.predicted_label() == q.label,
        })
        .collect();
    match p.sort.unwrap_or(SortKey::Confidence) {
        SortKey::Confidence => rows.sort_by(|a, b| a.confidence.total_cmp(&b.confidence)),
        SortKey::Id => rows.sort_by(|a, b| a.id.cmp(&b.id)),
    }
    if p.order == Some(SortOrder::Desc) {
        rows.reverse();
    }
    let total = rows.len();
    let offset = p.offset.unwrap_or(0).min(total);
    let limit = p.limit.unwrap_or(DEFAULT_QUERY_LIMIT);
    let items = rows.into_iter().skip(offset).take(limit).collect();
    Ok(Json(QueryPage {
        total,
        offset,
        limit,
        items,
    }))
}
