//! JSON-over-HTTP API over one immutable model snapshot.
//!
//! Every response names the snapshot it was computed from. A request whose
//! `x-snapshot-hash` header names a different snapshot is refused with 409
//! so that clients never mix numbers from two models.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use artiscope::corpus::{Corpus, Dataset, Instance};
use artiscope::feature_attr::{saliency, select_tokens, End, FeatureMethod, RankedToken, TokenSaliency};
use artiscope::instance_attr::{InstanceAttributor, InstanceMethod};
use artiscope::model::{ModelSnapshot, Prediction};
use artiscope::pipeline::{aggregate_summary, FlipSummary, RunConfig};
use artiscope::tfa::{heatmap, HeatmapParams, HeatmapPayload};
use artiscope::verify::{edit_and_compare, mask_flip, EditComparison, MaskTarget, TextInput};

use crate::error::{CliError, CliResult};

pub const SNAPSHOT_HEADER: &str = "x-snapshot-hash";

/// Id given to the instance built from a request body.
const QUERY_ID: &str = "query";

/// Read-only state shared by every request.
pub struct AppState {
    config: RunConfig,
    model: &'static ModelSnapshot,
    attributor: InstanceAttributor<'static>,
    hash: String,
    class_names: Vec<String>,
    /// Instances masked by `/verify/mask`: validation when configured,
    /// else train.
    verify_set: &'static Dataset,
    aggregate: Option<Value>,
}

impl AppState {
    /// Precompute the Hessian factorization and, when a validation corpus
    /// is given, the aggregate report. The model and encoded corpora live
    /// for the rest of the process.
    pub fn new(
        config: RunConfig,
        model: ModelSnapshot,
        train: &Corpus,
        validation: Option<&Corpus>,
    ) -> CliResult<Arc<Self>> {
        let model: &'static ModelSnapshot = Box::leak(Box::new(model));
        let train_ds: &'static Dataset = Box::leak(Box::new(train.encode(&model.vocab)));
        let attributor = InstanceAttributor::new(model, train_ds)?;
        let (verify_set, aggregate) = match validation {
            Some(v) => {
                let report = aggregate_summary(&config, model, train, v)?;
                let value = serde_json::to_value(&report).map_err(artiscope::Error::from)?;
                let ds: &'static Dataset = Box::leak(Box::new(v.encode(&model.vocab)));
                (ds, Some(value))
            }
            None => (train_ds, None),
        };
        Ok(Arc::new(Self {
            hash: model.hash(),
            class_names: train.class_names.clone(),
            config,
            model,
            attributor,
            verify_set,
            aggregate,
        }))
    }

    pub fn snapshot_hash(&self) -> &str {
        &self.hash
    }

    fn encode(&self, text: &str, text_b: Option<&str>) -> Result<Instance, ApiError> {
        let inst = self.model.encode_text(QUERY_ID, text, text_b);
        if inst.model_input().is_empty() {
            return Err(ApiError::bad_request("text has no tokens"));
        }
        Ok(inst)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
    id: Option<String>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request".into(),
            message: message.into(),
            id: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "not_found".into(),
            message: message.into(),
            id: None,
        }
    }

    /// Log the detail under a fresh id and show the client only the id.
    fn internal(detail: &dyn std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        eprintln!("{}", json!({ "level": "error", "id": id, "detail": detail.to_string() }));
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal".into(),
            message: "internal error".into(),
            id: Some(id),
        }
    }
}

impl From<artiscope::Error> for ApiError {
    fn from(e: artiscope::Error) -> Self {
        use artiscope::Error as E;
        match e {
            E::InvalidParameter(_) | E::Unpaired(_) | E::EmptyCorpus | E::LabelOutOfRange { .. } => Self {
                status: StatusCode::BAD_REQUEST,
                kind: e.kind().into(),
                message: e.to_string(),
                id: None,
            },
            other => Self::internal(&other),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "kind": self.kind, "message": self.message });
        if let Some(id) = self.id {
            body["id"] = json!(id);
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

/// `Json` whose rejections are 400s in the API's error format.
#[derive(FromRequest)]
#[from_request(via(Json), rejection(ApiError))]
struct Body<T>(T);

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Run attribution work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError::internal(&e)),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    text: String,
    text_b: Option<String>,
}

#[derive(Serialize)]
struct PredictResponse {
    snapshot_hash: String,
    class: usize,
    class_name: String,
    probabilities: Vec<f64>,
    tokens: Vec<String>,
}

async fn predict(State(s): State<Arc<AppState>>, Body(req): Body<PredictRequest>) -> ApiResult<PredictResponse> {
    blocking(move || {
        let z = s.encode(&req.text, req.text_b.as_deref())?;
        let p = s.model.predict_class(&z)?;
        Ok(PredictResponse {
            snapshot_hash: s.hash.clone(),
            class_name: s.class_names[p.class].clone(),
            class: p.class,
            probabilities: p.probabilities,
            tokens: s.model.vocab.decode(&z.model_input()),
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRequest {
    text: String,
    text_b: Option<String>,
    #[serde(default = "default_feature_method")]
    method: FeatureMethod,
    k: Option<usize>,
}

fn default_feature_method() -> FeatureMethod {
    FeatureMethod::IG
}

#[derive(Serialize)]
struct FeatureResponse {
    snapshot_hash: String,
    prediction: Prediction,
    saliency: TokenSaliency,
    top: Vec<RankedToken>,
}

async fn attribute_feature(
    State(s): State<Arc<AppState>>,
    Body(req): Body<FeatureRequest>,
) -> ApiResult<FeatureResponse> {
    blocking(move || {
        let a = &s.config.attribution;
        let z = s.encode(&req.text, req.text_b.as_deref())?;
        let prediction = s.model.predict_class(&z)?;
        let sal = saliency(s.model, &z, prediction.class, req.method, &a.saliency_options())?;
        let k = req.k.unwrap_or(a.k);
        let top = select_tokens(&sal.tokens, &sal.token_ids, &sal.scores, k, &a.exclusion_set(), a.rank_mode, End::Highest);
        Ok(FeatureResponse {
            snapshot_hash: s.hash.clone(),
            prediction,
            saliency: sal,
            top,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRequest {
    text: String,
    text_b: Option<String>,
    #[serde(default = "default_instance_method")]
    method: InstanceMethod,
    #[serde(default = "default_top_k")]
    top_k: usize,
}

fn default_instance_method() -> InstanceMethod {
    InstanceMethod::RIF
}

fn default_top_k() -> usize {
    10
}

#[derive(Serialize)]
struct RankedTrain {
    train_id: String,
    score: f64,
    label: usize,
    text: String,
}

#[derive(Serialize)]
struct InstanceResponse {
    snapshot_hash: String,
    prediction: Prediction,
    method: InstanceMethod,
    n_train: usize,
    /// Most influential first; `top_k = 0` returns the full ranking.
    entries: Vec<RankedTrain>,
}

async fn attribute_instance(
    State(s): State<Arc<AppState>>,
    Body(req): Body<InstanceRequest>,
) -> ApiResult<InstanceResponse> {
    blocking(move || {
        let z = s.encode(&req.text, req.text_b.as_deref())?;
        let prediction = s.model.predict_class(&z)?;
        let (order, scores) = s.attributor.ranked_indices(&z.with_label(prediction.class), req.method)?;
        let n = if req.top_k == 0 { order.len() } else { req.top_k.min(order.len()) };
        let train = s.attributor.train;
        let entries = order[..n]
            .iter()
            .map(|&i| RankedTrain {
                train_id: train.instances[i].id.clone(),
                score: scores[i],
                label: train.instances[i].label,
                text: train.instances[i].raw_text.clone(),
            })
            .collect();
        Ok(InstanceResponse {
            snapshot_hash: s.hash.clone(),
            prediction,
            method: req.method,
            n_train: train.len(),
            entries,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TfaRequest {
    text: String,
    text_b: Option<String>,
    instance_method: Option<InstanceMethod>,
    feature_method: Option<FeatureMethod>,
    k: Option<usize>,
}

/// Answers with a bare heatmap payload, which carries the snapshot hash.
async fn attribute_tfa(State(s): State<Arc<AppState>>, Body(req): Body<TfaRequest>) -> ApiResult<HeatmapPayload> {
    blocking(move || {
        let a = &s.config.attribution;
        let z = s.encode(&req.text, req.text_b.as_deref())?;
        let params = HeatmapParams {
            steps: a.steps,
            baseline: a.ig_baseline,
            ..HeatmapParams::new(
                req.instance_method.unwrap_or(a.instance_methods[0]),
                req.feature_method.unwrap_or(a.feature_methods[0]),
                req.k.unwrap_or(a.heatmap_k),
            )
        };
        Ok(heatmap(&s.attributor, &z, &params)?)
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIfRequest {
    original: String,
    edited: String,
    original_b: Option<String>,
    edited_b: Option<String>,
    #[serde(default = "default_feature_method")]
    method: FeatureMethod,
}

#[derive(Serialize)]
struct WhatIfResponse {
    snapshot_hash: String,
    #[serde(flatten)]
    comparison: EditComparison,
}

async fn whatif(State(s): State<Arc<AppState>>, Body(req): Body<WhatIfRequest>) -> ApiResult<WhatIfResponse> {
    blocking(move || {
        let input = |t: String, b: Option<String>| match b {
            Some(b) => TextInput::paired(t, b),
            None => TextInput::new(t),
        };
        let original = input(req.original, req.original_b);
        s.encode(&original.text, original.text_b.as_deref())?;
        let edited = input(req.edited, req.edited_b);
        let options = s.config.attribution.saliency_options();
        let comparison = edit_and_compare(s.model, &original, &edited, req.method, &options)?;
        Ok(WhatIfResponse {
            snapshot_hash: s.hash.clone(),
            comparison,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRequest {
    token: Option<String>,
    #[serde(default)]
    random: bool,
    seed: Option<u64>,
    trials: Option<usize>,
}

#[derive(Serialize)]
struct MaskResponse {
    snapshot_hash: String,
    target: MaskTarget,
    split: String,
    #[serde(flatten)]
    summary: FlipSummary,
}

async fn verify_mask(State(s): State<Arc<AppState>>, Body(req): Body<MaskRequest>) -> ApiResult<MaskResponse> {
    blocking(move || {
        let a = &s.config.attribution;
        let target = match (req.token, req.random) {
            (Some(token), false) => MaskTarget::Token { token },
            (None, true) => MaskTarget::Random {
                seed: req.seed.unwrap_or(a.seed),
                trials: req.trials.unwrap_or(a.random_trials),
            },
            _ => return Err(ApiError::bad_request("give exactly one of `token` or `random: true`")),
        };
        let report = mask_flip(s.model, s.verify_set, &target)?;
        Ok(MaskResponse {
            snapshot_hash: s.hash.clone(),
            split: format!("{:?}", s.verify_set.role).to_lowercase(),
            summary: FlipSummary::from(&report),
            target,
        })
    })
    .await
}

async fn report_aggregate(State(s): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    s.aggregate
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("no aggregate report: the service was started without a validation set"))
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "snapshot_hash": s.hash,
        "class_names": s.class_names,
        "vocabulary_size": s.model.vocab.len(),
        "n_train": s.attributor.train.len(),
    }))
}

async fn unknown_route(method: Method, uri: axum::http::Uri) -> ApiError {
    ApiError::not_found(format!("no route for {method} {}", uri.path()))
}

async fn snapshot_guard(State(s): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(v) = request.headers().get(SNAPSHOT_HEADER) {
        if v.as_bytes() != s.hash.as_bytes() {
            let body = json!({ "error": {
                "kind": "snapshot_mismatch",
                "message": format!("this service serves snapshot {}", s.hash),
            }});
            return (StatusCode::CONFLICT, Json(body)).into_response();
        }
    }
    let mut response = next.run(request).await;
    if let Ok(v) = HeaderValue::from_str(&s.hash) {
        response.headers_mut().insert(SNAPSHOT_HEADER, v);
    }
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any)
        .expose_headers([axum::http::HeaderName::from_static(SNAPSHOT_HEADER)]);
    Router::new()
        .route("/predict", post(predict))
        .route("/attribute/feature", post(attribute_feature))
        .route("/attribute/instance", post(attribute_instance))
        .route("/attribute/tfa", post(attribute_tfa))
        .route("/whatif", post(whatif))
        .route("/verify/mask", post(verify_mask))
        .route("/report/aggregate", get(report_aggregate))
        .route("/health", get(health))
        .fallback(unknown_route)
        .layer(middleware::from_fn_with_state(state.clone(), snapshot_guard))
        .layer(cors)
        .with_state(state)
}

/// Serve until interrupted.
pub fn run(state: Arc<AppState>, host: &str, port: u16) -> CliResult<()> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::io(format!("{host}:{port}"), e))?;
        let addr: SocketAddr = listener.local_addr().map_err(|e| CliError::io("listener", e))?;
        eprintln!("{}", json!({ "level": "info", "listening": addr.to_string(), "snapshot_hash": state.hash }));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::io("server", e))
    })
}
