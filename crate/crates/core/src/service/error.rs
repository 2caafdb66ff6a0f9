use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataset::DatasetError;
use crate::eval::EvalError;
use crate::gateway::GatewayError;
use crate::knowledge::KnowledgeError;
use crate::retrieval::RetrievalError;
use crate::synth::SynthError;
use crate::workflow::WorkflowError;

/// Uniform error envelope of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Map<String, serde_json::Value>>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.into(), message: message.into(), details: None }
    }

    pub fn with_detail(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.details.get_or_insert_with(Default::default).insert(key.into(), value.into());
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found: {id}")).with_detail("id", id)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<KnowledgeError> for ApiError {
    fn from(e: KnowledgeError) -> Self {
        use KnowledgeError::*;
        let (status, code) = match &e {
            UnsupportedFormat(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unsupported_format"),
            EmptyDocument(_) => (StatusCode::UNPROCESSABLE_ENTITY, "empty_document"),
            ParseFailure { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "parse_failure"),
            DuplicateDocument(_) => (StatusCode::CONFLICT, "duplicate_document"),
            InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_config"),
            NoChunks(_) => (StatusCode::CONFLICT, "no_chunks"),
            EmbedderUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "embedder_unavailable"),
            DimensionMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
            PartialBuildAborted { .. } => (StatusCode::SERVICE_UNAVAILABLE, "partial_build_aborted"),
            ZeroVector(_) => (StatusCode::UNPROCESSABLE_ENTITY, "zero_vector"),
            IndexNotReady(_) => (StatusCode::CONFLICT, "index_not_ready"),
            NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            AlreadyExists(_) => (StatusCode::CONFLICT, "already_exists"),
            CorruptSnapshot(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_snapshot"),
            Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io_error"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        use GatewayError::*;
        let (status, code) = match &e {
            ModelNotFound(_) => (StatusCode::NOT_FOUND, "model_not_found"),
            WrongRole { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "wrong_model_role"),
            DuplicateModel(_) => (StatusCode::CONFLICT, "duplicate_model"),
            InvalidSpec { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_model_spec"),
            EndpointError { .. } => (StatusCode::SERVICE_UNAVAILABLE, "endpoint_error"),
            DimensionMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
            ContextOverflow { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "context_overflow"),
            InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            Registry { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "registry_error"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Gateway(g) => g.into(),
            RetrievalError::IndexNotReady(_) => Self::new(StatusCode::CONFLICT, "index_not_ready", e.to_string()),
            RetrievalError::EmbedderUnavailable(_) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "embedder_unavailable", e.to_string())
            }
            RetrievalError::InvalidK(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_k", e.to_string()),
            RetrievalError::DimensionMismatch { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch", e.to_string())
            }
        }
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::Gateway(g) => g.into(),
            WorkflowError::Retrieval(r) => r.into(),
            other => {
                let status = match other {
                    WorkflowError::InvalidConfig(_) => StatusCode::BAD_REQUEST,
                    WorkflowError::IndexNotReady(_) => StatusCode::CONFLICT,
                    WorkflowError::MalformedVerdict(_) | WorkflowError::Template(_) => StatusCode::UNPROCESSABLE_ENTITY,
                    WorkflowError::TraceNotFound(_) => StatusCode::NOT_FOUND,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                let mut err = Self::new(status, other.code(), other.to_string());
                if let WorkflowError::MalformedVerdict(i) = other {
                    err = err.with_detail("iteration", i);
                }
                err
            }
        }
    }
}

impl From<SynthError> for ApiError {
    fn from(e: SynthError) -> Self {
        use SynthError::*;
        let (status, code) = match &e {
            GeneratorUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "generator_unavailable"),
            EmptyGeneration { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "empty_generation"),
            NoGoldAnswer(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_gold_answer"),
            InsufficientCorpus(_) => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_corpus"),
            IndexNotReady(_) => (StatusCode::CONFLICT, "index_not_ready"),
            InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_config"),
            MixedRecordKinds(_) => (StatusCode::UNPROCESSABLE_ENTITY, "mixed_record_kinds"),
            UnresolvedChunks(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unresolved_chunks"),
            Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_error"),
            Template(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_template"),
            Retrieval(_) => (StatusCode::SERVICE_UNAVAILABLE, "retrieval_failed"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let (status, code) = match &e {
            EvalError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            EvalError::IndexNotReady(_) => (StatusCode::CONFLICT, "index_not_ready"),
            EvalError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            EvalError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_error"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        match &e {
            DatasetError::Io { .. } => Self::new(StatusCode::BAD_REQUEST, "dataset_unreadable", e.to_string()),
            DatasetError::Invalid(issues) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_dataset", e.to_string())
                .with_detail("issues", issues.iter().map(|i| i.to_string()).collect::<Vec<_>>()),
        }
    }
}

/// `Json` extractor whose rejections use the error envelope.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(JsonRejection::JsonDataError(e)) => {
                Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text()))
            }
            Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.body_text())),
        }
    }
}
