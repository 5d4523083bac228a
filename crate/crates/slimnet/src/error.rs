//! Error type shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value is out of range or inconsistent (bad rank,
    /// mismatched dims, invalid config value, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested operation is well-formed but does not apply to this
    /// layer (e.g. a separable split of a 1x1 kernel). Callers that
    /// enumerate candidates treat this as "skip", not as a failure.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// Malformed model manifest (JSON structure or field contents).
    #[error("manifest error{}: {msg}", fmt_node(.node))]
    Manifest { node: Option<String>, msg: String },

    /// Malformed weights blob; `offset` is the byte position of the problem.
    #[error("weights blob error at byte {offset}: {msg}")]
    Blob { offset: usize, msg: String },

    /// A node references a tensor that is not present in the weights blob.
    #[error("node `{node}` references missing tensor `{tensor}`")]
    DanglingTensor { node: String, tensor: String },

    /// The model violates a structural invariant; each entry names the
    /// offending node and the reason.
    #[error("model validation failed:\n{}", fmt_violations(.0))]
    Validation(Vec<Violation>),

    /// Graph-level failure (cycle, duplicate producer, unknown edge).
    #[error("graph error: {0}")]
    Graph(String),

    /// Numerical failure inside a decomposition (non-finite input,
    /// no convergence). Reports the matrix dims involved.
    #[error("numeric error in {rows}x{cols} matrix: {msg}")]
    Numeric { rows: usize, cols: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One structural problem found by model validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Node the problem was found on, if attributable to one.
    pub node: Option<String>,
    pub reason: String,
}

impl Violation {
    pub fn new(node: impl Into<String>, reason: impl Into<String>) -> Self {
        Violation { node: Some(node.into()), reason: reason.into() }
    }

    pub fn global(reason: impl Into<String>) -> Self {
        Violation { node: None, reason: reason.into() }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.node {
            Some(n) => write!(f, "node `{n}`: {}", self.reason),
            None => write!(f, "{}", self.reason),
        }
    }
}

fn fmt_node(node: &Option<String>) -> String {
    match node {
        Some(n) => format!(" in node `{n}`"),
        None => String::new(),
    }
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  - {x}")).collect::<Vec<_>>().join("\n")
}
