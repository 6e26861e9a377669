use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dataset: {0}")]
    Dataset(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("training: {0}")]
    Training(String),

    #[error("fairness: {0}")]
    Fairness(String),

    #[error("harness: {0}")]
    Harness(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
