use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("field does not belong to this grid")]
    GridMismatch,
    #[error("kernel for {nodes} interior nodes exceeds the pair budget {budget}")]
    Budget { nodes: usize, budget: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("zero field")]
    ZeroField,
    #[error("resampling leaves the grid: {0}")]
    OutOfGrid(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
