use thiserror::Error;
use uniqa_tensor::TensorError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input must be a 3-channel CHW image, got dims {dims:?}")]
    NotAnImage { dims: Vec<usize> },
    #[error("input {h}x{w} is below the 16x16 pooling floor")]
    InputTooSmall { h: usize, w: usize },
    #[error("fusion kind {0} requires an external reference input")]
    MissingReference(&'static str),
    #[error("no semantic backbone attached; attach one before scoring")]
    MissingBackbone,
    #[error("unknown fusion kind `{0}`")]
    UnknownFusionKind(String),
}
