use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("tensor size overflows usize for shape {rows}x{cols}x{channels}")]
    SizeOverflow {
        rows: usize,
        cols: usize,
        channels: usize,
    },

    #[error("window at ({i}, {j}) of size {h}x{w} exceeds tensor of {rows}x{cols}")]
    WindowOutOfBounds {
        i: usize,
        j: usize,
        h: usize,
        w: usize,
        rows: usize,
        cols: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative input value {value} at ({i}, {j}, {k})")]
    NegativeInput { i: usize, j: usize, k: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("kernels {0:?} are all zero after clipping; rescaling is undefined")]
    DegenerateKernels(Vec<usize>),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("displacement ({row}, {col}) does not fit in a {kernel_h}x{kernel_w} kernel")]
    DisplacementOutOfKernel {
        row: i32,
        col: i32,
        kernel_h: usize,
        kernel_w: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("network topology: {0}")]
    Topology(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),
}
