use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("singular intrinsics matrix")]
    SingularIntrinsics,
    #[error("invalid camera pose: {0}")]
    InvalidPose(&'static str),
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty mask: no valid pixels to evaluate")]
    EmptyMask,
    #[error("no co-visible pixels between views")]
    NoCovisiblePixels,
    #[error("empty correspondence set")]
    EmptyCorrespondences,
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
}
