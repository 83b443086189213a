use ndarray::{LinalgScalar, NdFloat};

/// Scalar types the engine runs on.
///
/// `f32` is the production precision; `f64` is used by gradient-check tests
/// so that central differences resolve well below the 1e-3 acceptance bound.
pub trait Real: NdFloat + LinalgScalar + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
