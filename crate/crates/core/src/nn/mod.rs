//! Networks of the pipeline and their shared machinery.

pub mod diffusion;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod pse;
pub mod spiformer;

/// The `1 × N` latent vector describing an image's global structure.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralRep<T = f32>(pub Vec<T>);

impl<T> StructuralRep<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}
