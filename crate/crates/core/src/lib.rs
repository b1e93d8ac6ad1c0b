//! Broadband 2D electromagnetic surrogate-solver toolkit.
//!
//! The crate has two halves that share a small set of domain types:
//!
//! * a ground-truth side — a frequency-domain Helmholtz solver with PML
//!   absorbing boundaries ([`fdfd`]), randomized photonic scene generators
//!   ([`scenes`]) and a dataset pipeline with a bit-exact binary format
//!   ([`dataset`]);
//! * a surrogate side — wavelength-conditioned wave priors ([`prior`]), a
//!   factorized spectral neural operator with hand-written reverse-mode
//!   gradients ([`model`]), a training loop ([`training`]) and evaluation /
//!   benchmarking utilities ([`eval`]).
//!
//! All randomness is seed-deterministic and all parallel reductions use a
//! fixed chunking so repeated runs on the same machine produce bit-identical
//! results.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod fdfd;
pub mod grid;
pub mod model;
pub mod pgm;
pub mod prior;
pub mod scenes;
pub mod training;

pub use error::CoreError;
pub use grid::{ComplexField, DesignBox, Grid2D, PermittivityMap};
pub use prior::WavePrior;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;

#[cfg(test)]
pub(crate) mod test_util {
    //! Small synthetic fixtures shared by module tests. Targets come from a
    //! teacher model, so training problems are learnable by construction and
    //! no solver runs are needed.

    use crate::dataset::{Dataset, Sample};
    use crate::model::{Activation, Conditioning, Model, ModelConfig};
    use crate::scenes::SceneKind;
    use crate::{DesignBox, Grid2D, PermittivityMap};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn grid16() -> Grid2D {
        Grid2D::square(16, 25e-9).unwrap()
    }

    pub fn teacher_cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            layers: 2,
            modes_v: 4,
            modes_h: 4,
            groups: 2,
            conditioning: Conditioning::Wime,
            activation: Activation::Gelu,
            lift_width: 8,
            seed: 99,
        }
    }

    pub fn teacher_samples(
        teacher: &Model<f64>,
        lambda: f64,
        n: usize,
        seed0: u64,
    ) -> Vec<Sample> {
        let grid = teacher.grid;
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed0 + i as u64);
                let mut eps = Array2::from_elem((grid.nx, grid.nz), 1.0);
                for v in eps.iter_mut() {
                    if rng.random_range(0.0..1.0) < 0.4 {
                        *v = 4.0;
                    }
                }
                let map = PermittivityMap::new(
                    grid,
                    eps,
                    DesignBox::new(4, 12, 4, 12).unwrap(),
                    (1.0, 4.0),
                )
                .unwrap();
                let field = teacher.forward_field(&map, lambda).unwrap();
                Sample {
                    lambda,
                    scene_seed: seed0 + i as u64,
                    eps: map,
                    field,
                }
            })
            .collect()
    }

    pub fn dataset_from(grid: Grid2D, samples: Vec<Sample>) -> Dataset {
        Dataset {
            grid,
            scene_kind: SceneKind::Metalens,
            samples,
            manifest: None,
        }
    }

    /// (train at {500, 600} nm, val at {550} nm, config).
    pub fn teacher_datasets() -> (Dataset, Dataset, ModelConfig) {
        let grid = grid16();
        let cfg = teacher_cfg();
        let teacher: Model<f64> = Model::new(cfg, grid, 4.0).unwrap();
        let mut train_samples = teacher_samples(&teacher, 500e-9, 12, 0);
        train_samples.extend(teacher_samples(&teacher, 600e-9, 12, 100));
        let val_samples = teacher_samples(&teacher, 550e-9, 6, 200);
        (
            dataset_from(grid, train_samples),
            dataset_from(grid, val_samples),
            cfg,
        )
    }
}
