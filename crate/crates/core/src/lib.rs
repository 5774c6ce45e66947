pub mod cli;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod router;
pub mod schedule;
pub mod specialization;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/routing.md")]
    struct Routing;
    #[doc = include_str!("../../../book/src/affinity.md")]
    struct Affinity;
    #[doc = include_str!("../../../book/src/adaptive.md")]
    struct Adaptive;
    #[doc = include_str!("../../../book/src/phases.md")]
    struct Phases;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
