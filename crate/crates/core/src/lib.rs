pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod embed;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod rl;
pub mod seeding;
pub mod separator;
pub mod special;
pub mod synthdata;
pub mod spectral;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/separator.md")]
    mod separator {}
    #[doc = include_str!("../../../book/src/reward.md")]
    mod reward {}
    #[doc = include_str!("../../../book/src/rl.md")]
    mod rl {}
    #[doc = include_str!("../../../book/src/align.md")]
    mod align {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
