//! Two-stage charging game between EV aggregators sharing a grid with
//! quadratic pricing.
//!
//! In the second stage, aggregators with fixed start slots choose per-slot
//! grid draws; the stage is a concave game solved by best-response
//! iteration ([`inner`]). Solving it for every start-time profile yields a
//! payoff tensor ([`tensor`]) over which the first-stage start-time game is
//! played in mixed strategies, under expected utility or Prelec-weighted
//! prospect theory ([`outer`]). [`metrics`] compares the result with
//! uncoordinated charging.

pub mod cost;
pub mod error;
pub mod inner;
pub mod metrics;
pub mod outer;
mod rng;
pub mod scenario;
pub mod tensor;

pub use error::{Error, Result};
pub use inner::{ChargingProfile, InnerOptions, SubgameSolution};
pub use outer::{BehaviorModel, MixedStrategy, ModelKind, OuterOptions, OuterSolution, PayoffTable};
pub use scenario::{GenerationConfig, Scenario};
pub use tensor::{PayoffTensor, StartProfile, TensorOptions};
