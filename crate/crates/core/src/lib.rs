//! Hierarchical Thompson sampling for contextual bandits whose action
//! parameters are generated from several shared latent parameters.

pub mod agents;
pub mod checks;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{GaussianDist, SpdMatrix};
pub use model::{ContextSpec, EnvDraw, HierModelSpec, MixingStructure};
pub use posterior::{HistoryRecord, SufficientStats};
pub use agents::{Agent, AgentKind};
pub use sim::{AggregateCurve, ProblemSource, RegretTrace};
