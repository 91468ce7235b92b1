//! Data-driven intradomain traffic engineering: demand generation, routing
//! strategies and their induced flows, LP congestion oracles, softmin routing,
//! demand prediction and reinforcement-learned routing.

pub mod error;
pub mod linalg;
pub mod lp;
pub mod net;
pub mod oracle;
pub mod predictor;
pub mod rl;
pub mod rng;
pub mod routing;
pub mod traffic;

pub use error::{Error, Result};
pub use net::{load_topology, save_topology, shortest_path_distances, Edge, EdgeWeights, Network};
pub use routing::{
    induce_flow, max_link_utilization, softmin_ratios, strategy_from_logits, DestStrategy, FlowAssignment,
    GeneralStrategy, Strategy,
};
pub use traffic::{gen_sequence, DemandMatrix, DmSequence, SequenceKind, SequenceSpec};
