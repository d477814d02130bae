//! Cluster-residual encodings of local descriptor sets and training of the
//! soft-assignment variant.

mod netvlad;
mod train;
mod triplet;
mod vlad;

pub use netvlad::{netvlad_encode, netvlad_init, NetVladParams};
pub use train::{entity_forward, gradient_rel_error, netvlad_train, triplet_objective, TrainTrace, TripletConfig};
pub use triplet::{mine_semi_hard, triplet_loss, Triplet};
pub use vlad::{pooled_sum, vlad_encode, Encoder, VladVector};
