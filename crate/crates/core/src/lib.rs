//! Learning to act from correct demonstrations over finite model classes.
//!
//! A model class lists, for each hypothesis, the set of correct actions at
//! every context. Learners see contexts and demonstrated actions but are
//! never told whether their own predictions were correct.

pub mod batch;
pub mod exact;
pub mod model;
pub mod passk;
pub mod policy;
pub mod weights;
pub mod instances;
pub mod mle;
pub mod sim;
pub mod experiments;
