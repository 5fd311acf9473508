pub mod autocorrelation;
pub mod backbone;
pub mod checks;
pub mod checkpoint;
pub mod data;
pub mod decomposition;
pub mod ensemble;
pub mod model;
pub mod optim;
pub mod slow;
pub mod stats;
pub mod tensor;
pub mod training;
pub mod urt;
