pub mod autodiff;
pub mod nets;
pub mod pde;
pub mod sampling;
pub mod optim;
pub mod refsolve;
pub mod harness;
