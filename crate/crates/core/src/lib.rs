pub mod bail;
pub mod bnb;
pub mod branching;
pub mod eval;
pub mod gcnn;
pub mod lp;
pub mod milp;
pub mod observation;
pub mod pipeline;
