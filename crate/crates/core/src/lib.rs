pub mod campaign;
pub mod checker;
pub mod comm;
pub mod graph;
pub mod lock;
pub mod model;
pub mod replica;
pub mod sim;
pub mod trace;
