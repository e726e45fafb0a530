//! One module per subcommand; each exposes an args struct and `run`.

pub mod ensemble;
pub mod eval;
pub mod gen;
pub mod gradcheck;
pub mod inspect;
pub mod train;
