//! One module per subcommand family.

pub mod bench;
pub mod ingest;
pub mod maskgen;
pub mod train;
