//! A formal-library wiki engine.
//!
//! Articles written in the bundled MiniLib language are stored in
//! content-addressed repositories, verified incrementally using item-level
//! dependency information, sandboxed in copy-on-write volumes while a change
//! is being checked, guarded by gitolite-style access rules and mirrored to
//! peer servers.

pub mod corpus;
pub mod cowstore;
pub mod depgraph;
pub mod minilib;
pub mod mirror;
pub mod orchestrator;
pub mod policy;
pub mod render;
pub mod vcstore;
pub mod wiki;
