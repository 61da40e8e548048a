//! Cycle-approximate simulator of a speculatively executing out-of-order
//! core, with attack programs that use speculation side channels to find
//! mapped kernel pages.

pub mod attacks;
pub mod corpus;
pub mod isa;
pub mod memory;
pub mod oslayout;
pub mod pipeline;
pub mod uarch;
