pub mod lddmm;
pub mod logbseg;
pub mod mesh;
pub mod metrics;
pub mod phantom;
pub mod volume;
