//! On-disk formats: binary tensor dumps, matching-tensor files, model
//! checkpoints, run files, manifests/annotations, CSV maps, and metric
//! reports.

pub mod checkpoint;
pub mod manifest;
pub mod mapcsv;
pub mod ndt;
pub mod report;
pub mod runfile;
pub mod tensorfile;
