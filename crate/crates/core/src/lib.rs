pub mod fabric;
pub mod hetsched;
pub mod infomodel;
pub mod keyspace;
pub mod netsim;
pub mod ota;
pub mod scenario;
pub mod trace;
pub mod twinlcm;
pub mod valuecodec;
