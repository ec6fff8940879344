//! Pilot-job workflow management: a persistent task store, a DAG engine, a
//! pilot launcher, a batch-job packing service and run analytics.

pub mod analytics;
pub mod clock;
pub mod dag;
pub mod launcher;
pub mod model;
pub mod platform;
pub mod project;
pub mod service;
pub mod store;
