//! Emergency-event risk modelling: event ingestion, station service areas,
//! period panels, NB2 count regression, feature importance, evaluation,
//! risk tiers, and a synthetic scenario generator.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod classify;
pub mod describe;
pub mod evaluate;
pub mod importance;
pub mod ingest;
pub(crate) mod linalg;
pub mod nb2;
pub mod panel;
pub mod scalar;
pub mod seed;
pub mod simulate;
pub mod spatial;
pub mod special;

pub use scalar::Scalar;

pub type Point = spatial::Point<f64>;
pub type Polygon = spatial::Polygon<f64>;
pub type Region = spatial::Region<f64>;
pub type VoronoiPartition = spatial::VoronoiPartition<f64>;
pub type OverlapMatrix = spatial::OverlapMatrix<f64>;
pub type CountData = nb2::CountData<f64>;
pub type Nb2Model = nb2::Nb2Model<f64>;
pub type DescriptiveRow = describe::DescriptiveRow<f64>;
pub type CorrelationMatrix = describe::CorrelationMatrix<f64>;
pub type MetricReport = evaluate::MetricReport<f64>;
pub type RiskClassification = classify::RiskClassification<f64>;
pub type ImportanceReport = importance::ImportanceReport<f64>;
