//! Ingestion, cleaning, scaling, lag windows, splitting and synthetic data.

mod clean;
mod ingest;
mod lag;
mod prepared;
mod scaler;
mod split;
pub mod synth;

pub use clean::{aggregate_colocated, drop_low_concentrations};
pub use ingest::{
    ingest_covariate_grid, ingest_stations, parse_covariate_grid, parse_stations, write_stations, CovariateTable,
    IngestReport, COVARIATE_HEX_RESOLUTION, GRID_HEADER, STATION_HEADER,
};
pub use lag::{idw2_estimate, idw2_interpolate, IdwPoint, LagBuilder, LagSource, LagVector, IDW_MAX_NEIGHBORS, IDW_RADII_KM};
pub use prepared::{
    build_lags, fit_scalers, Manifest, PreparedDataset, SplitKind, LAND_COVER, LATLON, MANIFEST_FILE, PM25,
    RECORDS_FILE, SCALERS_FILE, TIME,
};
pub use scaler::{
    cap_outliers, fit_categorical, fit_minmax, fit_scaler, percentile_caps, quantile, write_atomic, Caps, ScalerKind,
    ScalerParams, ScalerSet, CAP_PERCENTILES, LOG_BASE, LOG_FLOOR,
};
pub use split::{split_by_site, split_dataset, MIN_SPLIT_RECORDS};
pub use synth::{generate_synthetic, BBox, SiteLayout, SyntheticDataset, SyntheticField, SyntheticFieldSpec};
