pub mod raster;
pub mod detector;
pub mod geometry;
pub mod cfog;
pub mod orientation;
pub mod matcher;
pub mod synthetic;
pub mod pipeline;
