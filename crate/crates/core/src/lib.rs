pub mod checkpoint;
pub mod config;
pub mod coords;
pub mod data;
pub mod discriminator;
pub mod editing;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod image_io;
pub mod latent;
pub mod local;
pub mod logistic;
pub mod mapping;
pub mod nn;
pub mod optim;
pub mod render;
pub mod schema;
pub mod service;
pub mod toy;
pub mod train;
pub mod trainer;

pub use error::{Error, Result};
