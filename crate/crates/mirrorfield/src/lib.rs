//! Single-view novel view synthesis for mirror-symmetric scenes.
//!
//! A conditioning image is encoded into a global latent code and a dense
//! feature volume. A hypernetwork turns the code into the weights of a small
//! radiance field, which is additionally fed pixel-aligned features sampled
//! at each query point's projection and at its mirror image's projection.
//! Volume rendering integrates field samples into pixels.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diff;
pub mod encoder;
pub mod field;
pub mod geometry;
pub mod hypernet;
pub mod img;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod seeds;
pub mod synthdata;
pub mod trainer;
