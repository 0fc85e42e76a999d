//! Scene files, synthetic scene generation and dataset access for training.

pub mod camfile;
pub mod pfm;
pub mod scene;
pub mod synthetic;

pub use camfile::{CameraRecord, PairEntry, ScenePairing};
pub use scene::{load_image, load_mvs_scene, save_image, write_mvs_scene, MvsScene, SceneLayout};
