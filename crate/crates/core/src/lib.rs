pub mod appearance;
pub mod cascade;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod hog;
pub mod image;
pub mod io;
pub mod linalg;
pub mod model;
pub mod shape;
pub mod subspace;
pub mod synth;
pub mod tracker;

pub use appearance::{AppearanceModel, PatchExpert, ResponseMap, ScoredImage};
pub use cascade::{AdaptiveStage, CascadeStage, PerturbationModel};
pub use error::{Error, Result};
pub use geometry::{Interocular, Shape, SimilarityTransform};
pub use hog::HogLayout;
pub use image::ImagePlane;
pub use shape::ShapeModel;
pub use subspace::{pca_fit, skl_update, ObservationBatch, PcaSubspace, RankRule};
pub use evaluator::{EvaluatorNet, Label, Wiring};
pub use io::{AnnotationFile, RunConfig};
pub use model::{train_models, ModelSet, TrainConfig, TrainingReport};
pub use synth::SynthConfig;
pub use tracker::{AdaptMode, AdaptReport, FrameResult, InitBox, SharedModels, Status, Tracker, TrackerConfig, Verdict};
