//! Dataset I/O, synthetic scenes, configuration and the experiment pipeline.

mod config;
mod io;
mod pipeline;
mod synth;

pub use config::{DataSource, DetectorKind, ExperimentConfig, KeyValues};
pub use io::{
    csv_to_string, encode_lidar_bin, encode_ply_ascii, load_cloud, load_lidar_bin, load_ply_ascii, parse_lidar_bin,
    parse_ply_ascii, read_csv, save_cloud, save_lidar_bin, save_ply_ascii, write_csv,
};
pub use pipeline::{
    detect_keypoints, evaluate, evaluate_layers, keypoint_rows, load_models, load_pair_index, load_pairs, run_pipeline,
    save_pair_index, write_metadata, write_report, KeypointRow, LayerRow, MatchingRow, MetricParameters, Models, RegistrationRow, RepeatabilityRow, Report, Summary, SummaryRow,
    MATCHING_CSV, METADATA_JSON, REGISTRATION_CSV, REPEATABILITY_CSV, SUMMARY_JSON,
};
pub use synth::{gen_scene, gen_synthetic_pair, gen_synthetic_pairs, SceneConfig};
