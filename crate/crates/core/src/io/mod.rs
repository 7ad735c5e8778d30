//! File formats: JSON detection dumps and ground truth in, CSV reports out.

pub mod dump;
pub mod ground_truth;
pub mod tables;

pub use dump::{dump_files, read_dump_dir, DetectionDump, SCHEMA_VERSION};
pub use ground_truth::GroundTruthFile;
pub use tables::{
    certainty_report_csv, certainty_sets_csv, class_tally_csv, consistency_csv, evaluation_csv, learning_curve_csv,
    read_certainty_report, write_text,
};
