//! Shared fixtures for the benchmarks.

use routekt_core::data::{preprocess, LoadReport, LoadedDataset, PreprocessConfig};
use routekt_core::relevance::RouteTable;
use routekt_core::synth::{generate, SynthSpec};
use routekt_core::train::PreparedData;

/// The default synthetic dataset, preprocessed.
pub fn synthetic(students: usize) -> (PreparedData, RouteTable) {
    let spec = SynthSpec {
        students,
        ..Default::default()
    };
    let ds = generate(&spec).expect("valid spec");
    let (routes, hierarchy) = RouteTable::from_paths(&ds.routes).expect("generated routes");
    let loaded = LoadedDataset {
        students: ds.students,
        routes: routes.clone(),
        hierarchy,
        report: LoadReport::default(),
    };
    let p = preprocess(&loaded, PreprocessConfig::default()).expect("preprocess");
    (PreparedData::from_dataset(&p, &routes), routes)
}
