//! Experiment orchestration: declarative configs, a train -> attack ->
//! metrics -> report stage graph with config-hash resumability, and an
//! artifact manifest.

mod config;
mod report;
mod run;

pub use config::{
    preset_names, resolve_preset, AttackKind, AttackSpec, DatasetKind, DatasetSpec,
    ExperimentSpec, MetricsSpec, ModelRecipe, Preset, SPEC_VERSION,
};
pub use run::{
    atomic_write, run_experiment, ExperimentContext, Manifest, ManifestEntry, RunOptions,
    StageDepth, StageStatus,
};

impl ExperimentContext {
    pub(crate) fn record_public(
        &mut self,
        stage: &str,
        hash: &str,
        outputs: Vec<std::path::PathBuf>,
        status: StageStatus,
    ) -> crate::error::Result<()> {
        self.record_entry(stage, hash, outputs, status)
    }
}
