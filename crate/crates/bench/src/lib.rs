//! Shared fixtures for the criterion benches: a generated two-modal dataset
//! plus untrained desk-scale models (benchmarks measure kernel cost, not
//! model quality).

use m3jepa_core::config::{preset, RunConfig};
use m3jepa_core::moe::{Model, PredictorKind};
use m3jepa_core::synth::{generate, Dataset};

pub struct Fixture {
    pub run: RunConfig,
    pub ds: Dataset,
    pub moe: Model,
    pub mlp: Model,
}

pub fn fixture() -> Fixture {
    let run = preset("two-modal-noisy").expect("shipped preset");
    let registry = run.validate().expect("preset validates");
    let (ds, _) = generate(&run.synth, &registry).expect("generation succeeds");
    let build = |kind: PredictorKind| {
        Model::init(kind, &run.moe, &registry, &run.tasks, &[], run.train.seed)
            .expect("model init")
    };
    let moe = build(PredictorKind::Moe);
    let mlp = build(PredictorKind::Mlp);
    Fixture { run, ds, moe, mlp }
}
