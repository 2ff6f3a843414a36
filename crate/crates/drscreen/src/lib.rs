//! File formats, HTTP service and command line for the screening pipeline.
//! The domain logic lives in `drscreen_core`.

pub mod cli;
pub mod http_backend;
pub mod io;
pub mod report;
pub mod service;
pub mod store;

use drscreen_core::aggregation::{Experiment, ScenarioSpec};
use drscreen_core::fairness::PairGroupSpec;

/// A named experiment (`experiment-5`, `exp5:ACR`, `5`) or an explicit
/// scenario (`scheme=RDR,unit=image,proj=A`). Experiments carry their group
/// comparison.
pub fn select_scenario(s: &str) -> Result<(ScenarioSpec, Option<PairGroupSpec>), String> {
    if let Ok(e) = s.parse::<Experiment>() {
        return Ok((e.scenario, e.comparison));
    }
    s.parse::<ScenarioSpec>()
        .map(|spec| (spec, None))
        .map_err(|e| format!("{s:?} is neither an experiment nor a scenario: {e}"))
}
