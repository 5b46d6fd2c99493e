//! Fixtures shared by the benchmarks.

use aspire_core::flow::{init_flow, ConditionalFlow, FlowArch};
use aspire_core::operators::{ForwardProblem, LinearGaussianProblem, Observation};
use aspire_core::random::seeded;
use aspire_core::wave2d::{make_phantom, DeskConfig, PhantomConfig, WaveProblem};

/// The 16-parameter, 80-datum linear Gaussian problem.
pub fn stylized() -> LinearGaussianProblem {
    LinearGaussianProblem::stylized(16, 80, 0.5, 7).expect("stylized problem builds")
}

/// A wave problem on an `n × n` grid with the desk acquisition scaled to fit,
/// plus one phantom and its observation.
pub fn wave(n: usize) -> (WaveProblem, Vec<f64>, Observation) {
    let full = DeskConfig::default();
    let desk = DeskConfig {
        nx: n,
        ny: n,
        ring_radius_cells: full.ring_radius_cells * n as f64 / full.nx as f64,
        ..full
    };
    let problem = desk.build().expect("desk problem builds");
    let phantom = make_phantom(&mut seeded(3), &PhantomConfig::desk(n, n, desk.dx)).expect("phantom").values;
    let y = problem.simulate_observation(&phantom, 5).expect("simulation");
    (problem, phantom, y)
}

/// A freshly initialized flow with non-zero output layers, so that every
/// coupling does real work.
pub fn flow(dim_x: usize, dim_cond: usize) -> ConditionalFlow {
    let mut f = init_flow(FlowArch::new(dim_x, dim_cond), &mut seeded(11)).expect("flow");
    for r in f.final_layer_ranges() {
        for (i, p) in f.params_mut()[r].iter_mut().enumerate() {
            *p = 1e-4 * ((i * 7919 % 101) as f64 - 50.0);
        }
    }
    f
}
