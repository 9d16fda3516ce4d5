//! Fixtures shared by the criterion benches in `benches/`.

use netslice_core::env::{EnvConfig, SliceEnv, WorkloadSource};
use netslice_core::replay::{ReplayBuffer, Transition};
use netslice_core::workload::WorkloadConfig;
use netslice_core::{SeededRng, Topology};
use rand::Rng;

/// Three slices sharing node 0 and link 0 under the default generator.
pub fn shared_env() -> SliceEnv {
    let wl = WorkloadSource::Generated(WorkloadConfig::default());
    SliceEnv::new(Topology::three_site_default(), EnvConfig::shared(3), wl).expect("valid default scenario")
}

/// Runs one full episode with a constant action and returns the number of
/// rewards materialized, drain included.
pub fn constant_episode(env: &mut SliceEnv, action: &[f64], seed: u64) -> usize {
    env.reset(seed, 0);
    let mut n = 0;
    loop {
        let out = env.step(action).expect("action width matches");
        n += out.materialized.len();
        if out.done {
            break;
        }
    }
    n + env.drain().expect("drain").0.len()
}

/// A buffer of `n` thawed transitions with random observations of `width`.
pub fn filled_buffer(n: usize, width: usize, action_width: usize) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(n, n);
    let mut rng = SeededRng::new(2, 0).rng();
    for i in 0..n as u64 {
        let obs: Vec<f64> = (0..width).map(|_| rng.random()).collect();
        let t = Transition::frozen(i, obs.clone(), vec![0.5; action_width], obs, false, i as f64);
        let h = buf.push_frozen(t).expect("fresh step ids");
        buf.thaw(h, rng.random_range(0.1..1.0), i as f64 + 1.0).expect("frozen handle");
    }
    buf
}
