use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sblab::experiment::{
    run_fig1, run_ode_vs_simulation, run_simulation, run_theory_suite, Arm, OdeCheckConfig, RunConfig, RunContext,
    Seeds, TheoryGrid,
};
use sblab::spectra::SpectrumConfig;

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small_config() -> RunConfig {
    let mut c = RunConfig {
        spectrum: SpectrumConfig::Explicit(vec![1.0, 0.4]),
        n_heads: 2,
        seeds: Seeds::List(vec![3, 4]),
        export_every: 10,
        ..RunConfig::default()
    };
    c.dataset.size = 60;
    c.upsampling.checkpoints = 4;
    for cfg in [&mut c.arms.gd, &mut c.arms.sam, &mut c.arms.gd_upsampled] {
        cfg.steps = 300;
    }
    c.metrics.smoothing_window = 11;
    c
}

fn twice<F: Fn(&RunContext)>(jobs: [usize; 2], run: F) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, jobs) in dirs.iter().zip(jobs) {
        run(&RunContext { jobs, out_dir: dir.path().to_path_buf(), timestamp: None });
    }
    let (a, b) = (tree(dirs[0].path()), tree(dirs[1].path()));
    assert!(!a.is_empty());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
}

#[test]
fn fig1_is_byte_identical_across_runs_and_thread_counts() {
    let config = small_config();
    twice([1, 3], |ctx| {
        run_fig1(&config, ctx).unwrap();
    });
}

#[test]
fn simulate_is_byte_identical() {
    let config = small_config();
    for arm in Arm::ALL {
        twice([1, 1], |ctx| {
            run_simulation(&config, arm, 5, ctx).unwrap();
        });
    }
}

#[test]
fn theory_and_ode_check_are_byte_identical() {
    let grid = TheoryGrid { random_spectra: 50, ..TheoryGrid::default() };
    twice([1, 2], |ctx| {
        run_theory_suite(&grid, ctx).unwrap();
    });
    let ode = OdeCheckConfig { spectrum: SpectrumConfig::Explicit(vec![1.5, 0.6]), ..OdeCheckConfig::default() };
    twice([1, 1], |ctx| {
        run_ode_vs_simulation(&ode, ctx).unwrap();
    });
}
