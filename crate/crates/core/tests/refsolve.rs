use atl_pinn::pde::{InitialConditionSpec, ProblemKind};
use atl_pinn::refsolve::{
    decode_grid, read_grid, solve, solve_burgers, solve_diffreact, solve_swe, write_grid, GridField, RefError,
    SolverConfig,
};

fn sinusoid(a: [f64; 2], n: [u32; 2], phi: [f64; 2]) -> InitialConditionSpec {
    InitialConditionSpec::SinusoidSuperposition {
        amplitudes: a,
        wavenumbers: n,
        phases: phi,
        length: 1.0,
    }
}

fn cfg_1d(nx: usize, nt: usize) -> SolverConfig {
    SolverConfig {
        nx,
        nt,
        ..SolverConfig::desk(ProblemKind::DiffReact)
    }
}

/// L2 distance between two 1D solutions on the coarse nodes, over slices `0..=k_max`.
fn coarse_diff(coarse: &GridField, fine: &GridField, k_max: usize) -> f64 {
    let ratio = fine.dims.nx / coarse.dims.nx;
    let mut s = 0.0;
    for k in 0..=k_max {
        for i in 0..coarse.dims.nx {
            let d = coarse.at(0, k, 0, i) - fine.at(0, k, 0, i * ratio);
            s += d * d;
        }
    }
    (s / ((k_max + 1) * coarse.dims.nx) as f64).sqrt()
}

fn slope(solver: impl Fn(usize) -> GridField, n0: usize, k_max: usize) -> f64 {
    let a = solver(n0);
    let b = solver(2 * n0);
    let c = solver(4 * n0);
    (coarse_diff(&a, &b, k_max) / coarse_diff(&b, &c, k_max)).log2()
}

#[test]
fn diffreact_self_convergence_is_second_order() {
    let ic = sinusoid([0.8, 0.4], [1, 2], [0.3, 1.1]);
    let s = slope(|n| solve_diffreact(&ic, &cfg_1d(n, 11)).unwrap(), 32, 10);
    println!("diffreact slope {s:.3}");
    assert!((s - 2.0).abs() <= 0.3, "slope {s}");
}

#[test]
fn burgers_self_convergence_is_at_least_first_order() {
    let ic = sinusoid([0.5, 0.2], [1, 2], [0.3, 1.1]);
    // Slices up to t = 0.2, before gradients steepen.
    let s = slope(|n| solve_burgers(&ic, &cfg_1d(n, 11)).unwrap(), 64, 1);
    println!("burgers slope {s:.3}");
    assert!(s >= 1.0, "slope {s}");
}

#[test]
fn burgers_conserves_mass() {
    let ic = sinusoid([0.9, 0.6], [1, 3], [0.2, 2.0]);
    let g = solve_burgers(&ic, &SolverConfig::desk(ProblemKind::Burgers)).unwrap();
    let dx = g.spacing[0];
    let mass = |k: usize| g.slice(0, k).iter().sum::<f64>() * dx;
    let scale = g.slice(0, 0).iter().map(|v| v.abs()).sum::<f64>() * dx;
    let m0 = mass(0);
    for k in 0..g.dims.nt {
        assert!((mass(k) - m0).abs() / scale < 1e-10, "slice {k}");
    }
}

#[test]
fn swe_volume_and_symmetry() {
    let cfg = SolverConfig::desk(ProblemKind::ShallowWater);
    let g = solve_swe(0.5, &cfg).unwrap();
    let (nx, ny) = (g.dims.nx, g.dims.ny);
    let cell = g.spacing[0] * g.spacing[1];
    let volume = |k: usize| g.slice(0, k).iter().sum::<f64>() * cell;
    let v0 = volume(0);
    // The front travels at most ~2 units per unit time; boundary is 2 units from the dam.
    let horizon = g.dims.nt / 2;
    for k in 0..=horizon {
        assert!((volume(k) - v0).abs() / v0 < 1e-6, "slice {k}");
    }
    let mut worst = 0.0f64;
    for k in 0..g.dims.nt {
        for j in 0..ny {
            for i in 0..nx {
                worst = worst.max((g.at(0, k, j, i) - g.at(0, k, i, j)).abs());
                worst = worst.max((g.at(1, k, j, i) - g.at(2, k, i, j)).abs());
            }
        }
    }
    assert!(worst < 1e-10, "asymmetry {worst}");
}

#[test]
fn solvers_are_deterministic() {
    let ic = sinusoid([0.3, 0.7], [2, 5], [0.1, 4.0]);
    let cfg = cfg_1d(64, 9);
    assert_eq!(solve_diffreact(&ic, &cfg).unwrap(), solve_diffreact(&ic, &cfg).unwrap());
    assert_eq!(solve_burgers(&ic, &cfg).unwrap(), solve_burgers(&ic, &cfg).unwrap());
    let sc = SolverConfig {
        nx: 16,
        ny: 16,
        nt: 5,
        ..SolverConfig::desk(ProblemKind::ShallowWater)
    };
    assert_eq!(solve_swe(0.4, &sc).unwrap(), solve_swe(0.4, &sc).unwrap());
}

#[test]
fn grid_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ic = sinusoid([0.123456789, 0.7], [2, 5], [0.1, 4.0]);
    let g = solve(ProblemKind::Burgers, &ic, &cfg_1d(32, 5)).unwrap();
    let path = dir.path().join("burgers.grid");
    write_grid(&g, &path).unwrap();
    let back = read_grid(&path).unwrap();
    assert_eq!(back.ic, g.ic);
    assert_eq!(back.spacing.map(f64::to_bits), g.spacing.map(f64::to_bits));
    for (a, b) in back.values.iter().zip(&g.values) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back, g);
}

#[test]
fn corrupted_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = solve(
        ProblemKind::ShallowWater,
        &InitialConditionSpec::RadialDamBreak { radius: 0.5 },
        &SolverConfig {
            nx: 4,
            ny: 4,
            nt: 4,
            ..SolverConfig::desk(ProblemKind::ShallowWater)
        },
    )
    .unwrap();
    let path = dir.path().join("swe.grid");
    write_grid(&g, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_grid(&bad), Err(RefError::Format(_))));

    let mut short = bytes.clone();
    short.truncate(bytes.len() - 8);
    assert!(matches!(decode_grid(&short), Err(RefError::Format(_))));

    let mut header_cut = bytes.clone();
    header_cut.truncate(20);
    assert!(matches!(decode_grid(&header_cut), Err(RefError::Format(_))));

    // 4x4x4 grid with one field but 63 values.
    let mut one = g.clone();
    one.values.truncate(1);
    one.field_names.truncate(1);
    write_grid(&one, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    assert!(matches!(decode_grid(&bytes), Err(RefError::Format(_))));
}
