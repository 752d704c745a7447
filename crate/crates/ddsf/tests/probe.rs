use ddsf::consets::BoxSet;
use ddsf::datamat::Trajectory;
use ddsf::filter::{assemble_qp, FilterConfig, FilterState};
use ddsf::qpcore::{AdmmSettings, AdmmSolver};
use ddsf::safeset::SampledSafeSet;
use ddsf_oracles::benchmark_plant;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

#[test]
fn probe_first_qp() {
    let mut plant = benchmark_plant(1);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut u = Vec::new();
    let mut y = Vec::new();
    for _ in 0..200 {
        let ut = scalar(rng.random_range(-1.0..1.0));
        y.push(plant.step(&ut).unwrap());
        u.push(ut);
    }
    let traj = Trajectory::new(u, y).unwrap();
    let cfg = FilterConfig::with_identity_cost(6, 3, 1).unwrap();
    let u_set = BoxSet::symmetric(1.0, 1).unwrap().to_polytope().unwrap();
    let y_set = BoxSet::symmetric(1.0, 1).unwrap().to_polytope().unwrap();
    let set = SampledSafeSet::from_equilibrium(&scalar(0.0), &scalar(0.0), 3, u_set, y_set).unwrap();
    let state = FilterState::from_equilibrium(&traj, &cfg, set, &scalar(0.0), &scalar(0.0)).unwrap();

    let prob = assemble_qp(&state, &cfg, &scalar(0.1)).unwrap();
    println!("dims: {} vars, {} rows", prob.num_vars(), prob.num_constraints());

    for rho in [0.001, 0.01, 0.1, 1.0, 10.0] {
        for eq_scale in [1.0, 1e3] {
            let mut settings = AdmmSettings::<f64>::default();
            settings.rho = rho;
            settings.rho_eq_scale = eq_scale;
            settings.max_iter = 20000;
            let mut solver = AdmmSolver::new(settings);
            let t0 = std::time::Instant::now();
            let sol = solver.solve(&prob).unwrap();
            println!(
                "rho {rho:>7} eq x{eq_scale:>6}: status {:?} iters {:>6} pr {:.2e} dr {:.2e} u0... obj {:.6} polished {} ({:?})",
                sol.status, sol.iterations, sol.primal_residual, sol.dual_residual, sol.objective, sol.polished, t0.elapsed()
            );
        }
    }
}
