use hgode_core::dynamics::SoftAttentionSystem;
use hgode_core::sbm::{init_features, sample_sbm, FeatureSpec, SbmSpec};
use hgode_core::solver::{integrate_dopri5, OdeState, SolverConfig};
use ndarray::ArrayView2;

fn main() {
    let spec = SbmSpec::two_block(50, 0.5, 0.05, 1234);
    let (_g, labels) = sample_sbm(&spec).unwrap();
    let fspec = FeatureSpec {
        means: FeatureSpec::block_means(2, 16, 0.65),
        sigma: 0.1,
        seed: 99,
    };
    let h0 = init_features(&labels, &fspec).unwrap();
    let save = [1.0, 5.0, 10.0, 25.0, 50.0];
    for (tau, h_max, tol) in [
        (2.0, 10.0, 1e-6),
        (2.0, 1.0, 1e-6),
        (2.0, 1.0, 1e-8),
        (5.0, 1.0, 1e-6),
        (1.0, 1.0, 1e-6),
        (0.5, 1.0, 1e-6),
    ] {
        let mut sys = SoftAttentionSystem::new(tau, 100, 16);
        let cfg = SolverConfig { h_max, ..SolverConfig::with_tol(tol) };
        let y0 = OdeState::flat(h0.iter().copied().collect());
        let traj = integrate_dopri5(&mut sys, &y0, 0.0, 50.0, &cfg, &save).unwrap();
        print!("tau={tau} h_max={h_max} tol={tol:>7}: ");
        for (t, y) in traj.times.iter().zip(&traj.states) {
            let h = ArrayView2::from_shape((100, 16), &y[..]).unwrap();
            let cm = hgode_core::diagnostics::cluster_metrics(&h, &labels).unwrap();
            print!("t{t}: d={:.3e} s={:.3} | ", cm.mean_inter_dist, cm.silhouette);
        }
        println!("steps={} rej={}", traj.n_accepted, traj.n_rejected);
    }
}
