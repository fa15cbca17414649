fn main() {
    let text = "[experiment]\nout_dir = /tmp/hgode_vt_full\n";
    let cfg = hgode_core::config::parse_config_str(
        text,
        hgode_core::config::ExperimentKind::ValidateTheory,
        None,
    )
    .unwrap();
    let t0 = std::time::Instant::now();
    let summary = hgode_core::experiments::run_validate_theory(
        &cfg,
        &hgode_core::experiments::TheoryHooks::default(),
    )
    .unwrap();
    summary.print_checks();
    println!("gates_passed = {}, wall {:.2}s", summary.gates_passed, t0.elapsed().as_secs_f64());
}
