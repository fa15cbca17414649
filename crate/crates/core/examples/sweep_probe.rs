fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds = args.get(1).map(|s| s.as_str()).unwrap_or("1,2");
    let text = format!("[experiment]\nout_dir = /tmp/hgode_sweep_probe\nseeds = {seeds}\n");
    let cfg = hgode_core::config::parse_config_str(
        &text,
        hgode_core::config::ExperimentKind::MonostabilitySweep,
        None,
    )
    .unwrap();
    let t0 = std::time::Instant::now();
    let summary = hgode_core::experiments::run_monostability_sweep(&cfg).unwrap();
    summary.print_checks();
    for (seed, metrics) in &summary.per_seed {
        println!("seed {seed}:");
        for (k, v) in metrics {
            println!("   {k} = {v:.4}");
        }
    }
    println!("gates = {}, wall {:.1}s", summary.gates_passed, t0.elapsed().as_secs_f64());
}
