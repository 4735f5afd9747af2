use enkf::harness::{run_twin_experiment_in_memory, RunConfig};

fn main() {
    for seed in [3u64, 0] {
        let text = format!(
            "kind = filter\nmodel = l96\nalgorithm = enkf\ntau = 1e-3\nsigma2 = 0.01\n\
             gamma2 = 0.1\nt_end = 20\nburn_in = 5\nensemble = 1000\nseed = {seed}\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        println!("enkf1000 seed {seed}: {:.3}", run_twin_experiment_in_memory(&cfg).unwrap().mse);
    }
}
