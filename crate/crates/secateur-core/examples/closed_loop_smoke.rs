use secateur_core::model::ModelConfig;
use secateur_core::sparsity::drive_gates_to_target;

fn main() {
    let config = ModelConfig::default();
    for t in [0.4, 0.7, 0.9, 0.95, 0.98] {
        let mut rng = secateur_core::rngutil::stream(3, "closed-loop");
        let start = std::time::Instant::now();
        let out = drive_gates_to_target(&config, t, 10_000, 0.1, &mut rng).unwrap();
        println!(
            "t={t}: s={:.4} after {} steps ({:?}), lambda1={:.3}",
            out.final_expected_sparsity, out.steps_run, start.elapsed(), out.target.lambda1
        );
    }
}
