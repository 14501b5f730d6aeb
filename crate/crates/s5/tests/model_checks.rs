use lobgen_s5::gradcheck::gradient_check;
use lobgen_s5::model::{random_example, ModelConfig, S5Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tiny_model_gradients_match_finite_differences() {
    let report = gradient_check(ModelConfig::tiny(), 7);
    for t in &report.tensors {
        println!("{:24} {:3} {:.2e}", t.name, t.checked, t.max_rel_err);
    }
    assert!(report.max_rel_err < 1e-3, "max relative error {:.3e}", report.max_rel_err);
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let cfg = ModelConfig::desk();
    let model = S5Model::<f32>::init(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch: Vec<_> = (0..16).map(|_| random_example(&cfg, &mut rng)).collect();
    let loss = model.loss(&batch) as f64;
    let uniform = (12011f64).ln();
    assert!((loss - uniform).abs() / uniform < 0.05, "{loss}");
}
