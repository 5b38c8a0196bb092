use adaptive_bp::config::{RunConfig, Strategy};
use adaptive_bp::trainer::train;

#[test]
fn copy_is_learnable_with_full_fine_tuning() {
    let mut c = RunConfig::default();
    c.run.strategy = Strategy::FullFt;
    c.optimizer.lr = 1e-3;
    c.run.epochs = 10;
    c.run.steps_per_epoch = 300;
    let r = train(&c).unwrap().report;
    assert_eq!(r.steps, 3000);
    assert!(r.final_eval_accuracy >= 0.99, "held-out accuracy {:.4}", r.final_eval_accuracy);
}
