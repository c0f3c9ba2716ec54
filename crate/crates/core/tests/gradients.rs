//! Finite-difference checks of every layer class and of the full loss.

use pnen::gradcheck::{end_to_end, end_to_end_config, per_op_suite};
use pnen::model::NonLocalKind;

#[test]
fn every_layer_class_passes() {
    let results = per_op_suite(7).unwrap();
    for r in &results {
        println!("{}", r.line());
    }
    assert!(results.iter().all(|r| r.passed()));
}

#[test]
fn full_loss_passes_for_each_attention_variant() {
    for kind in NonLocalKind::ALL {
        let cfg = pnen::model::PnenConfig { nonlocal: kind, d: 6, m: 4, n: 3, ..end_to_end_config() };
        let r = end_to_end(cfg, 3).unwrap();
        println!("{}", r.line());
        assert!(r.passed(), "{}", r.line());
    }
}
