use uvhead::loss::{grad_check_loss, LOSS_CATALOG};

#[test]
fn every_loss_passes_grad_check() {
    for name in LOSS_CATALOG {
        for seed in 0..10 {
            let err = grad_check_loss(name, seed, 3e-4).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}
