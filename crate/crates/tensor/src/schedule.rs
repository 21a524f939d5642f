use std::f64::consts::PI;

/// Cosine-annealed learning rate for `epoch` out of `total_epochs`.
///
/// `lr = min_lr + ½(base_lr − min_lr)(1 + cos(π·epoch/total_epochs))`.
/// Epoch 0 returns `base_lr` and any epoch at or past the end returns
/// `min_lr`, both exactly.
pub fn cosine_anneal_lr(base_lr: f64, min_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if epoch == 0 && total_epochs > 0 {
        return base_lr;
    }
    if epoch >= total_epochs {
        return min_lr;
    }
    let progress = epoch as f64 / total_epochs as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_exact() {
        assert_eq!(cosine_anneal_lr(0.001, 0.0, 0, 20), 0.001);
        assert_eq!(cosine_anneal_lr(0.001, 0.0, 20, 20), 0.0);
        assert_eq!(cosine_anneal_lr(0.001, 1e-5, 20, 20), 1e-5);
        assert_eq!(cosine_anneal_lr(0.003, 1e-4, 0, 7), 0.003);
    }

    #[test]
    fn midpoint() {
        assert_eq!(cosine_anneal_lr(0.001, 0.0, 10, 20), 0.0005);
        assert_eq!(cosine_anneal_lr(0.001, 0.0, 100, 200), 0.0005);
    }

    #[test]
    fn past_end_clamps_to_min() {
        assert_eq!(cosine_anneal_lr(0.001, 1e-6, 25, 20), 1e-6);
    }

    #[test]
    fn nonincreasing() {
        let lrs: Vec<f64> = (0..=50).map(|e| cosine_anneal_lr(0.01, 1e-4, e, 50)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
