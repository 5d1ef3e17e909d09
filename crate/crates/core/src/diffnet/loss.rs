/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weighted binary cross-entropy and its gradient with respect to `p`.
///
/// `loss = sum_i w_i [-y_i ln p_i - (1 - y_i) ln(1 - p_i)]` on clamped `p`. The
/// gradient is that of the clamped expression, so it vanishes where the clamp binds.
pub fn bce_loss(p: &[f64], y: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(p.len(), y.len());
    debug_assert_eq!(p.len(), weights.len());
    let hi = 1.0 - PROB_CLAMP;
    let mut loss = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .zip(weights)
        .map(|((&pi, &yi), &wi)| {
            let pc = pi.clamp(PROB_CLAMP, hi);
            loss += wi * (-yi * pc.ln() - (1.0 - yi) * (1.0 - pc).ln());
            if (PROB_CLAMP..=hi).contains(&pi) {
                wi * (-yi / pc + (1.0 - yi) / (1.0 - pc))
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}
