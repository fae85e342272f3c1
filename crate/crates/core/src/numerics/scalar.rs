//! Scalar transforms shared by the graph ops and by non-differentiable code
//! paths (matching, evaluation, query initialization).

/// Clamp applied before the log-odds transform.
pub const INV_SIGMOID_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(y: f64) -> f64 {
    let y = y.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
    (y / (1.0 - y)).ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Sigmoid focal loss of one logit against a binary target, with its
/// derivative with respect to the logit.
pub fn sigmoid_focal_with_grad(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    // ln p and ln(1 - p) through softplus stay finite for large |logit|
    let ln_p = -softplus(-logit);
    let ln_q = -softplus(logit);
    if positive {
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * ln_p;
        let grad = -alpha * w * ((1.0 - p) - gamma * p * ln_p);
        (loss, grad)
    } else {
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * ln_q;
        let grad = -(1.0 - alpha) * w * (gamma * (1.0 - p) * ln_q - p);
        (loss, grad)
    }
}

/// Focal loss on a probability, `-a(1-p)^g ln p` for positives and
/// `-(1-a)p^g ln(1-p)` for negatives.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(inverse_sigmoid(0.5), 0.0);
    }

    #[test]
    fn inverse_sigmoid_roundtrip() {
        assert!((sigmoid(inverse_sigmoid(0.2)) - 0.2).abs() < 1e-6);
        let mut y = 1e-4;
        while y <= 1.0 - 1e-4 {
            assert!((sigmoid(inverse_sigmoid(y)) - y).abs() < 1e-6, "y={y}");
            y += 1e-3;
        }
    }

    #[test]
    fn inverse_sigmoid_is_finite_at_edges() {
        assert!(inverse_sigmoid(0.0).is_finite());
        assert!(inverse_sigmoid(1.0).is_finite());
        assert!((inverse_sigmoid(0.0) - (1e-5f64 / (1.0 - 1e-5)).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]);
        for v in &u {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_hand_values() {
        assert!((focal_loss(0.5, true, 0.25, 2.0) - 0.043_321_698_784_996_57).abs() < 1e-12);
        assert!((focal_loss(0.5, false, 0.25, 2.0) - 0.129_965_096_354_989_7).abs() < 1e-12);
        assert!(focal_loss(1.0 - 1e-9, true, 0.25, 2.0) < 1e-12);
        let (l, _) = sigmoid_focal_with_grad(0.0, true, 0.25, 2.0);
        assert!((l - 0.043_321_698_784_996_57).abs() < 1e-12);
    }

    #[test]
    fn focal_logit_derivative_matches_differences() {
        for &x in &[-4.0, -0.7, 0.0, 0.3, 2.5, 9.0] {
            for &pos in &[true, false] {
                let h = 1e-6;
                let (_, g) = sigmoid_focal_with_grad(x, pos, 0.25, 2.0);
                let num = (sigmoid_focal_with_grad(x + h, pos, 0.25, 2.0).0
                    - sigmoid_focal_with_grad(x - h, pos, 0.25, 2.0).0)
                    / (2.0 * h);
                assert!((g - num).abs() < 1e-8, "x={x} pos={pos} {g} vs {num}");
            }
        }
    }
}
