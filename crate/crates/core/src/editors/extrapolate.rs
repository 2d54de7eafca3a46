use serde_json::json;

use super::{per_tensor, EditOutcome, OpRecord};
use crate::delta::DeltaSet;
use crate::error::{Error, Result};

/// Scales the delta by `1 + alpha`. Positive `alpha` extrapolates past the
/// post-trained weights, `-1 < alpha < 0` interpolates back toward the
/// pre-trained ones. `alpha <= -1` erases or inverts the delta and needs
/// `allow_reversal`.
pub fn expo(delta: &DeltaSet, alpha: f64, allow_reversal: bool) -> Result<EditOutcome> {
    if !alpha.is_finite() || (alpha <= -1.0 && !allow_reversal) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let scale = 1.0 + alpha;
    let edited = per_tensor(delta, |_, t| {
        Ok(t.values().iter().map(|&d| (scale * f64::from(d)) as f32).collect())
    })?;
    Ok(EditOutcome::from_edited(
        delta,
        edited,
        OpRecord {
            op: "expo".into(),
            params: json!({ "alpha": alpha, "allow_reversal": allow_reversal }),
            seed: None,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::*;

    #[test]
    fn by_hand() {
        let d = vector(&[2.0, -2.0]);
        let o = expo(&d, 0.5, false).unwrap();
        assert_eq!(edited(&o, "w"), &[3.0, -3.0]);
        assert_eq!(perturbation(&o, "w"), &[1.0, -1.0]);
        assert_eq!(edited(&expo(&d, 0.0, false).unwrap(), "w"), &[2.0, -2.0]);
    }

    #[test]
    fn reversal_needs_override() {
        let d = vector(&[2.0, -2.0]);
        assert!(matches!(expo(&d, -1.0, false), Err(Error::AlphaOutOfRange(_))));
        assert!(matches!(expo(&d, -1.5, false), Err(Error::AlphaOutOfRange(_))));
        let erased = expo(&d, -1.0, true).unwrap();
        assert_eq!(edited(&erased, "w"), &[0.0, 0.0]);
        assert!(matches!(expo(&d, f64::NAN, true), Err(Error::AlphaOutOfRange(_))));
    }
}
