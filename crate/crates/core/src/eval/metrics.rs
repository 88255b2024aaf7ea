use crate::error::{Error, Result};

fn check(x: &[f64], x_hat: &[f64]) -> Result<()> {
    if x.len() != x_hat.len() {
        return Err(Error::Usage(format!("{} targets vs {} predictions", x.len(), x_hat.len())));
    }
    if x.is_empty() {
        return Err(Error::Usage("metrics need at least one point".into()));
    }
    Ok(())
}

pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check(x, x_hat)?;
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn mae(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check(x, x_hat)?;
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
        assert!(mae(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn jensen(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = mse(&x, &y).unwrap();
            let a = mae(&x, &y).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert!(a <= m.sqrt() * (1.0 + 1e-12) + 1e-12);
        }
    }
}
