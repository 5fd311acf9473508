//! Moving-average split of a series into trend-cyclical and seasonal parts.

use crate::tensor::{avg_pool_1d, Tape, Tensor, TensorError, Var};

/// Default moving-average window.
pub const DEFAULT_KERNEL: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct DecompPair {
    pub seasonal: Tensor,
    pub trend_cyclical: Tensor,
}

/// `trend = AvgPool(pad(x))`, `seasonal = x - trend`, per feature channel.
pub fn series_decompose(x: &Tensor, kernel: usize) -> Result<DecompPair, TensorError> {
    let trend = avg_pool_1d(x, kernel)?;
    let seasonal = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(trend.data()).map(|(a, b)| a - b).collect(),
    )?;
    Ok(DecompPair {
        seasonal,
        trend_cyclical: trend,
    })
}

/// Differentiable decomposition on a tape. Returns `(seasonal, trend)`.
pub fn decompose(tape: &mut Tape, x: Var, kernel: usize) -> Result<(Var, Var), TensorError> {
    let trend = tape.avg_pool_1d(x, kernel)?;
    let seasonal = tape.sub(x, trend)?;
    Ok((seasonal, trend))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_series_has_no_seasonal_part() {
        let d = series_decompose(&Tensor::column(&[5.0; 4]), 3).unwrap();
        assert_eq!(d.trend_cyclical.data(), &[5.0; 4]);
        assert_eq!(d.seasonal.data(), &[0.0; 4]);
    }

    #[test]
    fn hand_computed_example() {
        let d = series_decompose(&Tensor::column(&[1.0, 2.0, 4.0, 8.0]), 3).unwrap();
        let trend = [4.0 / 3.0, 7.0 / 3.0, 14.0 / 3.0, 20.0 / 3.0];
        let seasonal = [-1.0 / 3.0, -1.0 / 3.0, -2.0 / 3.0, 4.0 / 3.0];
        for i in 0..4 {
            assert!((d.trend_cyclical.data()[i] - trend[i]).abs() < 1e-12);
            assert!((d.seasonal.data()[i] - seasonal[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn even_kernel_propagates_error() {
        assert!(series_decompose(&Tensor::column(&[1.0, 2.0]), 2).is_err());
    }

    #[test]
    fn trend_tracks_ramp_not_sinusoid() {
        let period = 12;
        let n = 120;
        let ramp: Vec<f64> = (0..n).map(|t| 0.05 * t as f64).collect();
        let wave: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period as f64).sin())
            .collect();
        let x: Vec<f64> = ramp.iter().zip(&wave).map(|(a, b)| a + b).collect();
        let d = series_decompose(&Tensor::column(&x), period + 1).unwrap();
        let corr = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let trend = d.trend_cyclical.data();
        assert!(corr(trend, &ramp).abs() > corr(trend, &wave).abs());
        assert!(corr(trend, &ramp) > 0.99);
    }

    proptest! {
        #[test]
        fn reconstruction_identity(
            len in 2usize..128,
            dims in 1usize..8,
            k in 0usize..20,
            seed in any::<u64>(),
        ) {
            let kernel = (2 * k + 1).min(2 * len - 1);
            let mut s = seed;
            let data: Vec<f64> = (0..len * dims)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 20.0 - 10.0
                })
                .collect();
            let x = Tensor::new(vec![len, dims], data).unwrap();
            let d = series_decompose(&x, kernel).unwrap();
            prop_assert_eq!(d.seasonal.shape(), x.shape());
            for i in 0..x.numel() {
                let sum = d.seasonal.data()[i] + d.trend_cyclical.data()[i];
                let scale = x.data()[i].abs().max(d.trend_cyclical.data()[i].abs()).max(1.0);
                prop_assert!((sum - x.data()[i]).abs() <= 2.0 * f64::EPSILON * scale);
            }
        }
    }
}
