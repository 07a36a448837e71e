//! Real-valued analog channels: AWGN and Rayleigh block-free fading.
//!
//! Noise power is set from the measured power of each transmitted vector:
//! `sigma^2 = mean(s^2) / 10^(snr_db / 10)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    #[default]
    Awgn,
    Rayleigh,
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(Self::Awgn),
            "rayleigh" => Ok(Self::Rayleigh),
            other => Err(Error::invalid(format!("unknown channel {other:?}"))),
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Awgn => "awgn",
            Self::Rayleigh => "rayleigh",
        })
    }
}

/// Analog symbols sent over (or received from) the channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolVector {
    pub symbols: Vec<f64>,
}

impl SymbolVector {
    pub fn new(symbols: Vec<f64>) -> Self {
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.symbols.is_empty() {
            0.0
        } else {
            self.symbols.iter().map(|v| v * v).sum::<f64>() / self.symbols.len() as f64
        }
    }

    fn check(&self) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::invalid("empty symbol vector"));
        }
        if !self.symbols.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite symbol"));
        }
        Ok(())
    }
}

/// One draw of channel state: `received = gains * sent + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub gains: Vec<f64>,
    pub noise: Vec<f64>,
    pub snr_db: f64,
}

impl ChannelRealization {
    /// Draws gains (Rayleigh only) and then noise scaled to the power of `sent`.
    pub fn draw<R: Rng + ?Sized>(kind: ChannelKind, sent: &SymbolVector, snr_db: f64, rng: &mut R) -> Result<Self> {
        sent.check()?;
        if snr_db.is_nan() {
            return Err(Error::invalid("SNR is NaN"));
        }
        let n = sent.len();
        let gains = match kind {
            ChannelKind::Awgn => vec![1.0; n],
            ChannelKind::Rayleigh => rayleigh_gains(n, rng),
        };
        let var = noise_variance(sent.power(), snr_db);
        let noise = if var > 0.0 {
            let normal = Normal::new(0.0, var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
            (0..n).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        Ok(Self { gains, noise, snr_db })
    }

    pub fn apply(&self, sent: &SymbolVector) -> SymbolVector {
        SymbolVector::new(
            sent.symbols
                .iter()
                .zip(&self.gains)
                .zip(&self.noise)
                .map(|((s, h), n)| h * s + n)
                .collect(),
        )
    }
}

pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// Rayleigh magnitudes with `E[h^2] = 1`: `|x + iy|`, `x, y ~ N(0, 1/2)`.
pub fn rayleigh_gains<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    (0..n)
        .map(|_| {
            let (x, y): (f64, f64) = (normal.sample(rng), normal.sample(rng));
            x.hypot(y)
        })
        .collect()
}

pub fn transmit_awgn<R: Rng + ?Sized>(s: &SymbolVector, snr_db: f64, rng: &mut R) -> Result<SymbolVector> {
    transmit(ChannelKind::Awgn, s, snr_db, rng)
}

pub fn transmit_rayleigh<R: Rng + ?Sized>(s: &SymbolVector, snr_db: f64, rng: &mut R) -> Result<SymbolVector> {
    transmit(ChannelKind::Rayleigh, s, snr_db, rng)
}

pub fn transmit<R: Rng + ?Sized>(kind: ChannelKind, s: &SymbolVector, snr_db: f64, rng: &mut R) -> Result<SymbolVector> {
    Ok(ChannelRealization::draw(kind, s, snr_db, rng)?.apply(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn vanishing_noise() {
        let s = SymbolVector::new(vec![0.5, -1.0, 2.0, 0.0]);
        let out = transmit_awgn(&s, 300.0, &mut rng(1)).unwrap();
        for (a, b) in out.symbols.iter().zip(&s.symbols) {
            assert!((a - b).abs() < 1e-12);
        }
        let re = ChannelRealization::draw(ChannelKind::Rayleigh, &s, 300.0, &mut rng(2)).unwrap();
        let out = re.apply(&s);
        for i in 0..4 {
            assert!((out.symbols[i] - re.gains[i] * s.symbols[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_power_passes_through() {
        let s = SymbolVector::new(vec![0.0; 5]);
        assert_eq!(transmit_awgn(&s, 0.0, &mut rng(3)).unwrap(), s);
    }

    #[test]
    fn unit_power_zero_db() {
        assert_eq!(noise_variance(1.0, 0.0), 1.0);
        assert!((noise_variance(2.0, 10.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empirical_snr_awgn() {
        let mut r = rng(4);
        let s = SymbolVector::new((0..1_000_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        let out = transmit_awgn(&s, 10.0, &mut r).unwrap();
        let noise_pow: f64 = out.symbols.iter().zip(&s.symbols).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 1e6;
        let snr = 10.0 * (s.power() / noise_pow).log10();
        assert!((snr - 10.0).abs() < 0.1, "{snr}");
        assert!((noise_pow / 0.1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn rayleigh_second_moment() {
        let h = rayleigh_gains(1_000_000, &mut rng(5));
        let m2 = h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64;
        assert!((m2 - 1.0).abs() < 0.01, "{m2}");
        assert!(h.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn reproducible_and_length_preserving() {
        let s = SymbolVector::new(vec![0.3, -0.7, 1.1]);
        for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
            let a = transmit(kind, &s, 5.0, &mut rng(9)).unwrap();
            let b = transmit(kind, &s, 5.0, &mut rng(9)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 3);
        }
        assert!(transmit_awgn(&SymbolVector::new(vec![]), 0.0, &mut rng(1)).is_err());
        assert!(transmit_awgn(&SymbolVector::new(vec![f64::NAN]), 0.0, &mut rng(1)).is_err());
    }
}
