//! Closed-loop DPCM codec for skip-line samples.
//!
//! Each row is coded independently: the first sample at full `input_bits`,
//! every following sample as a quantized difference from the reconstructed
//! left neighbor. The encoder tracks its own reconstruction, so the decoder
//! state can never drift from it.

use serde::{Deserialize, Serialize};

use crate::error::{MagicError, Result};

/// Codec settings. The predictor is the reconstructed left neighbor and
/// state resets at the start of every row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpcmConfig {
    /// Quantization of skip activations before coding (unsigned).
    pub input_bits: u32,
    /// Bits per residual code; `input_bits + 1` is lossless.
    pub residual_bits: u32,
}

impl Default for DpcmConfig {
    fn default() -> Self {
        DpcmConfig { input_bits: 12, residual_bits: 8 }
    }
}

impl DpcmConfig {
    pub fn new(input_bits: u32, residual_bits: u32) -> Result<Self> {
        let cfg = DpcmConfig { input_bits, residual_bits };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bits == 0 || self.input_bits > 24 {
            return Err(MagicError::Config(format!(
                "input_bits must be in [1, 24], got {}",
                self.input_bits
            )));
        }
        if self.residual_bits < 2 || self.residual_bits > self.input_bits + 1 {
            return Err(MagicError::Config(format!(
                "residual_bits must satisfy 2 <= {} <= input_bits + 1 = {}",
                self.residual_bits,
                self.input_bits + 1
            )));
        }
        Ok(())
    }

    /// Residual quantizer step: 1 at `residual_bits = input_bits + 1`
    /// (lossless), doubling for every bit removed.
    pub fn step(&self) -> i64 {
        1i64 << (self.input_bits + 1 - self.residual_bits)
    }

    /// Symmetric residual level range.
    pub fn max_level(&self) -> i64 {
        (1i64 << (self.residual_bits - 1)) - 1
    }

    pub fn max_sample(&self) -> i64 {
        (1i64 << self.input_bits) - 1
    }

    pub fn is_lossless(&self) -> bool {
        self.residual_bits == self.input_bits + 1
    }

    /// Encoded bits for a row of `len` samples:
    /// `input_bits + (len - 1) * residual_bits`.
    pub fn encoded_bits(&self, len: usize) -> u64 {
        if len == 0 {
            return 0;
        }
        self.input_bits as u64 + (len as u64 - 1) * self.residual_bits as u64
    }

    /// Raw bits for the same row without DPCM.
    pub fn raw_bits(&self, len: usize) -> u64 {
        len as u64 * self.input_bits as u64
    }
}

fn reconstruct_step(cfg: &DpcmConfig, predicted: i64, level: i64) -> i64 {
    (predicted + level * cfg.step()).clamp(0, cfg.max_sample())
}

/// Quantize a difference to a residual level: round to the nearest step
/// (half away from zero), then clamp symmetrically.
fn quantize_diff(cfg: &DpcmConfig, diff: i64) -> i64 {
    let step = cfg.step();
    let half = step / 2;
    let level = if diff >= 0 { (diff + half) / step } else { -((-diff + half) / step) };
    level.clamp(-cfg.max_level(), cfg.max_level())
}

/// Encode one row. The first code is the raw first sample; every other code
/// is a residual level in `[-2^(residual_bits-1)+1, 2^(residual_bits-1)-1]`.
pub fn dpcm_encode(row: &[i64], cfg: &DpcmConfig) -> Result<Vec<i64>> {
    cfg.validate()?;
    let max = cfg.max_sample();
    let mut codes = Vec::with_capacity(row.len());
    let mut recon = 0i64;
    for (i, &s) in row.iter().enumerate() {
        if s < 0 || s > max {
            return Err(MagicError::Input(format!(
                "sample {s} at index {i} outside [0, {max}]"
            )));
        }
        if i == 0 {
            codes.push(s);
            recon = s;
        } else {
            let level = quantize_diff(cfg, s - recon);
            codes.push(level);
            recon = reconstruct_step(cfg, recon, level);
        }
    }
    Ok(codes)
}

/// Decode a row produced by [`dpcm_encode`] with the same config.
pub fn dpcm_decode(codes: &[i64], cfg: &DpcmConfig) -> Result<Vec<i64>> {
    cfg.validate()?;
    let max = cfg.max_sample();
    let max_level = cfg.max_level();
    let mut out = Vec::with_capacity(codes.len());
    let mut recon = 0i64;
    for (i, &c) in codes.iter().enumerate() {
        if i == 0 {
            if c < 0 || c > max {
                return Err(MagicError::Input(format!(
                    "first code {c} outside sample range [0, {max}]"
                )));
            }
            recon = c;
        } else {
            if c < -max_level || c > max_level {
                return Err(MagicError::Input(format!(
                    "residual code {c} at index {i} outside [{}, {max_level}]",
                    -max_level
                )));
            }
            recon = reconstruct_step(cfg, recon, c);
        }
        out.push(recon);
    }
    Ok(out)
}

/// Decode with a length check against the expected row width.
pub fn dpcm_decode_expect(codes: &[i64], cfg: &DpcmConfig, expected_len: usize) -> Result<Vec<i64>> {
    if codes.len() != expected_len {
        return Err(MagicError::Input(format!(
            "code length {} does not match expected row length {expected_len}",
            codes.len()
        )));
    }
    dpcm_decode(codes, cfg)
}

/// Quantize a unit-interval activation to `bits` unsigned fixed point.
pub fn quantize_unit(v: f64, bits: u32) -> i64 {
    let max = ((1u64 << bits) - 1) as f64;
    let q = (v.clamp(0.0, 1.0) * max).round();
    q as i64
}

/// Inverse of [`quantize_unit`].
pub fn dequantize_unit(q: i64, bits: u32) -> f64 {
    let max = ((1u64 << bits) - 1) as f64;
    q as f64 / max
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lossless_cfg() -> DpcmConfig {
        DpcmConfig::new(12, 13).unwrap()
    }

    #[test]
    fn constant_row_codes_are_zero_after_first() {
        let cfg = lossless_cfg();
        let codes = dpcm_encode(&[7, 7, 7, 7], &cfg).unwrap();
        assert_eq!(codes, vec![7, 0, 0, 0]);
    }

    #[test]
    fn hand_simulated_row() {
        // [10, 12, 11, 11] at residual_bits = input_bits + 1: residuals are
        // exact differences [10, 2, -1, 0].
        let cfg = lossless_cfg();
        let codes = dpcm_encode(&[10, 12, 11, 11], &cfg).unwrap();
        assert_eq!(codes, vec![10, 2, -1, 0]);
        assert_eq!(dpcm_decode(&codes, &cfg).unwrap(), vec![10, 12, 11, 11]);
    }

    #[test]
    fn clamped_residual_recovers_boundedly() {
        // Step from 0 to max with tiny residual_bits: the residual clamps,
        // and reconstruction approaches the target by max_level*step per
        // sample without overshooting the sample range.
        let cfg = DpcmConfig::new(8, 3).unwrap();
        let max = cfg.max_sample();
        let row = vec![0, max, max, max, max, max, max, max, max, max];
        let codes = dpcm_encode(&row, &cfg).unwrap();
        let recon = dpcm_decode(&codes, &cfg).unwrap();
        let per_sample = cfg.max_level() * cfg.step();
        for (i, r) in recon.iter().enumerate().skip(1) {
            assert!(*r <= max);
            assert!(*r >= (per_sample * i as i64).min(max) - cfg.step());
        }
        // eventually converges to the plateau within one step
        assert!((recon.last().unwrap() - max).abs() <= cfg.step() / 2);
    }

    #[test]
    fn lossless_round_trip_1000_random_rows() {
        let cfg = lossless_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let len = rng.gen_range(1..64);
            let row: Vec<i64> = (0..len).map(|_| rng.gen_range(0..=cfg.max_sample())).collect();
            let codes = dpcm_encode(&row, &cfg).unwrap();
            assert_eq!(dpcm_decode(&codes, &cfg).unwrap(), row);
        }
    }

    #[test]
    fn lossy_error_bounded_on_smooth_rows() {
        // |delta| below the quantizer range keeps the error within step/2.
        let cfg = DpcmConfig::new(12, 8).unwrap();
        let step = cfg.step();
        let range = cfg.max_level() * step;
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let mut row = vec![rng.gen_range(0..=cfg.max_sample())];
            for _ in 0..63 {
                let prev = *row.last().unwrap();
                let delta = rng.gen_range(-(range - step)..=(range - step));
                row.push((prev + delta).clamp(0, cfg.max_sample()));
            }
            let codes = dpcm_encode(&row, &cfg).unwrap();
            let recon = dpcm_decode(&codes, &cfg).unwrap();
            for (s, r) in row.iter().zip(&recon) {
                assert!(
                    (s - r).abs() <= step / 2,
                    "sample {s} recon {r} exceeds step/2 = {}",
                    step / 2
                );
            }
        }
    }

    #[test]
    fn empty_row_round_trips() {
        let cfg = lossless_cfg();
        let codes = dpcm_encode(&[], &cfg).unwrap();
        assert!(codes.is_empty());
        assert!(dpcm_decode(&codes, &cfg).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_sample_is_input_error() {
        let cfg = lossless_cfg();
        assert!(matches!(dpcm_encode(&[4096], &cfg), Err(MagicError::Input(_))));
        assert!(matches!(dpcm_encode(&[-1], &cfg), Err(MagicError::Input(_))));
    }

    #[test]
    fn decode_length_mismatch_is_input_error() {
        let cfg = lossless_cfg();
        let codes = dpcm_encode(&[1, 2, 3], &cfg).unwrap();
        assert!(matches!(
            dpcm_decode_expect(&codes, &cfg, 4),
            Err(MagicError::Input(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(DpcmConfig::new(12, 1).is_err());
        assert!(DpcmConfig::new(12, 14).is_err());
        assert!(DpcmConfig::new(12, 13).is_ok());
    }

    #[test]
    fn bit_accounting_formula() {
        let cfg = DpcmConfig::new(12, 8).unwrap();
        assert_eq!(cfg.encoded_bits(0), 0);
        assert_eq!(cfg.encoded_bits(1), 12);
        assert_eq!(cfg.encoded_bits(100), 12 + 99 * 8);
        assert_eq!(cfg.raw_bits(100), 1200);
    }

    proptest! {
        /// Closed-loop property: the decoder's reconstruction equals the
        /// encoder's internal reconstruction exactly, for any config.
        #[test]
        fn closed_loop_encoder_decoder_agree(
            input_bits in 4u32..13,
            residual_minus_two in 0u32..10,
            samples in proptest::collection::vec(0u32..u32::MAX, 0..48),
        ) {
            let residual_bits = (2 + residual_minus_two).min(input_bits + 1);
            let cfg = DpcmConfig::new(input_bits, residual_bits).unwrap();
            let row: Vec<i64> =
                samples.iter().map(|&s| (s as i64) % (cfg.max_sample() + 1)).collect();

            // re-run the encoder loop, capturing its internal reconstruction
            let mut enc_recon = Vec::with_capacity(row.len());
            let mut recon = 0i64;
            for (i, &s) in row.iter().enumerate() {
                if i == 0 {
                    recon = s;
                } else {
                    let level = super::quantize_diff(&cfg, s - recon);
                    recon = super::reconstruct_step(&cfg, recon, level);
                }
                enc_recon.push(recon);
            }

            let codes = dpcm_encode(&row, &cfg).unwrap();
            let dec = dpcm_decode(&codes, &cfg).unwrap();
            prop_assert_eq!(dec, enc_recon);
        }

        /// Lossless setting round-trips exactly.
        #[test]
        fn lossless_round_trip(
            samples in proptest::collection::vec(0i64..4096, 0..64),
        ) {
            let cfg = DpcmConfig::new(12, 13).unwrap();
            let codes = dpcm_encode(&samples, &cfg).unwrap();
            prop_assert_eq!(dpcm_decode(&codes, &cfg).unwrap(), samples);
        }
    }
}
