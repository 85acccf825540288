//! Span noising for denoising pretraining.
//!
//! Contiguous spans of the input are replaced by a single `MASK` token each,
//! until the requested fraction of positions is covered. Span lengths follow
//! a Poisson law (zero-length draws are resampled); span starts are drawn
//! uniformly over the not-yet-covered positions, so the procedure always
//! terminates. Special tokens are never masked, and the output is never
//! longer than the input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tasks::{NoiseConfig, BOS, EOS, MASK, PAD};

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in [0, 1], got {}",
                self.mask_ratio
            )));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::Config(format!(
                "span length mean must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn is_special(tok: usize) -> bool {
    matches!(tok, PAD | BOS | EOS | MASK)
}

/// Draw from Poisson(lambda) by Knuth's product method. Exact and
/// library-version-stable; fine for the small means used here.
fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> usize {
    let threshold = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= threshold {
            return k;
        }
        k += 1;
    }
}

/// Nonzero Poisson span length.
fn span_len(lambda: f64, rng: &mut ChaCha8Rng) -> usize {
    loop {
        let k = poisson(lambda, rng);
        if k > 0 {
            return k;
        }
    }
}

/// Replace spans of `tokens` with single `MASK` tokens until at least
/// `mask_ratio` of the maskable positions are covered. Deterministic given
/// the RNG state.
pub fn noise_spans(tokens: &[usize], cfg: &NoiseConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let maskable: Vec<usize> = (0..tokens.len())
        .filter(|&i| !is_special(tokens[i]))
        .collect();
    let target = (cfg.mask_ratio * maskable.len() as f64).ceil() as usize;
    if target == 0 || maskable.is_empty() {
        return tokens.to_vec();
    }

    let mut covered = vec![false; tokens.len()];
    let mut n_covered = 0usize;
    while n_covered < target {
        let open: Vec<usize> = maskable.iter().copied().filter(|&i| !covered[i]).collect();
        if open.is_empty() {
            break;
        }
        let start = open[rng.random_range(0..open.len())];
        let len = span_len(cfg.lambda, rng);
        for i in start..(start + len).min(tokens.len()) {
            if !is_special(tokens[i]) && !covered[i] {
                covered[i] = true;
                n_covered += 1;
            }
        }
    }

    let mut out = Vec::with_capacity(tokens.len());
    let mut in_span = false;
    for (i, &tok) in tokens.iter().enumerate() {
        if covered[i] {
            if !in_span {
                out.push(MASK);
                in_span = true;
            }
        } else {
            out.push(tok);
            in_span = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tasks::NUM_SPECIALS;

    fn cfg(ratio: f64) -> NoiseConfig {
        NoiseConfig { mask_ratio: ratio, lambda: 3.5 }
    }

    #[test]
    fn ratio_zero_is_identity() {
        let mut rng = stream(1, "noise-test");
        let toks = vec![5, 6, 7, 8];
        assert_eq!(noise_spans(&toks, &cfg(0.0), &mut rng), toks);
    }

    #[test]
    fn specials_are_never_masked_and_output_never_grows() {
        let mut rng = stream(2, "noise-test");
        for trial in 0..200 {
            let len = 3 + (trial % 10);
            let mut toks = vec![BOS];
            toks.extend((0..len).map(|i| NUM_SPECIALS + i));
            toks.push(EOS);
            let noised = noise_spans(&toks, &cfg(0.5), &mut rng);
            assert_eq!(noised[0], BOS);
            assert_eq!(*noised.last().unwrap(), EOS);
            assert!(noised.len() <= toks.len());
            assert!(noised.contains(&MASK));
        }
    }

    #[test]
    fn coverage_meets_the_requested_ratio() {
        let mut rng = stream(3, "noise-test");
        for _ in 0..100 {
            let toks: Vec<usize> = (0..12).map(|i| NUM_SPECIALS + i).collect();
            let noised = noise_spans(&toks, &cfg(0.4), &mut rng);
            // ceil(0.4 · 12) = 5 positions removed or replaced; survivors
            // are the uncovered originals, so at most 12 − 5 = 7 remain.
            let survivors = noised.iter().filter(|&&t| t != MASK).count();
            assert!(survivors <= 7, "survivors {survivors}");
        }
    }

    #[test]
    fn mask_runs_are_collapsed_and_order_preserved() {
        let mut rng = stream(4, "noise-test");
        for _ in 0..100 {
            let toks: Vec<usize> = (0..10).map(|i| NUM_SPECIALS + i).collect();
            let noised = noise_spans(&toks, &cfg(0.5), &mut rng);
            for w in noised.windows(2) {
                assert!(!(w[0] == MASK && w[1] == MASK), "adjacent masks");
            }
            // surviving tokens keep their relative order
            let survivors: Vec<usize> = noised.iter().copied().filter(|&t| t != MASK).collect();
            let mut it = toks.iter();
            for s in survivors {
                assert!(it.any(|&t| t == s));
            }
        }
    }

    #[test]
    fn full_ratio_masks_everything_into_one_token() {
        let mut rng = stream(5, "noise-test");
        let toks: Vec<usize> = (0..8).map(|i| NUM_SPECIALS + i).collect();
        let noised = noise_spans(&toks, &cfg(1.0), &mut rng);
        assert_eq!(noised, vec![MASK]);
    }

    #[test]
    fn noising_is_deterministic_per_stream() {
        let run = |seed| {
            let mut rng = stream(seed, "noise-test");
            let toks: Vec<usize> = (0..10).map(|i| NUM_SPECIALS + i).collect();
            (0..20).map(|_| noise_spans(&toks, &cfg(0.35), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn poisson_mean_is_roughly_lambda() {
        let mut rng = stream(6, "noise-test");
        let n = 20_000;
        let total: usize = (0..n).map(|_| poisson(3.5, &mut rng)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 3.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn golden_trace_is_stable() {
        // Regression pin: this exact output was produced by the current
        // sampler; any change to the noising procedure must be deliberate.
        let mut rng = stream(42, "noise-golden");
        let toks: Vec<usize> = (0..12).map(|i| NUM_SPECIALS + i).collect();
        let a = noise_spans(&toks, &cfg(0.35), &mut rng);
        let b = noise_spans(&toks, &cfg(0.35), &mut rng);
        insta_like_assert(&a, &b);
    }

    // Frozen on first run; see golden_trace_is_stable.
    fn insta_like_assert(a: &[usize], b: &[usize]) {
        assert_eq!(a, &[4, 5, 3, 15], "first draw changed");
        assert_eq!(b, &[4, 5, 6, 7, 3, 10, 11, 3], "second draw changed");
    }
}
