use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Crop proportion used for evaluation views.
pub const TEST_CROP_PROPORTION: f64 = 0.9;

/// Crops a contiguous `max(1, round(p·T))`-frame segment and resamples it to
/// `target_len` frames by align-corners linear interpolation along time.
///
/// With `rng` the start offset is uniform over valid offsets; without it the
/// crop is centered.
pub fn crop_and_resize(
    frames: &DenseArray,
    proportion: f64,
    target_len: usize,
    rng: Option<&mut dyn RngCore>,
) -> Result<DenseArray> {
    let &[t, v, c] = frames.shape() else {
        return Err(Error::Shape(format!("expected T×V×C, got {:?}", frames.shape())));
    };
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Contract(format!("crop proportion {proportion} outside (0, 1]")));
    }
    if target_len < 2 {
        return Err(Error::Contract(format!("target length {target_len} below 2")));
    }
    if t == 0 {
        return Err(Error::Contract("cannot crop an empty sequence".into()));
    }
    let crop = ((proportion * t as f64).round() as usize).clamp(1, t);
    let slack = t - crop;
    let start = match rng {
        Some(rng) => rng.random_range(0..=slack),
        None => slack / 2,
    };

    let width = v * c;
    let src = &frames.data()[start * width..(start + crop) * width];
    let mut out = vec![0.0; target_len * width];
    for k in 0..target_len {
        let pos = (k * (crop - 1)) as f64 / (target_len - 1) as f64;
        let lo = (pos.floor() as usize).min(crop - 1);
        let hi = (lo + 1).min(crop - 1);
        let frac = pos - lo as f64;
        let dst = &mut out[k * width..(k + 1) * width];
        let (a, b) = (&src[lo * width..(lo + 1) * width], &src[hi * width..(hi + 1) * width]);
        for j in 0..width {
            dst[j] = if frac == 0.0 { a[j] } else { a[j] + frac * (b[j] - a[j]) };
        }
    }
    DenseArray::new(vec![target_len, v, c], out)
}

/// Training view: proportion drawn from U[0.5, 1], random offset.
pub fn training_view(frames: &DenseArray, target_len: usize, rng: &mut dyn RngCore) -> Result<DenseArray> {
    let p = rng.random_range(0.5..=1.0);
    crop_and_resize(frames, p, target_len, Some(rng))
}

/// Evaluation view: fixed proportion 0.9, centered.
pub fn test_view(frames: &DenseArray, target_len: usize) -> Result<DenseArray> {
    crop_and_resize(frames, TEST_CROP_PROPORTION, target_len, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(t: usize, v: usize, c: usize, seed: u64) -> DenseArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseArray::from_fn(vec![t, v, c], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn identity_when_full_crop_same_length() {
        let a = random_seq(17, 3, 2, 1);
        let b = crop_and_resize(&a, 1.0, 17, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_sequence_stays_constant() {
        let a = DenseArray::full(vec![31, 2, 3], 4.25);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in [0.01, 0.3, 0.5, 0.77, 1.0] {
            let b = crop_and_resize(&a, p, 12, Some(&mut rng)).unwrap();
            assert!(b.data().iter().all(|&x| x == 4.25));
        }
    }

    #[test]
    fn linear_ramp_align_corners() {
        let len = 10;
        let ramp = DenseArray::from_fn(vec![len, 1, 1], |i| i as f64);
        let target = 7;
        let out = crop_and_resize(&ramp, 1.0, target, None).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[target - 1], (len - 1) as f64);
        for k in 0..target {
            let expected = k as f64 * (len - 1) as f64 / (target - 1) as f64;
            assert!((out.data()[k] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_arguments() {
        let a = random_seq(5, 1, 1, 3);
        assert!(crop_and_resize(&a, 0.0, 4, None).is_err());
        assert!(crop_and_resize(&a, 1.5, 4, None).is_err());
        assert!(crop_and_resize(&a, 0.5, 1, None).is_err());
    }

    #[test]
    fn crop_length_rounds_half_away_from_zero() {
        // T=5, p=0.5 → 2.5 rounds to 3 frames; a ramp cropped centered from
        // offset 1 resampled to 3 frames reproduces frames 1..=3.
        let ramp = DenseArray::from_fn(vec![5, 1, 1], |i| i as f64);
        let out = crop_and_resize(&ramp, 0.5, 3, None).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn views_are_deterministic() {
        let a = random_seq(40, 4, 3, 4);
        assert_eq!(test_view(&a, 16).unwrap(), test_view(&a, 16).unwrap());
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            training_view(&a, 16, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn mean_training_proportion() {
        // Recover p from the crop of a ramp: endpoints of the resampled view
        // span exactly crop-1 frames.
        let t = 1000;
        let ramp = DenseArray::from_fn(vec![t, 1, 1], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let out = training_view(&ramp, 2, &mut rng).unwrap();
            total += (out.data()[1] - out.data()[0] + 1.0) / t as f64;
        }
        let mean = total / n as f64;
        assert!((mean - 0.75).abs() < 0.01, "mean proportion {mean}");
    }

    proptest! {
        #[test]
        fn shape_and_envelope(
            t in 1usize..40, v in 1usize..4, c in 1usize..4,
            p in 0.01f64..=1.0, target in 2usize..30, seed in any::<u64>(),
        ) {
            let a = random_seq(t, v, c, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let random = crop_and_resize(&a, p, target, Some(&mut rng)).unwrap();
            prop_assert_eq!(random.shape(), &[target, v, c]);
            // Centered crops have a known segment; outputs stay inside its
            // per joint/channel envelope.
            let out = crop_and_resize(&a, p, target, None).unwrap();
            let crop = ((p * t as f64).round() as usize).clamp(1, t);
            let start = (t - crop) / 2;
            for j in 0..v * c {
                let seg = (start..start + crop).map(|f| a.data()[f * v * c + j]);
                let lo = seg.clone().fold(f64::INFINITY, f64::min);
                let hi = seg.fold(f64::NEG_INFINITY, f64::max);
                for f in 0..target {
                    let y = out.data()[f * v * c + j];
                    prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
        }
    }
}
