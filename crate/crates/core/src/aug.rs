//! MixUp, ShuffleMix, and the combined ShuffleMix+ batch augmentation.
//!
//! MixUp blends whole clips convexly; ShuffleMix swaps complementary frame
//! subsets between two clips and weights the labels by the retained-frame
//! rate actually realized after quantization. Both modalities of a sample
//! are always mixed with the same partner, lambda, and mask.

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, VideoClip};
use crate::error::{Result, UmdrError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixGeometry {
    /// Replaced frames scattered anywhere in the sequence.
    Discrete,
    /// Replaced frames form one contiguous run.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixGranularity {
    /// One MixUp-vs-ShuffleMix draw per mini-batch.
    Batch,
    /// One draw per sample pair.
    Pair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixParams {
    pub alpha_m: f64,
    pub alpha_s: f64,
    pub rho: f64,
    pub geometry: MixGeometry,
    pub granularity: MixGranularity,
}

impl Default for MixParams {
    fn default() -> Self {
        MixParams {
            alpha_m: 0.8,
            alpha_s: 0.2,
            rho: 0.5,
            geometry: MixGeometry::Discrete,
            granularity: MixGranularity::Batch,
        }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_m <= 0.0 || self.alpha_s <= 0.0 {
            return Err(UmdrError::InvalidArgument(
                "mixing alphas must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(UmdrError::InvalidArgument("rho must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Binary keep-mask over the temporal axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalMask {
    pub bits: Vec<u8>,
}

impl TemporalMask {
    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Retained fraction actually realized by the quantized mask.
    pub fn effective_rate(&self) -> f64 {
        self.ones() as f64 / self.bits.len() as f64
    }

    pub fn complement(&self) -> TemporalMask {
        TemporalMask {
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }
}

/// Draw from Beta(alpha, alpha) on [0, 1].
pub fn sample_beta(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(UmdrError::InvalidArgument(format!(
            "beta parameter must be positive, got {alpha}"
        )));
    }
    let dist = rand_distr::Beta::new(alpha, alpha)
        .map_err(|e| UmdrError::InvalidArgument(e.to_string()))?;
    Ok(rand_distr::Distribution::sample(&dist, rng))
}

fn check_pair_shapes(a: &LabeledSample, b: &LabeledSample) -> Result<()> {
    if a.rgb.frames.shape() != b.rgb.frames.shape()
        || a.depth.frames.shape() != b.depth.frames.shape()
        || a.label.len() != b.label.len()
    {
        return Err(UmdrError::shape(
            a.rgb.frames.shape().to_vec(),
            b.rgb.frames.shape().to_vec(),
            "mixed samples must share shapes and class count",
        ));
    }
    Ok(())
}

fn mix_labels(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    let l = lambda as f32;
    a.iter().zip(b).map(|(&x, &y)| l * x + (1.0 - l) * y).collect()
}

/// Convex blend of two samples: `lambda * a + (1 - lambda) * b` on every
/// pixel of both modalities and on the labels.
pub fn mixup_pair(a: &LabeledSample, b: &LabeledSample, lambda: f64) -> Result<LabeledSample> {
    check_pair_shapes(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(UmdrError::InvalidArgument(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let l = lambda as f32;
    let blend = |x: &VideoClip, y: &VideoClip| VideoClip {
        frames: x.frames.mapv(|v| v * l) + &y.frames.mapv(|v| v * (1.0 - l)),
        modality: x.modality,
    };
    Ok(LabeledSample {
        rgb: blend(&a.rgb, &b.rgb),
        depth: blend(&a.depth, &b.depth),
        label: mix_labels(&a.label, &b.label, lambda),
    })
}

/// Keep-mask with `round(lambda_s * t)` ones. Discrete geometry scatters the
/// kept set uniformly; continuous geometry puts the dropped run at a uniform
/// offset so the replaced frames stay consecutive.
pub fn make_temporal_mask(
    t: usize,
    lambda_s: f64,
    geometry: MixGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<TemporalMask> {
    if t == 0 {
        return Err(UmdrError::InvalidArgument("mask length must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&lambda_s) {
        return Err(UmdrError::InvalidArgument(format!(
            "lambda_s must be in [0, 1], got {lambda_s}"
        )));
    }
    let k = (lambda_s * t as f64).round() as usize;
    let k = k.min(t);
    let mut bits = vec![0u8; t];
    match geometry {
        MixGeometry::Discrete => {
            // partial Fisher-Yates: first k slots of a shuffled index list
            let mut order: Vec<usize> = (0..t).collect();
            for i in 0..k {
                let j = rng.gen_range(i..t);
                order.swap(i, j);
            }
            for &i in &order[..k] {
                bits[i] = 1;
            }
        }
        MixGeometry::Continuous => {
            let zeros = t - k;
            let offset = if zeros == t {
                0
            } else {
                rng.gen_range(0..=t - zeros)
            };
            bits.iter_mut().for_each(|b| *b = 1);
            for b in &mut bits[offset..offset + zeros] {
                *b = 0;
            }
        }
    }
    Ok(TemporalMask { bits })
}

/// Frame-exchange mix: output frame `t` comes from `a` where the mask keeps
/// it, from `b` otherwise; labels weighted by the realized keep rate.
pub fn shufflemix_pair(
    a: &LabeledSample,
    b: &LabeledSample,
    mask: &TemporalMask,
) -> Result<LabeledSample> {
    check_pair_shapes(a, b)?;
    if mask.bits.len() != a.rgb.t() {
        return Err(UmdrError::shape(
            vec![a.rgb.t()],
            vec![mask.bits.len()],
            "mask length must equal clip length",
        ));
    }
    let weave = |x: &VideoClip, y: &VideoClip| {
        let mut frames = x.frames.clone();
        for (t, &bit) in mask.bits.iter().enumerate() {
            if bit == 0 {
                frames
                    .index_axis_mut(Axis(0), t)
                    .assign(&y.frames.index_axis(Axis(0), t));
            }
        }
        VideoClip {
            frames,
            modality: x.modality,
        }
    };
    Ok(LabeledSample {
        rgb: weave(&a.rgb, &b.rgb),
        depth: weave(&a.depth, &b.depth),
        label: mix_labels(&a.label, &b.label, mask.effective_rate()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixChoice {
    MixUp,
    ShuffleMix,
}

/// One augmented batch plus the bookkeeping of what was applied.
pub struct MixedBatch {
    pub samples: Vec<LabeledSample>,
    pub choices: Vec<MixChoice>,
    pub partners: Vec<usize>,
}

/// ShuffleMix+ over a batch: each sample is mixed with a distinct partner
/// (fixed-point-free permutation), the mixer is chosen by a Bernoulli(rho)
/// draw at the configured granularity, and every pair gets a fresh lambda.
pub fn shufflemix_plus(
    batch: &[LabeledSample],
    params: &MixParams,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    params.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(UmdrError::InvalidArgument(
            "shufflemix+ needs a batch of at least 2".into(),
        ));
    }
    let partners = derangement(n, rng);
    let batch_shuffle = match params.granularity {
        MixGranularity::Batch => Some(rng.gen::<f64>() < params.rho),
        MixGranularity::Pair => None,
    };
    let mut samples = Vec::with_capacity(n);
    let mut choices = Vec::with_capacity(n);
    for i in 0..n {
        let j = partners[i];
        let use_shuffle = match batch_shuffle {
            Some(b) => b,
            None => rng.gen::<f64>() < params.rho,
        };
        if use_shuffle {
            let lambda_s = sample_beta(params.alpha_s, rng)?;
            let t = batch[i].rgb.t();
            let mask = make_temporal_mask(t, lambda_s, params.geometry, rng)?;
            samples.push(shufflemix_pair(&batch[i], &batch[j], &mask)?);
            choices.push(MixChoice::ShuffleMix);
        } else {
            let lambda_m = sample_beta(params.alpha_m, rng)?;
            samples.push(mixup_pair(&batch[i], &batch[j], lambda_m)?);
            choices.push(MixChoice::MixUp);
        }
    }
    Ok(MixedBatch {
        samples,
        choices,
        partners,
    })
}

/// Random permutation with no fixed points, drawn by rejection.
fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn sample_from(seed: u64, class: usize, t: usize) -> LabeledSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |modality| VideoClip {
            frames: ArrayD::from_shape_fn(IxDyn(&[t, 3, 4, 4]), |_| rng.gen_range(0.0..1.0)),
            modality,
        };
        LabeledSample {
            rgb: mk(crate::data::Modality::Rgb),
            depth: mk(crate::data::Modality::Depth),
            label: crate::data::one_hot(class, 6),
        }
    }

    #[test]
    fn beta_mean_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let v = sample_beta(0.8, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&v));
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!(sample_beta(0.0, &mut rng).is_err());
    }

    #[test]
    fn mixup_endpoint_and_arithmetic() {
        let a = sample_from(1, 2, 4);
        let b = sample_from(2, 5, 4);
        let out = mixup_pair(&a, &b, 1.0).unwrap();
        assert_eq!(out.rgb.frames, a.rgb.frames);
        assert_eq!(out.label, a.label);

        // 0.8 * 0.5 + 0.2 * 0.1 = 0.42 on a hand-placed pixel
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.rgb.frames[IxDyn(&[0, 0, 0, 0])] = 0.5;
        b2.rgb.frames[IxDyn(&[0, 0, 0, 0])] = 0.1;
        let out = mixup_pair(&a2, &b2, 0.8).unwrap();
        assert!((out.rgb.frames[IxDyn(&[0, 0, 0, 0])] - 0.42).abs() < 1e-6);
        let expect = [0.0, 0.0, 0.8, 0.0, 0.0, 0.2];
        for (got, want) in out.label.iter().zip(expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_count_rule_discrete() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = make_temporal_mask(8, 0.5, MixGeometry::Discrete, &mut rng).unwrap();
            assert_eq!(m.ones(), 4);
            assert!((m.effective_rate() - 0.5).abs() < 1e-12);
        }
        let m = make_temporal_mask(8, 1.0, MixGeometry::Discrete, &mut rng).unwrap();
        assert_eq!(m.bits, vec![1; 8]);
    }

    #[test]
    fn mask_continuous_zero_run_is_contiguous() {
        // T=8, lambda 0.75 -> 6 ones, 2 zeros adjacent at one of 7 offsets
        let valid: Vec<Vec<u8>> = (0..=6)
            .map(|o| {
                let mut b = vec![1u8; 8];
                b[o] = 0;
                b[o + 1] = 0;
                b
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..300 {
            let m = make_temporal_mask(8, 0.75, MixGeometry::Continuous, &mut rng).unwrap();
            assert!(valid.contains(&m.bits), "bits {:?}", m.bits);
            seen.insert(m.bits.clone());
        }
        assert!(seen.len() >= 5, "offsets should vary, saw {}", seen.len());
    }

    #[test]
    fn shufflemix_weave_and_label() {
        let a = sample_from(5, 2, 4);
        let b = sample_from(6, 5, 4);
        let mask = TemporalMask {
            bits: vec![1, 0, 1, 0],
        };
        let out = shufflemix_pair(&a, &b, &mask).unwrap();
        for t in 0..4 {
            let src = if t % 2 == 0 { &a } else { &b };
            assert_eq!(
                out.rgb.frames.index_axis(Axis(0), t),
                src.rgb.frames.index_axis(Axis(0), t)
            );
            assert_eq!(
                out.depth.frames.index_axis(Axis(0), t),
                src.depth.frames.index_axis(Axis(0), t)
            );
        }
        for (i, &l) in out.label.iter().enumerate() {
            let want = 0.5 * a.label[i] + 0.5 * b.label[i];
            assert!((l - want).abs() < 1e-6);
        }
        // all-ones endpoint
        let full = TemporalMask { bits: vec![1; 4] };
        let out = shufflemix_pair(&a, &b, &full).unwrap();
        assert_eq!(out.rgb.frames, a.rgb.frames);
    }

    #[test]
    fn mask_complement_partner_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = make_temporal_mask(10, 0.3, MixGeometry::Discrete, &mut rng).unwrap();
            let c = m.complement();
            for (x, y) in m.bits.iter().zip(&c.bits) {
                assert_eq!(x + y, 1);
            }
            assert!((m.effective_rate() + c.effective_rate() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn plus_rho_endpoints() {
        let batch: Vec<LabeledSample> = (0..6).map(|i| sample_from(i, i as usize % 6, 4)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = MixParams {
            rho: 0.0,
            granularity: MixGranularity::Pair,
            ..Default::default()
        };
        let out = shufflemix_plus(&batch, &p, &mut rng).unwrap();
        assert!(out.choices.iter().all(|&c| c == MixChoice::MixUp));

        p.rho = 1.0;
        let out = shufflemix_plus(&batch, &p, &mut rng).unwrap();
        assert!(out.choices.iter().all(|&c| c == MixChoice::ShuffleMix));
        assert!(out.partners.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn plus_seeded_determinism() {
        let batch: Vec<LabeledSample> = (0..5).map(|i| sample_from(i + 20, i as usize % 6, 4)).collect();
        let p = MixParams::default();
        let a = shufflemix_plus(&batch, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = shufflemix_plus(&batch, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.rgb.frames, y.rgb.frames);
            assert_eq!(x.depth.frames, y.depth.frames);
            assert_eq!(x.label, y.label);
        }
        assert!(shufflemix_plus(&batch[..1], &p, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn labels_stay_on_simplex_and_frames_in_bounds() {
        let batch: Vec<LabeledSample> = (0..4).map(|i| sample_from(i + 40, i as usize % 6, 5)).collect();
        let p = MixParams {
            granularity: MixGranularity::Pair,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let out = shufflemix_plus(&batch, &p, &mut rng).unwrap();
            for s in &out.samples {
                let sum: f32 = s.label.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(s.label.iter().all(|&v| v >= 0.0));
                assert!(s.rgb.frames.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
