//! Scene-level cloud filtering, QA bitmask masking and monthly median
//! compositing.

use super::cube::TimeSeriesCube;
use crate::error::{Error, Result};

/// QA bit flagging opaque cloud.
pub const QA_CLOUD_BIT: u16 = 1 << 10;
/// QA bit flagging cirrus.
pub const QA_CIRRUS_BIT: u16 = 1 << 11;
/// Default maximum scene cloud fraction.
pub const DEFAULT_SCENE_THRESHOLD: f32 = 0.20;

/// One acquisition before masking.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    /// Calendar month, 1..=12. Acquisitions from different years share a month.
    pub month: u8,
    /// Scene-level cloud fraction from metadata, in [0, 1].
    pub cloud_fraction: f32,
    /// Per-pixel QA bitmask, `H × W`.
    pub qa: Vec<u16>,
    /// Reflectance, `H × W × C`.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawScene {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<RawImage>,
}

/// Acquisition after cloud masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub month: u8,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Drops scenes whose cloud fraction is not below `scene_threshold`, then
/// invalidates pixels with the cloud or cirrus QA bit set.
pub fn apply_cloud_mask(raw: &RawScene, scene_threshold: f32) -> Result<Vec<MaskedImage>> {
    if !(scene_threshold > 0.0 && scene_threshold <= 1.0) {
        return Err(Error::config(format!(
            "scene threshold must lie in (0, 1], got {scene_threshold}"
        )));
    }
    let pixels = raw.height * raw.width;
    let mut out = Vec::new();
    for img in &raw.images {
        if img.qa.len() != pixels || img.values.len() != pixels * raw.channels {
            return Err(Error::Dimension {
                op: "raw image",
                lhs: vec![raw.height, raw.width, raw.channels],
                rhs: vec![img.qa.len(), img.values.len()],
            });
        }
        if !(1..=12).contains(&img.month) {
            return Err(Error::config(format!("month {} outside 1..=12", img.month)));
        }
        if img.cloud_fraction >= scene_threshold {
            continue;
        }
        let valid = img
            .qa
            .iter()
            .map(|q| q & (QA_CLOUD_BIT | QA_CIRRUS_BIT) == 0)
            .collect();
        out.push(MaskedImage {
            month: img.month,
            values: img.values.clone(),
            valid,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyStack);
    }
    Ok(out)
}

/// Median of a non-empty slice; even counts average the two middle values.
pub fn median(values: &mut [f32]) -> f32 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Builds a 12-month cube (timestamps 1..=12) of per-pixel, per-channel
/// medians over valid observations. Months without any valid observation
/// copy the nearest valid month (circular distance, earlier month on ties)
/// and are marked invalid.
pub fn median_composite(
    images: &[MaskedImage],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<TimeSeriesCube> {
    const MONTHS: usize = 12;
    let pixels = height * width;
    let mut values = vec![0.0f32; MONTHS * pixels * channels];
    let mut have = vec![false; MONTHS * pixels];
    let mut scratch: Vec<f32> = Vec::new();
    for m in 0..MONTHS {
        let month_imgs: Vec<&MaskedImage> = images
            .iter()
            .filter(|i| i.month as usize == m + 1)
            .collect();
        for p in 0..pixels {
            let obs: Vec<&&MaskedImage> = month_imgs.iter().filter(|i| i.valid[p]).collect();
            if obs.is_empty() {
                continue;
            }
            have[m * pixels + p] = true;
            for c in 0..channels {
                scratch.clear();
                scratch.extend(obs.iter().map(|i| i.values[p * channels + c]));
                values[(m * pixels + p) * channels + c] = median(&mut scratch);
            }
        }
    }
    let mut missing = Vec::new();
    for p in 0..pixels {
        if (0..MONTHS).all(|m| !have[m * pixels + p]) {
            missing.push((p / width, p % width));
            continue;
        }
        for m in 0..MONTHS {
            if have[m * pixels + p] {
                continue;
            }
            let src = (1..=MONTHS / 2)
                .flat_map(|d| [(m + MONTHS - d) % MONTHS, (m + d) % MONTHS])
                .find(|&s| have[s * pixels + p])
                .expect("pixel has at least one valid month");
            let (dst, from) = ((m * pixels + p) * channels, (src * pixels + p) * channels);
            values.copy_within(from..from + channels, dst);
        }
    }
    if !missing.is_empty() {
        return Err(Error::NoValidObservation(missing));
    }
    TimeSeriesCube::with_validity((1..=12).collect(), height, width, channels, values, have)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(images: Vec<RawImage>) -> RawScene {
        RawScene {
            height: 1,
            width: 2,
            channels: 1,
            images,
        }
    }

    fn img(month: u8, cloud: f32, qa: [u16; 2], v: [f32; 2]) -> RawImage {
        RawImage {
            month,
            cloud_fraction: cloud,
            qa: qa.to_vec(),
            values: v.to_vec(),
        }
    }

    #[test]
    fn clear_scene_passes_unchanged() {
        let s = scene(vec![img(1, 0.0, [0, 0], [0.2, 0.3])]);
        let out = apply_cloud_mask(&s, DEFAULT_SCENE_THRESHOLD).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].values, vec![0.2, 0.3]);
        assert_eq!(out[0].valid, vec![true, true]);
    }

    #[test]
    fn cloudy_scene_dropped_and_empty_stack_error() {
        let s = scene(vec![img(1, 0.25, [0, 0], [0.2, 0.3])]);
        assert!(matches!(
            apply_cloud_mask(&s, 0.20),
            Err(Error::EmptyStack)
        ));
    }

    #[test]
    fn qa_bits_invalidate_without_touching_values() {
        let s = scene(vec![
            img(1, 0.0, [QA_CLOUD_BIT, 0], [0.2, 0.3]),
            img(2, 0.0, [0, QA_CIRRUS_BIT | 1], [0.4, 0.5]),
        ]);
        let out = apply_cloud_mask(&s, 0.2).unwrap();
        assert_eq!(out[0].valid, vec![false, true]);
        assert_eq!(out[1].valid, vec![true, false]);
        assert_eq!(out[0].values, vec![0.2, 0.3]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [0.1, 0.5, 0.9]), 0.5);
        assert_eq!(median(&mut [0.9, 0.1]), 0.5);
    }

    fn masked(month: u8, v: f32) -> MaskedImage {
        MaskedImage {
            month,
            values: vec![v],
            valid: vec![true],
        }
    }

    #[test]
    fn single_image_per_month_is_identity() {
        let imgs: Vec<MaskedImage> = (1..=12).map(|m| masked(m, m as f32 / 100.0)).collect();
        let cube = median_composite(&imgs, 1, 1, 1).unwrap();
        for m in 0..12 {
            assert_eq!(cube.get(m, 0, 0, 0), (m + 1) as f32 / 100.0);
            assert!(cube.is_valid(m, 0, 0));
        }
    }

    #[test]
    fn gap_months_filled_from_nearest_and_flagged() {
        let imgs = vec![masked(3, 0.3), masked(3, 0.5), masked(3, 0.1), masked(6, 0.6)];
        let cube = median_composite(&imgs, 1, 1, 1).unwrap();
        assert_eq!(cube.get(2, 0, 0, 0), 0.3);
        assert!(cube.is_valid(2, 0, 0));
        assert_eq!(cube.get(3, 0, 0, 0), 0.3); // April: March is 1 away
        assert_eq!(cube.get(4, 0, 0, 0), 0.6); // May: June is 1 away
        assert_eq!(cube.get(11, 0, 0, 0), 0.3); // December wraps to March
        assert!(!cube.is_valid(3, 0, 0));
    }

    #[test]
    fn pixel_never_valid_is_an_error() {
        let imgs = vec![MaskedImage {
            month: 1,
            values: vec![0.1, 0.2],
            valid: vec![true, false],
        }];
        match median_composite(&imgs, 1, 2, 1) {
            Err(Error::NoValidObservation(px)) => assert_eq!(px, vec![(0, 1)]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn composite_is_permutation_invariant() {
        let mut imgs: Vec<MaskedImage> = (0..9)
            .map(|i| masked((i % 3 + 1) as u8, (i * 7 % 11) as f32 / 11.0))
            .collect();
        let a = median_composite(&imgs, 1, 1, 1).unwrap();
        imgs.reverse();
        imgs.swap(1, 4);
        let b = median_composite(&imgs, 1, 1, 1).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
