//! Procedural multi-domain body images.
//!
//! Every subject is a parametric silhouette (head, torso, arms, legs and an
//! optional side bag) with subject-specific proportions and clothing. Each
//! domain renders the same scene through its own degradation: colour for
//! VIS, reflective grayscale for SWIR and contrast-inverted, blurred, noisy
//! grayscale for the thermal bands. Proportions survive every degradation;
//! colour and pixel polarity do not.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_manifest, DatasetManifest, Domain, ImageRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelPolicy {
    Color,
    /// Reflective grayscale weighted toward the red end of the spectrum.
    Gray,
    /// Emissive look: `1 - luminance`.
    InvertedGray,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainDegradation {
    pub blur_sigma: f32,
    pub contrast: f32,
    pub channels: ChannelPolicy,
    pub noise_sigma: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSet {
    pub vis: DomainDegradation,
    pub swir: DomainDegradation,
    pub mwir: DomainDegradation,
    pub lwir: DomainDegradation,
}

impl DegradationSet {
    pub fn get(&self, d: Domain) -> &DomainDegradation {
        match d {
            Domain::Vis => &self.vis,
            Domain::Swir => &self.swir,
            Domain::Mwir => &self.mwir,
            Domain::Lwir => &self.lwir,
        }
    }
}

impl Default for DegradationSet {
    fn default() -> Self {
        Self {
            vis: DomainDegradation {
                blur_sigma: 0.6,
                contrast: 1.0,
                channels: ChannelPolicy::Color,
                noise_sigma: 0.01,
            },
            swir: DomainDegradation {
                blur_sigma: 1.2,
                contrast: 0.9,
                channels: ChannelPolicy::Gray,
                noise_sigma: 0.02,
            },
            mwir: DomainDegradation {
                blur_sigma: 1.8,
                contrast: 0.8,
                channels: ChannelPolicy::InvertedGray,
                noise_sigma: 0.03,
            },
            lwir: DomainDegradation {
                blur_sigma: 2.4,
                contrast: 0.7,
                channels: ChannelPolicy::InvertedGray,
                noise_sigma: 0.045,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Total number of subjects, train and test together.
    pub n_subjects: usize,
    /// Subjects held out for testing; defaults to a third of `n_subjects`.
    pub test_subjects: Option<usize>,
    pub images_per_subject_per_domain: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Patch size the images must tile into.
    pub patch_size: usize,
    pub seed: u64,
    pub degradations: DegradationSet,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            test_subjects: None,
            images_per_subject_per_domain: 4,
            image_height: 384,
            image_width: 128,
            patch_size: 16,
            seed: 0,
            degradations: DegradationSet::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn n_test(&self) -> usize {
        self.test_subjects
            .unwrap_or_else(|| (self.n_subjects / 3).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::config("n_subjects must be at least 2"));
        }
        let n_test = self.n_test();
        if n_test == 0 || n_test >= self.n_subjects {
            return Err(Error::config(format!(
                "test_subjects must lie in [1, {}), got {n_test}",
                self.n_subjects
            )));
        }
        if self.images_per_subject_per_domain == 0 {
            return Err(Error::config(
                "images_per_subject_per_domain must be positive",
            ));
        }
        let p = self.patch_size;
        if p == 0
            || self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(p)
            || !self.image_width.is_multiple_of(p)
        {
            return Err(Error::config(format!(
                "image size {}x{} must be positive and divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.image_height < 32 || self.image_width < 16 {
            return Err(Error::config(format!(
                "image size {}x{} is too small to render a body",
                self.image_height, self.image_width
            )));
        }
        for d in Domain::ALL {
            let g = self.degradations.get(d);
            if !(g.blur_sigma >= 0.0 && g.noise_sigma >= 0.0 && g.contrast > 0.0) {
                return Err(Error::config(format!("invalid degradation for {d}: {g:?}")));
            }
        }
        Ok(())
    }

    pub fn subject_id(i: usize) -> String {
        format!("s{i:03}")
    }
}

/// Identity parameters, in fractions of image width (`u`) and height (`v`).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectAppearance {
    pub head_rx: f32,
    pub head_ry: f32,
    pub shoulder_w: f32,
    pub hip_w: f32,
    pub hip_v: f32,
    pub arm_w: f32,
    pub arm_splay: f32,
    pub leg_w: f32,
    pub leg_gap: f32,
    pub stance: f32,
    pub bag: Option<(f32, f32, f32, f32)>,
    pub skin: [f32; 3],
    pub upper: [f32; 3],
    pub lower: [f32; 3],
    pub stripe_amp: f32,
    pub stripe_period: f32,
    pub stripe_slant: f32,
    /// Covered fraction of the arm, shoulder to hand.
    pub sleeve: f32,
    /// Covered fraction of the leg, hip to ankle.
    pub hem: f32,
}

fn dark_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let base = rng.random_range(0.05..0.7);
    [
        (base + rng.random_range(-0.15..0.35f32)).clamp(0.0, 1.0),
        (base + rng.random_range(-0.15..0.35f32)).clamp(0.0, 1.0),
        (base + rng.random_range(-0.15..0.35f32)).clamp(0.0, 1.0),
    ]
}

impl SubjectAppearance {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let shoulder_w = rng.random_range(0.40..0.88);
        let bag = if rng.random_bool(0.5) {
            let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            Some((
                side,
                rng.random_range(0.22..0.42),
                rng.random_range(0.08..0.16),
                rng.random_range(0.10..0.22),
            ))
        } else {
            None
        };
        let skin_l = rng.random_range(0.45..0.85);
        Self {
            head_rx: rng.random_range(0.09..0.16),
            head_ry: rng.random_range(0.042..0.066),
            shoulder_w,
            hip_w: rng.random_range(0.30..0.62f32).min(shoulder_w),
            hip_v: rng.random_range(0.42..0.60),
            arm_w: rng.random_range(0.06..0.13),
            arm_splay: rng.random_range(0.0..0.10),
            leg_w: rng.random_range(0.10..0.20),
            leg_gap: rng.random_range(0.0..0.14),
            stance: rng.random_range(0.0..0.12),
            bag,
            skin: [skin_l, skin_l * 0.8, skin_l * 0.65],
            upper: dark_colour(rng),
            lower: dark_colour(rng),
            stripe_amp: rng.random_range(0.0..0.7),
            stripe_period: rng.random_range(0.04..0.11),
            stripe_slant: rng.random_range(-0.6..0.6),
            sleeve: if rng.random_bool(0.5) {
                rng.random_range(0.25..0.45)
            } else {
                rng.random_range(0.85..1.0)
            },
            hem: if rng.random_bool(0.5) {
                rng.random_range(0.3..0.5)
            } else {
                rng.random_range(0.9..1.0)
            },
        }
    }
}

/// Distance from `(u, v)` to segment `a`–`b`.
fn segment_dist(u: f32, v: f32, a: (f32, f32), b: (f32, f32), aspect: f32) -> f32 {
    // work in a space where one unit is the same length on both axes
    let (px, py) = (u, v * aspect);
    let (ax, ay) = (a.0, a.1 * aspect);
    let (bx, by) = (b.0, b.1 * aspect);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

struct Pose {
    dx: f32,
    dy: f32,
    scale: f32,
    gain: f32,
    arm_jitter: f32,
}

/// Scene reflectance at `(u, v)`, or `None` for background.
fn body_colour(
    a: &SubjectAppearance,
    pose: &Pose,
    u0: f32,
    v0: f32,
    aspect: f32,
) -> Option<[f32; 3]> {
    // undo pose: scale about the image centre line, then translate
    let u = (u0 - 0.5 - pose.dx) / pose.scale + 0.5;
    let v = (v0 - 0.5 - pose.dy) / pose.scale + 0.5;
    let head_v = 0.085;
    let shoulder_v = head_v + a.head_ry + 0.02;
    let foot_v = 0.965;

    if let Some((side, bv, bw, bh)) = a.bag {
        let bx = 0.5 + side * (a.shoulder_w * 0.5 + bw * 0.5 - 0.02);
        if (u - bx).abs() < bw * 0.5 && (v - bv - bh * 0.5).abs() < bh * 0.5 {
            return Some([0.12, 0.10, 0.09]);
        }
    }
    let hu = (u - 0.5) / a.head_rx;
    let hv = (v - head_v) / a.head_ry;
    if hu * hu + hv * hv <= 1.0 {
        return Some(a.skin);
    }
    if (u - 0.5).abs() < 0.035 && v > head_v && v < shoulder_v + 0.01 {
        return Some(a.skin);
    }
    if v >= shoulder_v && v <= a.hip_v {
        let t = (v - shoulder_v) / (a.hip_v - shoulder_v);
        let half = 0.5 * (a.shoulder_w * (1.0 - t) + a.hip_w * t) - a.arm_w;
        if (u - 0.5).abs() <= half.max(0.05) {
            let phase = (v + a.stripe_slant * (u - 0.5) / aspect) / a.stripe_period;
            let s = 1.0 + a.stripe_amp * (phase * std::f32::consts::TAU).sin();
            return Some(a.upper.map(|c| (c * s).clamp(0.0, 1.0)));
        }
    }
    for side in [-1.0f32, 1.0] {
        let top = (
            0.5 + side * (a.shoulder_w * 0.5 - a.arm_w * 0.5),
            shoulder_v + 0.01,
        );
        let hand_v = a.hip_v + 0.06;
        let bottom = (top.0 + side * (a.arm_splay + pose.arm_jitter), hand_v);
        let d = segment_dist(u, v, top, bottom, aspect);
        if d < a.arm_w * 0.5 {
            let along = (v - top.1) / (hand_v - top.1);
            return Some(if v > hand_v - 0.03 || along > a.sleeve {
                a.skin
            } else {
                a.upper
            });
        }
        let hip = (
            0.5 + side * (a.leg_gap * 0.5 + a.leg_w * 0.5),
            a.hip_v - 0.01,
        );
        let foot = (hip.0 + side * a.stance, foot_v);
        if segment_dist(u, v, hip, foot, aspect) < a.leg_w * 0.5 {
            let along = (v - hip.1) / (foot_v - hip.1);
            return Some(if v > foot_v - 0.025 {
                [0.05, 0.05, 0.05]
            } else if along > a.hem {
                a.skin
            } else {
                a.lower
            });
        }
    }
    // pelvis block joins the legs to the torso
    if v >= a.hip_v - 0.02 && v <= a.hip_v + 0.05 {
        let half = a.leg_gap * 0.5 + a.leg_w;
        if (u - 0.5).abs() <= half.min(a.hip_w * 0.5).max(a.leg_w) {
            return Some(a.lower);
        }
    }
    None
}

/// Renders one image of a subject in a domain. `rng` drives the per-image
/// pose, background and sensor noise.
pub fn render_subject_image(
    appearance: &SubjectAppearance,
    degradation: &DomainDegradation,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let pose = Pose {
        dx: rng.random_range(-0.015..0.015),
        dy: rng.random_range(-0.006..0.006),
        scale: rng.random_range(0.98..1.02),
        gain: rng.random_range(0.94..1.06),
        arm_jitter: rng.random_range(-0.015..0.015),
    };
    let bg_level = rng.random_range(0.68..0.82f32);
    let bg_tint = [
        rng.random_range(-0.04..0.04f32),
        rng.random_range(-0.04..0.04f32),
        rng.random_range(-0.04..0.04f32),
    ];
    let gradient = rng.random_range(-0.06..0.06f32);
    let blobs: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.25),
                rng.random_range(-0.05..0.05),
            )
        })
        .collect();
    let aspect = height as f32 / width as f32;

    let mut scene: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::new(width as u32, height as u32);
    for (x, y, px) in scene.enumerate_pixels_mut() {
        let u = (x as f32 + 0.5) / width as f32;
        let v = (y as f32 + 0.5) / height as f32;
        let rgb = match body_colour(appearance, &pose, u, v, aspect) {
            Some(c) => c.map(|c| c * pose.gain),
            None => {
                let mut level = bg_level + gradient * (v - 0.5);
                for &(bu, bv, r, amp) in &blobs {
                    let d2 = ((u - bu).powi(2) + ((v - bv) * aspect).powi(2)) / (r * r);
                    level += amp * (-d2).exp();
                }
                [level + bg_tint[0], level + bg_tint[1], level + bg_tint[2]]
            }
        };
        let out = match degradation.channels {
            ChannelPolicy::Color => rgb,
            ChannelPolicy::Gray => {
                let g = 0.5 * rgb[0] + 0.35 * rgb[1] + 0.15 * rgb[2];
                [g; 3]
            }
            ChannelPolicy::InvertedGray => {
                let g = 1.0 - (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]);
                [g; 3]
            }
        };
        *px = Rgb(out.map(|c| 0.5 + (c - 0.5) * degradation.contrast));
    }
    let scene = if degradation.blur_sigma > 0.0 {
        image::imageops::blur(&scene, degradation.blur_sigma)
    } else {
        scene
    };

    let noise = Normal::new(0.0f32, degradation.noise_sigma.max(0.0)).expect("finite sigma");
    let gray = degradation.channels != ChannelPolicy::Color;
    let mut out = RgbImage::new(width as u32, height as u32);
    for (src, dst) in scene.pixels().zip(out.pixels_mut()) {
        let shared = noise.sample(rng);
        let mut c = [0u8; 3];
        for (k, ch) in c.iter_mut().enumerate() {
            let n = if gray { shared } else { noise.sample(rng) };
            *ch = ((src.0[k] + n).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        *dst = Rgb(c);
    }
    out
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1, subject as u64]))
}

pub(crate) fn image_rng(seed: u64, subject: usize, domain: Domain, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[
        seed,
        2,
        subject as u64,
        domain.index() as u64,
        k as u64,
    ]))
}

/// Writes images under `out_dir/images/` and the manifest to
/// `out_dir/manifest.jsonl`. The last `n_test()` subjects form the test split.
pub fn generate_synthetic_dataset(
    cfg: &SyntheticConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let n_train = cfg.n_subjects - cfg.n_test();
    let mut records = Vec::new();
    for s in 0..cfg.n_subjects {
        let subject = SyntheticConfig::subject_id(s);
        let appearance = SubjectAppearance::sample(&mut subject_rng(cfg.seed, s));
        let dir = out_dir.join("images").join(&subject);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let split = if s < n_train {
            Split::Train
        } else {
            Split::Test
        };
        for domain in Domain::ALL {
            for k in 0..cfg.images_per_subject_per_domain {
                let img = render_subject_image(
                    &appearance,
                    cfg.degradations.get(domain),
                    cfg.image_height,
                    cfg.image_width,
                    &mut image_rng(cfg.seed, s, domain, k),
                );
                let file = format!("{domain}_{k:02}.png");
                let path = dir.join(&file);
                img.save(&path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                records.push(ImageRecord {
                    subject_id: subject.clone(),
                    domain,
                    template_id: format!("{subject}_{domain}"),
                    media_id: format!("{subject}_{domain}_{k:02}"),
                    image_path: format!("images/{subject}/{file}"),
                    bbox: None,
                    split,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    save_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 3,
            test_subjects: Some(1),
            images_per_subject_per_domain: 2,
            image_height: 96,
            image_width: 32,
            patch_size: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig::default().validate().is_ok());
        let mut c = SyntheticConfig::default();
        c.n_subjects = 1;
        assert!(c.validate().is_err());
        let mut c = SyntheticConfig::default();
        c.image_height = 380;
        assert!(c.validate().is_err());
        let mut c = SyntheticConfig::default();
        c.test_subjects = Some(20);
        assert!(c.validate().is_err());
        assert_eq!(SyntheticConfig::default().n_test(), 6);
    }

    #[test]
    fn counts_and_domains() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_dataset(&small(1), dir.path()).unwrap();
        assert_eq!(m.len(), 3 * 4 * 2);
        for s in m.subjects() {
            assert_eq!(m.subject_domains(s).len(), 4);
        }
        let test: Vec<_> = m.split(Split::Test).subjects().map(String::from).collect();
        assert_eq!(test, vec!["s002"]);
        let img = image::open(m.image_path(0).unwrap()).unwrap();
        assert_eq!((img.width(), img.height()), (32, 96));
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&small(5), a.path()).unwrap();
        generate_synthetic_dataset(&small(5), b.path()).unwrap();
        generate_synthetic_dataset(&small(6), c.path()).unwrap();
        let read = |d: &Path, rel: &str| fs::read(d.join(rel)).unwrap();
        assert_eq!(
            read(a.path(), "manifest.jsonl"),
            read(b.path(), "manifest.jsonl")
        );
        for rel in ["images/s000/VIS_00.png", "images/s002/LWIR_01.png"] {
            assert_eq!(read(a.path(), rel), read(b.path(), rel));
            assert_ne!(read(a.path(), rel), read(c.path(), rel));
        }
    }

    #[test]
    fn thermal_domains_are_gray_and_inverted() {
        let a = SubjectAppearance::sample(&mut subject_rng(3, 0));
        let set = DegradationSet::default();
        let vis = render_subject_image(&a, &set.vis, 96, 32, &mut image_rng(3, 0, Domain::Vis, 0));
        let lwir =
            render_subject_image(&a, &set.lwir, 96, 32, &mut image_rng(3, 0, Domain::Vis, 0));
        assert!(lwir.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]));
        assert!(vis.pixels().any(|p| p.0[0] != p.0[1]));
        // background is bright in VIS and dark once inverted
        let corner = |img: &RgbImage| img.get_pixel(1, 1).0[0] as i32;
        assert!(
            corner(&vis) > 120 && corner(&lwir) < 135,
            "{} {}",
            corner(&vis),
            corner(&lwir)
        );
    }
}
