use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use super::render::{au_appearance, render_clean, PatternStyle, Scene};
use super::template::neutral_template;
use super::{io, DataError, DatasetManifest, FrameRecord, LabelFormat, SessionEntry, SubjectEntry};
use crate::roi_geometry::{ImageSize, LandmarkSet, Point, RuleTable, DEFAULT_AUS, MIRROR_68};

/// Largest change of a latent activation between consecutive frames.
pub const MAX_LATENT_STEP: f64 = 0.19;

/// AU pairs driven by a common latent process (smiles raise the cheeks and
/// pull the lip corners; brow raisers tend to act together).
pub const SHARED_DRIVERS: [(u32, u32); 2] = [(6, 12), (1, 2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub sessions: usize,
    pub frames: usize,
    pub image_size: usize,
    pub aus: Vec<u32>,
    /// Long-run fraction of frames with each AU active.
    pub prevalence: Vec<f64>,
    /// AR(1) coefficient of the latent processes.
    pub smoothness: f64,
    /// Steepness of the map from latent process to activation.
    pub sharpness: f64,
    pub pattern_amplitude: f64,
    pub pattern_sigma: f64,
    pub pattern_period: f64,
    /// Per-frame AU gains are uniform in `[1 - j, 1 + j]`.
    pub amplitude_jitter: f64,
    pub noise_std: f64,
    pub brightness_std: f64,
    /// Stationary std (pixels) of the slow head translation.
    pub pose_drift: f64,
    /// Std (pixels) of the landmark tracker error written to disk.
    pub landmark_noise: f64,
    /// Strength of shared latent drivers, as a fraction of variance.
    pub shared_weight: f64,
    pub label_format: LabelFormat,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 6,
            sessions: 2,
            frames: 120,
            image_size: 40,
            aus: DEFAULT_AUS.to_vec(),
            prevalence: vec![0.25, 0.2, 0.2, 0.45, 0.5, 0.5, 0.5, 0.45, 0.15, 0.3, 0.15, 0.1],
            smoothness: 0.97,
            sharpness: 6.0,
            pattern_amplitude: 0.3,
            pattern_sigma: 2.0,
            pattern_period: 4.0,
            amplitude_jitter: 0.4,
            noise_std: 0.06,
            brightness_std: 0.03,
            pose_drift: 1.0,
            landmark_noise: 0.25,
            shared_weight: 0.8,
            label_format: LabelFormat::Binary,
        }
    }
}

impl SynthConfig {
    pub fn image(&self) -> ImageSize {
        ImageSize::square(self.image_size)
    }

    pub fn style(&self) -> PatternStyle {
        PatternStyle {
            amplitude: self.pattern_amplitude,
            sigma: self.pattern_sigma,
            period: self.pattern_period,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.subjects == 0 || self.sessions == 0 || self.frames == 0 {
            return bad("subjects, sessions and frames must be positive");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if self.aus.is_empty() || self.prevalence.len() != self.aus.len() {
            return bad("prevalence needs one entry per AU");
        }
        if self.prevalence.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("prevalence values must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.smoothness) || !(0.0..=1.0).contains(&self.shared_weight) {
            return bad("smoothness must lie in [0, 1) and shared_weight in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) {
            return bad("amplitude_jitter must lie in [0, 1)");
        }
        let nonneg = [
            self.noise_std,
            self.brightness_std,
            self.pose_drift,
            self.landmark_noise,
            self.pattern_amplitude,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.pattern_sigma <= 0.0 || self.pattern_period <= 0.0 {
            return bad("noise, drift and pattern parameters must be non-negative");
        }
        RuleTable::default_v1().covers(&self.aus)?;
        Ok(())
    }
}

/// A generated frame with the scene it was rendered from.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub record: FrameRecord,
    pub scene: Scene,
}

/// Independent stream per (subject, session); `session = u64::MAX` names
/// the subject-level stream.
pub fn derive_seed(master: u64, subject: u64, session: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ subject) ^ session)
}

/// Standard normal quantile.
fn normal_quantile(p: f64) -> f64 {
    statrs::distribution::Normal::standard().inverse_cdf(p)
}

fn ar_process(rng: &mut ChaCha8Rng, len: usize, rho: f64) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut z: f64 = StandardNormal.sample(rng);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(z);
        let e: f64 = StandardNormal.sample(rng);
        z = rho * z + innov * e;
    }
    out
}

/// Latent activations `[frame][au]`: a sigmoid of a unit-variance AR(1)
/// process, thresholded so each AU is active at its prevalence, with steps
/// capped at `MAX_LATENT_STEP`.
fn latent_trajectories(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let t = cfg.frames;
    let own: Vec<Vec<f64>> = cfg.aus.iter().map(|_| ar_process(rng, t, cfg.smoothness)).collect();
    let drivers: Vec<Vec<f64>> = SHARED_DRIVERS.iter().map(|_| ar_process(rng, t, cfg.smoothness)).collect();
    let w = cfg.shared_weight;
    let mut per_au = Vec::with_capacity(cfg.aus.len());
    for (a, &au) in cfg.aus.iter().enumerate() {
        let q = normal_quantile(1.0 - cfg.prevalence[a]);
        let driver = SHARED_DRIVERS.iter().position(|&(x, y)| x == au || y == au);
        let mut prev: Option<f64> = None;
        let traj: Vec<f64> = (0..t)
            .map(|i| {
                let z = match driver {
                    Some(d) => w.sqrt() * drivers[d][i] + (1.0 - w).sqrt() * own[a][i],
                    None => own[a][i],
                };
                let target = 1.0 / (1.0 + (-cfg.sharpness * (z - q)).exp());
                let v = match prev {
                    Some(p) => p + (target - p).clamp(-MAX_LATENT_STEP, MAX_LATENT_STEP),
                    None => target,
                };
                prev = Some(v);
                v
            })
            .collect();
        per_au.push(traj);
    }
    (0..t).map(|i| per_au.iter().map(|tr| tr[i]).collect()).collect()
}

struct SubjectLook {
    template: Vec<Point>,
    scale: f64,
    offset: (f64, f64),
    skin: f64,
    background: f64,
}

fn subject_look(rng: &mut ChaCha8Rng) -> SubjectLook {
    let jitter = Normal::new(0.0, 0.015).unwrap();
    let template = neutral_template()
        .into_iter()
        .map(|p| Point::new(p.x + jitter.sample(rng), p.y + jitter.sample(rng)))
        .collect();
    SubjectLook {
        template,
        scale: rng.random_range(0.93..1.07),
        offset: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        skin: rng.random_range(0.45..0.6),
        background: rng.random_range(0.1..0.25),
    }
}

/// Template deformed by the active AUs, in normalized face units.
fn deform(template: &[Point], aus: &[u32], latent: &[f64]) -> Vec<Point> {
    let mut pts = template.to_vec();
    // outer eye corners are 1.24 apart in the neutral template
    let iod = template[45].x - template[36].x;
    for (a, &au) in aus.iter().enumerate() {
        for &(i, dx, dy) in au_appearance(au).moves {
            let m = MIRROR_68[i];
            pts[i].x += latent[a] * dx * iod;
            pts[i].y += latent[a] * dy * iod;
            if m != i {
                pts[m].x -= latent[a] * dx * iod;
                pts[m].y += latent[a] * dy * iod;
            }
        }
    }
    pts
}

fn to_pixels(p: Point, look: &SubjectLook, pose: (f64, f64), size: ImageSize) -> Point {
    let (w, h) = (size.width as f64, size.height as f64);
    let (sx, sy) = (0.4 * w * look.scale, 0.475 * h * look.scale);
    Point::new(
        0.5 * (w - 1.0) + look.offset.0 + pose.0 + sx * p.x,
        0.475 * h + look.offset.1 + pose.1 + sy * p.y,
    )
}

pub fn subject_id(s: usize) -> String {
    format!("{:02}", s + 1)
}

pub fn session_id(e: usize) -> String {
    format!("{}", e + 1)
}

/// Generates every frame in memory, ordered by subject, session, frame.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthFrame>, DataError> {
    cfg.validate()?;
    let size = cfg.image();
    let rules = RuleTable::default_v1();
    let style = cfg.style();
    let mut out = Vec::with_capacity(cfg.subjects * cfg.sessions * cfg.frames);
    for s in 0..cfg.subjects {
        let mut subject_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64, u64::MAX));
        let look = subject_look(&mut subject_rng);
        for e in 0..cfg.sessions {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64, e as u64));
            let latents = latent_trajectories(cfg, &mut rng);
            let pose_x = ar_process(&mut rng, cfg.frames, 0.9);
            let pose_y = ar_process(&mut rng, cfg.frames, 0.9);
            let pixel_noise = Normal::new(0.0, cfg.noise_std.max(1e-300)).unwrap();
            let lm_noise = Normal::new(0.0, cfg.landmark_noise.max(1e-300)).unwrap();
            for (f, latent) in latents.into_iter().enumerate() {
                let pose = (cfg.pose_drift * pose_x[f], cfg.pose_drift * pose_y[f]);
                let landmarks: Vec<Point> = deform(&look.template, &cfg.aus, &latent)
                    .into_iter()
                    .map(|p| size.clamp(to_pixels(p, &look, pose, size)))
                    .collect();
                let j = cfg.amplitude_jitter;
                let gains = cfg.aus.iter().map(|_| rng.random_range(1.0 - j..=1.0 + j)).collect();
                let z: f64 = StandardNormal.sample(&mut rng);
                let brightness = cfg.brightness_std * z;
                let scene = Scene {
                    landmarks,
                    latent,
                    gains,
                    skin: look.skin,
                    background: look.background,
                    brightness,
                };
                let clean = render_clean(&scene, &cfg.aus, &rules, size, &style);
                let image: Vec<f64> = clean
                    .iter()
                    .map(|v| {
                        let n = if cfg.noise_std > 0.0 { pixel_noise.sample(&mut rng) } else { 0.0 };
                        io::quantize(v + n) as f64 / 255.0
                    })
                    .collect();
                let tracked: Vec<Point> = scene
                    .landmarks
                    .iter()
                    .map(|p| {
                        if cfg.landmark_noise > 0.0 {
                            Point::new(p.x + lm_noise.sample(&mut rng), p.y + lm_noise.sample(&mut rng))
                        } else {
                            *p
                        }
                    })
                    .map(|p| Point::new(io::round_coord(p.x), io::round_coord(p.y)))
                    .collect();
                let labels = scene.latent.iter().map(|&l| u8::from(l >= 0.5)).collect();
                out.push(SynthFrame {
                    record: FrameRecord {
                        subject: subject_id(s),
                        session: session_id(e),
                        frame: f as u32,
                        image,
                        landmarks: LandmarkSet::new(tracked, size)?,
                        labels,
                        latent: Some(scene.latent.clone()),
                    },
                    scene,
                });
            }
        }
    }
    Ok(out)
}

/// Synthesizes a dataset and writes it under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    let frames = synthesize(cfg, seed)?;
    let mut subjects: Vec<SubjectEntry> = Vec::new();
    for s in 0..cfg.subjects {
        subjects.push(SubjectEntry {
            id: subject_id(s),
            sessions: (0..cfg.sessions)
                .map(|e| SessionEntry {
                    id: session_id(e),
                    frames: (0..cfg.frames as u32).collect(),
                })
                .collect(),
        });
    }
    let manifest = DatasetManifest::new(cfg, subjects);
    let records: Vec<FrameRecord> = frames.into_iter().map(|f| f.record).collect();
    io::write_dataset(out_dir, &manifest, &records)?;
    Ok(manifest)
}

/// Synthetic intensity code 0..=5; `>= 2` exactly when the latent is `>= 0.5`.
pub fn intensity_code(latent: f64) -> u8 {
    if latent < 0.5 {
        (latent * 4.0).floor().clamp(0.0, 1.0) as u8
    } else {
        2 + ((latent - 0.5) * 8.0).floor().clamp(0.0, 3.0) as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_matches_known_values() {
        assert!(normal_quantile(0.5).abs() < 1e-9);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-7);
        assert!((normal_quantile(0.1) + 1.2815515655446004).abs() < 1e-7);
    }

    #[test]
    fn intensity_code_agrees_with_binary_label() {
        for i in 0..=1000 {
            let l = i as f64 / 1000.0;
            let c = intensity_code(l);
            assert!(c <= 5);
            assert_eq!(c >= 2, l >= 0.5, "latent {l}");
        }
    }

    #[test]
    fn latents_are_smooth_bounded_and_near_prevalence() {
        let cfg = SynthConfig {
            frames: 4000,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = latent_trajectories(&cfg, &mut rng);
        for w in lat.windows(2) {
            for a in 0..cfg.aus.len() {
                assert!((w[1][a] - w[0][a]).abs() < 0.2);
                assert!((0.0..=1.0).contains(&w[1][a]));
            }
        }
        for a in 0..cfg.aus.len() {
            let rate = lat.iter().filter(|l| l[a] >= 0.5).count() as f64 / lat.len() as f64;
            assert!((rate - cfg.prevalence[a]).abs() < 0.15, "AU {} rate {rate}", cfg.aus[a]);
        }
    }

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig {
            subjects: 2,
            sessions: 2,
            frames: 5,
            ..Default::default()
        };
        let a = synthesize(&cfg, 11).unwrap();
        let b = synthesize(&cfg, 11).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.record, y.record);
        }
        let c = synthesize(&cfg, 12).unwrap();
        assert_ne!(a[0].record.image, c[0].record.image);
        for f in &a {
            let lat = f.record.latent.as_ref().unwrap();
            for (l, &y) in lat.iter().zip(&f.record.labels) {
                assert_eq!(y == 1, *l >= 0.5);
            }
        }
    }
}
