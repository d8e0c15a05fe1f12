//! Synthetic multi-source corpora with known confounds.
//!
//! Every phantom shares the same kind of anatomy-like background; the class
//! only changes pixels strictly inside a centered disk, and each source
//! applies its own global or peripheral distortions on top.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_manifest, Corpus, CorpusRole, Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, Image};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub size: usize,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfoundSpec {
    /// Exponent delta: intensities map as `v^(1 + gamma_shift)`.
    pub gamma_shift: f64,
    pub border_width: usize,
    pub border_value: u8,
    /// Target height/width; 0 keeps the input shape.
    pub aspect_ratio: f64,
    /// Standard deviation of additive noise on the [0, 1] scale.
    pub noise_sigma: f64,
    pub marker: Option<Marker>,
}

impl Default for ConfoundSpec {
    fn default() -> Self {
        Self {
            gamma_shift: 0.0,
            border_width: 0,
            border_value: 0,
            aspect_ratio: 0.0,
            noise_sigma: 0.0,
            marker: None,
        }
    }
}

impl ConfoundSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_shift > -1.0) || !self.gamma_shift.is_finite() {
            return Err(Error::Config(format!("gamma_shift {} must exceed -1", self.gamma_shift)));
        }
        if !(self.aspect_ratio >= 0.0) || !self.aspect_ratio.is_finite() {
            return Err(Error::Config(format!("aspect_ratio {} must be >= 0", self.aspect_ratio)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub name: String,
    /// Defaults to `large-source`.
    #[serde(default)]
    pub role: Option<CorpusRole>,
    #[serde(default)]
    pub confound: ConfoundSpec,
    pub samples_per_class: usize,
    /// Restricts this source to a subset of the corpus classes.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    /// Fraction of a large source's patients placed in the test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "one")]
    pub images_per_patient: usize,
    /// Number of distinct uploader names cycled over patients; 0 leaves the
    /// uploader empty.
    #[serde(default)]
    pub uploaders: usize,
}

fn default_test_fraction() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

impl SynthSource {
    pub fn new(name: &str, samples_per_class: usize) -> Self {
        Self {
            name: name.to_string(),
            role: None,
            confound: ConfoundSpec::default(),
            samples_per_class,
            classes: None,
            test_fraction: default_test_fraction(),
            images_per_patient: 1,
            uploaders: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusSpec {
    pub sources: Vec<SynthSource>,
    pub classes: Vec<String>,
    #[serde(default = "default_radius")]
    pub class_signal_radius: usize,
    #[serde(default = "default_amplitude")]
    pub class_signal_amplitude: f64,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_radius() -> usize {
    24
}

fn default_amplitude() -> f64 {
    0.25
}

fn default_size() -> usize {
    96
}

impl SynthCorpusSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.classes.is_empty() {
            return Err(Error::Config("synthetic corpus needs sources and classes".into()));
        }
        if self.image_size < 64 {
            return Err(Error::Config(format!("image_size {} is below 64", self.image_size)));
        }
        if 2 * self.class_signal_radius >= self.image_size {
            return Err(Error::Config(format!(
                "class_signal_radius {} reaches the image edge at size {}",
                self.class_signal_radius, self.image_size
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.sources {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate source `{}`", s.name)));
            }
            s.confound.validate()?;
            if s.images_per_patient == 0 {
                return Err(Error::Config(format!("source `{}`: images_per_patient is 0", s.name)));
            }
            if !(0.0..=1.0).contains(&s.test_fraction) {
                return Err(Error::Config(format!("source `{}`: test_fraction outside [0, 1]", s.name)));
            }
            if let Some(cls) = &s.classes {
                if let Some(c) = cls.iter().find(|c| !self.classes.contains(c)) {
                    return Err(Error::Config(format!("source `{}` uses unknown class `{c}`", s.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignal {
    pub radius: usize,
    pub amplitude: f64,
}

fn class_hash(name: &str) -> u64 {
    seed::derive(0x5eed, name, 0)
}

/// Class-specific pattern, zero on and outside the disk boundary.
fn class_pattern(class: &str, r: f64, theta: f64) -> f64 {
    let h = class_hash(class);
    let rings = 1.5 + (h & 0xff) as f64 / 255.0 * 3.0;
    let spokes = ((h >> 8) % 5) as f64;
    let phase = ((h >> 16) & 0xffff) as f64 / 65535.0 * std::f64::consts::TAU;
    let sign = if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
    sign * (std::f64::consts::PI * rings * r + spokes * theta + phase).cos()
}

/// Smooth background with two darker elliptical fields and a class signal
/// confined strictly inside the centered disk of `signal.radius`.
///
/// The rng only drives the background, so phantoms of different classes drawn
/// from equal rng states agree outside the disk.
pub fn generate_phantom(class: &str, size: usize, signal: ClassSignal, rng: &mut Rng) -> Result<Image> {
    if size < 64 {
        return Err(Error::Input(format!("phantom size {size} is below 64")));
    }
    if 2 * signal.radius >= size {
        return Err(Error::Input(format!(
            "signal radius {} does not fit inside size {size}",
            signal.radius
        )));
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let base = rng.random_range(0.45..0.6);
    let lung_dx = rng.random_range(0.18..0.24);
    let lung_rx = rng.random_range(0.12..0.17);
    let lung_ry = rng.random_range(0.28..0.36);
    let lung_depth = rng.random_range(0.15..0.25);

    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let radius = signal.radius as f64;
    Image::from_fn(size, size, |row, col| {
        let u = row as f64 / s;
        let v = col as f64 / s;
        let mut val = base;
        for &(fu, fv, ph, amp) in &waves {
            val += amp * (std::f64::consts::TAU * (fu * u + fv * v) + ph).sin();
        }
        for side in [-1.0, 1.0] {
            let ex = (v - 0.5 - side * lung_dx) / lung_rx;
            let ey = (u - 0.5) / lung_ry;
            let d = ex * ex + ey * ey;
            if d < 1.0 {
                val -= lung_depth * (1.0 - d);
            }
        }
        let dy = row as f64 - c;
        let dx = col as f64 - c;
        let r = (dy * dy + dx * dx).sqrt();
        if r < radius && signal.amplitude != 0.0 {
            let rn = r / radius;
            val += signal.amplitude * (1.0 - rn * rn) * class_pattern(class, rn, dy.atan2(dx));
        }
        to_u8(val)
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Apply one source's distortions in a fixed order: gamma, border, aspect
/// resample, noise, corner marker.
pub fn inject_confound(img: &Image, spec: &ConfoundSpec, rng: &mut Rng) -> Result<Image> {
    spec.validate()?;
    let mut out = img.clone();
    if spec.gamma_shift != 0.0 {
        let lut: Vec<u8> = (0..256)
            .map(|v| to_u8((v as f64 / 255.0).powf(1.0 + spec.gamma_shift)))
            .collect();
        out = Image::from_fn(out.width(), out.height(), |r, c| lut[out.get(r, c) as usize])?;
    }
    if spec.border_width > 0 {
        let (w, h, b) = (out.width(), out.height(), spec.border_width);
        for r in 0..h {
            for c in 0..w {
                if r < b || c < b || r + b >= h || c + b >= w {
                    out.set(r, c, spec.border_value);
                }
            }
        }
    }
    if spec.aspect_ratio > 0.0 {
        let w = out.width();
        let h = ((w as f64 * spec.aspect_ratio).round() as usize).max(1);
        if h != out.height() {
            out = resize_bilinear(&out, w, h)?;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        let noisy: Vec<u8> = out
            .pixels()
            .iter()
            .map(|&p| to_u8(p as f64 / 255.0 + normal.sample(rng)))
            .collect();
        out = Image::new(out.width(), out.height(), noisy)?;
    }
    if let Some(m) = spec.marker {
        for r in 0..m.size.min(out.height()) {
            for c in 0..m.size.min(out.width()) {
                out.set(r, c, m.value);
            }
        }
    }
    Ok(out)
}

/// A generated corpus held in memory; `images[i]` belongs to `manifest.samples[i]`.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub images: Vec<Image>,
}

struct Plan {
    sample: Sample,
    class: String,
    source: usize,
    index: u64,
}

fn plan_samples(spec: &SynthCorpusSpec) -> Vec<Plan> {
    let mut plans = Vec::new();
    for (si, src) in spec.sources.iter().enumerate() {
        let classes = src.classes.clone().unwrap_or_else(|| spec.classes.clone());
        let role = src.role.unwrap_or(CorpusRole::LargeSource);
        let per_class = src.samples_per_class;
        let n_patients_per_class = per_class.div_ceil(src.images_per_patient);
        let n_test = (n_patients_per_class as f64 * src.test_fraction).round() as usize;
        let mut index = 0u64;
        for class in &classes {
            for k in 0..per_class {
                let patient = k / src.images_per_patient;
                let patient_id = format!("{}-{}-p{:04}", src.name, class, patient);
                let split = match role {
                    CorpusRole::CvTarget => Split::Unsplit,
                    CorpusRole::LargeSource if test_slot(patient, n_test, n_patients_per_class) => Split::Test,
                    CorpusRole::LargeSource => Split::Train,
                };
                let sample_id = format!("{}-{}-{:05}", src.name, class, k);
                let uploader = (src.uploaders > 0).then(|| format!("{}-uploader-{}", src.name, patient % src.uploaders));
                plans.push(Plan {
                    sample: Sample {
                        image_path: PathBuf::from(format!("images/{}/{}.png", src.name, sample_id)),
                        sample_id,
                        dataset_label: src.name.clone(),
                        class_label: class.clone(),
                        patient_id: Some(patient_id),
                        location: None,
                        uploader,
                        split,
                    },
                    class: class.clone(),
                    source: si,
                    index,
                });
                index += 1;
            }
        }
    }
    plans
}

/// Whether patient `p` of `n` falls in the test split when `n_test` are
/// spread evenly over the index range.
fn test_slot(p: usize, n_test: usize, n: usize) -> bool {
    // patient p is a test patient if floor((p+1)·t/n) > floor(p·t/n)
    (p + 1) * n_test / n > p * n_test / n
}

/// Render a corpus in memory. Each image depends only on the corpus seed,
/// its source name and its index within the source.
pub fn render_corpus(spec: &SynthCorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let plans = plan_samples(spec);
    let signal = ClassSignal {
        radius: spec.class_signal_radius,
        amplitude: spec.class_signal_amplitude,
    };
    let images = plans
        .par_iter()
        .map(|p| {
            let src = &spec.sources[p.source];
            let mut rng = seed::rng(seed::derive(spec.seed, &src.name, p.index));
            let phantom = generate_phantom(&p.class, spec.image_size, signal, &mut rng)?;
            let mut noise_rng = seed::rng(seed::derive(spec.seed, &format!("noise:{}", src.name), p.index));
            inject_confound(&phantom, &src.confound, &mut noise_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let corpora = spec
        .sources
        .iter()
        .map(|s| Corpus {
            name: s.name.clone(),
            role: s.role.unwrap_or(CorpusRole::LargeSource),
        })
        .collect();
    let manifest = Manifest {
        corpora,
        samples: plans.into_iter().map(|p| p.sample).collect(),
        class_filter: Default::default(),
    };
    Ok(SynthCorpus { manifest, images })
}

/// Render a corpus and write it below `out_dir`: PNG files under
/// `images/<source>/`, `manifest.csv` and its `manifest.json` sidecar.
/// Returns the manifest path.
pub fn generate_corpus(spec: &SynthCorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    let corpus = render_corpus(spec)?;
    for src in &spec.sources {
        let dir = out_dir.join("images").join(&src.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    corpus
        .manifest
        .samples
        .par_iter()
        .zip(corpus.images.par_iter())
        .try_for_each(|(s, img)| img.save_png(&out_dir.join(&s.image_path)))?;
    let path = out_dir.join("manifest.csv");
    save_manifest(&corpus.manifest, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(amplitude: f64) -> ClassSignal {
        ClassSignal { radius: 20, amplitude }
    }

    #[test]
    fn phantoms_are_deterministic() {
        let a = generate_phantom("A", 64, sig(0.2), &mut seed::rng(4)).unwrap();
        let b = generate_phantom("A", 64, sig(0.2), &mut seed::rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_difference_stays_inside_disk() {
        let a = generate_phantom("COVID", 96, sig(0.3), &mut seed::rng(9)).unwrap();
        let b = generate_phantom("Pneumonia", 96, sig(0.3), &mut seed::rng(9)).unwrap();
        let c = 47.5;
        let mut inside = 0;
        for r in 0..96 {
            for col in 0..96 {
                let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
                if d >= 20.0 {
                    assert_eq!(a.get(r, col), b.get(r, col), "pixel ({r},{col})");
                } else if a.get(r, col) != b.get(r, col) {
                    inside += 1;
                }
            }
        }
        assert!(inside > 100);
    }

    #[test]
    fn zero_amplitude_is_class_free() {
        let a = generate_phantom("A", 64, sig(0.0), &mut seed::rng(1)).unwrap();
        let b = generate_phantom("B", 64, sig(0.0), &mut seed::rng(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn radius_must_fit() {
        let s = ClassSignal { radius: 32, amplitude: 0.1 };
        assert!(generate_phantom("A", 64, s, &mut seed::rng(0)).is_err());
        assert!(generate_phantom("A", 63, sig(0.1), &mut seed::rng(0)).is_err());
    }

    #[test]
    fn zero_confound_is_identity() {
        let img = generate_phantom("A", 64, sig(0.2), &mut seed::rng(2)).unwrap();
        let out = inject_confound(&img, &ConfoundSpec::default(), &mut seed::rng(3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn border_paints_frame_only() {
        let img = generate_phantom("A", 64, sig(0.2), &mut seed::rng(2)).unwrap();
        let spec = ConfoundSpec {
            border_width: 5,
            border_value: 250,
            ..Default::default()
        };
        let out = inject_confound(&img, &spec, &mut seed::rng(0)).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let frame = r < 5 || c < 5 || r >= 59 || c >= 59;
                let want = if frame { 250 } else { img.get(r, c) };
                assert_eq!(out.get(r, c), want);
            }
        }
    }

    #[test]
    fn gamma_darkens_mid_gray() {
        let img = Image::filled(64, 64, 128).unwrap();
        let spec = ConfoundSpec {
            gamma_shift: 0.2,
            ..Default::default()
        };
        let out = inject_confound(&img, &spec, &mut seed::rng(0)).unwrap();
        let want = ((128.0f64 / 255.0).powf(1.2) * 255.0).round() as u8;
        assert_eq!(out.get(10, 10), want);
        assert!(out.mean() < img.mean());
    }

    #[test]
    fn aspect_and_marker() {
        let img = Image::filled(64, 64, 100).unwrap();
        let spec = ConfoundSpec {
            aspect_ratio: 1.25,
            marker: Some(Marker { size: 3, value: 255 }),
            ..Default::default()
        };
        let out = inject_confound(&img, &spec, &mut seed::rng(0)).unwrap();
        assert_eq!((out.width(), out.height()), (64, 80));
        assert_eq!(out.get(2, 2), 255);
        assert_eq!(out.get(3, 3), 100);
    }

    #[test]
    fn gamma_shift_is_monotone_in_mean() {
        let imgs: Vec<Image> = (0..100)
            .map(|i| generate_phantom("A", 64, sig(0.2), &mut seed::rng(i)).unwrap())
            .collect();
        let mean_at = |g: f64| {
            let spec = ConfoundSpec {
                gamma_shift: g,
                ..Default::default()
            };
            imgs.iter()
                .map(|im| inject_confound(im, &spec, &mut seed::rng(0)).unwrap().mean())
                .sum::<f64>()
                / 100.0
        };
        let m0 = mean_at(0.0);
        let shifts: Vec<f64> = [0.1, 0.2, 0.4].iter().map(|&g| (m0 - mean_at(g)).abs()).collect();
        assert!(shifts[0] > 0.0 && shifts[0] < shifts[1] && shifts[1] < shifts[2]);
    }

    fn small_spec() -> SynthCorpusSpec {
        let mut a = SynthSource::new("alpha", 6);
        a.uploaders = 2;
        let mut b = SynthSource::new("beta", 4);
        b.role = Some(CorpusRole::CvTarget);
        b.confound.gamma_shift = 0.3;
        SynthCorpusSpec {
            sources: vec![a, b],
            classes: vec!["COVID".into(), "Normal".into()],
            class_signal_radius: 12,
            class_signal_amplitude: 0.2,
            image_size: 64,
            seed: 5,
        }
    }

    #[test]
    fn four_by_two_by_two_hundred_counts() {
        let spec = SynthCorpusSpec {
            sources: (0..4).map(|i| SynthSource::new(&format!("s{i}"), 200)).collect(),
            classes: vec!["a".into(), "b".into()],
            class_signal_radius: 10,
            class_signal_amplitude: 0.2,
            image_size: 64,
            seed: 0,
        };
        let plans = plan_samples(&spec);
        assert_eq!(plans.len(), 1600);
        for s in 0..4 {
            for c in ["a", "b"] {
                let n = plans
                    .iter()
                    .filter(|p| p.sample.dataset_label == format!("s{s}") && p.sample.class_label == c)
                    .count();
                assert_eq!(n, 200);
            }
        }
        let tests = plans.iter().filter(|p| p.sample.split == Split::Test).count();
        assert_eq!(tests, 800);
    }

    #[test]
    fn corpus_on_disk_is_reproducible() {
        let spec = small_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_corpus(&spec, d1.path()).unwrap();
        let m2 = generate_corpus(&spec, d2.path()).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
        let manifest = crate::dataset::load_manifest(&m1).unwrap();
        assert_eq!(manifest.samples.len(), 20);
        assert_eq!(manifest.cv_target().unwrap().name, "beta");
        for s in &manifest.samples {
            let a = std::fs::read(d1.path().join(&s.image_path)).unwrap();
            let b = std::fs::read(d2.path().join(&s.image_path)).unwrap();
            assert_eq!(a, b);
        }
        let report = crate::dataset::validate_manifest(&manifest);
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = small_spec();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(SynthCorpusSpec::from_json(&text).unwrap(), spec);
        let minimal = r#"{"sources":[{"name":"x","samples_per_class":2}],"classes":["a"]}"#;
        let s = SynthCorpusSpec::from_json(minimal).unwrap();
        assert_eq!(s.image_size, 96);
        assert!(SynthCorpusSpec::from_json(r#"{"sources":[],"classes":["a"]}"#).is_err());
    }
}
