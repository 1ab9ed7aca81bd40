//! Synthetic multi-camera tracklets with a camera-wise distribution shift,
//! plus clip splitting and per-chunk frame sampling.
//!
//! Every frame is `scale_c · (center_id + jitter_τ + mode_τ(t)) + offset_c +
//! noise`, where `offset_c` is a fixed random direction of length
//! `camera_shift` for camera `c`, `scale_c` a per-camera gain and `mode_τ(t)`
//! an optional offset switched on for the second part of the tracklet.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diffcore::norm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::BadConfig(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: usize,
    /// Ground-truth identity; never shown to training for target tracklets.
    pub person: usize,
    pub camera: usize,
    pub domain: Domain,
    pub frames: Vec<Vec<f64>>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub source_identities: usize,
    pub source_cameras: usize,
    pub target_identities: usize,
    pub target_cameras: usize,
    pub tracklets_per_id_camera: usize,
    pub frames_per_tracklet: usize,
    pub d_in: usize,
    /// Standard deviation of identity centers.
    pub identity_spread: f64,
    /// Length of each camera's additive offset.
    pub camera_shift: f64,
    /// Spread of the per-camera gain around 1.
    pub camera_scale: f64,
    /// Per-tracklet offset standard deviation.
    pub tracklet_jitter: f64,
    /// Per-frame noise standard deviation.
    pub noise: f64,
    /// Length of the appearance change switched on partway through a
    /// tracklet.
    pub mode_change: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            source_identities: 32,
            source_cameras: 2,
            target_identities: 24,
            target_cameras: 3,
            tracklets_per_id_camera: 2,
            frames_per_tracklet: 16,
            d_in: 16,
            identity_spread: 1.0,
            camera_shift: 3.0,
            camera_scale: 0.0,
            tracklet_jitter: 0.3,
            noise: 0.5,
            mode_change: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Target identities that overlap heavily, so clusters come out impure.
    pub fn noisy_clusters() -> Self {
        Self {
            identity_spread: 0.7,
            tracklet_jitter: 0.45,
            noise: 0.8,
            ..Self::default()
        }
    }

    /// Every recognised key, in the order [`GenConfig::to_pairs`] emits them.
    pub const KEYS: &'static [&'static str] = &[
        "source_identities",
        "source_cameras",
        "target_identities",
        "target_cameras",
        "tracklets_per_id_camera",
        "frames_per_tracklet",
        "d_in",
        "identity_spread",
        "camera_shift",
        "camera_scale",
        "tracklet_jitter",
        "noise",
        "mode_change",
        "seed",
    ];

    /// Named preset: `default` or `noisy_clusters`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "noisy_clusters" => Ok(Self::noisy_clusters()),
            other => Err(Error::BadConfig(format!(
                "unknown generator preset `{other}`"
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::BadConfig(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "source_identities" => self.source_identities = num(key, value)?,
            "source_cameras" => self.source_cameras = num(key, value)?,
            "target_identities" => self.target_identities = num(key, value)?,
            "target_cameras" => self.target_cameras = num(key, value)?,
            "tracklets_per_id_camera" => self.tracklets_per_id_camera = num(key, value)?,
            "frames_per_tracklet" => self.frames_per_tracklet = num(key, value)?,
            "d_in" => self.d_in = num(key, value)?,
            "identity_spread" => self.identity_spread = num(key, value)?,
            "camera_shift" => self.camera_shift = num(key, value)?,
            "camera_scale" => self.camera_scale = num(key, value)?,
            "tracklet_jitter" => self.tracklet_jitter = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "mode_change" => self.mode_change = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::BadConfig(format!("unknown generator key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.source_identities.to_string(),
            self.source_cameras.to_string(),
            self.target_identities.to_string(),
            self.target_cameras.to_string(),
            self.tracklets_per_id_camera.to_string(),
            self.frames_per_tracklet.to_string(),
            self.d_in.to_string(),
            self.identity_spread.to_string(),
            self.camera_shift.to_string(),
            self.camera_scale.to_string(),
            self.tracklet_jitter.to_string(),
            self.noise.to_string(),
            self.mode_change.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("source_identities", self.source_identities),
            ("source_cameras", self.source_cameras),
            ("target_identities", self.target_identities),
            ("target_cameras", self.target_cameras),
            ("tracklets_per_id_camera", self.tracklets_per_id_camera),
            ("frames_per_tracklet", self.frames_per_tracklet),
            ("d_in", self.d_in),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be >= 1")));
            }
        }
        let spreads = [
            ("identity_spread", self.identity_spread),
            ("camera_shift", self.camera_shift),
            ("camera_scale", self.camera_scale),
            ("tracklet_jitter", self.tracklet_jitter),
            ("noise", self.noise),
            ("mode_change", self.mode_change),
        ];
        for (name, v) in spreads {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Tracklets of both domains, source first.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tracklets: Vec<Tracklet>,
}

impl Dataset {
    pub fn source(&self) -> impl Iterator<Item = &Tracklet> {
        self.tracklets.iter().filter(|t| t.domain == Domain::Source)
    }

    pub fn target(&self) -> impl Iterator<Item = &Tracklet> {
        self.tracklets.iter().filter(|t| t.domain == Domain::Target)
    }

    pub fn d_in(&self) -> usize {
        self.tracklets
            .first()
            .and_then(|t| t.frames.first())
            .map_or(0, Vec::len)
    }

    /// Distinct source identities, ascending; position is the class index.
    pub fn source_classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.source().map(|t| t.person).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn camera_count(&self, domain: Domain) -> usize {
        self.tracklets
            .iter()
            .filter(|t| t.domain == domain)
            .map(|t| t.camera + 1)
            .max()
            .unwrap_or(0)
    }
}

fn random_direction<R: Rng>(dim: usize, length: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x * length / n).collect();
        }
    }
}

fn gaussian_vec<R: Rng>(dim: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, sigma.max(0.0)).expect("sigma validated");
    (0..dim).map(|_| dist.sample(rng)).collect()
}

struct DomainSpec {
    domain: Domain,
    identities: usize,
    cameras: usize,
}

/// Generates a dataset. Identical configs give bit-identical output.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.d_in;
    let mut tracklets = Vec::new();
    let mut next_person = 0;
    let specs = [
        DomainSpec {
            domain: Domain::Source,
            identities: config.source_identities,
            cameras: config.source_cameras,
        },
        DomainSpec {
            domain: Domain::Target,
            identities: config.target_identities,
            cameras: config.target_cameras,
        },
    ];
    for spec in specs {
        let offsets: Vec<Vec<f64>> = (0..spec.cameras)
            .map(|_| random_direction(dim, config.camera_shift, &mut rng))
            .collect();
        let gains: Vec<f64> = (0..spec.cameras)
            .map(|_| 1.0 + config.camera_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..spec.identities {
            let person = next_person;
            next_person += 1;
            let center = gaussian_vec(dim, config.identity_spread, &mut rng);
            for camera in 0..spec.cameras {
                for _ in 0..config.tracklets_per_id_camera {
                    let jitter = gaussian_vec(dim, config.tracklet_jitter, &mut rng);
                    let mode = random_direction(dim, config.mode_change, &mut rng);
                    let n = config.frames_per_tracklet;
                    let switch = if n > 1 {
                        rng.random_range(n / 4..=n - n / 4)
                    } else {
                        n
                    };
                    let frames = (0..n)
                        .map(|t| {
                            let noise = gaussian_vec(dim, config.noise, &mut rng);
                            (0..dim)
                                .map(|j| {
                                    let base = center[j]
                                        + jitter[j]
                                        + if t >= switch { mode[j] } else { 0.0 };
                                    gains[camera] * base + offsets[camera][j] + noise[j]
                                })
                                .collect()
                        })
                        .collect();
                    tracklets.push(Tracklet {
                        id: tracklets.len(),
                        person,
                        camera,
                        domain: spec.domain,
                        frames,
                    });
                }
            }
        }
    }
    Ok(Dataset { tracklets })
}

/// Contiguous sub-range of one tracklet's frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub parent: usize,
    pub index: usize,
    pub frames: Range<usize>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Splits `0..len` into `parts` contiguous ranges of `len / parts`, the
/// remainder going to the last one.
fn equal_parts(len: usize, parts: usize) -> Vec<Range<usize>> {
    let size = len / parts;
    (0..parts)
        .map(|p| {
            let end = if p + 1 == parts { len } else { (p + 1) * size };
            p * size..end
        })
        .collect()
}

pub fn split_clips(tracklet: &Tracklet, n_clips: usize) -> Result<Vec<Clip>> {
    if n_clips == 0 || tracklet.len() < n_clips {
        return Err(Error::TooFewFrames {
            frames: tracklet.len(),
            clips: n_clips,
        });
    }
    Ok(equal_parts(tracklet.len(), n_clips)
        .into_iter()
        .enumerate()
        .map(|(index, frames)| Clip {
            parent: tracklet.id,
            index,
            frames,
        })
        .collect())
}

/// One uniformly drawn frame from each of `n_chunks` equal chunks of the
/// clip; strictly increasing.
pub fn sample_frames<R: Rng + ?Sized>(
    clip: &Clip,
    n_chunks: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_chunks == 0 || clip.len() < n_chunks {
        return Err(Error::ClipTooShort {
            frames: clip.len(),
            chunks: n_chunks,
        });
    }
    Ok(equal_parts(clip.len(), n_chunks)
        .into_iter()
        .map(|chunk| clip.frames.start + rng.random_range(chunk))
        .collect())
}

/// Writes one record per tracklet: a header line
/// `tracklet_id person_id camera domain n_frames d_in`, then one line of
/// `d_in` decimals per frame.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for t in &dataset.tracklets {
        let d_in = t.frames.first().map_or(0, Vec::len);
        writeln!(
            out,
            "{} {} {} {} {} {}",
            t.id,
            t.person,
            t.camera,
            t.domain.as_str(),
            t.frames.len(),
            d_in
        )?;
        for f in &t.frames {
            let line: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R, source: &str) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        file: source.to_owned(),
        line,
        msg,
    };
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut tracklets = Vec::new();
    let mut d_in_all: Option<usize> = None;
    while let Some((ln, header)) = lines.next() {
        let header = header.map_err(|e| Error::io(source, e))?;
        if header.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = header.split_whitespace().collect();
        let [id, person, camera, domain, n_frames, d_in] = f.as_slice() else {
            return Err(perr(
                ln,
                format!("expected 6 header fields, got {}", f.len()),
            ));
        };
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| perr(ln, format!("bad integer `{s}`")))
        };
        let (id, person, camera, n_frames, d_in) = (
            num(id)?,
            num(person)?,
            num(camera)?,
            num(n_frames)?,
            num(d_in)?,
        );
        let domain: Domain = domain
            .parse()
            .map_err(|_| perr(ln, format!("bad domain `{domain}`")))?;
        if n_frames == 0 {
            return Err(perr(ln, "tracklet without frames".into()));
        }
        if *d_in_all.get_or_insert(d_in) != d_in {
            return Err(Error::DimMismatch(format!(
                "{source} line {ln}: frame width {d_in} differs from earlier records"
            )));
        }
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let (fl, line) = lines
                .next()
                .ok_or_else(|| perr(ln, "truncated tracklet record".into()))?;
            let line = line.map_err(|e| Error::io(source, e))?;
            let frame = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| perr(fl, format!("bad number `{v}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if frame.len() != d_in {
                return Err(perr(
                    fl,
                    format!("expected {d_in} values, got {}", frame.len()),
                ));
            }
            if frame.iter().any(|v| !v.is_finite()) {
                return Err(perr(fl, "non-finite frame value".into()));
            }
            frames.push(frame);
        }
        tracklets.push(Tracklet {
            id,
            person,
            camera,
            domain,
            frames,
        });
    }
    if tracklets.is_empty() {
        return Err(Error::EmptyInput("dataset file"));
    }
    Ok(Dataset { tracklets })
}
