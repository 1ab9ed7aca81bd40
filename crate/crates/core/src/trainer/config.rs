//! Flat `key=value` configuration with `#` comments.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pseudo::ClusterParams;

/// Parses `key=value` lines. Blank lines and text after `#` are ignored.
/// Returns `(key, value, line)` triples in file order.
pub fn parse_key_values(text: &str, source: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: source.to_owned(),
            line: i + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_owned(), v.trim().to_owned(), i + 1));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CameraLoss {
    None,
    Ce,
    Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContrastiveVariant {
    None,
    /// Unit weight on each query's own key.
    Plain,
    /// Self-paced weights on each query's own key.
    KnnWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PaceKind {
    Knn,
    Multiplicative,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::BadConfig(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $text,)+
                })
            }
        }
    };
}

keyword_enum!(CameraLoss { None => "none", Ce => "ce", Confusion => "confusion" });
keyword_enum!(ContrastiveVariant { None => "none", Plain => "plain", KnnWeighted => "knn_weighted" });
keyword_enum!(PaceKind { Knn => "knn", Multiplicative => "multiplicative" });

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_weights: LossWeights,
    pub camera_loss: CameraLoss,
    pub contrastive: ContrastiveVariant,
    pub clips: bool,
    pub n_clips: usize,
    pub frames_per_sample: usize,
    pub pace: PaceKind,
    pub gamma0: f64,
    pub alpha: f64,
    pub knn_k: usize,
    pub cluster: ClusterParams,
    pub momentum: f64,
    pub source_keys: bool,
    pub temperature: f64,
    pub grl_scale: f64,
    pub d_hidden: usize,
    pub d_out: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            warmup_epochs: 10,
            batch_size: 24,
            lr: 3e-3,
            lr_decay_epochs: vec![10, 20, 30],
            lr_decay: 0.1,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss_weights: LossWeights::default(),
            camera_loss: CameraLoss::Confusion,
            contrastive: ContrastiveVariant::KnnWeighted,
            clips: true,
            n_clips: 2,
            frames_per_sample: 4,
            pace: PaceKind::Knn,
            gamma0: 0.1,
            alpha: 0.1,
            knn_k: 4,
            cluster: ClusterParams {
                k: 6,
                ..ClusterParams::default()
            },
            momentum: 0.2,
            source_keys: true,
            temperature: 1.0,
            grl_scale: 1.0,
            d_hidden: 32,
            d_out: 16,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::BadConfig(format!(
            "bad boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Every recognised key, in the order [`TrainConfig::to_pairs`] emits
    /// them.
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "warmup_epochs",
        "batch_size",
        "lr",
        "lr_decay_epochs",
        "lr_decay",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "delta1",
        "delta2",
        "delta3",
        "camera_loss",
        "contrastive",
        "clips",
        "n_clips",
        "frames_per_sample",
        "pace",
        "gamma0",
        "alpha",
        "knn_k",
        "cluster_k",
        "cluster_eps",
        "cluster_min_pts",
        "momentum",
        "source_keys",
        "temperature",
        "grl_scale",
        "d_hidden",
        "d_out",
        "seed",
    ];

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "delta1" => self.loss_weights.delta1 = parse(key, value)?,
            "delta2" => self.loss_weights.delta2 = parse(key, value)?,
            "delta3" => self.loss_weights.delta3 = parse(key, value)?,
            "camera_loss" => self.camera_loss = value.parse()?,
            "contrastive" => self.contrastive = value.parse()?,
            "clips" => self.clips = parse_bool(key, value)?,
            "n_clips" => self.n_clips = parse(key, value)?,
            "frames_per_sample" => self.frames_per_sample = parse(key, value)?,
            "pace" => self.pace = value.parse()?,
            "gamma0" => self.gamma0 = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "cluster_k" => self.cluster.k = parse(key, value)?,
            "cluster_eps" => self.cluster.eps = parse(key, value)?,
            "cluster_min_pts" => self.cluster.min_pts = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "source_keys" => self.source_keys = parse_bool(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "grl_scale" => self.grl_scale = parse(key, value)?,
            "d_hidden" => self.d_hidden = parse(key, value)?,
            "d_out" => self.d_out = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::BadConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Resolved configuration as `(key, value)` pairs; feeding them back
    /// through [`TrainConfig::set`] reproduces `self`.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = self.loss_weights;
        let values = [
            self.epochs.to_string(),
            self.warmup_epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            join(&self.lr_decay_epochs),
            self.lr_decay.to_string(),
            self.weight_decay.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_eps.to_string(),
            w.delta1.to_string(),
            w.delta2.to_string(),
            w.delta3.to_string(),
            self.camera_loss.to_string(),
            self.contrastive.to_string(),
            self.clips.to_string(),
            self.n_clips.to_string(),
            self.frames_per_sample.to_string(),
            self.pace.to_string(),
            self.gamma0.to_string(),
            self.alpha.to_string(),
            self.knn_k.to_string(),
            self.cluster.k.to_string(),
            self.cluster.eps.to_string(),
            self.cluster.min_pts.to_string(),
            self.momentum.to_string(),
            self.source_keys.to_string(),
            self.temperature.to_string(),
            self.grl_scale.to_string(),
            self.d_hidden.to_string(),
            self.d_out.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    /// Clip count actually used for training samples.
    pub fn effective_clips(&self) -> usize {
        if self.clips {
            self.n_clips
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        self.loss_weights.validate()?;
        if self.clips && self.n_clips == 0 {
            return bad("n_clips must be >= 1".into());
        }
        if self.frames_per_sample == 0 {
            return bad("frames_per_sample must be >= 1".into());
        }
        if !(self.gamma0 > 0.0) {
            return Err(Error::NonPositiveGamma(self.gamma0));
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0".into());
        }
        if self.knn_k == 0 || self.cluster.k == 0 {
            return bad("neighbour counts must be >= 1".into());
        }
        if !(self.cluster.eps > 0.0) {
            return Err(Error::BadEps(self.cluster.eps));
        }
        if self.cluster.min_pts == 0 {
            return Err(Error::BadMinPts);
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::BadMomentum(self.momentum));
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.d_hidden == 0 || self.d_out == 0 {
            return bad("model widths must be >= 1".into());
        }
        Ok(())
    }

    /// Learning rate for 1-based training epoch `epoch`: decayed once for
    /// every scheduled decay epoch already completed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| d < epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = parse_key_values("# header\n\nlr = 0.1 # inline\nepochs=3\n", "cfg").unwrap();
        assert_eq!(
            kv,
            vec![
                ("lr".into(), "0.1".into(), 3),
                ("epochs".into(), "3".into(), 4)
            ]
        );
        assert!(matches!(
            parse_key_values("lr 0.1", "cfg"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = TrainConfig {
            camera_loss: CameraLoss::Ce,
            lr_decay_epochs: vec![3, 7],
            seed: 42,
            ..TrainConfig::default()
        };
        cfg.loss_weights.delta2 = 0.0;
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_pairs().len(), TrainConfig::KEYS.len());
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("learning_rate", "0.1").is_err());
        assert!(cfg.set("camera_loss", "adversarial").is_err());
        assert!(cfg.set("epochs", "-1").is_err());
        assert!(cfg.set("clips", "maybe").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for (k, v) in [
            ("epochs", "0"),
            ("lr_decay", "0"),
            ("momentum", "2"),
            ("delta2", "-1"),
            ("gamma0", "0"),
        ] {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 3e-3);
        assert_eq!(cfg.lr_at(10), 3e-3);
        assert!((cfg.lr_at(11) - 3e-4).abs() < 1e-18);
        assert!((cfg.lr_at(31) - 3e-6).abs() < 1e-20);
    }
}
