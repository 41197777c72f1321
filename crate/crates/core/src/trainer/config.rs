use std::fmt::Write as _;

use super::data::Augment;
use super::loss::default_alpha;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Optimization and data settings. Defaults are the full-scale recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub clip_eta: f64,
    /// Ensemble-term weight; `None` means `2 / (S + 2)`.
    pub alpha: Option<f64>,
    pub scales: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 41,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr0: 0.1,
            lr_decay_every: 10,
            lr_decay_factor: 10.0,
            clip_eta: 0.4,
            alpha: None,
            scales: vec![2, 3, 4],
            epochs: 50,
            seed: 0,
            augment: Augment::ALL,
        }
    }
}

impl TrainConfig {
    /// Effective ensemble-term weight. Without cascaded supervision only the
    /// ensembled output is supervised.
    pub fn effective_alpha(&self, model: &ModelConfig) -> f64 {
        if !model.use_cascaded_supervision {
            1.0
        } else {
            self.alpha.unwrap_or_else(|| default_alpha(model.stages))
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return fail(format!("alpha must lie in (0, 1), got {a}"));
            }
        }
        if !(self.clip_eta > 0.0) {
            return fail(format!("clip_eta must be positive, got {}", self.clip_eta));
        }
        let footprint = model.k1.max(model.k2).max(3);
        if self.patch_size < footprint {
            return fail(format!(
                "patch_size {} is smaller than the {footprint}x{footprint} kernel footprint",
                self.patch_size
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return fail(format!("scales must be positive integers, got {:?}", self.scales));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay_factor > 0.0) {
            return fail("learning rate and decay factor must be positive".into());
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

pub fn parse_scales(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>("scales", s.trim()))
        .collect()
}

/// Applies one `key = value` setting.
pub fn apply_setting(key: &str, value: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    match key {
        "stages" => model.stages = parse(key, value)?,
        "modules" => model.modules_per_stage = parse(key, value)?,
        "channels" => model.channels = parse(key, value)?,
        "k1" => model.k1 = parse(key, value)?,
        "k2" => model.k2 = parse(key, value)?,
        "leaky_slope" => model.leaky_slope = parse(key, value)?,
        "rfl" => model.use_rfl = parse_bool(key, value)?,
        "cascaded_supervision" => model.use_cascaded_supervision = parse_bool(key, value)?,
        "share_reconstruction" => model.share_reconstruction = parse_bool(key, value)?,
        "patch_size" => train.patch_size = parse(key, value)?,
        "batch_size" => train.batch_size = parse(key, value)?,
        "momentum" => train.momentum = parse(key, value)?,
        "weight_decay" => train.weight_decay = parse(key, value)?,
        "lr0" => train.lr0 = parse(key, value)?,
        "lr_decay_every" => train.lr_decay_every = parse(key, value)?,
        "lr_decay_factor" => train.lr_decay_factor = parse(key, value)?,
        "clip_eta" => train.clip_eta = parse(key, value)?,
        "alpha" => train.alpha = Some(parse(key, value)?),
        "scales" => train.scales = parse_scales(value)?,
        "epochs" => train.epochs = parse(key, value)?,
        "seed" => train.seed = parse(key, value)?,
        "augment_flips" => train.augment.flips = parse_bool(key, value)?,
        "augment_rotations" => train.augment.rotations = parse_bool(key, value)?,
        "augment_downscales" => train.augment.downscales = parse_bool(key, value)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Parses a `key = value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        apply_setting(key.trim(), value.trim(), model, train)
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
    }
    Ok(())
}

/// The resolved settings in the same `key=value` format.
pub fn render_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut s = String::new();
    let scales: Vec<String> = train.scales.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "stages={}", model.stages);
    let _ = writeln!(s, "modules={}", model.modules_per_stage);
    let _ = writeln!(s, "channels={}", model.channels);
    let _ = writeln!(s, "k1={}", model.k1);
    let _ = writeln!(s, "k2={}", model.k2);
    let _ = writeln!(s, "leaky_slope={}", model.leaky_slope);
    let _ = writeln!(s, "rfl={}", model.use_rfl);
    let _ = writeln!(s, "cascaded_supervision={}", model.use_cascaded_supervision);
    let _ = writeln!(s, "share_reconstruction={}", model.share_reconstruction);
    let _ = writeln!(s, "patch_size={}", train.patch_size);
    let _ = writeln!(s, "batch_size={}", train.batch_size);
    let _ = writeln!(s, "momentum={}", train.momentum);
    let _ = writeln!(s, "weight_decay={}", train.weight_decay);
    let _ = writeln!(s, "lr0={}", train.lr0);
    let _ = writeln!(s, "lr_decay_every={}", train.lr_decay_every);
    let _ = writeln!(s, "lr_decay_factor={}", train.lr_decay_factor);
    let _ = writeln!(s, "clip_eta={}", train.clip_eta);
    let _ = writeln!(s, "alpha={}", train.effective_alpha(model));
    let _ = writeln!(s, "scales={}", scales.join(","));
    let _ = writeln!(s, "epochs={}", train.epochs);
    let _ = writeln!(s, "seed={}", train.seed);
    let _ = writeln!(s, "augment_flips={}", train.augment.flips);
    let _ = writeln!(s, "augment_rotations={}", train.augment.rotations);
    let _ = writeln!(s, "augment_downscales={}", train.augment.downscales);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let mut m = ModelConfig::default();
        let mut t = TrainConfig::default();
        parse_config_text("# desk\nstages = 2\nscales=2,3\n\nrfl=false # off\n", &mut m, &mut t).unwrap();
        assert_eq!(m.stages, 2);
        assert_eq!(t.scales, vec![2, 3]);
        assert!(!m.use_rfl);
        let err = parse_config_text("bogus=1", &mut m, &mut t).unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
        assert!(parse_config_text("stages", &mut m, &mut t).is_err());
        assert!(parse_config_text("stages=x", &mut m, &mut t).is_err());
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut m = ModelConfig {
            stages: 2,
            k2: 7,
            ..ModelConfig::default()
        };
        let t = TrainConfig {
            alpha: Some(0.3),
            seed: 99,
            ..TrainConfig::default()
        };
        let text = render_config(&m, &t);
        let (mut m2, mut t2) = (ModelConfig::default(), TrainConfig::default());
        parse_config_text(&text, &mut m2, &mut t2).unwrap();
        assert_eq!(m2, m);
        assert_eq!(t2, t);
        m.use_cascaded_supervision = false;
        assert_eq!(t.effective_alpha(&m), 1.0);
    }

    #[test]
    fn validation() {
        let m = ModelConfig::default();
        assert!(TrainConfig::default().validate(&m).is_ok());
        let bad = TrainConfig { alpha: Some(1.5), ..TrainConfig::default() };
        assert!(bad.validate(&m).is_err());
        let bad = TrainConfig { patch_size: 3, ..TrainConfig::default() };
        assert!(bad.validate(&m).is_err());
        let bad = TrainConfig { clip_eta: 0.0, ..TrainConfig::default() };
        assert!(bad.validate(&m).is_err());
    }
}
