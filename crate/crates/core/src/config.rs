//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. `alpha`, `beta` and `tau`
//! accept comma lists, which turns `train` into a grid over their product.
//! Relative paths in a config file resolve against the file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MargoError, Result};
use crate::losses::LossConfig;
use crate::train::{Hyperparams, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub embed_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub k_list: Vec<usize>,
    pub variant: Variant,
    pub seed: u64,
    pub normalize_joint_weights: bool,
    pub probe_conflicts: bool,
    pub interactions: Option<PathBuf>,
    pub features: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        RunConfig {
            alpha: vec![hp.loss.alpha],
            beta: vec![hp.loss.beta],
            tau: vec![hp.loss.tau],
            embed_dim: hp.embed_dim,
            lr: hp.lr,
            batch_size: hp.batch_size,
            max_epochs: hp.max_epochs,
            patience: hp.patience,
            eval_every: hp.eval_every,
            k_list: vec![10, 20],
            variant: Variant::Full,
            seed: hp.seed,
            normalize_joint_weights: false,
            probe_conflicts: hp.probe_conflicts,
            interactions: None,
            features: Vec::new(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "alpha",
    "beta",
    "tau",
    "embed_dim",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "eval_every",
    "k_list",
    "variant",
    "seed",
    "normalize_joint_weights",
    "probe_conflicts",
    "interactions",
    "features",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| MargoError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|v| parse_num(key, v))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(MargoError::Config(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(MargoError::Config(format!("bad boolean `{other}` for `{key}`"))),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting. Relative paths join onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p.trim());
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        match key.trim() {
            "alpha" => self.alpha = parse_list(key, value)?,
            "beta" => self.beta = parse_list(key, value)?,
            "tau" => self.tau = parse_list(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "k_list" => self.k_list = parse_list(key, value)?,
            "variant" => {
                self.variant = value
                    .trim()
                    .parse()
                    .map_err(|_| MargoError::Config(format!("unknown variant `{}`", value.trim())))?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "normalize_joint_weights" => self.normalize_joint_weights = parse_bool(key, value)?,
            "probe_conflicts" => self.probe_conflicts = parse_bool(key, value)?,
            "interactions" => self.interactions = Some(resolve(value)),
            "features" => {
                self.features = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(resolve)
                    .collect()
            }
            other => return Err(MargoError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MargoError::Config(format!("line {}: expected `key=value`", lineno + 1))
            })?;
            self.set(key, value, base)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, setting: &str) -> Result<()> {
        let (key, value) = setting
            .split_once('=')
            .ok_or_else(|| MargoError::Config(format!("override `{setting}` is not key=value")))?;
        self.set(key, value, None)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MargoError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path.parent())?;
        Ok(cfg)
    }

    /// Every key, one `key=value` per line. Parsing this back yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "alpha={}", join(&self.alpha));
        let _ = writeln!(out, "beta={}", join(&self.beta));
        let _ = writeln!(out, "tau={}", join(&self.tau));
        let _ = writeln!(out, "embed_dim={}", self.embed_dim);
        let _ = writeln!(out, "lr={}", self.lr);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "max_epochs={}", self.max_epochs);
        let _ = writeln!(out, "patience={}", self.patience);
        let _ = writeln!(out, "eval_every={}", self.eval_every);
        let _ = writeln!(out, "k_list={}", join(&self.k_list));
        let _ = writeln!(out, "variant={}", self.variant);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "normalize_joint_weights={}", self.normalize_joint_weights);
        let _ = writeln!(out, "probe_conflicts={}", self.probe_conflicts);
        if let Some(p) = &self.interactions {
            let _ = writeln!(out, "interactions={}", p.display());
        }
        if !self.features.is_empty() {
            let paths: Vec<String> = self.features.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(out, "features={}", paths.join(","));
        }
        out
    }

    /// Hyperparameters for every (alpha, beta, tau) combination, in
    /// alpha-major order.
    pub fn grid(&self) -> Vec<Hyperparams> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &tau in &self.tau {
                    out.push(Hyperparams {
                        embed_dim: self.embed_dim,
                        lr: self.lr,
                        batch_size: self.batch_size,
                        max_epochs: self.max_epochs,
                        patience: self.patience,
                        eval_every: self.eval_every,
                        selection_k: 20,
                        loss: LossConfig {
                            alpha,
                            beta,
                            tau,
                            normalize_joint_weights: self.normalize_joint_weights,
                        },
                        seed: self.seed,
                        probe_conflicts: self.probe_conflicts,
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_values() {
        let c = RunConfig::default();
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.batch_size, 2048);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.max_epochs, 100);
        assert_eq!(c.k_list, vec![10, 20]);
    }

    #[test]
    fn parses_and_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# run\nalpha = 0.01,0.1,1\ntau=5\nvariant=no_cal\nfeatures=a.tsv,b.tsv\ninteractions=/abs/i.tsv\n",
            Some(Path::new("/cfg")),
        )
        .unwrap();
        assert_eq!(c.alpha, vec![0.01, 0.1, 1.0]);
        assert_eq!(c.variant, Variant::NoCal);
        assert_eq!(c.features[0], PathBuf::from("/cfg/a.tsv"));
        assert_eq!(c.interactions, Some(PathBuf::from("/abs/i.tsv")));
        assert_eq!(c.grid().len(), 3);

        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win_and_errors_surface() {
        let mut c = RunConfig::default();
        c.apply_text("seed=3\n", None).unwrap();
        c.apply_override("seed=7").unwrap();
        assert_eq!(c.seed, 7);
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("seed").is_err());
        assert!(c.apply_override("lr=fast").is_err());
        assert!(c.apply_override("variant=w/o").is_err());
        assert!(c.apply_text("just words\n", None).is_err());
    }
}
