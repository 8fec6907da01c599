//! `key = value` run configuration shared by `train`, `decode` and
//! `bench-downsample`. Unknown keys are rejected.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hle_core::decoder::DecoderConfig;
use hle_core::embed::InstanceSupport;
use hle_core::lovasz::ClassAveraging;
use hle_core::trainer::{MeanInit, TrainConfig, Variant};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub decoder: DecoderConfig,
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

impl RunConfig {
    /// Reads an optional config file, then applies `key=value` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in parse_lines(&text).with_context(|| format!("in {}", path.display()))? {
                cfg.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.decoder;
        match key {
            "steps" => t.steps = num(key, v)?,
            "step_size" => t.step_size = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "adam_epsilon" => t.adam_epsilon = num(key, v)?,
            "decay_power" => t.decay_power = num(key, v)?,
            "init" => {
                t.mean_init = match v {
                    "thomson" => MeanInit::Thomson,
                    "random" => MeanInit::Random,
                    _ => bail!("init: expected thomson or random, got {v:?}"),
                }
            }
            "embedding_dim" => t.embedding_dim = num(key, v)?,
            "sigma_init" => t.sigma_init = num(key, v)?,
            "sigma_spatial_init" => t.sigma_spatial_init = num(key, v)?,
            "sigma_sem_init" => t.sigma_sem_init = num(key, v)?,
            "seed_init" => t.seed_init = num(key, v)?,
            "init_noise" => t.init_noise = num(key, v)?,
            "rng_seed" => t.rng_seed = num(key, v)?,
            "variant" => t.variant = Variant::parse(v)?,
            "gamma" => t.gamma = num(key, v)?,
            "class_averaging" => {
                t.class_averaging = match v {
                    "all" => ClassAveraging::All,
                    "present" => ClassAveraging::Present,
                    _ => bail!("class_averaging: expected all or present, got {v:?}"),
                }
            }
            "instance_support" => {
                t.instance_support = match v.split_once(':') {
                    None if v == "image" => InstanceSupport::Image,
                    Some(("box", m)) => InstanceSupport::BoxMargin(num(key, m)?),
                    _ => bail!("instance_support: expected image or box:<margin>, got {v:?}"),
                }
            }
            "ae_ins_pull" => t.ae.ins_pull = num(key, v)?,
            "ae_ins_push" => t.ae.ins_push = num(key, v)?,
            "ae_sem_pull" => t.ae.sem_pull = num(key, v)?,
            "ae_sem_push" => t.ae.sem_push = num(key, v)?,
            "divergence_factor" => t.divergence_factor = num(key, v)?,
            "seed_threshold" => d.seed_threshold = num(key, v)?,
            "merge_threshold" => d.merge_threshold = num(key, v)?,
            "mask_threshold" => d.mask_threshold = num(key, v)?,
            "stuff_threshold" => d.stuff_threshold = num(key, v)?,
            "min_stuff_area" => d.min_stuff_area = num(key, v)?,
            "downsample_factor" => d.downsample_factor = num(key, v)?,
            "things_only_seeds" => d.things_only_seeds = num(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = parse_lines("# header\n\nsteps = 10  # inline\n variant=split\n").unwrap();
        assert_eq!(kv, vec![("steps".into(), "10".into()), ("variant".into(), "split".into())]);
        assert!(parse_lines("steps 10").is_err());
        assert!(parse_lines(" = 3").is_err());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("stpes", "10").is_err());
        assert!(c.set("steps", "ten").is_err());
        c.set("steps", "10").unwrap();
        c.set("instance_support", "box:3").unwrap();
        c.set("things_only_seeds", "true").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.instance_support, InstanceSupport::BoxMargin(3));
        assert!(c.decoder.things_only_seeds);
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "steps = 5\nmask_threshold = 0.6\n").unwrap();
        let c = RunConfig::load(Some(&p), &["steps=7".into()]).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.decoder.mask_threshold, 0.6);
        assert!(RunConfig::load(None, &["nope=1".into()]).is_err());
    }
}
