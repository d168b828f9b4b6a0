//! Plain-text `key=value` configuration with dotted sections.
//!
//! ```text
//! # comments and blank lines are ignored
//! encoder.L=6
//! evolution.mu=4
//! loss.gamma=25
//! ```
//!
//! Keys under `run.` and `artifact.` are run metadata (see the CLI manifest)
//! and are skipped here, so a manifest can be fed back in as a config.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::trainer::TrainConfig;
use crate::Error;

/// Ordered key/value pairs; later entries win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Input(format!("line {}: empty key", n + 1)));
            }
            entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn extend(&mut self, other: KeyValues) {
        self.entries.extend(other.entries);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, Error> {
    v.parse().map_err(|_| Error::Input(format!("{key}: cannot parse '{v}'")))
}

fn is_metadata(key: &str) -> bool {
    key.starts_with("run.") || key.starts_with("artifact.")
}

/// Applies `kv` on top of `base`.
pub fn resolve(base: TrainConfig, kv: &KeyValues) -> Result<TrainConfig, Error> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in kv.iter() {
        if !is_metadata(k) {
            map.insert(k, v);
        }
    }
    let mut c = base;

    let e = &mut c.encoder;
    let mut encoder_changed = false;
    for (&k, &v) in map.iter().filter(|(k, _)| k.starts_with("encoder.")) {
        encoder_changed = true;
        match &k["encoder.".len()..] {
            "L" | "layers" => e.layers = parse(k, v)?,
            "M" | "patches" => e.patches = parse(k, v)?,
            "patch_dim" => e.patch_dim = parse(k, v)?,
            "N" | "text_len" => e.text_len = parse(k, v)?,
            "d_v" | "vision_width" => e.vision_width = parse(k, v)?,
            "d_t" | "text_width" => e.text_width = parse(k, v)?,
            "d" | "embed_dim" => e.embed_dim = parse(k, v)?,
            "heads" => e.heads = parse(k, v)?,
            "vocab" => e.vocab = parse(k, v)?,
            "mlp_ratio" => e.mlp_ratio = parse(k, v)?,
            "init_std" => e.init_std = parse(k, v)?,
            "seed" => e.seed = parse(k, v)?,
            "causal_text" => e.causal_text = parse(k, v)?,
            _ => return Err(Error::Input(format!("unknown config key '{k}'"))),
        }
    }
    if encoder_changed {
        // keep the prompt span and widths tied to the encoder
        c.mpp.last_layer = c.encoder.layers;
        c.mpp.first_layer = c.mpp.first_layer.min(c.encoder.layers);
        c.mpp.vision_width = c.encoder.vision_width;
        c.mpp.text_width = c.encoder.text_width;
    }

    for (&k, &v) in &map {
        let Some((section, field)) = k.split_once('.') else {
            match k {
                "seed" => c.seed = parse(k, v)?,
                "eps" => c.eps = parse(k, v)?,
                "gradcheck_each_epoch" => c.gradcheck_each_epoch = parse(k, v)?,
                _ => return Err(Error::Input(format!("unknown config key '{k}'"))),
            }
            continue;
        };
        let unknown = || Error::Input(format!("unknown config key '{k}'"));
        match section {
            "encoder" => {}
            "mpp" => match field {
                "J" | "first_layer" => c.mpp.first_layer = parse(k, v)?,
                "K" | "num_vectors" => c.mpp.num_vectors = parse(k, v)?,
                "l" | "prompt_len" => c.mpp.prompt_len = parse(k, v)?,
                "d_r" | "shared_dim" => c.mpp.shared_dim = parse(k, v)?,
                "sigma" => c.mpp.sigma = parse(k, v)?,
                "weight_std" => c.mpp.weight_std = parse(k, v)?,
                _ => return Err(unknown()),
            },
            "evolution" => match field {
                "epochs" | "N_e" => c.evolution.epochs = parse(k, v)?,
                "mu" => c.evolution.mu = parse(k, v)?,
                "nu" => c.evolution.nu = parse(k, v)?,
                "r_high" => c.evolution.r_high = parse(k, v)?,
                "r_mid" => c.evolution.r_mid = parse(k, v)?,
                "r_low" => c.evolution.r_low = parse(k, v)?,
                _ => return Err(unknown()),
            },
            "loss" => match field {
                "gamma" => c.loss.gamma = parse(k, v)?,
                "eta" => c.loss.eta = parse(k, v)?,
                "tau" => c.loss.tau = parse(k, v)?,
                _ => return Err(unknown()),
            },
            "optim" => match field {
                "lr" => c.optim.lr = parse(k, v)?,
                "steps_per_epoch" => c.optim.steps_per_epoch = parse(k, v)?,
                "batch_size" | "B" => c.optim.batch_size = parse(k, v)?,
                "momentum" => c.optim.momentum = parse(k, v)?,
                _ => return Err(unknown()),
            },
            "ablation" => {
                let flag = match field {
                    "no_mpp" => &mut c.ablation.no_mpp,
                    "no_shared" => &mut c.ablation.no_shared,
                    "full_rank" => &mut c.ablation.full_rank,
                    "no_evolution" => &mut c.ablation.no_evolution,
                    "no_kcl" => &mut c.ablation.no_kcl,
                    "no_fgr" => &mut c.ablation.no_fgr,
                    _ => return Err(unknown()),
                };
                *flag = parse(k, v)?;
            }
            "task" => match field {
                "classes" | "C" => c.task.classes = parse(k, v)?,
                "shots" => c.task.shots = parse(k, v)?,
                "test_per_class" => c.task.test_per_class = parse(k, v)?,
                "noise" | "sigma_x" => c.task.noise = parse(k, v)?,
                "seed" => c.task.seed = parse(k, v)?,
                "align_margin" => c.task.align_margin = parse(k, v)?,
                "align_steps" => c.task.align_steps = parse(k, v)?,
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Every field of `c` under its canonical key; `resolve` of the result on any
/// base reproduces `c` exactly.
pub fn to_key_values(c: &TrainConfig) -> KeyValues {
    let e = &c.encoder;
    let m = &c.mpp;
    let s = &c.evolution;
    let a = &c.ablation;
    let pairs: Vec<(&str, String)> = vec![
        ("encoder.L", e.layers.to_string()),
        ("encoder.M", e.patches.to_string()),
        ("encoder.patch_dim", e.patch_dim.to_string()),
        ("encoder.N", e.text_len.to_string()),
        ("encoder.d_v", e.vision_width.to_string()),
        ("encoder.d_t", e.text_width.to_string()),
        ("encoder.d", e.embed_dim.to_string()),
        ("encoder.heads", e.heads.to_string()),
        ("encoder.vocab", e.vocab.to_string()),
        ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
        ("encoder.init_std", e.init_std.to_string()),
        ("encoder.seed", e.seed.to_string()),
        ("encoder.causal_text", e.causal_text.to_string()),
        ("mpp.J", m.first_layer.to_string()),
        ("mpp.K", m.num_vectors.to_string()),
        ("mpp.l", m.prompt_len.to_string()),
        ("mpp.d_r", m.shared_dim.to_string()),
        ("mpp.sigma", m.sigma.to_string()),
        ("mpp.weight_std", m.weight_std.to_string()),
        ("evolution.epochs", s.epochs.to_string()),
        ("evolution.mu", s.mu.to_string()),
        ("evolution.nu", s.nu.to_string()),
        ("evolution.r_high", s.r_high.to_string()),
        ("evolution.r_mid", s.r_mid.to_string()),
        ("evolution.r_low", s.r_low.to_string()),
        ("loss.gamma", c.loss.gamma.to_string()),
        ("loss.eta", c.loss.eta.to_string()),
        ("loss.tau", c.loss.tau.to_string()),
        ("optim.lr", c.optim.lr.to_string()),
        ("optim.steps_per_epoch", c.optim.steps_per_epoch.to_string()),
        ("optim.batch_size", c.optim.batch_size.to_string()),
        ("optim.momentum", c.optim.momentum.to_string()),
        ("ablation.no_mpp", a.no_mpp.to_string()),
        ("ablation.no_shared", a.no_shared.to_string()),
        ("ablation.full_rank", a.full_rank.to_string()),
        ("ablation.no_evolution", a.no_evolution.to_string()),
        ("ablation.no_kcl", a.no_kcl.to_string()),
        ("ablation.no_fgr", a.no_fgr.to_string()),
        ("task.classes", c.task.classes.to_string()),
        ("task.shots", c.task.shots.to_string()),
        ("task.test_per_class", c.task.test_per_class.to_string()),
        ("task.noise", c.task.noise.to_string()),
        ("task.seed", c.task.seed.to_string()),
        ("task.align_margin", c.task.align_margin.to_string()),
        ("task.align_steps", c.task.align_steps.to_string()),
        ("seed", c.seed.to_string()),
        ("eps", c.eps.to_string()),
        ("gradcheck_each_epoch", c.gradcheck_each_epoch.to_string()),
    ];
    let mut kv = KeyValues::default();
    for (k, v) in pairs {
        kv.push(k, v);
    }
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_apply() {
        let kv = KeyValues::parse("# demo\nencoder.L=4\n\nevolution.mu = 3\nloss.gamma=10\nloss.eta=0.25\nseed=7\n")
            .unwrap();
        let c = resolve(TrainConfig::default(), &kv).unwrap();
        assert_eq!(c.encoder.layers, 4);
        assert_eq!(c.mpp.last_layer, 4);
        assert_eq!(c.evolution.mu, 3);
        assert_eq!((c.loss.gamma, c.loss.eta), (10.0, 0.25));
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn later_entries_override() {
        let mut kv = KeyValues::parse("loss.gamma=10").unwrap();
        kv.extend(KeyValues::parse("loss.gamma=3").unwrap());
        assert_eq!(resolve(TrainConfig::default(), &kv).unwrap().loss.gamma, 3.0);
    }

    #[test]
    fn bad_input_rejected() {
        for text in ["loss.gama=1", "encoder.L=six", "novalue", "=3", "bogus.x=1", "evolution.mu=99"] {
            let r = KeyValues::parse(text).and_then(|kv| resolve(TrainConfig::default(), &kv));
            assert!(r.is_err(), "{text}");
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut c = TrainConfig::tiny();
        c.optim.lr = 0.1 + 0.2;
        c.loss.tau = 1.0 / 3.0;
        c.ablation.no_kcl = true;
        let text: String = to_key_values(&c).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let back = resolve(TrainConfig::default(), &KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn metadata_keys_ignored() {
        let kv = KeyValues::parse("run.command=train\nartifact.report.json=abc\nseed=3").unwrap();
        assert_eq!(resolve(TrainConfig::default(), &kv).unwrap().seed, 3);
    }
}
