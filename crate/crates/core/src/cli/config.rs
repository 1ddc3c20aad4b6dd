//! `key = value` run configuration with `[backbone]`, `[train]`, `[tracker]`
//! and `[eval]` sections. Keys carry the names of the module config fields
//! they set; anything unset keeps the module default.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::evalkit::{Protocol, VotLiteParams};
use crate::network::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub vot: VotLiteParams,
    /// Parallel sequences; 0 means one per logical core.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Ptb,
            vot: VotLiteParams::default(),
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: {key} = {v:?} does not parse")))
}

fn optional<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        value(line, key, v).map(Some)
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut entries: Vec<(usize, String, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["backbone", "train", "tracker", "eval"].contains(&name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value, got {line:?}")))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {line_no}: {:?} outside any section", k.trim())));
            }
            entries.push((line_no, section.clone(), k.trim().to_string(), v.trim().to_string()));
        }
        // a preset replaces the whole layer table, so it goes first
        if let Some((n, _, _, v)) = entries.iter().find(|e| e.1 == "backbone" && e.2 == "preset") {
            cfg.model = ModelConfig::new(BackboneConfig::preset(v).map_err(|e| Error::Config(format!("line {n}: {e}")))?);
        }
        for (n, sec, k, v) in &entries {
            cfg.set(*n, sec, k, v)?;
        }
        cfg.train.preset = cfg.model.backbone.preset.clone();
        cfg.train.sampler.exemplar_size = cfg.model.backbone.exemplar_size;
        cfg.train.sampler.search_size = cfg.model.backbone.search_size;
        cfg.train.sampler.stride = cfg.model.backbone.total_stride();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, n: usize, section: &str, k: &str, v: &str) -> Result<()> {
        let (m, t, tr, e) = (&mut self.model, &mut self.train, &mut self.tracker, &mut self.eval);
        match (section, k) {
            ("backbone", "preset") => {}
            ("backbone", "exemplar_size") => m.backbone.exemplar_size = value(n, k, v)?,
            ("backbone", "search_size") => m.backbone.search_size = value(n, k, v)?,
            ("backbone", "num_classes") => m.num_classes = value(n, k, v)?,
            ("backbone", "cf_lambda") => m.cf.lambda = value(n, k, v)?,
            ("backbone", "cf_sigma") => m.cf.sigma_frac = value(n, k, v)?,
            ("backbone", "cf_window") => m.cf.window = value(n, k, v)?,
            ("backbone", "label_radius") => m.label_radius = value(n, k, v)?,
            ("backbone", "pos_weight_share") => m.pos_weight_share = value(n, k, v)?,

            ("train", "strategy") => t.strategy = value(n, k, v)?,
            ("train", "epochs") => t.epochs = optional(n, k, v)?,
            ("train", "pairs_per_epoch") => t.pairs_per_epoch = value(n, k, v)?,
            ("train", "batch") => t.batch = value(n, k, v)?,
            ("train", "momentum") => t.momentum = value(n, k, v)?,
            ("train", "lr_hi") => t.lr_hi = optional(n, k, v)?,
            ("train", "lr_lo") => t.lr_lo = optional(n, k, v)?,
            ("train", "lambda1") => t.weights.dis = value(n, k, v)?,
            ("train", "lambda2") => t.weights.cls = value(n, k, v)?,
            ("train", "lambda3") => t.weights.fin = value(n, k, v)?,
            ("train", "weight_decay") => t.weight_decay = value(n, k, v)?,
            ("train", "grad_clip") => t.grad_clip = optional(n, k, v)?,
            ("train", "seed") => t.seed = value(n, k, v)?,
            ("train", "context") => t.sampler.context = value(n, k, v)?,
            ("train", "max_jitter") => t.sampler.max_jitter = value(n, k, v)?,
            ("train", "max_gap") => t.sampler.max_gap = value(n, k, v)?,

            ("tracker", "scales") => tr.scales = value(n, k, v)?,
            ("tracker", "scale_step") => tr.scale_step = value(n, k, v)?,
            ("tracker", "scale_penalty") => tr.scale_penalty = value(n, k, v)?,
            ("tracker", "scale_damping") => tr.scale_damping = value(n, k, v)?,
            ("tracker", "window_weight") => tr.window_weight = value(n, k, v)?,
            ("tracker", "response_upsample") => tr.response_upsample = value(n, k, v)?,
            ("tracker", "template_mode") => tr.template_mode = value(n, k, v)?,
            ("tracker", "ema_rate") => tr.ema_rate = value(n, k, v)?,
            ("tracker", "branch_mix") => tr.branch_mix = value(n, k, v)?,

            ("eval", "protocol") => e.protocol = value(n, k, v)?,
            ("eval", "reinit_skip") => e.vot.reinit_skip = value(n, k, v)?,
            ("eval", "burnin") => e.vot.burnin = value(n, k, v)?,
            ("eval", "workers") => e.workers = value(n, k, v)?,
            _ => return Err(Error::Config(format!("line {n}: unknown key {k:?} in [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()
    }

    /// The full configuration in the same format; parsing it back gives an
    /// equal config.
    pub fn echo(&self) -> String {
        let (m, t, tr, e) = (&self.model, &self.train, &self.tracker, &self.eval);
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        let sections: [(&str, Vec<(&str, String)>); 4] = [
            (
                "backbone",
                vec![
                    ("preset", m.backbone.preset.clone()),
                    ("exemplar_size", m.backbone.exemplar_size.to_string()),
                    ("search_size", m.backbone.search_size.to_string()),
                    ("num_classes", m.num_classes.to_string()),
                    ("cf_lambda", m.cf.lambda.to_string()),
                    ("cf_sigma", m.cf.sigma_frac.to_string()),
                    ("cf_window", m.cf.window.to_string()),
                    ("label_radius", m.label_radius.to_string()),
                    ("pos_weight_share", m.pos_weight_share.to_string()),
                ],
            ),
            (
                "train",
                vec![
                    ("strategy", t.strategy.to_string()),
                    ("epochs", t.epochs.map_or_else(|| "none".to_string(), |x| x.to_string())),
                    ("pairs_per_epoch", t.pairs_per_epoch.to_string()),
                    ("batch", t.batch.to_string()),
                    ("momentum", t.momentum.to_string()),
                    ("lr_hi", opt(t.lr_hi)),
                    ("lr_lo", opt(t.lr_lo)),
                    ("lambda1", t.weights.dis.to_string()),
                    ("lambda2", t.weights.cls.to_string()),
                    ("lambda3", t.weights.fin.to_string()),
                    ("weight_decay", t.weight_decay.to_string()),
                    ("grad_clip", opt(t.grad_clip)),
                    ("seed", t.seed.to_string()),
                    ("context", t.sampler.context.to_string()),
                    ("max_jitter", t.sampler.max_jitter.to_string()),
                    ("max_gap", t.sampler.max_gap.to_string()),
                ],
            ),
            (
                "tracker",
                vec![
                    ("scales", tr.scales.to_string()),
                    ("scale_step", tr.scale_step.to_string()),
                    ("scale_penalty", tr.scale_penalty.to_string()),
                    ("scale_damping", tr.scale_damping.to_string()),
                    ("window_weight", tr.window_weight.to_string()),
                    ("response_upsample", tr.response_upsample.to_string()),
                    ("template_mode", tr.template_mode.to_string()),
                    ("ema_rate", tr.ema_rate.to_string()),
                    ("branch_mix", tr.branch_mix.to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("protocol", e.protocol.to_string()),
                    ("reinit_skip", e.vot.reinit_skip.to_string()),
                    ("burnin", e.vot.burnin.to_string()),
                    ("workers", e.workers.to_string()),
                ],
            ),
        ];
        let mut s = String::new();
        for (name, keys) in sections {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in keys {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::TemplateMode;
    use crate::trainer::Strategy;

    #[test]
    fn empty_text_is_all_defaults() {
        let c = CliConfig::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.tracker, TrackerConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.eval, EvalConfig::default());
    }

    #[test]
    fn sections_set_fields() {
        let text = "\
# a comment
[backbone]
cf_lambda = 0.5
[train]
strategy = finetune   # trailing comment
epochs = 2
grad_clip = none
[tracker]
template_mode = ema
branch_mix = 1
[eval]
protocol = vot-lite
burnin = 3
";
        let c = CliConfig::parse(text).unwrap();
        assert_eq!(c.model.cf.lambda, 0.5);
        assert_eq!(c.train.strategy, Strategy::Finetune);
        assert_eq!(c.train.epochs, Some(2));
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.tracker.template_mode, TemplateMode::Ema);
        assert_eq!(c.tracker.branch_mix, 1.0);
        assert_eq!(c.eval.protocol, Protocol::VotLite);
        assert_eq!(c.eval.vot.burnin, 3);
    }

    #[test]
    fn echo_parses_back() {
        let c = CliConfig::parse("[train]\nseed = 9\nlr_hi = 0.02\n[tracker]\nscales = 5\n").unwrap();
        let again = CliConfig::parse(&c.echo()).unwrap();
        assert_eq!(again, c);
        let full = CliConfig::parse("[backbone]\npreset = full\n").unwrap();
        assert_eq!(CliConfig::parse(&full.echo()).unwrap(), full);
    }

    #[test]
    fn rejects_with_line_numbers() {
        for (text, needle) in [
            ("[train]\nbatchsize = 4\n", "line 2"),
            ("[tracker]\n\nscales = two\n", "line 3"),
            ("[misc]\n", "line 1"),
            ("seed = 1\n", "line 1"),
            ("[train]\nseed 1\n", "line 2"),
            ("[tracker]\nscales = 2\n", "odd"),
        ] {
            match CliConfig::parse(text) {
                Err(Error::Config(m)) => assert!(m.contains(needle), "{m:?} lacks {needle:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }
}
